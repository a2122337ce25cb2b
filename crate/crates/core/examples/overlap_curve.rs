//! Per-layer overlap between the channels removed by tree-level and by
//! producer-only scoring on the AlexNet fixture, across pruning ratios.

use treeprune::attrs::AttributeRegistry;
use treeprune::model::{synthesize_model, FixtureSpec};
use treeprune::scoring::{overlap_index, Criterion, Mode, NormKind};
use treeprune::tree::TreePolicy;
use treeprune::PruneContext;

fn main() -> treeprune::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let model = synthesize_model(&FixtureSpec::new("alexnet_cifar").seed(seed))?;
    let ctx = PruneContext::new(model, AttributeRegistry::builtin(), TreePolicy::default())?;
    let ratios = [0.1, 0.2, 0.3, 0.5, 0.7, 0.9];

    let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
    for (k, &ratio) in ratios.iter().enumerate() {
        let (tree, _) = ctx.plan(ratio, &Criterion::new(NormKind::L1, Mode::Tree))?;
        let (single, _) = ctx.plan(ratio, &Criterion::new(NormKind::L1, Mode::Single))?;
        for (i, (t, s)) in tree.groups.iter().zip(&single.groups).enumerate() {
            if k == 0 {
                rows.push((t.members.join("+"), Vec::new()));
            }
            rows[i].1.push(overlap_index(&t.pruned(), &s.pruned())?);
        }
    }

    print!("{:<8}", "layer");
    for r in ratios {
        print!(" {:>6}", format!("PR {r}"));
    }
    println!();
    for (layer, values) in rows {
        print!("{layer:<8}");
        for v in values {
            print!(" {v:>6.3}");
        }
        println!();
    }
    Ok(())
}
