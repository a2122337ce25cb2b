//! Compares tree-level and producer-only channel scores on a group with two
//! producers summed by an `Add` and two consumers.

use treeprune::attrs::AttributeRegistry;
use treeprune::model::{synthesize_model, FixtureSpec};
use treeprune::scoring::{overlap_index, Criterion, Mode, NormKind};
use treeprune::tree::TreePolicy;
use treeprune::PruneContext;

fn main() -> treeprune::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let model = synthesize_model(&FixtureSpec::new("many_to_many").seed(seed))?;
    let ctx = PruneContext::new(model, AttributeRegistry::builtin(), TreePolicy::default())?;

    for norm in [NormKind::L1, NormKind::L2] {
        let (tree, _) = ctx.plan(0.5, &Criterion::new(norm, Mode::Tree))?;
        let (single, _) = ctx.plan(0.5, &Criterion::new(norm, Mode::Single))?;
        for (t, s) in tree.groups.iter().zip(&single.groups) {
            println!("{norm} group {} [{}]", t.id, t.members.join(", "));
            println!("  {:>3} {:>12} {:>12}", "ch", "tree", "single");
            for (i, (a, b)) in t.scores.iter().zip(&s.scores).enumerate() {
                let mark = |keep: bool| if keep { ' ' } else { 'x' };
                println!("  {i:>3} {a:>11.4}{} {b:>11.4}{}", mark(t.keep[i]), mark(s.keep[i]));
            }
            println!("  overlap {:.3}", overlap_index(&t.pruned(), &s.pruned())?);
        }
    }
    Ok(())
}
