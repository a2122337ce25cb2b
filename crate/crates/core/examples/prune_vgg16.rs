//! Prunes the VGG16 fixture at several layerwise ratios and prints the
//! parameter and FLOP reduction.
//!
//! cargo run --release --example prune_vgg16 -- [out_dir]

use treeprune::attrs::AttributeRegistry;
use treeprune::model::{save_model, synthesize_model, FixtureSpec};
use treeprune::report::summarize;
use treeprune::rewrite::apply_plan;
use treeprune::scoring::{Criterion, Mode, NormKind};
use treeprune::tree::TreePolicy;
use treeprune::PruneContext;

fn main() -> treeprune::Result<()> {
    let out_dir = std::env::args().nth(1);
    let model = synthesize_model(&FixtureSpec::new("vgg16_cifar"))?;
    let ctx = PruneContext::new(model, AttributeRegistry::builtin(), TreePolicy::default())?;
    let criterion = Criterion::new(NormKind::L1, Mode::Tree);

    println!("{:>5} {:>12} {:>9} {:>14} {:>8}", "ratio", "params", "sparsity", "flops", "speedup");
    for ratio in [0.3, 0.5, 0.7, 0.9] {
        let (plan, _) = ctx.plan(ratio, &criterion)?;
        let pruned = apply_plan(&ctx, &plan)?;
        let r = summarize(&ctx.model, &pruned.model, &plan, None)?;
        println!(
            "{ratio:>5} {:>12} {:>8.2}% {:>14} {:>7.2}x",
            r.params_after,
            r.sparsity * 100.0,
            r.flops_after,
            r.speedup
        );
        if let Some(dir) = &out_dir {
            save_model(&pruned.model, format!("{dir}/vgg16_pr{}.onnx", (ratio * 100.0) as u32))?;
            plan.save(format!("{dir}/vgg16_pr{}.json", (ratio * 100.0) as u32).as_ref())?;
        }
    }

    let (plan, _) = ctx.plan(0.5, &criterion)?;
    let pruned = apply_plan(&ctx, &plan)?;
    print!("\n{}", summarize(&ctx.model, &pruned.model, &plan, None)?.to_text());
    Ok(())
}
