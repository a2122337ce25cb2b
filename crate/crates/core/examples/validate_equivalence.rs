//! Checks that a pruned model computes the same kept outputs as the
//! original with the pruned channels zeroed, then shows that a corrupted
//! model is caught.

use treeprune::attrs::AttributeRegistry;
use treeprune::interp::{validate_equivalence, ValidationOptions};
use treeprune::model::{synthesize_model, FixtureSpec};
use treeprune::rewrite::apply_plan;
use treeprune::scoring::{Criterion, Mode, NormKind};
use treeprune::tree::TreePolicy;
use treeprune::PruneContext;

fn main() -> treeprune::Result<()> {
    let template = std::env::args().nth(1).unwrap_or_else(|| "residual_stage".into());
    let model = synthesize_model(&FixtureSpec::new(&template))?;
    let ctx = PruneContext::new(model, AttributeRegistry::builtin(), TreePolicy::default())?;
    let opts = ValidationOptions::default();

    for ratio in [0.1, 0.5, 0.9] {
        let (plan, _) = ctx.plan(ratio, &Criterion::new(NormKind::L2, Mode::Tree))?;
        let pruned = apply_plan(&ctx, &plan)?;
        let r = validate_equivalence(&ctx, &plan, &pruned.model, &opts)?;
        println!(
            "{template} ratio {ratio}: {:?}, max deviation {:.2e} over {} trials",
            r.status,
            r.max_deviation.unwrap_or(f64::NAN),
            r.trials.len()
        );
    }

    // Flip the sign of one kept producer weight: the check must fail.
    let (plan, _) = ctx.plan(0.5, &Criterion::new(NormKind::L2, Mode::Tree))?;
    let mut broken = apply_plan(&ctx, &plan)?.model;
    let first = broken.graph.initializers.iter_mut().find(|t| t.dims.len() == 4).unwrap();
    for x in first.as_f32_mut()?.iter_mut().take(9) {
        *x = -*x;
    }
    let r = validate_equivalence(&ctx, &plan, &broken, &opts)?;
    println!("corrupted model: {:?}, max deviation {:.2e}", r.status, r.max_deviation.unwrap_or(f64::NAN));
    Ok(())
}
