//! Registers an operator the built-in table does not know and prunes
//! through it.
//!
//! The model declares the output shape of the custom node, which is how
//! shape inference and the rewrite learn its layout.

use treeprune::attrs::{AttributeRegistry, Role};
use treeprune::model::{synthesize_model, DimSpec, ElemType, FixtureSpec, ValueInfo};
use treeprune::rewrite::apply_plan;
use treeprune::scoring::{Criterion, Mode, NormKind};
use treeprune::tree::TreePolicy;
use treeprune::PruneContext;

fn main() -> treeprune::Result<()> {
    let mut model = synthesize_model(&FixtureSpec::new("conv_chain").depth(2))?;
    let act = &mut model.graph.nodes[1];
    act.op_type = "ScaledSwish".into();
    act.domain = "org.example".into();
    let out = act.outputs[0].clone();
    model.graph.value_infos.push(ValueInfo::tensor(
        &out,
        ElemType::FLOAT,
        vec![DimSpec::Param("N".into()), DimSpec::Value(64), DimSpec::Value(16), DimSpec::Value(16)],
    ));

    // Unknown to the built-in table: the tree cannot be built.
    let plain = PruneContext::new(model.clone(), AttributeRegistry::builtin(), TreePolicy::default())?;
    for d in plain.diagnostics() {
        println!("builtin registry: {d}");
    }

    // Same format as the --extensions file of the command-line tool.
    let registry = AttributeRegistry::builtin().with_extensions_text("# custom activations\nScaledSwish=next_no_process\n")?;
    println!("ScaledSwish is {}", registry.classify("ScaledSwish", Role::Descendant)?);
    let ctx = PruneContext::new(model, registry, TreePolicy::default())?;
    let (plan, _) = ctx.plan(0.5, &Criterion::new(NormKind::L1, Mode::Tree))?;
    let pruned = apply_plan(&ctx, &plan)?;
    for a in &pruned.actions {
        println!("{} axis {}: keep {} ({:?})", a.target, a.axis, a.keep_indices.len(), a.reason);
    }
    Ok(())
}
