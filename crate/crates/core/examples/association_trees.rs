//! Builds the association trees and pruning groups of a model.
//!
//! cargo run --example association_trees -- [model.onnx]
//! Without an argument the fire module fixture is used.

use treeprune::attrs::AttributeRegistry;
use treeprune::model::{load_model, synthesize_model, FixtureSpec};
use treeprune::tree::{forest_to_dot, tree_to_json, TreePolicy};
use treeprune::PruneContext;

fn main() -> treeprune::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => load_model(path)?,
        None => synthesize_model(&FixtureSpec::new("fire_module"))?,
    };
    let ctx = PruneContext::new(model, AttributeRegistry::builtin(), TreePolicy::default())?;
    let g = &ctx.graph;

    for tree in ctx.forest.trees.values() {
        println!("tree rooted at {} ({} channels)", g.label(tree.root()), tree.channels());
        for n in tree.nodes() {
            let depth = std::iter::successors(n.parent, |&p| tree.nodes()[p].parent).count();
            println!("  {}{} [{}]", "  ".repeat(depth), g.label(n.node), n.attribute);
        }
    }
    for i in &ctx.forest.excluded {
        println!("excluded (reaches an output): {}", g.label(*i));
    }
    for grp in &ctx.groups {
        let members: Vec<String> = grp.members.iter().map(|&m| g.label(m)).collect();
        println!("group {}: {} ({} channels)", grp.id, members.join(", "), grp.channels);
    }

    if let Some(first) = ctx.forest.trees.values().next() {
        println!("\n{}", serde_json::to_string_pretty(&tree_to_json(g, first)).unwrap());
    }
    println!("\n{}", forest_to_dot(g, ctx.forest.trees.values()));
    Ok(())
}
