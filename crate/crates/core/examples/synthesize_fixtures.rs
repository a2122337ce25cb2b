//! Writes every built-in fixture to a directory and prints its size.
//!
//! cargo run --example synthesize_fixtures -- [out_dir] [seed]

use treeprune::model::{save_model, synthesize_model, FixtureSpec, Template};
use treeprune::report::{batch_one_shapes, count_flops, count_params};

fn main() -> treeprune::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "fixtures".into());
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    std::fs::create_dir_all(&dir).map_err(|source| treeprune::Error::Io {
        path: dir.clone().into(),
        source,
    })?;

    println!("{:<20} {:>6} {:>12} {:>14}", "template", "nodes", "params", "flops");
    for t in Template::ALL {
        let model = synthesize_model(&FixtureSpec::from(t).seed(seed))?;
        let shapes = batch_one_shapes(&model)?;
        println!(
            "{:<20} {:>6} {:>12} {:>14}",
            t.name(),
            model.graph.nodes.len(),
            count_params(&model),
            count_flops(&model, &shapes)?
        );
        save_model(&model, format!("{dir}/{}.onnx", t.name()))?;
    }
    Ok(())
}
