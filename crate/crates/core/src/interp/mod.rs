//! Reference interpreter for the supported operator set.
//!
//! Storage is `f32`; every reduction (convolution, matrix products,
//! normalization, pooling sums) accumulates in `f64`. Convolution is
//! evaluated directly.

mod ops;
mod tensor;
mod validate;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use tensor::TensorValue;
pub use validate::{mask_model, validate_equivalence, TrialResult, ValidationOptions, ValidationReport, ValidationStatus};

use crate::error::{Error, Result};
use crate::graph::{build_graph, concrete_input_shapes};
use crate::model::ModelArchive;

/// Every tensor produced during one evaluation, keyed by name.
#[derive(Debug, Clone, Default)]
pub struct ExecEnv {
    values: BTreeMap<String, TensorValue>,
}

impl ExecEnv {
    pub fn get(&self, name: &str) -> Option<&TensorValue> {
        self.values.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorValue)> {
        self.values.iter()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, TensorValue> {
        self.values
    }
}

/// Evaluates `model` and returns its graph outputs.
pub fn run(model: &ModelArchive, inputs: &BTreeMap<String, TensorValue>) -> Result<BTreeMap<String, TensorValue>> {
    let mut env = run_env(model, inputs)?;
    model
        .graph
        .outputs
        .iter()
        .map(|o| {
            env.values
                .remove(&o.name)
                .map(|v| (o.name.clone(), v))
                .ok_or_else(|| Error::InvalidArgument(format!("graph output `{}` was never produced", o.name)))
        })
        .collect()
}

/// Evaluates `model` in topological order, keeping every intermediate.
pub fn run_env(model: &ModelArchive, inputs: &BTreeMap<String, TensorValue>) -> Result<ExecEnv> {
    let graph = build_graph(model)?;
    let opset = model.default_opset().unwrap_or(13);
    let mut env = ExecEnv::default();
    for t in &model.graph.initializers {
        env.values.insert(t.name.clone(), TensorValue::from_initializer(t)?);
    }
    for vi in &model.graph.inputs {
        if env.values.contains_key(&vi.name) && !inputs.contains_key(&vi.name) {
            continue;
        }
        let v = inputs
            .get(&vi.name)
            .ok_or_else(|| Error::InvalidArgument(format!("no value supplied for graph input `{}`", vi.name)))?;
        if v.numel() != v.dims.iter().product::<usize>() {
            return Err(Error::InvalidArgument(format!("input `{}` has inconsistent dims", vi.name)));
        }
        env.values.insert(vi.name.clone(), v.clone());
    }

    for &i in graph.topo_order() {
        let node = graph.node(i);
        let label = graph.label(i);
        let mut ins = Vec::with_capacity(node.inputs.len());
        for name in &node.inputs {
            if name.is_empty() {
                ins.push(None);
                continue;
            }
            match env.values.get(name) {
                Some(v) => ins.push(Some(v)),
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "`{label}` reads `{name}` before it is defined"
                    )))
                }
            }
        }
        let outs = ops::Op {
            model,
            node,
            label: &label,
            ins,
            opset,
        }
        .eval()?;
        for (name, v) in node.outputs.iter().zip(outs) {
            if !name.is_empty() {
                env.values.insert(name.clone(), v);
            }
        }
    }
    Ok(env)
}

/// Standard-normal values for every graph input that is not also an
/// initializer, with symbolic dimensions bound to `batch`.
pub fn random_inputs(model: &ModelArchive, batch: usize, seed: u64) -> Result<BTreeMap<String, TensorValue>> {
    let shapes = concrete_input_shapes(model, batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for vi in &model.graph.inputs {
        if model.initializer(&vi.name).is_some() {
            continue;
        }
        let dims = shapes
            .get(&vi.name)
            .and_then(|s| s.concrete())
            .ok_or_else(|| Error::InvalidArgument(format!("input `{}` has no concrete shape", vi.name)))?;
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        out.insert(vi.name.clone(), TensorValue { dims, data });
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
