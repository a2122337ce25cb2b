use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::Serialize;

use super::{random_inputs, run, TensorValue};
use crate::context::PruneContext;
use crate::error::{Error, Result};
use crate::model::{InitializerTensor, ModelArchive};
use crate::rewrite::{collect_removals, constant_mut, Removals};
use crate::scoring::{PruningPlan, SliceRole};

/// Zeroes everything a plan would remove, keeping every shape.
///
/// For each pruned channel the producer filters and biases, the
/// BatchNormalization scale and bias, and the leaf input slices become 0.
/// Running statistics and other per-channel side parameters are left
/// alone; the zeroed leaf slices already hide whatever they produce.
pub fn mask_model(ctx: &PruneContext, plan: &PruningPlan) -> Result<ModelArchive> {
    let layouts = ctx.layouts_for(plan)?;
    let removals = collect_removals(&layouts, plan, &ctx.graph)?;
    masked(ctx, &removals)
}

fn masked(ctx: &PruneContext, removals: &Removals) -> Result<ModelArchive> {
    let mut model = ctx.model.clone();
    for ((tensor, axis), (removed, _, role, node)) in &removals.slices {
        if removed.is_empty() {
            continue;
        }
        if *role == SliceRole::Side {
            let n = ctx.graph.node(*node);
            let bn_affine = n.op_type == "BatchNormalization"
                && (n.input(1) == Some(tensor.as_str()) || n.input(2) == Some(tensor.as_str()));
            if !bn_affine {
                continue;
            }
        }
        let t = constant_mut(&mut model, tensor)
            .ok_or_else(|| Error::MaskConflict(format!("initializer `{tensor}` disappeared")))?;
        zero_positions(t, *axis, removed)?;
    }
    Ok(model)
}

fn zero_positions(t: &mut InitializerTensor, axis: usize, positions: &BTreeSet<usize>) -> Result<()> {
    let extent = *t
        .dims
        .get(axis)
        .ok_or_else(|| Error::Axis(format!("`{}` has no axis {axis}", t.name)))?;
    if let Some(bad) = positions.iter().find(|&&p| p >= extent) {
        return Err(Error::Index(format!("position {bad} out of bounds for `{}` axis {axis}", t.name)));
    }
    let inner: usize = t.dims[axis + 1..].iter().product();
    let data = t.as_f32_mut()?;
    for chunk in data.chunks_mut((extent * inner).max(1)) {
        for &p in positions {
            chunk[p * inner..(p + 1) * inner].fill(0.0);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationOptions {
    pub trials: usize,
    pub tolerance: f64,
    pub seed: u64,
    /// Value bound to symbolic batch dimensions.
    pub batch: usize,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions {
            trials: 8,
            tolerance: 1e-5,
            seed: 0,
            batch: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ValidationStatus {
    Pass,
    /// Deviation above tolerance on a path that mixes values across the
    /// pruned axis, where masking and removal legitimately disagree.
    Warn,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    /// `None` (JSON `null`) when an output shape disagreed.
    pub max_deviation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub status: ValidationStatus,
    pub tolerance: f64,
    pub seed: u64,
    pub max_deviation: Option<f64>,
    pub trials: Vec<TrialResult>,
    pub outputs: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.status != ValidationStatus::Fail
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Kept positions of `value`, given the removed positions per axis.
fn kept(value: &TensorValue, removed: Option<&std::collections::BTreeMap<usize, BTreeSet<usize>>>) -> Result<TensorValue> {
    let mut v = value.clone();
    for (&axis, gone) in removed.into_iter().flatten() {
        if gone.is_empty() {
            continue;
        }
        let extent = *v
            .dims
            .get(axis)
            .ok_or_else(|| Error::Axis(format!("output of rank {} has no axis {axis}", v.rank())))?;
        let keep: Vec<usize> = (0..extent).filter(|i| !gone.contains(i)).collect();
        v = v.select(axis, &keep)?;
    }
    Ok(v)
}

/// Compares the masked original against the pruned model on seeded random
/// inputs, over the kept positions of every graph output.
pub fn validate_equivalence(
    ctx: &PruneContext,
    plan: &PruningPlan,
    pruned: &ModelArchive,
    opts: &ValidationOptions,
) -> Result<ValidationReport> {
    if opts.trials == 0 {
        return Err(Error::InvalidArgument("at least one trial is required".into()));
    }
    let layouts = ctx.layouts_for(plan)?;
    let removals = collect_removals(&layouts, plan, &ctx.graph)?;
    let masked_model = masked(ctx, &removals)?;
    let mixing: Vec<String> = layouts
        .iter()
        .zip(&plan.groups)
        .filter(|(_, g)| g.keep.iter().any(|k| !k))
        .flat_map(|(l, _)| l.mixing.iter().cloned())
        .collect();
    let outputs: Vec<String> = ctx.model.graph.outputs.iter().map(|o| o.name.clone()).collect();

    let results: Vec<(TrialResult, Vec<String>)> = (0..opts.trials)
        .into_par_iter()
        .map(|trial| {
            let seed = opts.seed.wrapping_add(trial as u64);
            let inputs = random_inputs(&ctx.model, opts.batch, seed)?;
            let a = run(&masked_model, &inputs)?;
            let b = run(pruned, &inputs)?;
            let mut worst = Some(0.0f64);
            let mut notes = Vec::new();
            for name in &outputs {
                let reference = kept(&a[name], removals.tensors.get(name))?;
                let Some(candidate) = b.get(name) else {
                    notes.push(format!("pruned model has no output `{name}`"));
                    worst = None;
                    continue;
                };
                match reference.max_abs_diff(candidate) {
                    Some(d) => worst = worst.map(|w| w.max(d)),
                    None => {
                        notes.push(format!(
                            "output `{name}` has shape {:?}, expected {:?}",
                            candidate.dims, reference.dims
                        ));
                        worst = None;
                    }
                }
            }
            Ok((
                TrialResult {
                    trial,
                    seed,
                    max_deviation: worst,
                },
                notes,
            ))
        })
        .collect::<Result<_>>()?;

    let mut warnings: Vec<String> = Vec::new();
    let mut max_deviation = Some(0.0f64);
    let mut trials = Vec::with_capacity(results.len());
    for (t, notes) in results {
        max_deviation = max_deviation.zip(t.max_deviation).map(|(a, b)| a.max(b));
        for n in notes {
            if !warnings.contains(&n) {
                warnings.push(n);
            }
        }
        trials.push(t);
    }
    let within = max_deviation.is_some_and(|d| d <= opts.tolerance);
    let status = if within {
        ValidationStatus::Pass
    } else if !mixing.is_empty() && max_deviation.is_some() {
        warnings.push(format!(
            "deviation above tolerance is expected: {} combine values across pruned channels",
            mixing.join(", ")
        ));
        ValidationStatus::Warn
    } else {
        ValidationStatus::Fail
    };
    Ok(ValidationReport {
        status,
        tolerance: opts.tolerance,
        seed: opts.seed,
        max_deviation,
        trials,
        outputs,
        warnings,
    })
}
