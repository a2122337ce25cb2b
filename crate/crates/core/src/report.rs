//! Parameter and FLOP accounting, and the pruning report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{build_graph, concrete_input_shapes, infer_shapes, NodeGraph, ShapeEnv};
use crate::model::ModelArchive;
use crate::scoring::{overlap_index, PruningPlan};

/// FLOP conventions used by [`count_flops`].
pub const FLOP_CONVENTION: &str = "FLOPs = 2 x multiply-accumulates at batch 1; \
Conv 2*Cout*(Cin/group)*kH*kW*Hout*Wout, Gemm/MatMul 2*M*K*N, \
BatchNorm and elementwise ops 2 per output element, pooling kernel size per output element, \
Softmax 3 per element, reductions 1 per input element, shape ops 0";

/// Number of initializer elements read by at least one node.
pub fn count_params(model: &ModelArchive) -> u64 {
    let used: std::collections::BTreeSet<&str> = model
        .graph
        .nodes
        .iter()
        .flat_map(|n| n.inputs.iter().map(String::as_str))
        .collect();
    model
        .graph
        .initializers
        .iter()
        .filter(|t| used.contains(t.name.as_str()))
        .map(|t| t.numel() as u64)
        .sum()
}

const ZERO_COST: &[&str] = &[
    "Flatten", "Reshape", "Squeeze", "Unsqueeze", "Transpose", "Concat", "Slice", "Gather", "Pad", "Shape",
    "Constant", "Identity", "Dropout", "Cast", "Resize", "Upsample", "Split", "Expand", "Tile",
];

const ELEMENTWISE: &[&str] = &[
    "Add", "Sub", "Mul", "Div", "Pow", "Max", "Min", "Sum", "Mean", "Relu", "Sigmoid", "Tanh", "Erf", "Sqrt",
    "Clip", "LeakyRelu", "HardSigmoid", "HardSwish", "Abs", "Neg", "Exp", "Log", "Elu", "Selu", "Mish",
    "Softplus", "Reciprocal", "Floor", "Ceil", "Sign", "Gelu", "BatchNormalization", "PRelu",
];

fn numel(shapes: &ShapeEnv, tensor: &str, node: &str, op: &str) -> Result<u64> {
    shapes
        .require(tensor)?
        .concrete()
        .map(|d| d.iter().product::<usize>() as u64)
        .ok_or_else(|| Error::UnsupportedOpShape {
            node: node.to_owned(),
            op: op.to_owned(),
            reason: format!("`{tensor}` has a symbolic shape"),
        })
}

fn dims(shapes: &ShapeEnv, tensor: &str, node: &str, op: &str) -> Result<Vec<usize>> {
    shapes.require(tensor)?.concrete().ok_or_else(|| Error::UnsupportedOpShape {
        node: node.to_owned(),
        op: op.to_owned(),
        reason: format!("`{tensor}` has a symbolic shape"),
    })
}

/// FLOPs of node `idx` under [`FLOP_CONVENTION`].
pub fn node_flops(graph: &NodeGraph, shapes: &ShapeEnv, idx: usize) -> Result<u64> {
    let node = graph.node(idx);
    let label = graph.label(idx);
    let op = node.op_type.as_str();
    let input = |slot: usize| node.input(slot).unwrap_or_default();
    let output = node.outputs.first().map(String::as_str).unwrap_or_default();
    if ZERO_COST.contains(&op) {
        return Ok(0);
    }
    if ELEMENTWISE.contains(&op) {
        return Ok(2 * numel(shapes, output, &label, op)?);
    }
    match op {
        "Conv" => {
            // weight dims 1.. are (Cin/group, kH, kW)
            let w = dims(shapes, input(1), &label, op)?;
            let per: u64 = w[1..].iter().map(|&d| d as u64).product();
            Ok(2 * numel(shapes, output, &label, op)? * per)
        }
        "ConvTranspose" => {
            let w = dims(shapes, input(1), &label, op)?;
            let x = numel(shapes, input(0), &label, op)?;
            let per: u64 = w[1..].iter().map(|&d| d as u64).product();
            Ok(2 * x * per)
        }
        "Gemm" => {
            let a = dims(shapes, input(0), &label, op)?;
            let k = if node.attr_int("transA", 0) != 0 { a[0] } else { a[1] } as u64;
            Ok(2 * k * numel(shapes, output, &label, op)?)
        }
        "MatMul" => {
            let a = dims(shapes, input(0), &label, op)?;
            let k = *a.last().unwrap_or(&1) as u64;
            Ok(2 * k * numel(shapes, output, &label, op)?)
        }
        "MaxPool" | "AveragePool" | "LpPool" => {
            let k: u64 = node.attr_ints("kernel_shape").unwrap_or(&[]).iter().map(|&v| v.max(1) as u64).product();
            Ok(k * numel(shapes, output, &label, op)?)
        }
        "GlobalAveragePool" | "GlobalMaxPool" => numel(shapes, input(0), &label, op),
        "Softmax" | "LogSoftmax" => Ok(3 * numel(shapes, output, &label, op)?),
        "ReduceMean" | "ReduceMax" | "ReduceMin" | "ReduceSum" | "ReduceProd" => numel(shapes, input(0), &label, op),
        _ => Err(Error::UnsupportedOpShape {
            node: label,
            op: op.to_owned(),
            reason: "no FLOP rule for this operator".into(),
        }),
    }
}

/// Shapes of `model` with symbolic batch dimensions bound to 1.
pub fn batch_one_shapes(model: &ModelArchive) -> Result<ShapeEnv> {
    let graph = build_graph(model)?;
    infer_shapes(model, &graph, &concrete_input_shapes(model, 1)?)
}

/// Total FLOPs of `model` for the given batch-1 shapes.
pub fn count_flops(model: &ModelArchive, shapes: &ShapeEnv) -> Result<u64> {
    let graph = build_graph(model)?;
    (0..graph.len()).map(|i| node_flops(&graph, shapes, i)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRow {
    pub node: String,
    pub op_type: String,
    pub channels_before: Option<usize>,
    pub channels_after: Option<usize>,
    pub params_before: u64,
    pub params_after: u64,
    pub flops_before: u64,
    pub flops_after: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapRow {
    pub group: usize,
    pub members: Vec<String>,
    pub pruned: usize,
    pub reference_pruned: usize,
    /// Fraction of the reference's pruned channels that are also pruned
    /// here; `None` when the reference prunes nothing.
    pub overlap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneReport {
    pub flop_convention: String,
    pub ratio: f64,
    pub criterion: String,
    pub params_before: u64,
    pub params_after: u64,
    pub sparsity: f64,
    pub flops_before: u64,
    pub flops_after: u64,
    pub speedup: f64,
    pub pruned_channels: usize,
    pub total_channels: usize,
    pub layers: Vec<LayerRow>,
    pub reference_criterion: Option<String>,
    pub overlap: Option<Vec<OverlapRow>>,
    pub mean_overlap: Option<f64>,
}

fn layer_rows(model: &ModelArchive) -> Result<BTreeMap<String, (String, Option<usize>, u64, u64)>> {
    let graph = build_graph(model)?;
    let shapes = batch_one_shapes(model)?;
    let mut rows = BTreeMap::new();
    for i in 0..graph.len() {
        let node = graph.node(i);
        let params: u64 = node
            .inputs
            .iter()
            .filter_map(|n| model.initializer(n))
            .map(|t| t.numel() as u64)
            .sum();
        let flops = node_flops(&graph, &shapes, i)?;
        if params == 0 {
            continue;
        }
        let channels = node
            .outputs
            .first()
            .and_then(|o| shapes.get(o))
            .and_then(|s| s.dims().get(1).and_then(|d| d.known()));
        rows.insert(graph.label(i), (node.op_type.clone(), channels, params, flops));
    }
    Ok(rows)
}

/// Compares `before` with its pruned form `after`. With a reference plan
/// the per-group overlap of pruned channel indices is included.
pub fn summarize(
    before: &ModelArchive,
    after: &ModelArchive,
    plan: &PruningPlan,
    reference: Option<&PruningPlan>,
) -> Result<PruneReport> {
    let params_before = count_params(before);
    let params_after = count_params(after);
    let flops_before = count_flops(before, &batch_one_shapes(before)?)?;
    let flops_after = count_flops(after, &batch_one_shapes(after)?)?;
    let sparsity = if params_before == 0 {
        0.0
    } else {
        1.0 - params_after as f64 / params_before as f64
    };
    let speedup = if flops_after == 0 {
        if flops_before == 0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        flops_before as f64 / flops_after as f64
    };

    let rows_before = layer_rows(before)?;
    let rows_after = layer_rows(after)?;
    let graph = build_graph(before)?;
    let layers = graph
        .topo_order()
        .iter()
        .map(|&i| graph.label(i))
        .filter_map(|name| {
            let (op, cb, pb, fb) = rows_before.get(&name)?.clone();
            let a = rows_after.get(&name);
            Some(LayerRow {
                node: name.clone(),
                op_type: op,
                channels_before: cb,
                channels_after: a.and_then(|r| r.1),
                params_before: pb,
                params_after: a.map_or(0, |r| r.2),
                flops_before: fb,
                flops_after: a.map_or(0, |r| r.3),
            })
        })
        .collect();

    let overlap = reference.map(|r| overlap_rows(plan, r)).transpose()?;
    let mean_overlap = overlap.as_ref().and_then(|rows| {
        let v: Vec<f64> = rows.iter().filter_map(|r| r.overlap).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    });
    Ok(PruneReport {
        flop_convention: FLOP_CONVENTION.to_owned(),
        ratio: plan.ratio,
        criterion: plan.criterion.clone(),
        params_before,
        params_after,
        sparsity,
        flops_before,
        flops_after,
        speedup,
        pruned_channels: plan.pruned_count(),
        total_channels: plan.groups.iter().map(|g| g.keep.len()).sum(),
        layers,
        reference_criterion: reference.map(|r| r.criterion.clone()),
        overlap,
        mean_overlap,
    })
}

/// Per-group overlap of `plan` against `reference`, matching groups by
/// their member lists.
pub fn overlap_rows(plan: &PruningPlan, reference: &PruningPlan) -> Result<Vec<OverlapRow>> {
    let mut rows = Vec::new();
    for g in &plan.groups {
        let Some(r) = reference.groups.iter().find(|r| r.members == g.members) else {
            continue;
        };
        if r.keep.len() != g.keep.len() {
            return Err(Error::InvalidArgument(format!(
                "group [{}] has {} channels in the plan and {} in the reference",
                g.members.join(", "),
                g.keep.len(),
                r.keep.len()
            )));
        }
        let (a, b) = (g.pruned(), r.pruned());
        let overlap = match overlap_index(&a, &b) {
            Ok(v) => Some(v),
            Err(Error::EmptyReference) => None,
            Err(e) => return Err(e),
        };
        rows.push(OverlapRow {
            group: g.id,
            members: g.members.clone(),
            pruned: a.len(),
            reference_pruned: b.len(),
            overlap,
        });
    }
    Ok(rows)
}

impl PruneReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}", self.flop_convention);
        let _ = writeln!(s, "criterion   {}", self.criterion);
        let _ = writeln!(s, "ratio       {}", self.ratio);
        let _ = writeln!(
            s,
            "params      {} -> {}  (sparsity {:.2}%)",
            self.params_before,
            self.params_after,
            100.0 * self.sparsity
        );
        let _ = writeln!(
            s,
            "flops       {} -> {}  (speedup {:.2}x)",
            self.flops_before, self.flops_after, self.speedup
        );
        let _ = writeln!(s, "channels    {} of {} pruned", self.pruned_channels, self.total_channels);
        let w = self.layers.iter().map(|l| l.node.len()).max().unwrap_or(4).max(4);
        let _ = writeln!(
            s,
            "\n{:<w$}  {:<13}  {:>11}  {:>21}  {:>25}",
            "node", "op", "channels", "params", "flops"
        );
        let opt = |v: Option<usize>| v.map_or("-".to_owned(), |c| c.to_string());
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<w$}  {:<13}  {:>11}  {:>21}  {:>25}",
                l.node,
                l.op_type,
                format!("{} -> {}", opt(l.channels_before), opt(l.channels_after)),
                format!("{} -> {}", l.params_before, l.params_after),
                format!("{} -> {}", l.flops_before, l.flops_after),
            );
        }
        if let Some(rows) = &self.overlap {
            let _ = writeln!(
                s,
                "\noverlap vs {}",
                self.reference_criterion.as_deref().unwrap_or("reference")
            );
            for r in rows {
                let v = r.overlap.map_or("-".to_owned(), |v| format!("{v:.3}"));
                let _ = writeln!(s, "  {:<w$}  {:>6}  ({} / {})", r.members.join("+"), v, r.pruned, r.reference_pruned);
            }
            if let Some(m) = self.mean_overlap {
                let _ = writeln!(s, "  mean {m:.3}");
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attrs::AttributeRegistry;
    use crate::context::PruneContext;
    use crate::model::{synthesize_model, FixtureSpec};
    use crate::rewrite::apply_plan;
    use crate::scoring::{Criterion, Mode, NormKind};
    use crate::tree::TreePolicy;

    #[test]
    fn conv_params_and_flops() {
        let m = synthesize_model(&FixtureSpec::new("conv_chain").depth(2)).unwrap();
        // conv1: [64, 3, 3, 3] + 64; conv2: [16, 64, 3, 3] + 16
        assert_eq!(count_params(&m), 64 * 27 + 64 + 16 * 64 * 9 + 16);
        let shapes = batch_one_shapes(&m).unwrap();
        let conv1 = 2 * 64 * 3 * 9 * 16 * 16;
        let conv2 = 2 * 16 * 64 * 9 * 16 * 16;
        let relu = 2 * 64 * 16 * 16;
        assert_eq!(count_flops(&m, &shapes).unwrap(), conv1 + conv2 + relu);
    }

    #[test]
    fn zero_ratio_report_is_neutral() {
        let m = synthesize_model(&FixtureSpec::new("residual_block")).unwrap();
        let ctx = PruneContext::new(m, AttributeRegistry::builtin(), TreePolicy::default()).unwrap();
        let c = Criterion::new(NormKind::L1, Mode::Tree);
        let (plan, _) = ctx.plan(0.0, &c).unwrap();
        let after = apply_plan(&ctx, &plan).unwrap().model;
        let r = summarize(&ctx.model, &after, &plan, Some(&plan)).unwrap();
        assert_eq!(r.sparsity, 0.0);
        assert_eq!(r.speedup, 1.0);
        assert!(r.overlap.as_ref().unwrap().iter().all(|o| o.overlap.is_none()));
        assert!(r.to_text().contains("speedup 1.00x"));
    }

    #[test]
    fn accounting_matches_removed_elements() {
        let m = synthesize_model(&FixtureSpec::new("alexnet_cifar")).unwrap();
        let ctx = PruneContext::new(m, AttributeRegistry::builtin(), TreePolicy::default()).unwrap();
        let (plan, _) = ctx.plan(0.3, &Criterion::new(NormKind::L2, Mode::Tree)).unwrap();
        let out = apply_plan(&ctx, &plan).unwrap();
        assert_eq!(count_params(&out.model) + out.removed_elements as u64, count_params(&ctx.model));
        let (single, _) = ctx.plan(0.3, &Criterion::new(NormKind::L2, Mode::Single)).unwrap();
        let r = summarize(&ctx.model, &out.model, &plan, Some(&single)).unwrap();
        assert!(r.speedup > 1.0);
        for o in r.overlap.unwrap() {
            let v = o.overlap.unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
        let layers: Vec<&str> = r.layers.iter().map(|l| l.node.as_str()).collect();
        assert_eq!(layers.first(), Some(&"conv1"));
    }
}
