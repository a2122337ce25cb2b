//! Filter norms, tree-level channel scores, channel selection and plans.

mod layout;
mod plan;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use layout::{analyze_group, ChannelLayout, GroupLayout, ParamSlice, ShapeEdit, SliceRole};
pub use plan::{make_plan, PlanGroup, PruningPlan, PLAN_VERSION};

use crate::error::{Diagnostic, Error, Result};
use crate::model::{InitializerTensor, ModelArchive, NodeDef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    L1,
    L2,
}

impl NormKind {
    /// Contribution of one element to the accumulator.
    fn term(self, x: f32) -> f64 {
        let x = x as f64;
        match self {
            NormKind::L1 => x.abs(),
            NormKind::L2 => x * x,
        }
    }

    /// Norm from an accumulated sum of terms.
    fn finish(self, acc: f64) -> f64 {
        match self {
            NormKind::L1 => acc,
            NormKind::L2 => acc.sqrt(),
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::L1 => "l1",
            NormKind::L2 => "l2",
        })
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(NormKind::L1),
            "l2" => Ok(NormKind::L2),
            _ => Err(Error::InvalidArgument(format!("unknown norm `{s}` (expected l1 or l2)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Producer weights only.
    Single,
    /// Producer weights times the consumer input slices.
    Tree,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Single => "single",
            Mode::Tree => "tree",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "single" | "single-node" | "single_node" => Ok(Mode::Single),
            "tree" | "tree-level" | "tree_level" => Ok(Mode::Tree),
            _ => Err(Error::InvalidArgument(format!("unknown mode `{s}` (expected tree or single)"))),
        }
    }
}

/// Importance values for the channels of one group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreVector {
    pub group: usize,
    pub values: Vec<f64>,
    /// Set when tree scoring fell back to producer norms.
    pub fallback: Option<Diagnostic>,
}

/// Anything that can rank a group's channels.
///
/// Implement this to plug in data-driven criteria; the built-in
/// implementation is [`Criterion`].
pub trait ChannelScorer: Sync {
    /// Name recorded in plans.
    fn name(&self) -> String;
    fn score(&self, model: &ModelArchive, layout: &GroupLayout) -> Result<ScoreVector>;
}

/// Norm-based scoring: a norm kind and single-node or tree-level mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Criterion {
    pub norm: NormKind,
    pub mode: Mode,
}

impl Criterion {
    pub fn new(norm: NormKind, mode: Mode) -> Self {
        Criterion { norm, mode }
    }
}

impl ChannelScorer for Criterion {
    fn name(&self) -> String {
        format!("{}/{}", self.norm, self.mode)
    }

    fn score(&self, model: &ModelArchive, layout: &GroupLayout) -> Result<ScoreVector> {
        match self.mode {
            Mode::Single => single_node_score(model, layout, self.norm),
            Mode::Tree => tree_score(model, layout, self.norm),
        }
    }
}

/// Output and input axes of a weight tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightLayout {
    pub out_axis: usize,
    pub in_axis: usize,
}

impl WeightLayout {
    /// Layout of input 1 of a weighted node with a weight of rank `rank`.
    pub fn for_node(node: &NodeDef, rank: usize) -> Result<Self> {
        let (out_axis, in_axis) = match node.op_type.as_str() {
            "Conv" => (0, 1),
            "ConvTranspose" => (1, 0),
            "Gemm" if node.attr_int("transB", 0) != 0 => (0, 1),
            "Gemm" => (1, 0),
            "MatMul" if rank >= 2 => (rank - 1, rank - 2),
            op => {
                return Err(Error::Axis(format!(
                    "no weight layout for `{op}` with rank {rank}"
                )))
            }
        };
        if out_axis.max(in_axis) >= rank {
            return Err(Error::Axis(format!(
                "`{}` weight of rank {rank} has no axis {}",
                node.op_type,
                out_axis.max(in_axis)
            )));
        }
        Ok(WeightLayout { out_axis, in_axis })
    }
}

/// Which slice of a weight a norm is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisRole {
    /// Filter `i`: everything at index `i` of the output axis.
    OutputChannel(usize),
    /// Input slice `(k, i)`: output index `k`, input index `i`.
    InputSlice { k: usize, i: usize },
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for a in (0..dims.len().saturating_sub(1)).rev() {
        s[a] = s[a + 1] * dims[a + 1];
    }
    s
}

/// Norm of one filter or one input slice of a weight tensor.
pub fn filter_norm(w: &InitializerTensor, layout: WeightLayout, role: AxisRole, kind: NormKind) -> Result<f64> {
    let data = w.as_f32()?;
    let rank = w.dims.len();
    if layout.out_axis >= rank || layout.in_axis >= rank {
        return Err(Error::Axis(format!("tensor `{}` has rank {rank}", w.name)));
    }
    let st = strides(&w.dims);
    let check = |axis: usize, idx: usize| {
        if idx >= w.dims[axis] {
            Err(Error::Index(format!(
                "index {idx} out of bounds for axis {axis} of `{}` ({})",
                w.name, w.dims[axis]
            )))
        } else {
            Ok(())
        }
    };
    let mut acc = 0.0f64;
    match role {
        AxisRole::OutputChannel(i) => {
            check(layout.out_axis, i)?;
            for (f, &x) in data.iter().enumerate() {
                if (f / st[layout.out_axis]) % w.dims[layout.out_axis] == i {
                    acc += kind.term(x);
                }
            }
        }
        AxisRole::InputSlice { k, i } => {
            check(layout.out_axis, k)?;
            check(layout.in_axis, i)?;
            for (f, &x) in data.iter().enumerate() {
                if (f / st[layout.out_axis]) % w.dims[layout.out_axis] == k
                    && (f / st[layout.in_axis]) % w.dims[layout.in_axis] == i
                {
                    acc += kind.term(x);
                }
            }
        }
    }
    Ok(kind.finish(acc))
}

/// Per-index accumulated norm terms along `axis`.
fn axis_terms(w: &InitializerTensor, axis: usize, kind: NormKind) -> Result<Vec<f64>> {
    let data = w.as_f32()?;
    let d = *w.dims.get(axis).ok_or_else(|| Error::Axis(format!("`{}` has no axis {axis}", w.name)))?;
    let inner: usize = w.dims[axis + 1..].iter().product();
    let mut acc = vec![0.0f64; d];
    for (block, chunk) in data.chunks(inner.max(1)).enumerate() {
        let idx = block % d;
        acc[idx] += chunk.iter().map(|&x| kind.term(x)).sum::<f64>();
    }
    Ok(acc)
}

/// Accumulated norm terms per `(k, p)` pair of the `k_axis` and `p_axis`.
fn pair_terms(w: &InitializerTensor, k_axis: usize, p_axis: usize, kind: NormKind) -> Result<Vec<Vec<f64>>> {
    let data = w.as_f32()?;
    let rank = w.dims.len();
    if k_axis >= rank || p_axis >= rank || k_axis == p_axis {
        return Err(Error::Axis(format!("`{}`: bad axes {k_axis}/{p_axis}", w.name)));
    }
    let st = strides(&w.dims);
    let (dk, dp) = (w.dims[k_axis], w.dims[p_axis]);
    let mut acc = vec![vec![0.0f64; dp]; dk];
    for (f, &x) in data.iter().enumerate() {
        acc[(f / st[k_axis]) % dk][(f / st[p_axis]) % dp] += kind.term(x);
    }
    Ok(acc)
}

fn weight<'m>(model: &'m ModelArchive, name: &str) -> Result<&'m InitializerTensor> {
    model
        .constant(name)
        .ok_or_else(|| Error::InvalidArgument(format!("weight `{name}` not found")))
}

/// Σ over producers of the filter norm of channel `i`.
fn producer_terms(model: &ModelArchive, layout: &GroupLayout, kind: NormKind) -> Result<Vec<f64>> {
    let mut out = vec![0.0; layout.channels];
    for p in &layout.producers {
        let terms = axis_terms(weight(model, &p.tensor)?, p.axis, kind)?;
        for (i, ps) in p.positions.iter().enumerate() {
            out[i] += kind.finish(ps.iter().map(|&q| terms[q]).sum());
        }
    }
    Ok(out)
}

/// Σ over leaves, Σ over k of the norm of the leaf's input slice for channel `i`.
fn leaf_terms(model: &ModelArchive, layout: &GroupLayout, kind: NormKind) -> Result<Vec<f64>> {
    let mut out = vec![0.0; layout.channels];
    for l in &layout.leaves {
        let k_axis = l.k_axis.ok_or_else(|| Error::Axis(format!("leaf `{}` has no output axis", l.tensor)))?;
        let table = pair_terms(weight(model, &l.tensor)?, k_axis, l.axis, kind)?;
        for (i, ps) in l.positions.iter().enumerate() {
            out[i] += table
                .iter()
                .map(|row| kind.finish(ps.iter().map(|&q| row[q]).sum()))
                .sum::<f64>();
        }
    }
    Ok(out)
}

/// Tree-level score: producer norm sum times leaf input-slice norm sum.
///
/// A group with no leaves falls back to producer norms and reports it.
pub fn tree_score(model: &ModelArchive, layout: &GroupLayout, kind: NormKind) -> Result<ScoreVector> {
    let producers = producer_terms(model, layout, kind)?;
    if layout.leaves.is_empty() {
        let label = layout.members.first().map(|m| format!("group {} (node {m})", layout.group));
        return Ok(ScoreVector {
            group: layout.group,
            values: producers,
            fallback: Some(Diagnostic::warning(
                label.as_deref(),
                "group has no consumers with weights; scoring producer norms only",
            )),
        });
    }
    let leaves = leaf_terms(model, layout, kind)?;
    Ok(ScoreVector {
        group: layout.group,
        values: producers.iter().zip(&leaves).map(|(p, l)| p * l).collect(),
        fallback: None,
    })
}

/// Producer-norm score; consumers are ignored.
pub fn single_node_score(model: &ModelArchive, layout: &GroupLayout, kind: NormKind) -> Result<ScoreVector> {
    Ok(ScoreVector {
        group: layout.group,
        values: producer_terms(model, layout, kind)?,
        fallback: None,
    })
}

/// Number of channels removed from `channels` at `ratio`: the ratio times
/// the count rounded half away from zero, at most `channels - 1`.
pub fn n_prune(ratio: f64, channels: usize) -> usize {
    if channels == 0 {
        return 0;
    }
    ((ratio * channels as f64).round().max(0.0) as usize).min(channels - 1)
}

/// Keep mask removing the `n_prune` lowest-scoring channels; among equal
/// scores the higher index goes first.
pub fn select_channels(scores: &[f64], ratio: f64) -> Vec<bool> {
    let n = n_prune(ratio, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)));
    let mut keep = vec![true; scores.len()];
    for &i in &order[..n] {
        keep[i] = false;
    }
    keep
}

/// Fraction of `b` also present in `a`.
pub fn overlap_index(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> Result<f64> {
    if b.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(a.intersection(b).count() as f64 / b.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InitializerTensor;

    fn conv_layout() -> WeightLayout {
        WeightLayout { out_axis: 0, in_axis: 1 }
    }

    #[test]
    fn l1_of_two_filters() {
        let w = InitializerTensor::from_f32("w", vec![2, 1, 1, 1], vec![2.0, -1.0]);
        assert_eq!(filter_norm(&w, conv_layout(), AxisRole::OutputChannel(0), NormKind::L1).unwrap(), 2.0);
        assert_eq!(filter_norm(&w, conv_layout(), AxisRole::OutputChannel(1), NormKind::L1).unwrap(), 1.0);
    }

    #[test]
    fn zero_tensor_has_zero_norms() {
        let w = InitializerTensor::from_f32("w", vec![3, 2, 1, 1], vec![0.0; 6]);
        for i in 0..3 {
            assert_eq!(filter_norm(&w, conv_layout(), AxisRole::OutputChannel(i), NormKind::L2).unwrap(), 0.0);
        }
    }

    #[test]
    fn l2_matches_enumeration() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f32> = (0..108).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = InitializerTensor::from_f32("w", vec![4, 3, 3, 3], data.clone());
        let brute: f64 = data[54..81].iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        let got = filter_norm(&w, conv_layout(), AxisRole::OutputChannel(2), NormKind::L2).unwrap();
        assert!((got - brute).abs() <= 1e-12 * brute);
    }

    #[test]
    fn input_slice_of_gemm_weight() {
        // transB=0: W is [K, N]; input axis 0, output axis 1
        let w = InitializerTensor::from_f32("w", vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let node = NodeDef::new("g", "Gemm", &["a", "w"], &["y"]);
        let l = WeightLayout::for_node(&node, 2).unwrap();
        assert_eq!(filter_norm(&w, l, AxisRole::InputSlice { k: 2, i: 1 }, NormKind::L1).unwrap(), 6.0);
        assert_eq!(filter_norm(&w, l, AxisRole::OutputChannel(0), NormKind::L1).unwrap(), 5.0);
    }

    #[test]
    fn bad_axis_and_index() {
        let w = InitializerTensor::from_f32("w", vec![2], vec![1.0, 2.0]);
        assert!(matches!(
            filter_norm(&w, conv_layout(), AxisRole::OutputChannel(0), NormKind::L1),
            Err(Error::Axis(_))
        ));
        let w = InitializerTensor::from_f32("w", vec![2, 1], vec![1.0, 2.0]);
        assert!(matches!(
            filter_norm(&w, conv_layout(), AxisRole::OutputChannel(5), NormKind::L1),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn selection_rules() {
        assert_eq!(select_channels(&[8.0, 1.5], 0.5), vec![true, false]);
        assert_eq!(select_channels(&[8.0, 1.5, 3.0], 0.0), vec![true; 3]);
        assert_eq!(select_channels(&[1.0; 4], 0.5), vec![true, true, false, false]);
        assert_eq!(n_prune(0.9, 10), 9);
        assert_eq!(n_prune(0.99, 10), 9);
        assert_eq!(n_prune(0.25, 2), 1);
        assert_eq!(n_prune(0.5, 1), 0);
    }

    #[test]
    fn overlap_examples() {
        let s = |v: &[usize]| v.iter().copied().collect::<BTreeSet<_>>();
        assert_eq!(overlap_index(&s(&[1, 2, 3]), &s(&[1, 2, 3])).unwrap(), 1.0);
        assert_eq!(overlap_index(&s(&[1, 2]), &s(&[3, 4])).unwrap(), 0.0);
        assert_eq!(overlap_index(&s(&[1, 2, 3, 4]), &s(&[3, 4, 5, 6])).unwrap(), 0.5);
        assert!(matches!(overlap_index(&s(&[1]), &s(&[])), Err(Error::EmptyReference)));
    }

    #[test]
    fn norm_and_mode_parse() {
        assert_eq!("L2".parse::<NormKind>().unwrap(), NormKind::L2);
        assert_eq!("single".parse::<Mode>().unwrap(), Mode::Single);
        assert!("l3".parse::<NormKind>().is_err());
        assert_eq!(Criterion::new(NormKind::L1, Mode::Tree).name(), "l1/tree");
    }
}
