//! Where a group's channels live.
//!
//! Starting from the outputs of the group members, the analysis follows the
//! dataflow and records, for every tensor carrying the group's channels, the
//! axis and the positions on that axis belonging to each channel. From those
//! it derives the parameter slices to score, mask and remove: producer
//! weights and biases, side parameters of intermediate ops, and the
//! input-axis slices of every leaf.
//!
//! Anything the analysis cannot follow exactly pins the group: it is still
//! scored but keeps all of its channels.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::attrs::{AttributeRegistry, NodeAttribute};
use crate::error::Diagnostic;
use crate::graph::{Dim, NodeGraph, ShapeEnv};
use crate::model::{ModelArchive, NodeDef};
use crate::tree::PruningGroup;

/// Positions of each group channel on one axis of a tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChannelLayout {
    pub axis: usize,
    /// `positions[i]` lists the indices on `axis` that carry channel `i`.
    pub positions: Vec<Vec<usize>>,
    /// Length of `axis` before pruning.
    pub extent: usize,
}

impl ChannelLayout {
    fn identity(axis: usize, channels: usize) -> Self {
        ChannelLayout {
            axis,
            positions: (0..channels).map(|i| vec![i]).collect(),
            extent: channels,
        }
    }

    fn shifted(&self, offset: usize, extent: usize) -> Self {
        ChannelLayout {
            axis: self.axis,
            positions: self
                .positions
                .iter()
                .map(|ps| ps.iter().map(|p| p + offset).collect())
                .collect(),
            extent,
        }
    }

    /// Indices on `axis` carrying any of the channels in `channels`.
    pub fn positions_of(&self, channels: impl IntoIterator<Item = usize>) -> BTreeSet<usize> {
        channels
            .into_iter()
            .flat_map(|i| self.positions[i].iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceRole {
    /// Weight of a group member, sliced on its output axis.
    ProducerWeight,
    /// Bias of a group member.
    ProducerBias,
    /// Per-channel parameter of an intermediate op (BatchNorm statistics,
    /// constant elementwise operands).
    Side,
    /// Weight of a consumer, sliced on its input axis.
    Leaf,
}

/// One initializer axis tied to the group's channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamSlice {
    /// Node reading the initializer.
    pub node: usize,
    pub tensor: String,
    pub axis: usize,
    /// Positions on `axis` per group channel.
    pub positions: Vec<Vec<usize>>,
    pub role: SliceRole,
    /// Output-channel axis of a leaf weight (the `k` index of the leaf sum).
    pub k_axis: Option<usize>,
}

/// Entry of a constant `Reshape` target that counts pruned positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShapeEdit {
    pub node: usize,
    pub tensor: String,
    pub index: usize,
    pub layout: ChannelLayout,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupLayout {
    pub group: usize,
    pub members: Vec<usize>,
    pub channels: usize,
    pub producers: Vec<ParamSlice>,
    pub leaves: Vec<ParamSlice>,
    /// Biases and side parameters.
    pub params: Vec<ParamSlice>,
    pub shape_edits: Vec<ShapeEdit>,
    /// Every tensor carrying the group's channels.
    pub tensors: BTreeMap<String, ChannelLayout>,
    /// Reasons the group cannot be rewritten; empty when it can.
    pub blocked: Vec<Diagnostic>,
    /// Nodes that combine values across the pruned axis, which makes the
    /// masked model differ from the pruned one.
    pub mixing: Vec<String>,
    pub diagnostics: Vec<Diagnostic>,
}

impl GroupLayout {
    pub fn is_prunable(&self) -> bool {
        self.blocked.is_empty()
    }

    /// All initializer slices: producers, leaves, then other parameters.
    pub fn slices(&self) -> impl Iterator<Item = &ParamSlice> {
        self.producers.iter().chain(&self.leaves).chain(&self.params)
    }
}

const ELEMENTWISE_UNARY: &[&str] = &[
    "Relu", "Sigmoid", "Tanh", "Erf", "Sqrt", "Cast", "Identity", "Dropout", "Clip", "LeakyRelu",
    "HardSigmoid", "HardSwish", "Abs", "Neg", "Exp", "Log", "Elu", "Selu", "Softplus", "Gelu",
    "Reciprocal", "Floor", "Ceil", "Sign",
];

const ELEMENTWISE_BINARY: &[&str] = &["Add", "Sub", "Mul", "Div", "Pow", "Max", "Min", "Sum", "Mean"];

const POOLS: &[&str] = &[
    "MaxPool",
    "AveragePool",
    "LpPool",
    "GlobalAveragePool",
    "GlobalMaxPool",
];

const RESHAPES: &[&str] = &["Flatten", "Reshape", "Squeeze", "Unsqueeze"];

const REDUCES: &[&str] = &["ReduceMean", "ReduceMax", "ReduceMin", "ReduceSum", "ReduceProd"];

struct Analyzer<'a> {
    model: &'a ModelArchive,
    graph: &'a NodeGraph,
    shapes: &'a ShapeEnv,
    registry: &'a AttributeRegistry,
    out: GroupLayout,
}

/// Runs the layout analysis for one group.
pub fn analyze_group(
    model: &ModelArchive,
    graph: &NodeGraph,
    shapes: &ShapeEnv,
    registry: &AttributeRegistry,
    group: &PruningGroup,
) -> GroupLayout {
    let mut a = Analyzer {
        model,
        graph,
        shapes,
        registry,
        out: GroupLayout {
            group: group.id,
            members: group.members.clone(),
            channels: group.channels,
            producers: Vec::new(),
            leaves: Vec::new(),
            params: Vec::new(),
            shape_edits: Vec::new(),
            tensors: BTreeMap::new(),
            blocked: Vec::new(),
            mixing: Vec::new(),
            diagnostics: Vec::new(),
        },
    };
    let members: BTreeSet<usize> = group.members.iter().copied().collect();
    for &i in graph.topo_order() {
        let node = graph.node(i);
        let carried: Vec<(usize, ChannelLayout)> = node
            .inputs
            .iter()
            .enumerate()
            .filter_map(|(s, t)| a.out.tensors.get(t).map(|l| (s, l.clone())))
            .collect();
        if members.contains(&i) {
            if !carried.is_empty() {
                a.leaf(i, &carried);
            }
            a.producer(i);
        } else if !carried.is_empty() {
            a.propagate(i, &carried);
        }
    }
    a.check_sharing();
    a.out
}

impl Analyzer<'_> {
    fn block(&mut self, node: usize, why: impl Into<String>) {
        let label = self.graph.label(node);
        self.out.blocked.push(Diagnostic::error(Some(&label), why.into()));
    }

    fn const_dims(&self, tensor: &str) -> Option<&[usize]> {
        self.graph.constant_dims(tensor)
    }

    fn dims(&self, tensor: &str) -> Option<&[Dim]> {
        self.shapes.get(tensor).map(|s| s.dims())
    }

    /// Records `layout` for `tensor` after checking it against the inferred shape.
    fn set(&mut self, node: usize, tensor: &str, layout: ChannelLayout) {
        let Some(dims) = self.dims(tensor) else {
            self.block(node, format!("tensor `{tensor}` has no inferred shape"));
            return;
        };
        if let Some(bad) = dims.iter().skip(1).find(|d| d.known().is_none()) {
            self.block(
                node,
                format!("tensor `{tensor}` has dynamic dimension `{bad}` on a pruned path"),
            );
            return;
        }
        match dims.get(layout.axis).and_then(Dim::known) {
            Some(e) if e == layout.extent => {}
            other => {
                self.block(
                    node,
                    format!(
                        "tensor `{tensor}` axis {} has extent {:?}, expected {}",
                        layout.axis, other, layout.extent
                    ),
                );
                return;
            }
        }
        if let Some(prev) = self.out.tensors.get(tensor) {
            if *prev != layout {
                self.block(node, format!("tensor `{tensor}` reached with two layouts"));
            }
            return;
        }
        self.out.tensors.insert(tensor.to_owned(), layout);
    }

    fn add_slice(&mut self, node: usize, tensor: &str, axis: usize, positions: Vec<Vec<usize>>, role: SliceRole, k_axis: Option<usize>) {
        let slice = ParamSlice {
            node,
            tensor: tensor.to_owned(),
            axis,
            positions,
            role,
            k_axis,
        };
        match role {
            SliceRole::ProducerWeight => self.out.producers.push(slice),
            SliceRole::Leaf => self.out.leaves.push(slice),
            _ => self.out.params.push(slice),
        }
    }

    fn producer(&mut self, i: usize) {
        let node = self.graph.node(i);
        let c = self.out.channels;
        let ident: Vec<Vec<usize>> = (0..c).map(|x| vec![x]).collect();
        let Some(out) = node.outputs.first().filter(|o| !o.is_empty()).cloned() else {
            self.block(i, "node has no output");
            return;
        };
        let weight = node.input(1).unwrap_or("").to_owned();
        let bias = node.input(2).map(str::to_owned);
        match node.op_type.as_str() {
            "Conv" | "ConvTranspose" => {
                if node.attr_int("group", 1) != 1 {
                    self.block(i, "grouped convolution");
                    return;
                }
                let axis = if node.op_type == "Conv" { 0 } else { 1 };
                self.add_slice(i, &weight, axis, ident.clone(), SliceRole::ProducerWeight, None);
                if let Some(b) = bias {
                    self.param(i, &b, 0, ident, SliceRole::ProducerBias);
                }
                self.set(i, &out, ChannelLayout::identity(1, c));
            }
            "Gemm" => {
                let axis = if node.attr_int("transB", 0) != 0 { 0 } else { 1 };
                self.add_slice(i, &weight, axis, ident.clone(), SliceRole::ProducerWeight, None);
                if let Some(b) = bias {
                    match self.const_dims(&b).map(<[usize]>::to_vec) {
                        Some(d) if d.last() == Some(&c) => {
                            self.param(i, &b, d.len() - 1, ident, SliceRole::ProducerBias)
                        }
                        Some(d) if d.iter().all(|&x| x == 1) => {}
                        Some(d) => self.block(i, format!("Gemm bias with dims {d:?} does not broadcast per channel")),
                        None => self.block(i, "Gemm bias is not a constant"),
                    }
                }
                self.set(i, &out, ChannelLayout::identity(1, c));
            }
            "MatMul" => {
                let rank = self.const_dims(&weight).map_or(0, <[usize]>::len);
                if rank < 2 {
                    self.block(i, "MatMul weight must have rank >= 2");
                    return;
                }
                self.add_slice(i, &weight, rank - 1, ident, SliceRole::ProducerWeight, None);
                match self.dims(&out).map(<[Dim]>::len) {
                    Some(r) if r >= 1 => self.set(i, &out, ChannelLayout::identity(r - 1, c)),
                    _ => self.block(i, format!("tensor `{out}` has no inferred shape")),
                }
            }
            "Mul" => {
                let slot = (0..2).find(|&s| node.input(s).is_some_and(|t| self.graph.is_constant(t)));
                let Some(slot) = slot else {
                    self.block(i, "Mul has no constant operand");
                    return;
                };
                let scale = node.input(slot).unwrap().to_owned();
                let dims = self.const_dims(&scale).unwrap_or(&[]).to_vec();
                let Some(d) = dims.iter().position(|&x| x != 1) else {
                    self.block(i, "Mul operand has no channel axis");
                    return;
                };
                let Some(out_rank) = self.dims(&out).map(<[Dim]>::len) else {
                    self.block(i, format!("tensor `{out}` has no inferred shape"));
                    return;
                };
                let axis = out_rank - dims.len() + d;
                let data = node.input(1 - slot).unwrap_or("");
                if let Some(dd) = self.dims(data) {
                    let off = out_rank - dd.len();
                    if axis >= off && dd[axis - off] != Dim::Known(1) {
                        self.block(i, "Mul data operand already spans the scale axis");
                        return;
                    }
                }
                self.add_slice(i, &scale, d, ident, SliceRole::ProducerWeight, None);
                self.set(i, &out, ChannelLayout::identity(axis, c));
            }
            op => self.block(i, format!("no producer layout for `{op}`")),
        }
    }

    fn param(&mut self, i: usize, tensor: &str, axis: usize, positions: Vec<Vec<usize>>, role: SliceRole) {
        match self.const_dims(tensor) {
            Some(d) if d.len() > axis => {
                let extent = d[axis];
                if positions.iter().flatten().any(|&p| p >= extent) {
                    self.block(i, format!("parameter `{tensor}` is too short on axis {axis}"));
                } else {
                    self.add_slice(i, tensor, axis, positions, role, None);
                }
            }
            Some(_) => self.block(i, format!("parameter `{tensor}` has no axis {axis}")),
            None => self.block(i, format!("parameter `{tensor}` is not a constant")),
        }
    }

    fn leaf(&mut self, i: usize, carried: &[(usize, ChannelLayout)]) {
        let node = self.graph.node(i);
        let op = node.op_type.as_str();
        for (slot, layout) in carried {
            if *slot != 0 {
                self.block(i, format!("pruned channels reach `{op}` through input {slot}"));
                continue;
            }
            let weight = node.input(1).unwrap_or("").to_owned();
            let Some(wdims) = self.const_dims(&weight).map(<[usize]>::to_vec) else {
                self.block(i, format!("`{op}` consumer has no constant weight"));
                continue;
            };
            let (want_axis, in_axis, k_axis) = match op {
                "Conv" | "ConvTranspose" => {
                    if node.attr_int("group", 1) != 1 {
                        self.block(i, "grouped convolution consumer");
                        continue;
                    }
                    if op == "Conv" {
                        (1, 1, 0)
                    } else {
                        (1, 0, 1)
                    }
                }
                "Gemm" => {
                    let a = if node.attr_int("transA", 0) != 0 { 0 } else { 1 };
                    if node.attr_int("transB", 0) != 0 {
                        (a, 1, 0)
                    } else {
                        (a, 0, 1)
                    }
                }
                "MatMul" => {
                    let rank = self.dims(&node.inputs[0]).map_or(0, <[Dim]>::len);
                    if wdims.len() != 2 || rank < 2 {
                        self.block(i, "MatMul consumer needs a 2-D weight and rank >= 2 input");
                        continue;
                    }
                    (rank - 1, 0, 1)
                }
                _ => {
                    self.block(i, format!("no weight layout known for consumer `{op}`"));
                    continue;
                }
            };
            if layout.axis != want_axis {
                self.block(
                    i,
                    format!("pruned axis {} is not the reduction axis of `{op}`", layout.axis),
                );
                continue;
            }
            if wdims.get(in_axis) != Some(&layout.extent) {
                self.block(
                    i,
                    format!(
                        "weight `{weight}` axis {in_axis} is {:?}, input carries {}",
                        wdims.get(in_axis),
                        layout.extent
                    ),
                );
                continue;
            }
            self.add_slice(i, &weight, in_axis, layout.positions.clone(), SliceRole::Leaf, Some(k_axis));
        }
    }

    fn first_output(&self, node: &NodeDef) -> Option<String> {
        node.outputs.first().filter(|o| !o.is_empty()).cloned()
    }

    /// Blocks when outputs other than the first are consumed.
    fn only_first_output(&mut self, i: usize) -> bool {
        let node = self.graph.node(i);
        let extra = node.outputs.iter().skip(1).any(|o| self.graph.use_count(o) > 0);
        if extra {
            self.block(i, "secondary output of a node on a pruned path is used");
        }
        !extra
    }

    fn propagate(&mut self, i: usize, carried: &[(usize, ChannelLayout)]) {
        let node = self.graph.node(i);
        let op = node.op_type.as_str();
        let Some(out) = self.first_output(node) else {
            return;
        };

        if self.registry.is_root_op(op) && op != "Mul" {
            self.leaf(i, carried);
            return;
        }
        if let Some(ext) = self.registry.extension(op) {
            match (ext.attribute, ext.handler.as_deref()) {
                (NodeAttribute::NextNoProcess, _) | (_, Some("elementwise")) => {
                    let same = self.dims(&node.inputs[carried[0].0]) == self.dims(&out);
                    if carried.len() == 1 && carried[0].0 == 0 && same && self.only_first_output(i) {
                        self.set(i, &out, carried[0].1.clone());
                    } else {
                        self.block(i, format!("custom op `{op}` does not preserve the pruned layout"));
                    }
                }
                (attr, _) => self.block(i, format!("custom op `{op}` ({attr}) has no layout rule")),
            }
            return;
        }

        let (slot, layout) = carried[0].clone();
        let single_data = carried.len() == 1 && slot == 0;

        if ELEMENTWISE_UNARY.contains(&op) {
            if single_data && self.only_first_output(i) {
                self.set(i, &out, layout);
            } else {
                self.block(i, format!("pruned channels reach `{op}` through input {slot}"));
            }
            return;
        }
        if ELEMENTWISE_BINARY.contains(&op) {
            self.elementwise(i, carried, &out);
            return;
        }
        if POOLS.contains(&op) {
            if single_data && layout.axis == 1 && self.only_first_output(i) {
                self.set(i, &out, layout);
            } else {
                self.block(i, format!("`{op}` does not pool over the pruned axis layout"));
            }
            return;
        }
        if RESHAPES.contains(&op) {
            if !single_data {
                self.block(i, format!("pruned channels reach `{op}` through input {slot}"));
                return;
            }
            self.reshape(i, &layout, &out);
            return;
        }
        if REDUCES.contains(&op) {
            self.reduce(i, &layout, single_data, &out);
            return;
        }
        match op {
            "Softmax" | "LogSoftmax" => {
                if !single_data {
                    self.block(i, format!("pruned channels reach `{op}` through input {slot}"));
                    return;
                }
                let rank = self.dims(&out).map_or(0, <[Dim]>::len) as i64;
                let opset = self.model.default_opset().unwrap_or(13);
                let default = if opset >= 13 { -1 } else { 1 };
                let mut axis = node.attr_int("axis", default);
                if axis < 0 {
                    axis += rank;
                }
                let mixes = if opset >= 13 {
                    axis == layout.axis as i64
                } else {
                    layout.axis as i64 >= axis
                };
                if mixes {
                    let label = self.graph.label(i);
                    self.out.diagnostics.push(Diagnostic::warning(
                        Some(&label),
                        format!("{op} normalizes over the pruned axis {}", layout.axis),
                    ));
                    self.out.mixing.push(label);
                }
                self.set(i, &out, layout);
            }
            "BatchNormalization" => {
                if !single_data || layout.axis != 1 {
                    self.block(i, "BatchNormalization input is not channel-major on the pruned axis");
                    return;
                }
                if !self.only_first_output(i) {
                    return;
                }
                for s in 1..5 {
                    let Some(t) = node.input(s).map(str::to_owned) else {
                        self.block(i, format!("BatchNormalization input {s} missing"));
                        return;
                    };
                    self.param(i, &t, 0, layout.positions.clone(), SliceRole::Side);
                }
                self.set(i, &out, layout);
            }
            "Transpose" => {
                let rank = self.dims(&out).map_or(0, <[Dim]>::len);
                let perm: Vec<usize> = match node.attr_ints("perm") {
                    Some(p) => p.iter().map(|&v| v as usize).collect(),
                    None => (0..rank).rev().collect(),
                };
                match perm.iter().position(|&p| p == layout.axis) {
                    Some(b) => self.set(i, &out, ChannelLayout { axis: b, ..layout }),
                    None => self.block(i, "Transpose permutation does not cover the pruned axis"),
                }
            }
            "Concat" => self.concat(i, carried, &out),
            "Pad" => {
                if !single_data {
                    self.block(i, format!("pruned channels reach `{op}` through input {slot}"));
                    return;
                }
                let pads = node
                    .attr_ints("pads")
                    .map(<[i64]>::to_vec)
                    .or_else(|| node.input(1).and_then(|t| self.model.constant(t)).and_then(|t| t.as_i64()));
                let rank = self.dims(&out).map_or(0, <[Dim]>::len);
                match pads {
                    Some(p) if p.len() == 2 * rank => {
                        if p[layout.axis] == 0 && p[layout.axis + rank] == 0 {
                            self.set(i, &out, layout);
                        } else {
                            self.block(i, "Pad pads the pruned axis");
                        }
                    }
                    _ => self.block(i, "Pad amounts are not constant"),
                }
            }
            "Slice" => {
                if !single_data {
                    self.block(i, format!("pruned channels reach `{op}` through input {slot}"));
                    return;
                }
                let Ok((starts, ends, axes, steps)) = crate::graph::slice_params_checked(self.model, node) else {
                    self.block(i, "Slice bounds are not constant");
                    return;
                };
                let rank = self.dims(&out).map_or(0, <[Dim]>::len) as i64;
                let touches = axes.iter().enumerate().any(|(j, &ax)| {
                    let ax = if ax < 0 { ax + rank } else { ax };
                    if ax != layout.axis as i64 {
                        return false;
                    }
                    let (s, _, len) = crate::graph::slice_range(layout.extent, starts[j], ends[j], steps[j]);
                    !(s == 0 && steps[j] == 1 && len == layout.extent)
                });
                if touches {
                    self.block(i, "Slice keeps only part of the pruned axis");
                } else {
                    self.set(i, &out, layout);
                }
            }
            "Gather" => {
                if slot != 0 || carried.len() != 1 {
                    self.block(i, "pruned channels used as Gather indices");
                    return;
                }
                let rank = self.dims(&node.inputs[0]).map_or(0, <[Dim]>::len) as i64;
                let mut g = node.attr_int("axis", 0);
                if g < 0 {
                    g += rank;
                }
                if g == layout.axis as i64 {
                    self.block(i, "Gather on the pruned axis");
                    return;
                }
                let idx_rank = node
                    .input(1)
                    .and_then(|t| self.dims(t))
                    .map_or(0, <[Dim]>::len);
                let axis = if (layout.axis as i64) < g {
                    layout.axis
                } else {
                    layout.axis - 1 + idx_rank
                };
                self.set(i, &out, ChannelLayout { axis, ..layout });
            }
            "Resize" | "Upsample" => {
                if !single_data {
                    self.block(i, format!("pruned channels reach `{op}` through input {slot}"));
                    return;
                }
                let same = self
                    .dims(&out)
                    .and_then(|d| d.get(layout.axis))
                    .and_then(Dim::known)
                    == Some(layout.extent);
                if same {
                    self.set(i, &out, layout);
                } else {
                    self.block(i, "Resize scales the pruned axis");
                }
            }
            "Shape" | "Size" => self.block(i, format!("`{op}` reads the size of a pruned tensor")),
            _ => self.block(i, format!("no layout rule for `{op}`")),
        }
    }

    fn elementwise(&mut self, i: usize, carried: &[(usize, ChannelLayout)], out: &str) {
        let node = self.graph.node(i);
        let op = node.op_type.clone();
        let Some(rank) = self.dims(out).map(<[Dim]>::len) else {
            self.block(i, format!("tensor `{out}` has no inferred shape"));
            return;
        };
        let mut aligned: Option<ChannelLayout> = None;
        for (slot, layout) in carried {
            if (op == "Div" || op == "Pow") && *slot == 1 {
                self.block(i, format!("pruned channels are the {} of `{op}`", if op == "Div" { "divisor" } else { "exponent" }));
                return;
            }
            let in_rank = self.dims(&node.inputs[*slot]).map_or(0, <[Dim]>::len);
            let l = ChannelLayout {
                axis: layout.axis + rank - in_rank,
                ..layout.clone()
            };
            match &aligned {
                None => aligned = Some(l),
                Some(prev) if *prev == l => {}
                Some(_) => {
                    self.block(i, format!("inputs of `{op}` carry the channels at different positions"));
                    return;
                }
            }
        }
        let layout = aligned.unwrap();
        let carried_slots: BTreeSet<usize> = carried.iter().map(|(s, _)| *s).collect();
        for (slot, name) in node.inputs.iter().enumerate() {
            if name.is_empty() || carried_slots.contains(&slot) {
                continue;
            }
            let in_dims: Vec<Dim> = self.dims(name).map(<[Dim]>::to_vec).unwrap_or_default();
            let off = rank.saturating_sub(in_dims.len());
            let at = (layout.axis >= off).then(|| &in_dims[layout.axis - off]);
            let spans = at.is_some_and(|d| *d != Dim::Known(1));
            if !spans {
                continue;
            }
            if self.graph.is_constant(name) {
                let name = name.clone();
                self.param(i, &name, layout.axis - off, layout.positions.clone(), SliceRole::Side);
            } else {
                self.block(
                    i,
                    format!("input `{name}` of `{op}` spans the pruned axis but is not pruned with it"),
                );
                return;
            }
        }
        self.set(i, out, layout);
    }

    fn concat(&mut self, i: usize, carried: &[(usize, ChannelLayout)], out: &str) {
        let node = self.graph.node(i);
        let Some(rank) = self.dims(out).map(<[Dim]>::len) else {
            self.block(i, format!("tensor `{out}` has no inferred shape"));
            return;
        };
        let mut axis = node.attr_int("axis", 0);
        if axis < 0 {
            axis += rank as i64;
        }
        let axis = axis as usize;
        let first_axis = carried[0].1.axis;
        if carried.iter().any(|(_, l)| l.axis != first_axis) {
            self.block(i, "Concat inputs carry the channels on different axes");
            return;
        }
        if first_axis != axis {
            let all = node.inputs.iter().filter(|t| !t.is_empty()).count();
            let same = carried.iter().all(|(_, l)| *l == carried[0].1);
            if carried.len() != all || !same {
                self.block(i, "Concat along another axis mixes pruned and unpruned inputs");
                return;
            }
            self.set(i, out, carried[0].1.clone());
            return;
        }
        let Some(extent) = self.dims(out).and_then(|d| d[axis].known()) else {
            self.block(i, "Concat output axis is dynamic");
            return;
        };
        let by_slot: BTreeMap<usize, &ChannelLayout> = carried.iter().map(|(s, l)| (*s, l)).collect();
        let mut positions = vec![Vec::new(); self.out.channels];
        let mut offset = 0usize;
        for (slot, name) in node.inputs.iter().enumerate() {
            if name.is_empty() {
                continue;
            }
            let Some(len) = self.dims(name).and_then(|d| d.get(axis)).and_then(Dim::known) else {
                self.block(i, format!("Concat input `{name}` has dynamic extent"));
                return;
            };
            if let Some(l) = by_slot.get(&slot) {
                let shifted = l.shifted(offset, extent);
                for (c, ps) in shifted.positions.into_iter().enumerate() {
                    positions[c].extend(ps);
                }
            }
            offset += len;
        }
        for ps in &mut positions {
            ps.sort_unstable();
        }
        self.set(i, out, ChannelLayout { axis, positions, extent });
    }

    fn reduce(&mut self, i: usize, layout: &ChannelLayout, single_data: bool, out: &str) {
        let node = self.graph.node(i);
        if !single_data {
            self.block(i, "pruned channels reach a reduction through a non-data input");
            return;
        }
        let rank = self.dims(&node.inputs[0]).map_or(0, <[Dim]>::len) as i64;
        let axes = match (node.attr_ints("axes"), node.input(1)) {
            (Some(a), _) => Some(a.to_vec()),
            (None, Some(t)) => match self.model.constant(t).and_then(|t| t.as_i64()) {
                Some(a) => Some(a),
                None => {
                    self.block(i, "reduction axes are not constant");
                    return;
                }
            },
            (None, None) => None,
        };
        let axes: BTreeSet<usize> = match axes {
            Some(a) if !a.is_empty() => a
                .iter()
                .map(|&v| if v < 0 { v + rank } else { v } as usize)
                .collect(),
            _ if node.attr_int("noop_with_empty_axes", 0) != 0 => BTreeSet::new(),
            _ => (0..rank as usize).collect(),
        };
        if axes.contains(&layout.axis) {
            let label = self.graph.label(i);
            self.out.diagnostics.push(Diagnostic::warning(
                Some(&label),
                format!("{} reduces over the pruned axis {}", node.op_type, layout.axis),
            ));
            self.out.mixing.push(label);
            return;
        }
        let keep = node.attr_int("keepdims", 1) != 0;
        let axis = if keep {
            layout.axis
        } else {
            layout.axis - axes.iter().filter(|&&a| a < layout.axis).count()
        };
        self.set(i, out, ChannelLayout { axis, ..layout.clone() });
    }

    fn reshape(&mut self, i: usize, layout: &ChannelLayout, out: &str) {
        let node = self.graph.node(i);
        let (Some(in_dims), Some(out_dims)) = (self.dims(&node.inputs[0]), self.dims(out)) else {
            self.block(i, "reshape without inferred shapes");
            return;
        };
        let (in_dims, out_dims) = (in_dims.to_vec(), out_dims.to_vec());
        // A symbolic batch must pass through unchanged as the leading dim.
        if let Some(Dim::Sym(s)) = in_dims.first() {
            if out_dims.first() != Some(&Dim::Sym(s.clone())) {
                self.block(i, "reshape moves the dynamic batch dimension");
                return;
            }
        }
        let concrete = |d: &[Dim]| -> Vec<usize> { d.iter().map(|x| x.known().unwrap_or(1)).collect() };
        let Some(mut mapped) = remap_reshape(&concrete(&in_dims), layout, &concrete(&out_dims)) else {
            self.block(i, "reshape splits the pruned channels across axes");
            return;
        };
        if mapped.axis == 0 && matches!(out_dims.first(), Some(Dim::Sym(_))) {
            self.block(i, "reshape maps the pruned channels onto the batch axis");
            return;
        }
        if node.op_type == "Reshape" {
            let shape_t = node.input(1).unwrap_or("").to_owned();
            let target = self.model.constant(&shape_t).and_then(|t| t.as_i64());
            match target {
                Some(t) if t.get(mapped.axis).is_some_and(|&v| v > 0) => {
                    self.out.shape_edits.push(ShapeEdit {
                        node: i,
                        tensor: shape_t,
                        index: mapped.axis,
                        layout: mapped.clone(),
                    });
                }
                Some(_) => {}
                None => {
                    self.block(i, "Reshape target is not a constant");
                    return;
                }
            }
        }
        mapped.positions.iter_mut().for_each(|p| p.sort_unstable());
        self.set(i, out, mapped);
    }

    /// Blocks when a sliced initializer is also read by a node outside the
    /// analysis, since slicing it would change that node too.
    fn check_sharing(&mut self) {
        let mut readers: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
        for s in self.out.slices() {
            readers.entry(s.tensor.clone()).or_default().insert(s.node);
        }
        for e in &self.out.shape_edits {
            readers.entry(e.tensor.clone()).or_default().insert(e.node);
        }
        let mut problems = Vec::new();
        for (tensor, nodes) in readers {
            let users = self.graph.consumers(&tensor).len();
            if users > nodes.len() || self.graph.is_graph_output(&tensor) {
                let n = *nodes.iter().next().unwrap();
                problems.push((n, format!("initializer `{tensor}` is shared with other nodes")));
            }
        }
        for (n, msg) in problems {
            self.block(n, msg);
        }
    }
}

/// Maps a channel layout through a row-major reshape.
///
/// Finds an output axis such that every index on it belongs to exactly one
/// channel (or to none) and returns the per-channel positions on it.
pub(crate) fn remap_reshape(
    in_dims: &[usize],
    layout: &ChannelLayout,
    out_dims: &[usize],
) -> Option<ChannelLayout> {
    let numel: usize = in_dims.iter().product();
    if numel != out_dims.iter().product::<usize>() || layout.axis >= in_dims.len() {
        return None;
    }
    const NONE: u32 = u32::MAX;
    let mut chan_of_pos = vec![NONE; in_dims[layout.axis]];
    for (c, ps) in layout.positions.iter().enumerate() {
        for &p in ps {
            chan_of_pos[p] = c as u32;
        }
    }
    let in_stride: usize = in_dims[layout.axis + 1..].iter().product();
    let extent = in_dims[layout.axis];
    let owner_of = |f: usize| chan_of_pos[(f / in_stride) % extent];

    const UNSET: u32 = u32::MAX - 1;
    'axes: for (b, &e) in out_dims.iter().enumerate() {
        let stride: usize = out_dims[b + 1..].iter().product();
        let mut owner = vec![UNSET; e];
        for f in 0..numel {
            let v = (f / stride) % e;
            let ch = owner_of(f);
            if owner[v] == UNSET {
                owner[v] = ch;
            } else if owner[v] != ch {
                continue 'axes;
            }
        }
        let mut positions = vec![Vec::new(); layout.positions.len()];
        for (v, &o) in owner.iter().enumerate() {
            if o != NONE && o != UNSET {
                positions[o as usize].push(v);
            }
        }
        if positions.iter().any(Vec::is_empty) {
            continue;
        }
        return Some(ChannelLayout {
            axis: b,
            positions,
            extent: e,
        });
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, infer_shapes, input_shapes_from_model};
    use crate::model::{synthesize_model, FixtureSpec};
    use crate::tree::{build_all_trees, merge_groups, TreePolicy};

    fn layouts(m: &ModelArchive, policy: TreePolicy) -> (NodeGraph, Vec<GroupLayout>) {
        let g = build_graph(m).unwrap();
        let shapes = infer_shapes(m, &g, &input_shapes_from_model(m).unwrap()).unwrap();
        let reg = AttributeRegistry::builtin();
        let trees = build_all_trees(&g, &reg, policy).unwrap();
        let groups = merge_groups(&g, &trees).unwrap();
        let ls = groups
            .iter()
            .map(|gr| analyze_group(m, &g, &shapes, &reg, gr))
            .collect();
        (g, ls)
    }

    #[test]
    fn flatten_expands_channels_into_blocks() {
        let l = ChannelLayout::identity(1, 3);
        let m = remap_reshape(&[1, 3, 2, 2], &l, &[1, 12]).unwrap();
        assert_eq!(m.axis, 1);
        assert_eq!(m.positions, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![8, 9, 10, 11]]);
    }

    #[test]
    fn unflatten_recovers_channel_axis() {
        let l = ChannelLayout {
            axis: 1,
            positions: vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]],
            extent: 8,
        };
        let m = remap_reshape(&[1, 8], &l, &[1, 2, 2, 2]).unwrap();
        assert_eq!(m.axis, 1);
        assert_eq!(m.positions, vec![vec![0], vec![1]]);
    }

    #[test]
    fn channel_split_across_axes_is_rejected() {
        let l = ChannelLayout::identity(1, 4);
        assert!(remap_reshape(&[1, 4], &l, &[1, 2, 2]).is_none());
    }

    #[test]
    fn every_fixture_group_is_prunable() {
        for t in crate::model::Template::ALL {
            let m = synthesize_model(&FixtureSpec::from(t)).unwrap();
            let (g, ls) = layouts(&m, TreePolicy::default());
            for l in &ls {
                assert!(l.is_prunable(), "{}: {:?}", t.name(), l.blocked);
                assert!(l.mixing.is_empty());
                // leaves found by the analysis are exactly the tree leaves
                let tree_leaves: BTreeSet<usize> = l
                    .members
                    .iter()
                    .flat_map(|&m| {
                        crate::tree::build_tree(&g, &AttributeRegistry::builtin(), m)
                            .unwrap()
                            .leaf_nodes()
                    })
                    .collect();
                let found: BTreeSet<usize> = l.leaves.iter().map(|s| s.node).collect();
                assert_eq!(found, tree_leaves, "{}", t.name());
            }
        }
    }

    #[test]
    fn vgg_classifier_input_is_area_expanded() {
        let m = synthesize_model(&FixtureSpec::new("alexnet_cifar")).unwrap();
        let (g, ls) = layouts(&m, TreePolicy::default());
        let conv5 = g.find("conv5").unwrap();
        let l = ls.iter().find(|l| l.members == [conv5]).unwrap();
        let leaf = &l.leaves[0];
        assert_eq!(g.label(leaf.node), "fc1");
        // 256 channels of 4x4 maps; fc1 stores W as [1024, 4096] (transB=1)
        assert_eq!(leaf.axis, 1);
        assert_eq!(leaf.k_axis, Some(0));
        assert_eq!(leaf.positions[1], (16..32).collect::<Vec<_>>());
    }

    #[test]
    fn fire_concat_offsets() {
        let m = synthesize_model(&FixtureSpec::new("fire_module")).unwrap();
        let (g, ls) = layouts(&m, TreePolicy::default());
        let e3 = g.find("expand3x3").unwrap();
        let l = ls.iter().find(|l| l.members == [e3]).unwrap();
        assert_eq!(l.leaves[0].positions[0], vec![16]);
        assert_eq!(l.tensors["concat_out"].extent, 32);
    }

    #[test]
    fn residual_side_params_follow_the_mask() {
        let m = synthesize_model(&FixtureSpec::new("residual_block")).unwrap();
        let (_, ls) = layouts(&m, TreePolicy::default());
        let l = &ls[0];
        let sides: Vec<&str> = l
            .params
            .iter()
            .filter(|p| p.role == SliceRole::Side)
            .map(|p| p.tensor.as_str())
            .collect();
        assert_eq!(sides, ["bn_a.scale", "bn_a.bias", "bn_a.mean", "bn_a.var"]);
        assert_eq!(l.producers.len(), 2);
    }

    #[test]
    fn grouped_conv_pins_the_group() {
        let mut m = synthesize_model(&FixtureSpec::new("conv_chain").depth(3)).unwrap();
        // make conv2 depthwise: 64 groups of 1 input channel
        let w = m.initializer_mut("conv2.weight").unwrap();
        w.dims = vec![64, 1, 3, 3];
        w.data = crate::model::TensorData::F32(vec![0.1; 64 * 9]);
        m.graph.nodes[2].attributes.insert("group".into(), crate::model::AttrValue::Int(64));
        let (_, ls) = layouts(&m, TreePolicy::default());
        assert!(!ls[0].is_prunable());
        assert!(ls[0].blocked[0].message.contains("grouped"));
    }
}
