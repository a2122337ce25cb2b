//! Physical removal of pruned channels.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::context::PruneContext;
use crate::error::{Diagnostic, Error, Result};
use crate::graph::{build_graph, infer_shapes, input_shapes_from_model, ShapeEnv};
use crate::model::{validate_syntax, AttrValue, DimSpec, InitializerTensor, ModelArchive, TensorData};
use crate::scoring::{GroupLayout, PruningPlan, SliceRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RewriteReason {
    ProducerOutput,
    LeafInput,
    SideParam,
}

impl From<SliceRole> for RewriteReason {
    fn from(role: SliceRole) -> Self {
        match role {
            SliceRole::ProducerWeight | SliceRole::ProducerBias => RewriteReason::ProducerOutput,
            SliceRole::Leaf => RewriteReason::LeafInput,
            SliceRole::Side => RewriteReason::SideParam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RewriteAction {
    pub target: String,
    pub axis: usize,
    pub keep_indices: Vec<usize>,
    pub reason: RewriteReason,
}

/// Gathers `keep` along `axis`.
pub fn slice_initializer(t: &InitializerTensor, axis: usize, keep: &[usize]) -> Result<InitializerTensor> {
    if axis >= t.dims.len() {
        return Err(Error::Axis(format!(
            "axis {axis} out of range for `{}` with rank {}",
            t.name,
            t.dims.len()
        )));
    }
    let extent = t.dims[axis];
    if let Some(&bad) = keep.iter().find(|&&k| k >= extent) {
        return Err(Error::Index(format!(
            "index {bad} out of bounds for axis {axis} of `{}` ({extent})",
            t.name
        )));
    }
    if keep.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Index(format!("keep indices for `{}` are not strictly increasing", t.name)));
    }
    let outer: usize = t.dims[..axis].iter().product();
    let inner: usize = t.dims[axis + 1..].iter().product();
    let mut dims = t.dims.clone();
    dims[axis] = keep.len();
    fn gather<T: Copy>(src: &[T], outer: usize, extent: usize, inner: usize, keep: &[usize]) -> Vec<T> {
        let mut out = Vec::with_capacity(outer * keep.len() * inner);
        for o in 0..outer {
            for &k in keep {
                let start = (o * extent + k) * inner;
                out.extend_from_slice(&src[start..start + inner]);
            }
        }
        out
    }
    let data = match &t.data {
        TensorData::F32(v) => TensorData::F32(gather(v, outer, extent, inner, keep)),
        TensorData::I64(_) | TensorData::Opaque(_) => {
            return Err(Error::UnsupportedDtype {
                tensor: t.name.clone(),
                dtype: t.dtype.0,
            })
        }
    };
    Ok(InitializerTensor {
        name: t.name.clone(),
        dtype: t.dtype,
        dims,
        data,
    })
}

/// Positions removed per `(initializer, axis)`, merged over all groups.
#[derive(Debug, Clone, Default)]
pub(crate) struct Removals {
    pub slices: BTreeMap<(String, usize), (BTreeSet<usize>, RewriteReason, SliceRole, usize)>,
    /// `(shape tensor, entry)` → number of removed positions.
    pub shape_edits: BTreeMap<(String, usize), usize>,
    /// Tensor → axis → removed positions.
    pub tensors: BTreeMap<String, BTreeMap<usize, BTreeSet<usize>>>,
}

pub(crate) fn collect_removals(layouts: &[GroupLayout], plan: &PruningPlan, graph: &crate::graph::NodeGraph) -> Result<Removals> {
    let mut r = Removals::default();
    for (layout, pg) in layouts.iter().zip(&plan.groups) {
        let pruned = pg.pruned();
        if pruned.is_empty() {
            continue;
        }
        if let Some(b) = layout.blocked.first() {
            return Err(Error::UnsupportedRewrite {
                node: b.node.clone().unwrap_or_else(|| pg.members.join(",")),
                reason: b.message.clone(),
            });
        }
        for s in layout.slices() {
            let positions: BTreeSet<usize> = pruned.iter().flat_map(|&i| s.positions[i].iter().copied()).collect();
            let entry = r
                .slices
                .entry((s.tensor.clone(), s.axis))
                .or_insert_with(|| (BTreeSet::new(), s.role.into(), s.role, s.node));
            if entry.0.intersection(&positions).next().is_some() {
                return Err(Error::MaskConflict(format!(
                    "`{}` axis {} would lose the same position twice",
                    s.tensor, s.axis
                )));
            }
            entry.0.extend(positions);
        }
        for e in &layout.shape_edits {
            let removed: usize = pruned.iter().map(|&i| e.layout.positions[i].len()).sum();
            *r.shape_edits.entry((e.tensor.clone(), e.index)).or_default() += removed;
        }
        for (t, l) in &layout.tensors {
            let set = r.tensors.entry(t.clone()).or_default().entry(l.axis).or_default();
            let positions = l.positions_of(pruned.iter().copied());
            if set.intersection(&positions).next().is_some() {
                let node = graph.producer(t).map(|n| graph.label(n)).unwrap_or_default();
                return Err(Error::MaskConflict(format!(
                    "tensor `{t}` (from `{node}`) loses the same position in two groups"
                )));
            }
            set.extend(positions);
        }
    }
    Ok(r)
}

/// Mutable access to a constant tensor, initializer or `Constant` value.
pub(crate) fn constant_mut<'m>(model: &'m mut ModelArchive, name: &str) -> Option<&'m mut InitializerTensor> {
    if model.initializer(name).is_some() {
        return model.initializer_mut(name);
    }
    model
        .graph
        .nodes
        .iter_mut()
        .find(|n| n.op_type == "Constant" && n.outputs.first().map(String::as_str) == Some(name))
        .and_then(|n| match n.attributes.get_mut("value") {
            Some(AttrValue::Tensor(t)) => Some(t),
            _ => None,
        })
}

/// Result of [`apply_plan`].
#[derive(Debug, Clone)]
pub struct Rewritten {
    pub model: ModelArchive,
    pub actions: Vec<RewriteAction>,
    /// Initializer elements removed over all actions.
    pub removed_elements: usize,
    pub shapes: ShapeEnv,
    pub warnings: Vec<Diagnostic>,
}

/// Slices every initializer tied to a pruned channel and refreshes the
/// graph's shape metadata. The input model is not modified.
pub fn apply_plan(ctx: &PruneContext, plan: &PruningPlan) -> Result<Rewritten> {
    let layouts = ctx.layouts_for(plan)?;
    let removals = collect_removals(&layouts, plan, &ctx.graph)?;
    let mut model = ctx.model.clone();
    let mut actions = Vec::new();
    let mut removed_elements = 0usize;

    for ((tensor, axis), (removed, reason, _, _)) in &removals.slices {
        if removed.is_empty() {
            continue;
        }
        let t = constant_mut(&mut model, tensor)
            .ok_or_else(|| Error::MaskConflict(format!("initializer `{tensor}` disappeared")))?;
        let extent = *t.dims.get(*axis).ok_or_else(|| Error::Axis(format!("`{tensor}` has no axis {axis}")))?;
        let keep: Vec<usize> = (0..extent).filter(|i| !removed.contains(i)).collect();
        if keep.is_empty() {
            return Err(Error::MaskConflict(format!("`{tensor}` axis {axis} would become empty")));
        }
        let before = t.numel();
        let sliced = slice_initializer(t, *axis, &keep)?;
        removed_elements += before - sliced.numel();
        *t = sliced;
        actions.push(RewriteAction {
            target: tensor.clone(),
            axis: *axis,
            keep_indices: keep,
            reason: *reason,
        });
    }

    for ((tensor, index), removed) in &removals.shape_edits {
        let t = constant_mut(&mut model, tensor)
            .ok_or_else(|| Error::MaskConflict(format!("shape tensor `{tensor}` disappeared")))?;
        match &mut t.data {
            TensorData::I64(v) if *index < v.len() => {
                v[*index] -= *removed as i64;
            }
            _ => {
                return Err(Error::UnsupportedDtype {
                    tensor: tensor.clone(),
                    dtype: t.dtype.0,
                })
            }
        }
    }

    // Declared shapes are the only shape source for custom ops.
    for vi in &mut model.graph.value_infos {
        let (Some(axes), Some(shape)) = (removals.tensors.get(&vi.name), vi.shape.as_mut()) else {
            continue;
        };
        for (axis, gone) in axes {
            if let Some(DimSpec::Value(v)) = shape.get_mut(*axis) {
                *v -= gone.len() as i64;
            }
        }
    }

    let shapes = refresh_shapes(&mut model)?;
    let errors: Vec<Diagnostic> = validate_syntax(&model).into_iter().filter(Diagnostic::is_error).collect();
    if !errors.is_empty() {
        return Err(Error::Validation(errors));
    }
    let warnings = layouts.iter().flat_map(|l| l.diagnostics.iter().cloned()).collect();
    Ok(Rewritten {
        model,
        actions,
        removed_elements,
        shapes,
        warnings,
    })
}

/// Re-infers shapes and rewrites graph output and value_info shapes from
/// them. Value infos whose shape can no longer be inferred are dropped.
pub(crate) fn refresh_shapes(model: &mut ModelArchive) -> Result<ShapeEnv> {
    let graph = build_graph(model)?;
    let shapes = infer_shapes(model, &graph, &input_shapes_from_model(model)?)?;
    for vi in &mut model.graph.outputs {
        if let Some(s) = shapes.get(&vi.name) {
            vi.shape = Some(s.to_dim_specs());
        }
    }
    model.graph.value_infos.retain_mut(|vi| match shapes.get(&vi.name) {
        Some(s) => {
            vi.shape = Some(s.to_dim_specs());
            true
        }
        None => false,
    });
    Ok(shapes)
}
