use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use super::NodeGraph;
use crate::error::{Error, Result};
use crate::model::{DimSpec, ModelArchive, NodeDef};

/// One tensor dimension: a concrete extent or a symbolic (batch-like) one.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub enum Dim {
    Known(usize),
    Sym(String),
}

impl Dim {
    pub fn known(&self) -> Option<usize> {
        match self {
            Dim::Known(v) => Some(*v),
            Dim::Sym(_) => None,
        }
    }

    fn unknown() -> Dim {
        Dim::Sym("?".into())
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dim::Known(v) => write!(f, "{v}"),
            Dim::Sym(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct TensorShape(pub Vec<Dim>);

impl TensorShape {
    pub fn known(dims: &[usize]) -> Self {
        TensorShape(dims.iter().map(|&d| Dim::Known(d)).collect())
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn dims(&self) -> &[Dim] {
        &self.0
    }

    /// Concrete dims with every symbolic dimension replaced by `batch`.
    pub fn with_batch(&self, batch: usize) -> Vec<usize> {
        self.0.iter().map(|d| d.known().unwrap_or(batch)).collect()
    }

    /// Concrete dims, if no dimension is symbolic.
    pub fn concrete(&self) -> Option<Vec<usize>> {
        self.0.iter().map(Dim::known).collect()
    }

    pub fn to_dim_specs(&self) -> Vec<DimSpec> {
        self.0
            .iter()
            .map(|d| match d {
                Dim::Known(v) => DimSpec::Value(*v as i64),
                Dim::Sym(s) if s == "?" => DimSpec::Unknown,
                Dim::Sym(s) => DimSpec::Param(s.clone()),
            })
            .collect()
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(Dim::to_string).collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

/// Inferred shapes keyed by tensor name.
///
/// Tensors computed by unsupported operators (or downstream of them) are
/// recorded as unresolved together with the reason; asking for one of them
/// through [`ShapeEnv::require`] yields `UnsupportedOpShape`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ShapeEnv {
    shapes: BTreeMap<String, TensorShape>,
    unresolved: BTreeMap<String, (String, String, String)>,
}

impl ShapeEnv {
    pub fn get(&self, tensor: &str) -> Option<&TensorShape> {
        self.shapes.get(tensor)
    }

    pub fn require(&self, tensor: &str) -> Result<&TensorShape> {
        if let Some(s) = self.shapes.get(tensor) {
            return Ok(s);
        }
        let (node, op, reason) = self.unresolved.get(tensor).cloned().unwrap_or_else(|| {
            (
                tensor.to_owned(),
                "?".into(),
                "tensor has no inferred shape".into(),
            )
        });
        Err(Error::UnsupportedOpShape { node, op, reason })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorShape)> {
        self.shapes.iter()
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    /// Nodes whose outputs could not be inferred, as `(node, op, reason)`.
    pub fn unresolved(&self) -> impl Iterator<Item = &(String, String, String)> {
        self.unresolved.values()
    }
}

/// Shapes of the non-initializer graph inputs as declared in the model.
pub fn input_shapes_from_model(model: &ModelArchive) -> Result<BTreeMap<String, TensorShape>> {
    let mut out = BTreeMap::new();
    for vi in &model.graph.inputs {
        if model.initializer(&vi.name).is_some() {
            continue;
        }
        let dims = vi.shape.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("graph input `{}` has no declared shape", vi.name))
        })?;
        let shape = dims
            .iter()
            .map(|d| match d {
                DimSpec::Value(v) if *v > 0 => Dim::Known(*v as usize),
                DimSpec::Param(p) => Dim::Sym(p.clone()),
                _ => Dim::unknown(),
            })
            .collect();
        out.insert(vi.name.clone(), TensorShape(shape));
    }
    Ok(out)
}

/// Same as [`input_shapes_from_model`] with symbolic dims replaced by `batch`.
pub(crate) fn concrete_input_shapes(
    model: &ModelArchive,
    batch: usize,
) -> Result<BTreeMap<String, TensorShape>> {
    Ok(input_shapes_from_model(model)?
        .into_iter()
        .map(|(k, v)| (k, TensorShape::known(&v.with_batch(batch))))
        .collect())
}

enum Fail {
    Unsupported(String),
    Mismatch(String),
}

type OpResult = std::result::Result<Vec<TensorShape>, Fail>;

fn mismatch<T>(msg: impl Into<String>) -> std::result::Result<T, Fail> {
    Err(Fail::Mismatch(msg.into()))
}

fn unsupported<T>(msg: impl Into<String>) -> std::result::Result<T, Fail> {
    Err(Fail::Unsupported(msg.into()))
}

/// Infers shapes in topological order, starting from `input_shapes`
/// (falling back to declared graph-input shapes) and initializer dims.
pub fn infer_shapes(
    model: &ModelArchive,
    graph: &NodeGraph,
    input_shapes: &BTreeMap<String, TensorShape>,
) -> Result<ShapeEnv> {
    let mut env = ShapeEnv::default();
    let declared = input_shapes_from_model(model).unwrap_or_default();
    for vi in &model.graph.inputs {
        if let Some(s) = input_shapes.get(&vi.name).or_else(|| declared.get(&vi.name)) {
            env.shapes.insert(vi.name.clone(), s.clone());
        }
    }
    for t in &model.graph.initializers {
        env.shapes.insert(t.name.clone(), TensorShape::known(&t.dims));
    }

    let value_infos: BTreeMap<&str, &[DimSpec]> = model
        .graph
        .value_infos
        .iter()
        .filter_map(|vi| Some((vi.name.as_str(), vi.shape.as_deref()?)))
        .collect();

    for &i in graph.topo_order() {
        let node = graph.node(i);
        let label = graph.label(i);
        let mut ins: Vec<Option<&TensorShape>> = Vec::with_capacity(node.inputs.len());
        let mut blocked = None;
        for name in &node.inputs {
            if name.is_empty() {
                ins.push(None);
                continue;
            }
            match env.shapes.get(name) {
                Some(s) => ins.push(Some(s)),
                None => {
                    blocked = Some(
                        env.unresolved
                            .get(name)
                            .map(|(n, _, _)| format!("depends on unresolved node `{n}`"))
                            .unwrap_or_else(|| format!("input `{name}` has no shape")),
                    );
                    break;
                }
            }
        }
        let result = match blocked {
            Some(reason) => Err(Fail::Unsupported(reason)),
            None => node_shapes(model, node, &ins).or_else(|e| match e {
                Fail::Unsupported(reason) => declared_shape(node, &ins, &value_infos).ok_or(Fail::Unsupported(reason)),
                e => Err(e),
            }),
        };
        match result {
            Ok(outs) => {
                for (name, s) in node.outputs.iter().zip(outs) {
                    if !name.is_empty() {
                        env.shapes.insert(name.clone(), s);
                    }
                }
            }
            Err(Fail::Mismatch(detail)) => {
                return Err(Error::ShapeMismatch {
                    node: label,
                    detail,
                })
            }
            Err(Fail::Unsupported(reason)) => {
                for name in node.outputs.iter().filter(|o| !o.is_empty()) {
                    env.unresolved.insert(
                        name.clone(),
                        (label.clone(), node.op_type.clone(), reason.clone()),
                    );
                }
            }
        }
    }
    Ok(env)
}

/// Falls back to the declared value_info of a single-output node.
/// Symbolic dims are taken from the first input when the ranks match.
fn declared_shape(
    node: &NodeDef,
    ins: &[Option<&TensorShape>],
    declared: &BTreeMap<&str, &[DimSpec]>,
) -> Option<Vec<TensorShape>> {
    let [out] = node.outputs.as_slice() else {
        return None;
    };
    let dims = declared.get(out.as_str())?;
    let first = ins.first().copied().flatten().filter(|s| s.rank() == dims.len());
    let shape = dims
        .iter()
        .enumerate()
        .map(|(a, d)| match d {
            DimSpec::Value(v) if *v > 0 => Some(Dim::Known(*v as usize)),
            _ => first.map(|s| s.dims()[a].clone()),
        })
        .collect::<Option<Vec<Dim>>>()?;
    Some(vec![TensorShape(shape)])
}

fn req<'a>(ins: &[Option<&'a TensorShape>], slot: usize) -> std::result::Result<&'a TensorShape, Fail> {
    ins.get(slot)
        .copied()
        .flatten()
        .ok_or_else(|| Fail::Mismatch(format!("missing input {slot}")))
}

fn norm_axis(axis: i64, rank: usize) -> std::result::Result<usize, Fail> {
    let a = if axis < 0 { axis + rank as i64 } else { axis };
    if a < 0 || a as usize >= rank.max(1) {
        return mismatch(format!("axis {axis} out of range for rank {rank}"));
    }
    Ok(a as usize)
}

fn const_ints(model: &ModelArchive, node: &NodeDef, slot: usize) -> Option<Vec<i64>> {
    node.input(slot)
        .and_then(|name| model.constant(name))
        .and_then(|t| t.as_i64())
}

/// Integer list from attribute `attr` or, for newer opsets, from input `slot`.
fn ints_attr_or_input(
    model: &ModelArchive,
    node: &NodeDef,
    attr: &str,
    slot: usize,
) -> std::result::Result<Option<Vec<i64>>, Fail> {
    if let Some(v) = node.attr_ints(attr) {
        return Ok(Some(v.to_vec()));
    }
    match node.input(slot) {
        None => Ok(None),
        Some(name) => match model.constant(name).and_then(|t| t.as_i64()) {
            Some(v) => Ok(Some(v)),
            None => unsupported(format!("`{attr}` operand `{name}` is not a constant")),
        },
    }
}

fn broadcast(shapes: &[&TensorShape]) -> std::result::Result<TensorShape, Fail> {
    let rank = shapes.iter().map(|s| s.rank()).max().unwrap_or(0);
    let mut out = Vec::with_capacity(rank);
    for i in 0..rank {
        let mut acc = Dim::Known(1);
        for s in shapes {
            let offset = rank - s.rank();
            if i < offset {
                continue;
            }
            let d = &s.0[i - offset];
            acc = match (&acc, d) {
                (Dim::Known(1), _) => d.clone(),
                (_, Dim::Known(1)) => acc,
                (Dim::Known(a), Dim::Known(b)) if a == b => acc,
                (Dim::Known(a), Dim::Known(b)) => {
                    return mismatch(format!("cannot broadcast {a} with {b}"))
                }
                (Dim::Known(_), Dim::Sym(_)) => acc,
                (Dim::Sym(_), Dim::Known(_)) => d.clone(),
                (Dim::Sym(_), Dim::Sym(_)) => acc,
            };
        }
        out.push(acc);
    }
    Ok(TensorShape(out))
}

fn product(dims: &[Dim]) -> Dim {
    let mut known = 1usize;
    let mut syms: Vec<&Dim> = Vec::new();
    for d in dims {
        match d {
            Dim::Known(v) => known *= v,
            s => syms.push(s),
        }
    }
    match syms.as_slice() {
        [] => Dim::Known(known),
        [s] if known == 1 => (*s).clone(),
        _ => Dim::unknown(),
    }
}

struct Window {
    kernel: Vec<usize>,
    strides: Vec<usize>,
    dilations: Vec<usize>,
    pads: Vec<usize>,
    auto_pad: String,
    ceil_mode: bool,
}

impl Window {
    fn from_node(node: &NodeDef, kernel: Vec<usize>) -> std::result::Result<Self, Fail> {
        let n = kernel.len();
        let get = |name: &str, default: usize, len: usize| -> std::result::Result<Vec<usize>, Fail> {
            match node.attr_ints(name) {
                Some(v) if v.len() == len && v.iter().all(|&x| x >= 0) => {
                    Ok(v.iter().map(|&x| x as usize).collect())
                }
                Some(v) => mismatch(format!("attribute `{name}` = {v:?} is malformed")),
                None => Ok(vec![default; len]),
            }
        };
        Ok(Window {
            strides: get("strides", 1, n)?,
            dilations: get("dilations", 1, n)?,
            pads: get("pads", 0, 2 * n)?,
            auto_pad: node.attr_str("auto_pad").unwrap_or("NOTSET").to_owned(),
            ceil_mode: node.attr_int("ceil_mode", 0) != 0,
            kernel,
        })
    }

    fn out_dim(&self, axis: usize, input: &Dim) -> std::result::Result<Dim, Fail> {
        let Some(len) = input.known() else {
            return Ok(Dim::unknown());
        };
        let (k, s, d) = (self.kernel[axis], self.strides[axis], self.dilations[axis]);
        if s == 0 {
            return mismatch("zero stride");
        }
        let eff = (k - 1) * d + 1;
        match self.auto_pad.as_str() {
            "SAME_UPPER" | "SAME_LOWER" => return Ok(Dim::Known(len.div_ceil(s))),
            "VALID" => {
                if len < eff {
                    return mismatch("window larger than input");
                }
                return Ok(Dim::Known((len - eff) / s + 1));
            }
            _ => {}
        }
        let n = self.kernel.len();
        let padded = len + self.pads[axis] + self.pads[axis + n];
        if padded < eff {
            return mismatch(format!("window {eff} larger than padded input {padded}"));
        }
        let span = padded - eff;
        let mut out = if self.ceil_mode { span.div_ceil(s) } else { span / s } + 1;
        if self.ceil_mode && (out - 1) * s >= len + self.pads[axis] {
            out -= 1;
        }
        Ok(Dim::Known(out))
    }

    /// Fully resolved begin/end pads for axis `axis`, given the input length.
    pub(crate) fn resolved_pads(&self, axis: usize, len: usize) -> (usize, usize) {
        let n = self.kernel.len();
        match self.auto_pad.as_str() {
            "SAME_UPPER" | "SAME_LOWER" => {
                let s = self.strides[axis];
                let out = len.div_ceil(s);
                let eff = (self.kernel[axis] - 1) * self.dilations[axis] + 1;
                let total = ((out - 1) * s + eff).saturating_sub(len);
                if self.auto_pad == "SAME_UPPER" {
                    (total / 2, total - total / 2)
                } else {
                    (total - total / 2, total / 2)
                }
            }
            "VALID" => (0, 0),
            _ => (self.pads[axis], self.pads[axis + n]),
        }
    }
}

/// Convolution/pooling geometry for one node, shared with the interpreter.
pub(crate) struct Geometry {
    pub kernel: Vec<usize>,
    pub strides: Vec<usize>,
    pub dilations: Vec<usize>,
    pub pads_begin: Vec<usize>,
    pub pads_end: Vec<usize>,
    pub out: Vec<usize>,
}

pub(crate) fn window_geometry(
    node: &NodeDef,
    kernel: Vec<usize>,
    spatial: &[usize],
) -> Result<Geometry> {
    let w = Window::from_node(node, kernel).map_err(|f| fail_to_error(node, f))?;
    let mut out = Vec::with_capacity(spatial.len());
    let mut pads_begin = Vec::with_capacity(spatial.len());
    let mut pads_end = Vec::with_capacity(spatial.len());
    for (axis, &len) in spatial.iter().enumerate() {
        out.push(
            w.out_dim(axis, &Dim::Known(len))
                .map_err(|f| fail_to_error(node, f))?
                .known()
                .unwrap(),
        );
        let (b, e) = w.resolved_pads(axis, len);
        pads_begin.push(b);
        pads_end.push(e);
    }
    Ok(Geometry {
        kernel: w.kernel,
        strides: w.strides,
        dilations: w.dilations,
        pads_begin,
        pads_end,
        out,
    })
}

fn fail_to_error(node: &NodeDef, f: Fail) -> Error {
    match f {
        Fail::Mismatch(detail) => Error::ShapeMismatch {
            node: node.name.clone(),
            detail,
        },
        Fail::Unsupported(reason) => Error::UnsupportedOpShape {
            node: node.name.clone(),
            op: node.op_type.clone(),
            reason,
        },
    }
}

fn kernel_from_weight(w: &TensorShape) -> std::result::Result<Vec<usize>, Fail> {
    w.0[2..]
        .iter()
        .map(|d| d.known().ok_or_else(|| Fail::Mismatch("symbolic kernel size".into())))
        .collect()
}

/// Slice bounds for one axis following ONNX clamping rules.
pub(crate) fn slice_range(dim: usize, start: i64, end: i64, step: i64) -> (i64, i64, usize) {
    let d = dim as i64;
    let fix = |v: i64| if v < 0 { v + d } else { v };
    let (s, e) = if step > 0 {
        (fix(start).clamp(0, d), fix(end).clamp(0, d))
    } else {
        (fix(start).clamp(0, d - 1), fix(end).clamp(-1, d - 1))
    };
    let len = if step > 0 {
        if e > s { (e - s + step - 1) / step } else { 0 }
    } else if s > e {
        (s - e + (-step) - 1) / (-step)
    } else {
        0
    };
    (s, e, len as usize)
}

const UNARY: &[&str] = &[
    "Relu", "Sigmoid", "Tanh", "Erf", "Sqrt", "Cast", "Identity", "Softmax", "LogSoftmax", "Clip",
    "LeakyRelu", "HardSigmoid", "HardSwish", "Abs", "Neg", "Exp", "Log", "Elu", "Selu", "Mish",
    "Softplus", "Reciprocal", "Floor", "Ceil", "Not", "Sign", "Gelu",
];

const ELEMENTWISE: &[&str] = &["Add", "Sub", "Mul", "Div", "Pow", "Max", "Min", "Sum", "Mean"];

fn node_shapes(model: &ModelArchive, node: &NodeDef, ins: &[Option<&TensorShape>]) -> OpResult {
    let op = node.op_type.as_str();
    if UNARY.contains(&op) {
        return Ok(vec![req(ins, 0)?.clone()]);
    }
    if ELEMENTWISE.contains(&op) {
        let shapes: Vec<&TensorShape> = ins.iter().flatten().copied().collect();
        return Ok(vec![broadcast(&shapes)?]);
    }
    match op {
        "Dropout" => {
            let x = req(ins, 0)?.clone();
            Ok(vec![x.clone(), x])
        }
        "BatchNormalization" => {
            let x = req(ins, 0)?;
            if x.rank() < 2 {
                return mismatch("BatchNormalization input has rank < 2");
            }
            let c = &x.0[1];
            for slot in 1..5 {
                let p = req(ins, slot)?;
                if p.rank() != 1 || (c.known().is_some() && p.0[0] != *c) {
                    return mismatch(format!("parameter {slot} has shape {p}, expected [{c}]"));
                }
            }
            Ok(vec![x.clone()])
        }
        "Constant" => match node.attributes.get("value") {
            Some(crate::model::AttrValue::Tensor(t)) => Ok(vec![TensorShape::known(&t.dims)]),
            _ => unsupported("Constant without a tensor `value`"),
        },
        "Shape" => Ok(vec![TensorShape::known(&[req(ins, 0)?.rank()])]),
        "Conv" => {
            let x = req(ins, 0)?;
            let w = req(ins, 1)?;
            if x.rank() < 3 || w.rank() != x.rank() {
                return mismatch(format!("Conv input {x} and weight {w} ranks disagree"));
            }
            let group = node.attr_int("group", 1).max(1) as usize;
            if let (Some(c), Some(wc)) = (x.0[1].known(), w.0[1].known()) {
                if c != wc * group {
                    return mismatch(format!("input has {c} channels, weight expects {}", wc * group));
                }
            }
            let win = Window::from_node(node, kernel_from_weight(w)?)?;
            let mut out = vec![x.0[0].clone(), w.0[0].clone()];
            for (axis, d) in x.0[2..].iter().enumerate() {
                out.push(win.out_dim(axis, d)?);
            }
            Ok(vec![TensorShape(out)])
        }
        "ConvTranspose" => {
            let x = req(ins, 0)?;
            let w = req(ins, 1)?;
            if x.rank() < 3 || w.rank() != x.rank() {
                return mismatch("ConvTranspose ranks disagree");
            }
            let group = node.attr_int("group", 1).max(1) as usize;
            let kernel = kernel_from_weight(w)?;
            let n = kernel.len();
            let win = Window::from_node(node, kernel.clone())?;
            let out_pad = node
                .attr_ints("output_padding")
                .map(|v| v.iter().map(|&x| x as usize).collect())
                .unwrap_or_else(|| vec![0; n]);
            let cout = match w.0[1].known() {
                Some(c) => Dim::Known(c * group),
                None => Dim::unknown(),
            };
            let mut out = vec![x.0[0].clone(), cout];
            if let Some(explicit) = node.attr_ints("output_shape") {
                out.extend(explicit.iter().map(|&v| Dim::Known(v as usize)));
            } else {
                for (axis, d) in x.0[2..].iter().enumerate() {
                    out.push(match d.known() {
                        Some(len) => {
                            let eff = (kernel[axis] - 1) * win.dilations[axis] + 1;
                            let full = win.strides[axis] * (len - 1) + out_pad[axis] + eff;
                            Dim::Known(full - win.pads[axis] - win.pads[axis + n])
                        }
                        None => Dim::unknown(),
                    });
                }
            }
            Ok(vec![TensorShape(out)])
        }
        "MaxPool" | "AveragePool" | "LpPool" => {
            let x = req(ins, 0)?;
            let kernel: Vec<usize> = node
                .attr_ints("kernel_shape")
                .ok_or_else(|| Fail::Mismatch("pooling without kernel_shape".into()))?
                .iter()
                .map(|&k| k as usize)
                .collect();
            if x.rank() != kernel.len() + 2 {
                return mismatch("pooling kernel rank does not match input");
            }
            let win = Window::from_node(node, kernel)?;
            let mut out = vec![x.0[0].clone(), x.0[1].clone()];
            for (axis, d) in x.0[2..].iter().enumerate() {
                out.push(win.out_dim(axis, d)?);
            }
            let out = TensorShape(out);
            Ok(if op == "MaxPool" && node.outputs.len() > 1 {
                vec![out.clone(), out]
            } else {
                vec![out]
            })
        }
        "GlobalAveragePool" | "GlobalMaxPool" => {
            let x = req(ins, 0)?;
            let mut out = x.0[..2.min(x.rank())].to_vec();
            out.extend(std::iter::repeat_n(Dim::Known(1), x.rank().saturating_sub(2)));
            Ok(vec![TensorShape(out)])
        }
        "Gemm" => {
            let a = req(ins, 0)?;
            let b = req(ins, 1)?;
            if a.rank() != 2 || b.rank() != 2 {
                return mismatch("Gemm operands must be 2-D");
            }
            let (m, k) = if node.attr_int("transA", 0) != 0 {
                (&a.0[1], &a.0[0])
            } else {
                (&a.0[0], &a.0[1])
            };
            let (k2, n) = if node.attr_int("transB", 0) != 0 {
                (&b.0[1], &b.0[0])
            } else {
                (&b.0[0], &b.0[1])
            };
            if let (Some(x), Some(y)) = (k.known(), k2.known()) {
                if x != y {
                    return mismatch(format!("inner dimensions {x} and {y} differ"));
                }
            }
            Ok(vec![TensorShape(vec![m.clone(), n.clone()])])
        }
        "MatMul" => {
            let a = req(ins, 0)?;
            let b = req(ins, 1)?;
            Ok(vec![matmul_shape(a, b)?])
        }
        "Flatten" => {
            let x = req(ins, 0)?;
            let axis = node.attr_int("axis", 1);
            let a = if axis < 0 { axis + x.rank() as i64 } else { axis };
            if a < 0 || a as usize > x.rank() {
                return mismatch(format!("Flatten axis {axis} out of range"));
            }
            let a = a as usize;
            Ok(vec![TensorShape(vec![product(&x.0[..a]), product(&x.0[a..])])])
        }
        "Reshape" => {
            let x = req(ins, 0)?;
            let Some(target) = const_ints(model, node, 1) else {
                return unsupported("Reshape shape operand is not a constant");
            };
            Ok(vec![reshape_shape(x, &target, node.attr_int("allowzero", 0) != 0)?])
        }
        "Transpose" => {
            let x = req(ins, 0)?;
            let perm: Vec<usize> = match node.attr_ints("perm") {
                Some(p) => p.iter().map(|&v| v as usize).collect(),
                None => (0..x.rank()).rev().collect(),
            };
            if perm.len() != x.rank() || perm.iter().any(|&p| p >= x.rank()) {
                return mismatch(format!("bad permutation {perm:?}"));
            }
            Ok(vec![TensorShape(perm.iter().map(|&p| x.0[p].clone()).collect())])
        }
        "Concat" => {
            let shapes: Vec<&TensorShape> = ins.iter().flatten().copied().collect();
            let first = shapes
                .first()
                .ok_or_else(|| Fail::Mismatch("Concat without inputs".into()))?;
            let axis = norm_axis(node.attr_int("axis", 0), first.rank())?;
            let mut out = first.0.clone();
            let mut total = Some(0usize);
            for s in &shapes {
                if s.rank() != first.rank() {
                    return mismatch("Concat inputs differ in rank");
                }
                for (i, (d, e)) in s.0.iter().zip(&first.0).enumerate() {
                    if i != axis {
                        if let (Some(x), Some(y)) = (d.known(), e.known()) {
                            if x != y {
                                return mismatch(format!("Concat inputs differ on axis {i}"));
                            }
                        }
                    }
                }
                total = total.zip(s.0[axis].known()).map(|(t, v)| t + v);
            }
            out[axis] = total.map(Dim::Known).unwrap_or_else(Dim::unknown);
            Ok(vec![TensorShape(out)])
        }
        "Pad" => {
            let x = req(ins, 0)?;
            let pads = match ints_attr_or_input(model, node, "pads", 1)? {
                Some(p) => p,
                None => return mismatch("Pad without pads"),
            };
            let r = x.rank();
            if pads.len() != 2 * r {
                return mismatch("pads length must be twice the input rank");
            }
            let out = x
                .0
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    let extra = pads[i] + pads[i + r];
                    match d.known() {
                        Some(v) => Dim::Known((v as i64 + extra).max(0) as usize),
                        None if extra == 0 => d.clone(),
                        None => Dim::unknown(),
                    }
                })
                .collect();
            Ok(vec![TensorShape(out)])
        }
        "ReduceMean" | "ReduceMax" | "ReduceMin" | "ReduceSum" | "ReduceProd" => {
            let x = req(ins, 0)?;
            let keep = node.attr_int("keepdims", 1) != 0;
            let axes = ints_attr_or_input(model, node, "axes", 1)?;
            let axes: Vec<usize> = match axes {
                Some(a) if !a.is_empty() => a
                    .iter()
                    .map(|&v| norm_axis(v, x.rank()))
                    .collect::<std::result::Result<_, _>>()?,
                _ if node.attr_int("noop_with_empty_axes", 0) != 0 => {
                    return Ok(vec![x.clone()]);
                }
                _ => (0..x.rank()).collect(),
            };
            let out = x
                .0
                .iter()
                .enumerate()
                .filter_map(|(i, d)| match (axes.contains(&i), keep) {
                    (true, true) => Some(Dim::Known(1)),
                    (true, false) => None,
                    (false, _) => Some(d.clone()),
                })
                .collect();
            Ok(vec![TensorShape(out)])
        }
        "Unsqueeze" => {
            let x = req(ins, 0)?;
            let axes = ints_attr_or_input(model, node, "axes", 1)?
                .ok_or_else(|| Fail::Mismatch("Unsqueeze without axes".into()))?;
            let rank = x.rank() + axes.len();
            let mut axes: Vec<usize> = axes
                .iter()
                .map(|&a| norm_axis(a, rank))
                .collect::<std::result::Result<_, _>>()?;
            axes.sort_unstable();
            let mut src = x.0.iter();
            let out = (0..rank)
                .map(|i| {
                    if axes.contains(&i) {
                        Dim::Known(1)
                    } else {
                        src.next().cloned().unwrap_or(Dim::Known(1))
                    }
                })
                .collect();
            Ok(vec![TensorShape(out)])
        }
        "Squeeze" => {
            let x = req(ins, 0)?;
            let axes = ints_attr_or_input(model, node, "axes", 1)?;
            let axes: Vec<usize> = match axes {
                Some(a) => a
                    .iter()
                    .map(|&v| norm_axis(v, x.rank()))
                    .collect::<std::result::Result<_, _>>()?,
                None => (0..x.rank()).filter(|&i| x.0[i] == Dim::Known(1)).collect(),
            };
            Ok(vec![TensorShape(
                x.0.iter()
                    .enumerate()
                    .filter(|(i, _)| !axes.contains(i))
                    .map(|(_, d)| d.clone())
                    .collect(),
            )])
        }
        "Slice" => {
            let x = req(ins, 0)?;
            let (starts, ends, axes, steps) = slice_params(model, node)?;
            let mut out = x.0.clone();
            for (j, &axis) in axes.iter().enumerate() {
                let a = norm_axis(axis, x.rank())?;
                let step = steps[j];
                if step == 0 {
                    return mismatch("Slice step of zero");
                }
                match x.0[a].known() {
                    Some(dim) => out[a] = Dim::Known(slice_range(dim, starts[j], ends[j], step).2),
                    None if starts[j] == 0 && ends[j] >= i32::MAX as i64 && step == 1 => {}
                    None => out[a] = Dim::unknown(),
                }
            }
            Ok(vec![TensorShape(out)])
        }
        "Gather" => {
            let x = req(ins, 0)?;
            let idx = req(ins, 1)?;
            let axis = norm_axis(node.attr_int("axis", 0), x.rank())?;
            let mut out = x.0[..axis].to_vec();
            out.extend(idx.0.iter().cloned());
            out.extend(x.0[axis + 1..].iter().cloned());
            Ok(vec![TensorShape(out)])
        }
        "Resize" | "Upsample" => {
            let x = req(ins, 0)?;
            let (scales_slot, sizes_slot) = if op == "Upsample" { (1, 99) } else { (2, 3) };
            if let Some(sizes) = const_ints(model, node, sizes_slot) {
                return Ok(vec![TensorShape::known(
                    &sizes.iter().map(|&v| v as usize).collect::<Vec<_>>(),
                )]);
            }
            let scales = node
                .input(scales_slot)
                .and_then(|n| model.constant(n))
                .and_then(|t| t.to_f64())
                .ok_or_else(|| Fail::Unsupported("Resize scales are not constant".into()))?;
            if scales.len() != x.rank() {
                return mismatch("Resize scales length differs from rank");
            }
            Ok(vec![TensorShape(
                x.0.iter()
                    .zip(&scales)
                    .map(|(d, &s)| match d.known() {
                        Some(v) => Dim::Known((v as f64 * s).floor() as usize),
                        None if s == 1.0 => d.clone(),
                        None => Dim::unknown(),
                    })
                    .collect(),
            )])
        }
        _ => unsupported(format!("no shape rule for `{op}`")),
    }
}

fn slice_params(
    model: &ModelArchive,
    node: &NodeDef,
) -> std::result::Result<(Vec<i64>, Vec<i64>, Vec<i64>, Vec<i64>), Fail> {
    let starts = ints_attr_or_input(model, node, "starts", 1)?
        .ok_or_else(|| Fail::Mismatch("Slice without starts".into()))?;
    let ends = ints_attr_or_input(model, node, "ends", 2)?
        .ok_or_else(|| Fail::Mismatch("Slice without ends".into()))?;
    let axes = ints_attr_or_input(model, node, "axes", 3)?
        .unwrap_or_else(|| (0..starts.len() as i64).collect());
    let steps = match node.input(4) {
        Some(_) => ints_attr_or_input(model, node, "steps", 4)?.unwrap(),
        None => vec![1; starts.len()],
    };
    if ends.len() != starts.len() || axes.len() != starts.len() || steps.len() != starts.len() {
        return mismatch("Slice parameter lengths differ");
    }
    Ok((starts, ends, axes, steps))
}

pub(crate) fn slice_params_checked(
    model: &ModelArchive,
    node: &NodeDef,
) -> Result<(Vec<i64>, Vec<i64>, Vec<i64>, Vec<i64>)> {
    slice_params(model, node).map_err(|f| fail_to_error(node, f))
}

fn matmul_shape(a: &TensorShape, b: &TensorShape) -> std::result::Result<TensorShape, Fail> {
    if a.rank() == 0 || b.rank() == 0 {
        return mismatch("MatMul operands must have rank >= 1");
    }
    let mut a2 = a.0.clone();
    let mut b2 = b.0.clone();
    let a_vec = a2.len() == 1;
    let b_vec = b2.len() == 1;
    if a_vec {
        a2.insert(0, Dim::Known(1));
    }
    if b_vec {
        b2.push(Dim::Known(1));
    }
    let (m, k) = (&a2[a2.len() - 2], &a2[a2.len() - 1]);
    let (k2, n) = (&b2[b2.len() - 2], &b2[b2.len() - 1]);
    if let (Some(x), Some(y)) = (k.known(), k2.known()) {
        if x != y {
            return mismatch(format!("inner dimensions {x} and {y} differ"));
        }
    }
    let batch = broadcast(&[
        &TensorShape(a2[..a2.len() - 2].to_vec()),
        &TensorShape(b2[..b2.len() - 2].to_vec()),
    ])?;
    let mut out = batch.0;
    if !a_vec {
        out.push(m.clone());
    }
    if !b_vec {
        out.push(n.clone());
    }
    Ok(TensorShape(out))
}

fn reshape_shape(
    x: &TensorShape,
    target: &[i64],
    allow_zero: bool,
) -> std::result::Result<TensorShape, Fail> {
    let mut out: Vec<Option<Dim>> = Vec::with_capacity(target.len());
    let mut infer_at = None;
    for (i, &t) in target.iter().enumerate() {
        match t {
            -1 => {
                if infer_at.replace(i).is_some() {
                    return mismatch("more than one -1 in Reshape target");
                }
                out.push(None);
            }
            0 if !allow_zero => out.push(Some(
                x.0.get(i)
                    .cloned()
                    .ok_or_else(|| Fail::Mismatch("0 in Reshape target beyond input rank".into()))?,
            )),
            t if t >= 0 => out.push(Some(Dim::Known(t as usize))),
            t => return mismatch(format!("invalid Reshape target entry {t}")),
        }
    }
    if let Some(at) = infer_at {
        let known_dims: Vec<Dim> = out.iter().flatten().cloned().collect();
        let mut in_syms: Vec<&Dim> = x.0.iter().filter(|d| d.known().is_none()).collect();
        let in_known: usize = x.0.iter().filter_map(Dim::known).product();
        let mut out_known = 1usize;
        for d in &known_dims {
            match d {
                Dim::Known(v) => out_known *= v,
                s => {
                    if let Some(pos) = in_syms.iter().position(|e| *e == s) {
                        in_syms.remove(pos);
                    } else {
                        return unsupported("symbolic dimension introduced by Reshape");
                    }
                }
            }
        }
        let inferred = if out_known == 0 || !in_known.is_multiple_of(out_known) {
            return mismatch(format!("cannot reshape {x} to {target:?}"));
        } else {
            let ratio = in_known / out_known;
            match in_syms.as_slice() {
                [] => Dim::Known(ratio),
                [s] if ratio == 1 => (*s).clone(),
                _ => Dim::unknown(),
            }
        };
        out[at] = Some(inferred);
    } else if let Some(total) = x.concrete().map(|d| d.iter().product::<usize>()) {
        let new_total: Option<usize> = out.iter().map(|d| d.as_ref().and_then(Dim::known)).product();
        if new_total.is_some_and(|n| n != total) {
            return mismatch(format!("cannot reshape {x} to {target:?}"));
        }
    }
    Ok(TensorShape(out.into_iter().map(Option::unwrap).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use crate::model::{AttrValue, ElemType, GraphDef, InitializerTensor, OpsetImport, ValueInfo};

    fn single(node: NodeDef, inputs: &[(&str, &[usize])], inits: Vec<InitializerTensor>) -> TensorShape {
        let out = node.outputs[0].clone();
        let graph = GraphDef {
            name: "t".into(),
            nodes: vec![node],
            inputs: inputs
                .iter()
                .map(|(n, d)| {
                    ValueInfo::tensor(
                        *n,
                        ElemType::FLOAT,
                        d.iter().map(|&v| DimSpec::Value(v as i64)).collect(),
                    )
                })
                .collect(),
            outputs: vec![],
            initializers: inits,
            value_infos: vec![],
        };
        let m = ModelArchive {
            ir_version: 8,
            opset_imports: vec![OpsetImport { domain: String::new(), version: 13 }],
            producer_name: String::new(),
            producer_version: String::new(),
            domain: String::new(),
            model_version: 0,
            graph,
        };
        let g = build_graph(&m).unwrap();
        let env = infer_shapes(&m, &g, &BTreeMap::new()).unwrap();
        env.require(&out).unwrap().clone()
    }

    fn zeros(name: &str, dims: &[usize]) -> InitializerTensor {
        InitializerTensor::from_f32(name, dims.to_vec(), vec![0.0; dims.iter().product()])
    }

    #[test]
    fn conv_same_padding() {
        let conv = NodeDef::new("c", "Conv", &["x", "w"], &["y"])
            .with_attr("pads", AttrValue::Ints(vec![1, 1, 1, 1]))
            .with_attr("strides", AttrValue::Ints(vec![1, 1]));
        let s = single(conv, &[("x", &[1, 3, 32, 32])], vec![zeros("w", &[64, 3, 3, 3])]);
        assert_eq!(s, TensorShape::known(&[1, 64, 32, 32]));
    }

    #[test]
    fn strided_conv_and_dilation() {
        let conv = NodeDef::new("c", "Conv", &["x", "w"], &["y"])
            .with_attr("strides", AttrValue::Ints(vec![2, 2]))
            .with_attr("dilations", AttrValue::Ints(vec![2, 2]));
        let s = single(conv, &[("x", &[1, 3, 17, 17])], vec![zeros("w", &[8, 3, 3, 3])]);
        // effective kernel 5: (17 - 5) / 2 + 1
        assert_eq!(s, TensorShape::known(&[1, 8, 7, 7]));
    }

    #[test]
    fn flatten_axis_one() {
        let f = NodeDef::new("f", "Flatten", &["x"], &["y"]).with_attr("axis", AttrValue::Int(1));
        assert_eq!(single(f, &[("x", &[1, 64, 4, 4])], vec![]), TensorShape::known(&[1, 1024]));
    }

    #[test]
    fn concat_channels() {
        let c = NodeDef::new("c", "Concat", &["a", "b"], &["y"]).with_attr("axis", AttrValue::Int(1));
        let s = single(c, &[("a", &[1, 64, 8, 8]), ("b", &[1, 64, 8, 8])], vec![]);
        assert_eq!(s, TensorShape::known(&[1, 128, 8, 8]));
    }

    #[test]
    fn gemm_trans_b() {
        let g = NodeDef::new("g", "Gemm", &["a", "w"], &["y"]).with_attr("transB", AttrValue::Int(1));
        let s = single(g, &[("a", &[2, 16])], vec![zeros("w", &[10, 16])]);
        assert_eq!(s, TensorShape::known(&[2, 10]));
    }

    #[test]
    fn matmul_broadcasts_batch() {
        let g = NodeDef::new("m", "MatMul", &["a", "w"], &["y"]);
        let s = single(g, &[("a", &[3, 1, 4])], vec![zeros("w", &[4, 5])]);
        assert_eq!(s, TensorShape::known(&[3, 1, 5]));
    }

    #[test]
    fn reshape_with_constant_target() {
        let r = NodeDef::new("r", "Reshape", &["x", "s"], &["y"]);
        let s = single(
            r,
            &[("x", &[2, 8, 2, 2])],
            vec![InitializerTensor::from_i64("s", vec![2], vec![0, -1])],
        );
        assert_eq!(s, TensorShape::known(&[2, 32]));
    }

    #[test]
    fn max_pool_ceil_mode() {
        let p = NodeDef::new("p", "MaxPool", &["x"], &["y"])
            .with_attr("kernel_shape", AttrValue::Ints(vec![3, 3]))
            .with_attr("strides", AttrValue::Ints(vec![2, 2]))
            .with_attr("ceil_mode", AttrValue::Int(1));
        assert_eq!(single(p, &[("x", &[1, 4, 8, 8])], vec![]), TensorShape::known(&[1, 4, 4, 4]));
    }

    #[test]
    fn slice_negative_bounds() {
        let s = NodeDef::new("s", "Slice", &["x", "st", "en", "ax"], &["y"]);
        let out = single(
            s,
            &[("x", &[1, 10, 6])],
            vec![
                InitializerTensor::from_i64("st", vec![1], vec![-4]),
                InitializerTensor::from_i64("en", vec![1], vec![i64::MAX]),
                InitializerTensor::from_i64("ax", vec![1], vec![1]),
            ],
        );
        assert_eq!(out, TensorShape::known(&[1, 4, 6]));
    }

    #[test]
    fn symbolic_batch_propagates() {
        let m = crate::model::synthesize_model(&crate::model::FixtureSpec::new("residual_stage")).unwrap();
        let g = build_graph(&m).unwrap();
        let env = infer_shapes(&m, &g, &input_shapes_from_model(&m).unwrap()).unwrap();
        assert_eq!(env.require("flatten_out").unwrap().to_string(), "[N, 16]");
        assert_eq!(env.require("fc_out").unwrap().to_string(), "[N, 10]");
    }

    #[test]
    fn unsupported_op_is_recorded_not_fatal() {
        let m = {
            let mut m = crate::model::synthesize_model(&crate::model::FixtureSpec::new("conv_chain")).unwrap();
            m.graph.nodes[1].op_type = "FancyOp".into();
            m
        };
        let g = build_graph(&m).unwrap();
        let env = infer_shapes(&m, &g, &BTreeMap::new()).unwrap();
        assert!(env.get("conv1_out").is_some());
        assert!(matches!(
            env.require("conv2_out"),
            Err(Error::UnsupportedOpShape { .. })
        ));
    }
}
