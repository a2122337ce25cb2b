use rayon::prelude::*;

use super::tensor::{for_each_offset, strides, TensorValue};
use crate::error::{Error, Result};
use crate::graph::{slice_params_checked, slice_range, window_geometry, Geometry};
use crate::model::{AttrValue, ModelArchive, NodeDef};

/// One node evaluation: the node, its evaluated inputs and the model for
/// constant lookups.
pub(super) struct Op<'a> {
    pub model: &'a ModelArchive,
    pub node: &'a NodeDef,
    pub label: &'a str,
    pub ins: Vec<Option<&'a TensorValue>>,
    pub opset: i64,
}

type F = fn(f64) -> f64;

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn simple_unary(op: &str) -> Option<F> {
    Some(match op {
        "Relu" => |x: f64| x.max(0.0),
        "Sigmoid" => sigmoid,
        "Tanh" => f64::tanh,
        "Erf" => erf,
        "Sqrt" => f64::sqrt,
        "Exp" => f64::exp,
        "Log" => f64::ln,
        "Neg" => |x: f64| -x,
        "Abs" => f64::abs,
        "Reciprocal" => |x: f64| 1.0 / x,
        "Floor" => f64::floor,
        "Ceil" => f64::ceil,
        "Sign" => sign,
        "Softplus" => softplus,
        "Mish" => |x: f64| x * softplus(x).tanh(),
        "HardSwish" => |x: f64| x * (x / 6.0 + 0.5).clamp(0.0, 1.0),
        "Identity" => |x: f64| x,
        _ => return None,
    })
}

impl<'a> Op<'a> {
    fn mismatch<T>(&self, detail: impl Into<String>) -> Result<T> {
        Err(Error::ShapeMismatch {
            node: self.label.to_owned(),
            detail: detail.into(),
        })
    }

    fn unsupported<T>(&self) -> Result<T> {
        Err(Error::UnsupportedOp {
            node: self.label.to_owned(),
            op: self.node.op_type.clone(),
        })
    }

    fn req(&self, slot: usize) -> Result<&'a TensorValue> {
        match self.ins.get(slot).copied().flatten() {
            Some(t) => Ok(t),
            None => self.mismatch(format!("missing input {slot}")),
        }
    }

    fn opt(&self, slot: usize) -> Option<&'a TensorValue> {
        self.ins.get(slot).copied().flatten()
    }

    /// Integer list from attribute `attr` or input `slot`.
    fn ints(&self, attr: Option<&str>, slot: usize) -> Option<Vec<i64>> {
        if let Some(v) = attr.and_then(|a| self.node.attr_ints(a)) {
            return Some(v.to_vec());
        }
        let name = self.node.input(slot)?;
        if let Some(v) = self.model.constant(name).and_then(|t| t.as_i64()) {
            return Some(v);
        }
        self.opt(slot).map(|t| t.data.iter().map(|&v| v.round() as i64).collect())
    }

    fn axis(&self, axis: i64, rank: usize) -> Result<usize> {
        let a = if axis < 0 { axis + rank as i64 } else { axis };
        if a < 0 || a as usize >= rank.max(1) {
            return self.mismatch(format!("axis {axis} out of range for rank {rank}"));
        }
        Ok(a as usize)
    }

    fn axes(&self, axes: &[i64], rank: usize) -> Result<Vec<usize>> {
        axes.iter().map(|&a| self.axis(a, rank)).collect()
    }

    pub(super) fn eval(&self) -> Result<Vec<TensorValue>> {
        let op = self.node.op_type.as_str();
        if let Some(f) = simple_unary(op) {
            return Ok(vec![map(self.req(0)?, f)]);
        }
        let one = |t: TensorValue| Ok(vec![t]);
        match op {
            "Add" | "Sub" | "Mul" | "Div" | "Pow" | "Max" | "Min" | "Sum" | "Mean" => one(self.elementwise()?),
            "LeakyRelu" => {
                let a = self.node.attr_float("alpha", 0.01) as f64;
                one(map_with(self.req(0)?, |x| if x < 0.0 { a * x } else { x }))
            }
            "Elu" => {
                let a = self.node.attr_float("alpha", 1.0) as f64;
                one(map_with(self.req(0)?, |x| if x < 0.0 { a * (x.exp() - 1.0) } else { x }))
            }
            "Selu" => {
                let a = self.node.attr_float("alpha", 1.673_263_2) as f64;
                let g = self.node.attr_float("gamma", 1.050_701) as f64;
                one(map_with(self.req(0)?, |x| if x <= 0.0 { g * (a * x.exp() - a) } else { g * x }))
            }
            "HardSigmoid" => {
                let a = self.node.attr_float("alpha", 0.2) as f64;
                let b = self.node.attr_float("beta", 0.5) as f64;
                one(map_with(self.req(0)?, |x| (a * x + b).clamp(0.0, 1.0)))
            }
            "Gelu" => {
                let tanh = self.node.attr_str("approximate") == Some("tanh");
                one(map_with(self.req(0)?, |x| {
                    if tanh {
                        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
                    } else {
                        0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
                    }
                }))
            }
            "Clip" => one(self.clip()?),
            "Cast" => one(self.cast()?),
            "Dropout" => {
                let x = self.req(0)?.clone();
                let mask = TensorValue {
                    dims: x.dims.clone(),
                    data: vec![1.0; x.numel()],
                };
                Ok(vec![x, mask])
            }
            "Softmax" | "LogSoftmax" => one(self.softmax(op == "LogSoftmax")?),
            "BatchNormalization" => one(self.batch_norm()?),
            "Constant" => one(self.constant()?),
            "Shape" => {
                let x = self.req(0)?;
                one(TensorValue {
                    dims: vec![x.rank()],
                    data: x.dims.iter().map(|&d| d as f32).collect(),
                })
            }
            "Conv" => one(self.conv()?),
            "ConvTranspose" => one(self.conv_transpose()?),
            "MaxPool" | "AveragePool" => {
                if op == "MaxPool" && self.node.outputs.iter().skip(1).any(|o| !o.is_empty()) {
                    return self.unsupported();
                }
                one(self.pool(op == "MaxPool")?)
            }
            "GlobalAveragePool" | "GlobalMaxPool" => one(self.global_pool(op == "GlobalMaxPool")?),
            "Gemm" => one(self.gemm()?),
            "MatMul" => one(self.matmul()?),
            "Flatten" => {
                let x = self.req(0)?;
                let a = self.node.attr_int("axis", 1);
                let a = if a < 0 { a + x.rank() as i64 } else { a };
                if a < 0 || a as usize > x.rank() {
                    return self.mismatch(format!("Flatten axis {a} out of range"));
                }
                let a = a as usize;
                one(reshaped(x, vec![x.dims[..a].iter().product(), x.dims[a..].iter().product()]))
            }
            "Reshape" => one(self.reshape()?),
            "Squeeze" => {
                let x = self.req(0)?;
                let axes = match self.ints(Some("axes"), 1) {
                    Some(a) => self.axes(&a, x.rank())?,
                    None => (0..x.rank()).filter(|&i| x.dims[i] == 1).collect(),
                };
                if axes.iter().any(|&a| x.dims[a] != 1) {
                    return self.mismatch("Squeeze of a non-unit axis");
                }
                let dims = x.dims.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect();
                one(reshaped(x, dims))
            }
            "Unsqueeze" => {
                let x = self.req(0)?;
                let Some(axes) = self.ints(Some("axes"), 1) else {
                    return self.mismatch("Unsqueeze without axes");
                };
                let rank = x.rank() + axes.len();
                let axes = self.axes(&axes, rank)?;
                let mut src = x.dims.iter();
                let dims = (0..rank)
                    .map(|i| if axes.contains(&i) { 1 } else { src.next().copied().unwrap_or(1) })
                    .collect();
                one(reshaped(x, dims))
            }
            "Transpose" => one(self.transpose()?),
            "Concat" => one(self.concat()?),
            "Pad" => one(self.pad()?),
            "ReduceMean" | "ReduceMax" | "ReduceMin" | "ReduceSum" | "ReduceProd" => one(self.reduce(op)?),
            "Slice" => one(self.slice()?),
            "Gather" => one(self.gather()?),
            "Resize" | "Upsample" => one(self.resize(op == "Upsample")?),
            _ => self.unsupported(),
        }
    }

    fn elementwise(&self) -> Result<TensorValue> {
        let ins: Vec<&TensorValue> = self.ins.iter().flatten().copied().collect();
        let Some((first, rest)) = ins.split_first() else {
            return self.mismatch("no inputs");
        };
        let op = self.node.op_type.as_str();
        let f: fn(f64, f64) -> f64 = match op {
            "Add" | "Sum" | "Mean" => |a, b| a + b,
            "Sub" => |a, b| a - b,
            "Mul" => |a, b| a * b,
            "Div" => |a, b| a / b,
            "Pow" => f64::powf,
            "Max" => f64::max,
            _ => f64::min,
        };
        if rest.is_empty() {
            return Ok((*first).clone());
        }
        if matches!(op, "Add" | "Sub" | "Mul" | "Div" | "Pow") && ins.len() != 2 {
            return self.mismatch(format!("{op} takes two inputs"));
        }
        // Variadic ops fold left to right in f64 before rounding once.
        let dims = match broadcast_dims(&ins.iter().map(|t| t.dims.as_slice()).collect::<Vec<_>>()) {
            Some(d) => d,
            None => {
                let shapes: Vec<&Vec<usize>> = ins.iter().map(|t| &t.dims).collect();
                return self.mismatch(format!("cannot broadcast {shapes:?}"));
            }
        };
        let st: Vec<Vec<usize>> = ins.iter().map(|t| broadcast_strides(&t.dims, &dims)).collect();
        let n = ins.len() as f64;
        let mean = op == "Mean";
        let mut data = Vec::with_capacity(dims.iter().product());
        for_each_offset(&dims, &st, |offs| {
            let mut acc = ins[0].data[offs[0]] as f64;
            for (t, &o) in ins[1..].iter().zip(&offs[1..]) {
                acc = f(acc, t.data[o] as f64);
            }
            if mean {
                acc /= n;
            }
            data.push(acc as f32);
        });
        Ok(TensorValue { dims, data })
    }

    fn clip(&self) -> Result<TensorValue> {
        let x = self.req(0)?;
        let bound = |attr: &str, slot: usize, default: f64| -> Result<f64> {
            if let Some(t) = self.opt(slot) {
                return match t.data.as_slice() {
                    [v] => Ok(*v as f64),
                    _ => self.mismatch(format!("Clip bound {slot} is not a scalar")),
                };
            }
            Ok(self.node.attributes.get(attr).map_or(default, |v| match v {
                AttrValue::Float(f) => *f as f64,
                _ => default,
            }))
        };
        let lo = bound("min", 1, f64::NEG_INFINITY)?;
        let hi = bound("max", 2, f64::INFINITY)?;
        Ok(map_with(x, |v| v.max(lo).min(hi)))
    }

    fn cast(&self) -> Result<TensorValue> {
        let x = self.req(0)?;
        let to = self.node.attr_int("to", 1);
        Ok(match to {
            // bool
            9 => map_with(x, |v| if v != 0.0 { 1.0 } else { 0.0 }),
            // signed and unsigned integers
            2..=7 | 12 | 13 => map_with(x, f64::trunc),
            _ => x.clone(),
        })
    }

    fn softmax(&self, log: bool) -> Result<TensorValue> {
        let x = self.req(0)?;
        let r = x.rank();
        let (outer, n, inner) = if self.opset >= 13 {
            let a = self.axis(self.node.attr_int("axis", -1), r)?;
            (x.dims[..a].iter().product(), x.dims[a], x.dims[a + 1..].iter().product())
        } else {
            let a = self.axis(self.node.attr_int("axis", 1), r)?;
            (x.dims[..a].iter().product::<usize>(), x.dims[a..].iter().product(), 1usize)
        };
        let mut data = vec![0.0f32; x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let m = (0..n).map(|k| x.data[at(k)] as f64).fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = (0..n).map(|k| (x.data[at(k)] as f64 - m).exp()).sum();
                for k in 0..n {
                    let z = x.data[at(k)] as f64 - m;
                    data[at(k)] = if log { z - sum.ln() } else { z.exp() / sum } as f32;
                }
            }
        }
        Ok(TensorValue {
            dims: x.dims.clone(),
            data,
        })
    }

    fn batch_norm(&self) -> Result<TensorValue> {
        let x = self.req(0)?;
        if x.rank() < 2 {
            return self.mismatch("BatchNormalization input has rank < 2");
        }
        let c = x.dims[1];
        let mut p = Vec::with_capacity(4);
        for slot in 1..5 {
            let t = self.req(slot)?;
            if t.numel() != c {
                return self.mismatch(format!("parameter {slot} has {} values for {c} channels", t.numel()));
            }
            p.push(t);
        }
        let eps = self.node.attr_float("epsilon", 1e-5) as f64;
        let inner: usize = x.dims[2..].iter().product();
        let coef: Vec<(f64, f64)> = (0..c)
            .map(|ch| {
                let (s, b, m, v) = (
                    p[0].data[ch] as f64,
                    p[1].data[ch] as f64,
                    p[2].data[ch] as f64,
                    p[3].data[ch] as f64,
                );
                let k = s / (v + eps).sqrt();
                (k, b - m * k)
            })
            .collect();
        let data = x
            .data
            .iter()
            .enumerate()
            .map(|(f, &v)| {
                let (k, b) = coef[(f / inner.max(1)) % c];
                (v as f64 * k + b) as f32
            })
            .collect();
        Ok(TensorValue {
            dims: x.dims.clone(),
            data,
        })
    }

    fn constant(&self) -> Result<TensorValue> {
        match self.node.attributes.get("value") {
            Some(AttrValue::Tensor(t)) => TensorValue::from_initializer(t),
            _ => match (
                self.node.attributes.get("value_float"),
                self.node.attributes.get("value_floats"),
                self.node.attributes.get("value_int"),
                self.node.attributes.get("value_ints"),
            ) {
                (Some(AttrValue::Float(v)), ..) => Ok(TensorValue::scalar(*v)),
                (_, Some(AttrValue::Floats(v)), ..) => TensorValue::new(vec![v.len()], v.clone()),
                (_, _, Some(AttrValue::Int(v)), _) => Ok(TensorValue::scalar(*v as f32)),
                (_, _, _, Some(AttrValue::Ints(v))) => {
                    TensorValue::new(vec![v.len()], v.iter().map(|&x| x as f32).collect())
                }
                _ => self.unsupported(),
            },
        }
    }

    fn planes(&self, kernel: Vec<usize>, spatial: &[usize]) -> Result<Plane> {
        if spatial.len() != kernel.len() || !(1..=2).contains(&spatial.len()) {
            return self.unsupported();
        }
        let g = window_geometry(self.node, kernel, spatial)?;
        Ok(Plane::from_geometry(&g, spatial))
    }

    fn conv(&self) -> Result<TensorValue> {
        let x = self.req(0)?;
        let w = self.req(1)?;
        let r = x.rank();
        if !(3..=4).contains(&r) || w.rank() != r {
            return self.mismatch(format!("input {:?} and weight {:?}", x.dims, w.dims));
        }
        let group = self.node.attr_int("group", 1).max(1) as usize;
        let (n, c) = (x.dims[0], x.dims[1]);
        let (co, cig) = (w.dims[0], w.dims[1]);
        if c != cig * group || co % group != 0 {
            return self.mismatch(format!("{c} input channels, weight {:?}, group {group}", w.dims));
        }
        let bias = self.opt(2);
        if bias.is_some_and(|b| b.numel() != co) {
            return self.mismatch("bias length differs from output channels");
        }
        let p = self.planes(w.dims[2..].to_vec(), &x.dims[2..])?;
        let cog = co / group;
        let wsize = cig * p.kh * p.kw;
        let in_plane = p.ih * p.iw;
        let out_plane = p.oh * p.ow;
        let mut data = vec![0.0f32; n * co * out_plane];
        data.par_chunks_mut(out_plane.max(1)).enumerate().for_each(|(idx, out)| {
            let (b, oc) = (idx / co, idx % co);
            let g = oc / cog;
            let init = bias.map_or(0.0, |t| t.data[oc] as f64);
            let mut acc = vec![init; out_plane];
            for icg in 0..cig {
                let ic = g * cig + icg;
                let plane = &x.data[(b * c + ic) * in_plane..][..in_plane];
                for ky in 0..p.kh {
                    for kx in 0..p.kw {
                        let wv = w.data[oc * wsize + (icg * p.kh + ky) * p.kw + kx] as f64;
                        p.accumulate(&mut acc, plane, wv, ky, kx);
                    }
                }
            }
            for (o, a) in out.iter_mut().zip(acc) {
                *o = a as f32;
            }
        });
        let mut dims = vec![n, co];
        if r == 4 {
            dims.push(p.oh);
        }
        dims.push(p.ow);
        Ok(TensorValue { dims, data })
    }

    fn conv_transpose(&self) -> Result<TensorValue> {
        let x = self.req(0)?;
        let w = self.req(1)?;
        let r = x.rank();
        if !(3..=4).contains(&r) || w.rank() != r {
            return self.mismatch(format!("input {:?} and weight {:?}", x.dims, w.dims));
        }
        if self.node.attr_str("auto_pad").is_some_and(|a| a != "NOTSET") || self.node.attr_ints("output_shape").is_some() {
            return self.unsupported();
        }
        let group = self.node.attr_int("group", 1).max(1) as usize;
        let (n, c) = (x.dims[0], x.dims[1]);
        if c != w.dims[0] || c % group != 0 {
            return self.mismatch(format!("{c} input channels, weight {:?}, group {group}", w.dims));
        }
        let cog = w.dims[1];
        let co = cog * group;
        let cig = c / group;
        let bias = self.opt(2);
        if bias.is_some_and(|b| b.numel() != co) {
            return self.mismatch("bias length differs from output channels");
        }
        let ns = r - 2;
        let get = |name: &str, default: usize, len: usize| -> Vec<usize> {
            self.node
                .attr_ints(name)
                .filter(|v| v.len() == len)
                .map(|v| v.iter().map(|&x| x.max(0) as usize).collect())
                .unwrap_or_else(|| vec![default; len])
        };
        let strides = get("strides", 1, ns);
        let dil = get("dilations", 1, ns);
        let pads = get("pads", 0, 2 * ns);
        let opad = get("output_padding", 0, ns);
        let kernel = &w.dims[2..];
        let mut out_sp = Vec::with_capacity(ns);
        for a in 0..ns {
            let full = strides[a] * (x.dims[2 + a] - 1) + opad[a] + (kernel[a] - 1) * dil[a] + 1;
            if full < pads[a] + pads[a + ns] {
                return self.mismatch("pads exceed the output");
            }
            out_sp.push(full - pads[a] - pads[a + ns]);
        }
        // Promote 1-D to 2-D with a unit height.
        let two = |v: &[usize], d: usize| if ns == 1 { (d, v[0]) } else { (v[0], v[1]) };
        let (ih, iw) = two(&x.dims[2..], 1);
        let (kh, kw) = two(kernel, 1);
        let (sh, sw) = two(&strides, 1);
        let (dh, dw) = two(&dil, 1);
        let (ph, pw) = two(&pads, 0);
        let (oh, ow) = two(&out_sp, 1);
        let in_plane = ih * iw;
        let out_plane = oh * ow;
        let mut data = vec![0.0f32; n * co * out_plane];
        data.par_chunks_mut(out_plane.max(1)).enumerate().for_each(|(idx, out)| {
            let (b, oc) = (idx / co, idx % co);
            let (g, ocg) = (oc / cog, oc % cog);
            let mut acc = vec![bias.map_or(0.0, |t| t.data[oc] as f64); out_plane];
            for icg in 0..cig {
                let ic = g * cig + icg;
                let plane = &x.data[(b * c + ic) * in_plane..][..in_plane];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w.data[((ic * cog + ocg) * kh + ky) * kw + kx] as f64;
                        for iy in 0..ih {
                            let oy = (iy * sh + ky * dh) as isize - ph as isize;
                            if oy < 0 || oy as usize >= oh {
                                continue;
                            }
                            for ix in 0..iw {
                                let ox = (ix * sw + kx * dw) as isize - pw as isize;
                                if ox >= 0 && (ox as usize) < ow {
                                    acc[oy as usize * ow + ox as usize] += wv * plane[iy * iw + ix] as f64;
                                }
                            }
                        }
                    }
                }
            }
            for (o, a) in out.iter_mut().zip(acc) {
                *o = a as f32;
            }
        });
        let mut dims = vec![n, co];
        dims.extend(out_sp);
        Ok(TensorValue { dims, data })
    }

    fn pool(&self, max: bool) -> Result<TensorValue> {
        let x = self.req(0)?;
        let kernel: Vec<usize> = match self.node.attr_ints("kernel_shape") {
            Some(k) => k.iter().map(|&v| v.max(1) as usize).collect(),
            None => return self.mismatch("pooling without kernel_shape"),
        };
        if x.rank() != kernel.len() + 2 {
            return self.mismatch("pooling kernel rank does not match input");
        }
        let p = self.planes(kernel, &x.dims[2..])?;
        let include_pad = self.node.attr_int("count_include_pad", 0) != 0;
        let (n, c) = (x.dims[0], x.dims[1]);
        let in_plane = p.ih * p.iw;
        let out_plane = p.oh * p.ow;
        let mut data = vec![0.0f32; n * c * out_plane];
        data.par_chunks_mut(out_plane.max(1)).enumerate().for_each(|(idx, out)| {
            let plane = &x.data[idx * in_plane..][..in_plane];
            for oy in 0..p.oh {
                for ox in 0..p.ow {
                    let mut acc = if max { f64::NEG_INFINITY } else { 0.0 };
                    let (mut valid, mut padded) = (0usize, 0usize);
                    for ky in 0..p.kh {
                        let iy = (oy * p.sh + ky * p.dh) as isize - p.ph as isize;
                        let y_in_pad = iy < (p.ih + p.ph_end) as isize;
                        for kx in 0..p.kw {
                            let ix = (ox * p.sw + kx * p.dw) as isize - p.pw as isize;
                            if y_in_pad && ix < (p.iw + p.pw_end) as isize {
                                padded += 1;
                            }
                            if iy < 0 || ix < 0 || iy as usize >= p.ih || ix as usize >= p.iw {
                                continue;
                            }
                            let v = plane[iy as usize * p.iw + ix as usize] as f64;
                            valid += 1;
                            acc = if max { acc.max(v) } else { acc + v };
                        }
                    }
                    out[oy * p.ow + ox] = if max {
                        acc
                    } else {
                        acc / (if include_pad { padded } else { valid }).max(1) as f64
                    } as f32;
                }
            }
        });
        let mut dims = vec![n, c];
        if x.rank() == 4 {
            dims.push(p.oh);
        }
        dims.push(p.ow);
        Ok(TensorValue { dims, data })
    }

    fn global_pool(&self, max: bool) -> Result<TensorValue> {
        let x = self.req(0)?;
        if x.rank() < 3 {
            return self.mismatch("global pooling needs spatial axes");
        }
        let inner: usize = x.dims[2..].iter().product();
        let data = x
            .data
            .chunks(inner.max(1))
            .map(|ch| {
                if max {
                    ch.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v))
                } else {
                    (ch.iter().map(|&v| v as f64).sum::<f64>() / inner as f64) as f32
                }
            })
            .collect();
        let mut dims = x.dims[..2].to_vec();
        dims.extend(std::iter::repeat_n(1, x.rank() - 2));
        Ok(TensorValue { dims, data })
    }

    fn gemm(&self) -> Result<TensorValue> {
        let a = self.req(0)?;
        let b = self.req(1)?;
        if a.rank() != 2 || b.rank() != 2 {
            return self.mismatch("Gemm operands must be 2-D");
        }
        let ta = self.node.attr_int("transA", 0) != 0;
        let tb = self.node.attr_int("transB", 0) != 0;
        let (m, k) = if ta { (a.dims[1], a.dims[0]) } else { (a.dims[0], a.dims[1]) };
        let (k2, n) = if tb { (b.dims[1], b.dims[0]) } else { (b.dims[0], b.dims[1]) };
        if k != k2 {
            return self.mismatch(format!("inner dimensions {k} and {k2} differ"));
        }
        let alpha = self.node.attr_float("alpha", 1.0) as f64;
        let beta = self.node.attr_float("beta", 1.0) as f64;
        let c = match self.opt(2) {
            Some(c) => match broadcast_dims(&[&c.dims, &[m, n]]) {
                Some(d) if d == [m, n] => Some((c, broadcast_strides(&c.dims, &[m, n]))),
                _ => return self.mismatch(format!("C of shape {:?} does not broadcast to [{m}, {n}]", c.dims)),
            },
            None => None,
        };
        let av = |i: usize, p: usize| if ta { a.data[p * m + i] } else { a.data[i * k + p] } as f64;
        let bv = |p: usize, j: usize| if tb { b.data[j * k + p] } else { b.data[p * n + j] } as f64;
        let mut data = vec![0.0f32; m * n];
        data.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
            for (j, out) in row.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for p in 0..k {
                    acc += av(i, p) * bv(p, j);
                }
                let mut y = alpha * acc;
                if let Some((c, st)) = &c {
                    y += beta * c.data[i * st[0] + j * st[1]] as f64;
                }
                *out = y as f32;
            }
        });
        Ok(TensorValue { dims: vec![m, n], data })
    }

    fn matmul(&self) -> Result<TensorValue> {
        let a = self.req(0)?;
        let b = self.req(1)?;
        if a.rank() == 0 || b.rank() == 0 {
            return self.mismatch("MatMul operands must have rank >= 1");
        }
        let mut ad = a.dims.clone();
        let mut bd = b.dims.clone();
        let (a_vec, b_vec) = (ad.len() == 1, bd.len() == 1);
        if a_vec {
            ad.insert(0, 1);
        }
        if b_vec {
            bd.push(1);
        }
        let (m, k) = (ad[ad.len() - 2], ad[ad.len() - 1]);
        let (k2, n) = (bd[bd.len() - 2], bd[bd.len() - 1]);
        if k != k2 {
            return self.mismatch(format!("inner dimensions {k} and {k2} differ"));
        }
        let (ab, bb) = (&ad[..ad.len() - 2], &bd[..bd.len() - 2]);
        let Some(batch) = broadcast_dims(&[ab, bb]) else {
            return self.mismatch(format!("batch dimensions {ab:?} and {bb:?} do not broadcast"));
        };
        let sa: Vec<usize> = broadcast_strides(ab, &batch).iter().map(|s| s * m * k).collect();
        let sb: Vec<usize> = broadcast_strides(bb, &batch).iter().map(|s| s * k * n).collect();
        let mut data = Vec::with_capacity(batch.iter().product::<usize>() * m * n);
        let mut offsets = Vec::new();
        for_each_offset(&batch, &[sa, sb], |o| offsets.push((o[0], o[1])));
        for (oa, ob) in offsets {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0f64;
                    for p in 0..k {
                        acc += a.data[oa + i * k + p] as f64 * b.data[ob + p * n + j] as f64;
                    }
                    data.push(acc as f32);
                }
            }
        }
        let mut dims = batch;
        if !a_vec {
            dims.push(m);
        }
        if !b_vec {
            dims.push(n);
        }
        Ok(TensorValue { dims, data })
    }

    fn reshape(&self) -> Result<TensorValue> {
        let x = self.req(0)?;
        let Some(target) = self.ints(None, 1) else {
            return self.mismatch("Reshape without a shape operand");
        };
        let allow_zero = self.node.attr_int("allowzero", 0) != 0;
        let mut dims = Vec::with_capacity(target.len());
        let mut infer = None;
        for (i, &t) in target.iter().enumerate() {
            match t {
                -1 if infer.is_none() => {
                    infer = Some(i);
                    dims.push(1);
                }
                0 if !allow_zero => match x.dims.get(i) {
                    Some(&d) => dims.push(d),
                    None => return self.mismatch("0 in Reshape target beyond input rank"),
                },
                t if t >= 0 => dims.push(t as usize),
                _ => return self.mismatch(format!("invalid Reshape target {target:?}")),
            }
        }
        let known: usize = dims.iter().product();
        if let Some(i) = infer {
            if known == 0 || x.numel() % known != 0 {
                return self.mismatch(format!("cannot reshape {:?} to {target:?}", x.dims));
            }
            dims[i] = x.numel() / known;
        } else if known != x.numel() {
            return self.mismatch(format!("cannot reshape {:?} to {target:?}", x.dims));
        }
        Ok(reshaped(x, dims))
    }

    fn transpose(&self) -> Result<TensorValue> {
        let x = self.req(0)?;
        let perm: Vec<usize> = match self.node.attr_ints("perm") {
            Some(p) => p.iter().map(|&v| v as usize).collect(),
            None => (0..x.rank()).rev().collect(),
        };
        let mut seen = vec![false; x.rank()];
        if perm.len() != x.rank() || perm.iter().any(|&p| p >= x.rank() || std::mem::replace(&mut seen[p], true)) {
            return self.mismatch(format!("bad permutation {perm:?}"));
        }
        let st = strides(&x.dims);
        let dims: Vec<usize> = perm.iter().map(|&p| x.dims[p]).collect();
        let pst: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
        let mut data = Vec::with_capacity(x.numel());
        for_each_offset(&dims, &[pst], |o| data.push(x.data[o[0]]));
        Ok(TensorValue { dims, data })
    }

    fn concat(&self) -> Result<TensorValue> {
        let ins: Vec<&TensorValue> = self.ins.iter().flatten().copied().collect();
        let Some(first) = ins.first() else {
            return self.mismatch("Concat without inputs");
        };
        let axis = self.axis(self.node.attr_int("axis", 0), first.rank())?;
        for t in &ins {
            let same = t.rank() == first.rank()
                && t.dims.iter().zip(&first.dims).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return self.mismatch(format!("Concat inputs {:?} and {:?} differ", first.dims, t.dims));
            }
        }
        let outer: usize = first.dims[..axis].iter().product();
        let inner: usize = first.dims[axis + 1..].iter().product();
        let mut dims = first.dims.clone();
        dims[axis] = ins.iter().map(|t| t.dims[axis]).sum();
        let mut data = Vec::with_capacity(dims.iter().product());
        for o in 0..outer {
            for t in &ins {
                let len = t.dims[axis] * inner;
                data.extend_from_slice(&t.data[o * len..(o + 1) * len]);
            }
        }
        Ok(TensorValue { dims, data })
    }

    fn pad(&self) -> Result<TensorValue> {
        let x = self.req(0)?;
        let r = x.rank();
        let Some(pads) = self.ints(Some("pads"), 1) else {
            return self.mismatch("Pad without pads");
        };
        if pads.len() != 2 * r {
            return self.mismatch("pads length must be twice the input rank");
        }
        let value = match self.opt(2) {
            Some(t) => t.data.first().copied().unwrap_or(0.0),
            None => self.node.attr_float("value", 0.0),
        };
        let mode = self.node.attr_str("mode").unwrap_or("constant");
        if !matches!(mode, "constant" | "edge" | "reflect") {
            return self.unsupported();
        }
        let mut dims = Vec::with_capacity(r);
        for a in 0..r {
            let d = x.dims[a] as i64 + pads[a] + pads[a + r];
            if d < 0 {
                return self.mismatch("negative padded size");
            }
            dims.push(d as usize);
        }
        let st = strides(&x.dims);
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; r];
        for _ in 0..n {
            let mut off = Some(0usize);
            for a in 0..r {
                let len = x.dims[a] as i64;
                let mut i = idx[a] as i64 - pads[a];
                if i < 0 || i >= len {
                    i = match mode {
                        "edge" if len > 0 => i.clamp(0, len - 1),
                        "reflect" if len > 1 => {
                            let period = 2 * (len - 1);
                            let m = i.rem_euclid(period);
                            if m < len { m } else { period - m }
                        }
                        _ => -1,
                    };
                }
                off = match (off, i >= 0 && i < len) {
                    (Some(o), true) => Some(o + i as usize * st[a]),
                    _ => None,
                };
            }
            data.push(off.map_or(value, |o| x.data[o]));
            for a in (0..r).rev() {
                idx[a] += 1;
                if idx[a] < dims[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        Ok(TensorValue { dims, data })
    }

    fn reduce(&self, op: &str) -> Result<TensorValue> {
        let x = self.req(0)?;
        let r = x.rank();
        let keep = self.node.attr_int("keepdims", 1) != 0;
        let axes: Vec<usize> = match self.ints(Some("axes"), 1) {
            Some(a) if !a.is_empty() => self.axes(&a, r)?,
            _ if self.node.attr_int("noop_with_empty_axes", 0) != 0 => return Ok(x.clone()),
            _ => (0..r).collect(),
        };
        let kept: Vec<usize> = (0..r).map(|a| if axes.contains(&a) { 1 } else { x.dims[a] }).collect();
        let ost = strides(&kept);
        // Output offset of every input element; reduced axes contribute 0.
        let st: Vec<usize> = (0..r).map(|a| if axes.contains(&a) { 0 } else { ost[a] }).collect();
        let n_out: usize = kept.iter().product();
        let init = match op {
            "ReduceMax" => f64::NEG_INFINITY,
            "ReduceMin" => f64::INFINITY,
            "ReduceProd" => 1.0,
            _ => 0.0,
        };
        let mut acc = vec![init; n_out];
        let mut pos = 0usize;
        for_each_offset(&x.dims, &[st], |o| {
            let v = x.data[pos] as f64;
            pos += 1;
            let a = &mut acc[o[0]];
            *a = match op {
                "ReduceMax" => a.max(v),
                "ReduceMin" => a.min(v),
                "ReduceProd" => *a * v,
                _ => *a + v,
            };
        });
        if op == "ReduceMean" {
            let count: usize = axes.iter().map(|&a| x.dims[a]).product();
            for a in &mut acc {
                *a /= count.max(1) as f64;
            }
        }
        let dims = if keep {
            kept
        } else {
            (0..r).filter(|a| !axes.contains(a)).map(|a| x.dims[a]).collect()
        };
        Ok(TensorValue {
            dims,
            data: acc.into_iter().map(|v| v as f32).collect(),
        })
    }

    fn slice(&self) -> Result<TensorValue> {
        let x = self.req(0)?;
        let (starts, ends, axes, steps) = slice_params_checked(self.model, self.node).or_else(|e| {
            // Operands computed at run time rather than stored as constants.
            let s = self.ints(Some("starts"), 1);
            let e2 = self.ints(Some("ends"), 2);
            match (s, e2) {
                (Some(s), Some(en)) => {
                    let n = s.len();
                    let axes = self.ints(Some("axes"), 3).unwrap_or_else(|| (0..n as i64).collect());
                    let steps = self.ints(None, 4).unwrap_or_else(|| vec![1; n]);
                    Ok((s, en, axes, steps))
                }
                _ => Err(e),
            }
        })?;
        let r = x.rank();
        let mut begin = vec![0i64; r];
        let mut step = vec![1i64; r];
        let mut dims = x.dims.clone();
        for j in 0..starts.len() {
            let a = self.axis(axes[j], r)?;
            if steps[j] == 0 {
                return self.mismatch("Slice step of zero");
            }
            let (s, _, len) = slice_range(x.dims[a], starts[j], ends[j], steps[j]);
            begin[a] = s;
            step[a] = steps[j];
            dims[a] = len;
        }
        let st = strides(&x.dims);
        let base: i64 = (0..r).map(|a| begin[a] * st[a] as i64).sum();
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; r];
        for _ in 0..n {
            let off = base + (0..r).map(|a| idx[a] as i64 * step[a] * st[a] as i64).sum::<i64>();
            data.push(x.data[off as usize]);
            for a in (0..r).rev() {
                idx[a] += 1;
                if idx[a] < dims[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        Ok(TensorValue { dims, data })
    }

    fn gather(&self) -> Result<TensorValue> {
        let x = self.req(0)?;
        let idx = self.req(1)?;
        let axis = self.axis(self.node.attr_int("axis", 0), x.rank())?;
        let extent = x.dims[axis] as i64;
        let mut picks = Vec::with_capacity(idx.numel());
        for &v in &idx.data {
            let i = v.round() as i64;
            let i = if i < 0 { i + extent } else { i };
            if i < 0 || i >= extent {
                return Err(Error::Index(format!("gather index {v} out of bounds for {extent}")));
            }
            picks.push(i as usize);
        }
        let outer: usize = x.dims[..axis].iter().product();
        let inner: usize = x.dims[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * picks.len() * inner);
        for o in 0..outer {
            for &p in &picks {
                let at = (o * x.dims[axis] + p) * inner;
                data.extend_from_slice(&x.data[at..at + inner]);
            }
        }
        let mut dims = x.dims[..axis].to_vec();
        dims.extend(&idx.dims);
        dims.extend(&x.dims[axis + 1..]);
        Ok(TensorValue { dims, data })
    }

    fn resize(&self, upsample: bool) -> Result<TensorValue> {
        let x = self.req(0)?;
        let r = x.rank();
        if self.node.attr_str("mode").unwrap_or("nearest") != "nearest" {
            return self.unsupported();
        }
        let legacy = upsample || self.opset < 11;
        let scales_slot = if legacy { 1 } else { 2 };
        let sizes = if legacy { None } else { self.ints(None, 3).filter(|s| !s.is_empty()) };
        let scales_attr = self.node.attributes.get("scales").and_then(|v| match v {
            AttrValue::Floats(f) => Some(f.iter().map(|&s| s as f64).collect::<Vec<_>>()),
            _ => None,
        });
        let (dims, scales): (Vec<usize>, Vec<f64>) = match sizes {
            Some(s) if s.len() == r => {
                let dims: Vec<usize> = s.iter().map(|&v| v.max(0) as usize).collect();
                let scales = dims.iter().zip(&x.dims).map(|(&o, &i)| o as f64 / i.max(1) as f64).collect();
                (dims, scales)
            }
            Some(_) => return self.mismatch("Resize sizes length differs from rank"),
            None => {
                let scales = match self.opt(scales_slot) {
                    Some(t) if t.numel() > 0 => t.data.iter().map(|&v| v as f64).collect(),
                    _ => match scales_attr {
                        Some(s) => s,
                        None => return self.mismatch("Resize without scales or sizes"),
                    },
                };
                if scales.len() != r {
                    return self.mismatch("Resize scales length differs from rank");
                }
                let dims = x.dims.iter().zip(&scales).map(|(&d, &s)| (d as f64 * s).floor() as usize).collect();
                (dims, scales)
            }
        };
        let ctm = if legacy {
            "asymmetric"
        } else {
            self.node.attr_str("coordinate_transformation_mode").unwrap_or("half_pixel")
        };
        let nearest = if legacy {
            "floor"
        } else {
            self.node.attr_str("nearest_mode").unwrap_or("round_prefer_floor")
        };
        let source = |a: usize, o: usize| -> usize {
            let (inn, out, s) = (x.dims[a] as f64, dims[a] as f64, scales[a]);
            let o = o as f64;
            let f = match ctm {
                "align_corners" if out > 1.0 => o * (inn - 1.0) / (out - 1.0),
                "align_corners" => 0.0,
                "pytorch_half_pixel" if out > 1.0 => (o + 0.5) / s - 0.5,
                "pytorch_half_pixel" => 0.0,
                "tf_half_pixel_for_nn" => (o + 0.5) / s,
                "asymmetric" => o / s,
                _ => (o + 0.5) / s - 0.5,
            };
            let half = (f - f.floor() - 0.5).abs() < 1e-9;
            let i = match nearest {
                "floor" => f.floor(),
                "ceil" => f.ceil(),
                "round_prefer_ceil" if half => f.ceil(),
                _ if half => f.floor(),
                _ => f.round(),
            };
            i.clamp(0.0, inn - 1.0) as usize
        };
        let maps: Vec<Vec<usize>> = (0..r).map(|a| (0..dims[a]).map(|o| source(a, o)).collect()).collect();
        let st = strides(&x.dims);
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; r];
        for _ in 0..n {
            let off: usize = (0..r).map(|a| maps[a][idx[a]] * st[a]).sum();
            data.push(x.data[off]);
            for a in (0..r).rev() {
                idx[a] += 1;
                if idx[a] < dims[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        Ok(TensorValue { dims, data })
    }
}

fn map(x: &TensorValue, f: F) -> TensorValue {
    map_with(x, f)
}

fn map_with(x: &TensorValue, f: impl Fn(f64) -> f64) -> TensorValue {
    TensorValue {
        dims: x.dims.clone(),
        data: x.data.iter().map(|&v| f(v as f64) as f32).collect(),
    }
}

fn reshaped(x: &TensorValue, dims: Vec<usize>) -> TensorValue {
    TensorValue {
        dims,
        data: x.data.clone(),
    }
}

pub(crate) fn broadcast_dims(shapes: &[&[usize]]) -> Option<Vec<usize>> {
    let rank = shapes.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut out = vec![1usize; rank];
    for s in shapes {
        let offset = rank - s.len();
        for (i, &d) in s.iter().enumerate() {
            let o = &mut out[offset + i];
            if *o == 1 {
                *o = d;
            } else if d != 1 && d != *o {
                return None;
            }
        }
    }
    Some(out)
}

/// Strides of `dims` viewed as broadcast to `out`; broadcast axes get 0.
fn broadcast_strides(dims: &[usize], out: &[usize]) -> Vec<usize> {
    let st = strides(dims);
    let offset = out.len() - dims.len();
    (0..out.len())
        .map(|a| {
            if a < offset || (dims[a - offset] == 1 && out[a] != 1) {
                0
            } else {
                st[a - offset]
            }
        })
        .collect()
}

/// 2-D window geometry; 1-D windows get a unit leading axis.
struct Plane {
    ih: usize,
    iw: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    dh: usize,
    dw: usize,
    ph: usize,
    pw: usize,
    ph_end: usize,
    pw_end: usize,
    oh: usize,
    ow: usize,
}

impl Plane {
    fn from_geometry(g: &Geometry, spatial: &[usize]) -> Self {
        let pick = |v: &[usize], d: usize| if v.len() == 1 { (d, v[0]) } else { (v[0], v[1]) };
        let (ih, iw) = pick(spatial, 1);
        let (kh, kw) = pick(&g.kernel, 1);
        let (sh, sw) = pick(&g.strides, 1);
        let (dh, dw) = pick(&g.dilations, 1);
        let (ph, pw) = pick(&g.pads_begin, 0);
        let (ph_end, pw_end) = pick(&g.pads_end, 0);
        let (oh, ow) = pick(&g.out, 1);
        Plane {
            ih,
            iw,
            kh,
            kw,
            sh,
            sw,
            dh,
            dw,
            ph,
            pw,
            ph_end,
            pw_end,
            oh,
            ow,
        }
    }

    /// `acc[oy, ox] += wv * plane[oy*sh + ky*dh - ph, ox*sw + kx*dw - pw]`
    /// over all in-bounds positions.
    fn accumulate(&self, acc: &mut [f64], plane: &[f32], wv: f64, ky: usize, kx: usize) {
        let xoff = (kx * self.dw) as isize - self.pw as isize;
        let lo = if xoff >= 0 {
            0
        } else {
            ((-xoff) as usize).div_ceil(self.sw)
        };
        let last = self.iw as isize - 1 - xoff;
        if last < 0 {
            return;
        }
        let hi = self.ow.min(last as usize / self.sw + 1);
        if lo >= hi {
            return;
        }
        for oy in 0..self.oh {
            let iy = (oy * self.sh + ky * self.dh) as isize - self.ph as isize;
            if iy < 0 || iy as usize >= self.ih {
                continue;
            }
            let row = &plane[iy as usize * self.iw..][..self.iw];
            let out = &mut acc[oy * self.ow..][..self.ow];
            if self.sw == 1 {
                let start = (lo as isize + xoff) as usize;
                for (o, &v) in out[lo..hi].iter_mut().zip(&row[start..start + hi - lo]) {
                    *o += wv * v as f64;
                }
            } else {
                for (ox, o) in out.iter_mut().enumerate().take(hi).skip(lo) {
                    *o += wv * row[((ox * self.sw) as isize + xoff) as usize] as f64;
                }
            }
        }
    }
}
