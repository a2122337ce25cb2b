use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::InitializerTensor;

/// Dense row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorValue {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorValue {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor of shape {dims:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(TensorValue { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        TensorValue { dims, data: vec![0.0; n] }
    }

    pub fn scalar(v: f32) -> Self {
        TensorValue {
            dims: Vec::new(),
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Numeric copy of a constant; integer tensors are converted to `f32`.
    pub fn from_initializer(t: &InitializerTensor) -> Result<Self> {
        let values = t.to_f64().ok_or_else(|| Error::UnsupportedDtype {
            tensor: t.name.clone(),
            dtype: t.dtype.0,
        })?;
        TensorValue::new(t.dims.clone(), values.into_iter().map(|v| v as f32).collect())
    }

    /// Keeps only `keep` (sorted, unique) along `axis`.
    pub fn select(&self, axis: usize, keep: &[usize]) -> Result<TensorValue> {
        let extent = *self
            .dims
            .get(axis)
            .ok_or_else(|| Error::Axis(format!("tensor of rank {} has no axis {axis}", self.rank())))?;
        if let Some(&bad) = keep.iter().find(|&&k| k >= extent) {
            return Err(Error::Index(format!("index {bad} out of bounds for axis {axis} ({extent})")));
        }
        let outer: usize = self.dims[..axis].iter().product();
        let inner: usize = self.dims[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * keep.len() * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            for &k in keep {
                data.extend_from_slice(&self.data[base + k * inner..base + (k + 1) * inner]);
            }
        }
        let mut dims = self.dims.clone();
        dims[axis] = keep.len();
        Ok(TensorValue { dims, data })
    }

    /// Largest absolute elementwise difference, or `None` when the shapes
    /// differ. NaN on either side counts as an infinite difference.
    pub fn max_abs_diff(&self, other: &TensorValue) -> Option<f64> {
        if self.dims != other.dims {
            return None;
        }
        Some(self.data.iter().zip(&other.data).fold(0.0f64, |m, (&a, &b)| {
            let d = (a as f64 - b as f64).abs();
            if d.is_nan() {
                f64::INFINITY
            } else {
                m.max(d)
            }
        }))
    }
}

pub(crate) fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for a in (0..dims.len().saturating_sub(1)).rev() {
        s[a] = s[a + 1] * dims[a + 1];
    }
    s
}

/// Walks every multi-index of `dims` in row-major order, tracking one flat
/// offset per stride vector.
pub(crate) fn for_each_offset(dims: &[usize], strides: &[Vec<usize>], mut f: impl FnMut(&[usize])) {
    let n: usize = dims.iter().product();
    if n == 0 {
        return;
    }
    let rank = dims.len();
    let mut idx = vec![0usize; rank];
    let mut offs = vec![0usize; strides.len()];
    for _ in 0..n {
        f(&offs);
        for a in (0..rank).rev() {
            idx[a] += 1;
            for (o, s) in offs.iter_mut().zip(strides) {
                *o += s[a];
            }
            if idx[a] < dims[a] {
                break;
            }
            for (o, s) in offs.iter_mut().zip(strides) {
                *o -= s[a] * dims[a];
            }
            idx[a] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn select_middle_axis() {
        let t = TensorValue::new(vec![2, 3, 2], (0..12).map(|x| x as f32).collect()).unwrap();
        let s = t.select(1, &[0, 2]).unwrap();
        assert_eq!(s.dims, vec![2, 2, 2]);
        assert_eq!(s.data, vec![0.0, 1.0, 4.0, 5.0, 6.0, 7.0, 10.0, 11.0]);
    }

    #[test]
    fn odometer_matches_strides() {
        let dims = [2, 3];
        let mut seen = Vec::new();
        for_each_offset(&dims, &[vec![1, 2]], |o| seen.push(o[0]));
        assert_eq!(seen, vec![0, 2, 4, 1, 3, 5]);
    }

    #[test]
    fn diff_requires_same_shape() {
        let a = TensorValue::zeros(vec![2]);
        let b = TensorValue::new(vec![2], vec![0.5, -1.0]).unwrap();
        assert_eq!(a.max_abs_diff(&b), Some(1.0));
        assert_eq!(a.max_abs_diff(&TensorValue::zeros(vec![1, 2])), None);
    }
}
