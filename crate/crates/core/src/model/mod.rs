//! In-memory ONNX model representation, file I/O, syntactic validation and
//! fixture synthesis.
//!
//! The types here are a deliberately small projection of the ONNX protobuf
//! schema: everything the pruning pipeline reads or rewrites is kept, the
//! rest (doc strings, metadata, training info, subgraphs) is dropped on load
//! with a warning.

mod codec;
pub mod fixtures;
mod proto;
mod validate;

use std::collections::BTreeMap;

use serde::Serialize;

pub use codec::{decode_model, encode_model, load_model, load_model_with_warnings, save_model};
pub use fixtures::{synthesize_model, FixtureSpec, Template};
pub use validate::validate_syntax;

use crate::error::{Error, Result};

/// ONNX `TensorProto.DataType` code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ElemType(pub i32);

impl ElemType {
    pub const UNDEFINED: ElemType = ElemType(0);
    pub const FLOAT: ElemType = ElemType(1);
    pub const INT32: ElemType = ElemType(6);
    pub const INT64: ElemType = ElemType(7);
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpsetImport {
    pub domain: String,
    pub version: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelArchive {
    pub ir_version: i64,
    pub opset_imports: Vec<OpsetImport>,
    pub producer_name: String,
    pub producer_version: String,
    pub domain: String,
    pub model_version: i64,
    pub graph: GraphDef,
}

impl ModelArchive {
    /// Version of the default (`ai.onnx`) operator set, if declared.
    pub fn default_opset(&self) -> Option<i64> {
        self.opset_imports
            .iter()
            .find(|o| o.domain.is_empty() || o.domain == "ai.onnx")
            .map(|o| o.version)
    }

    pub fn initializer(&self, name: &str) -> Option<&InitializerTensor> {
        self.graph.initializers.iter().find(|t| t.name == name)
    }

    pub fn initializer_mut(&mut self, name: &str) -> Option<&mut InitializerTensor> {
        self.graph.initializers.iter_mut().find(|t| t.name == name)
    }

    /// Initializer lookup that also resolves the `value` of `Constant` nodes.
    pub fn constant(&self, name: &str) -> Option<&InitializerTensor> {
        if name.is_empty() {
            return None;
        }
        self.initializer(name).or_else(|| {
            self.graph
                .nodes
                .iter()
                .find(|n| n.op_type == "Constant" && n.outputs.first().map(String::as_str) == Some(name))
                .and_then(|n| match n.attributes.get("value") {
                    Some(AttrValue::Tensor(t)) => Some(t),
                    _ => None,
                })
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GraphDef {
    pub name: String,
    pub nodes: Vec<NodeDef>,
    pub inputs: Vec<ValueInfo>,
    pub outputs: Vec<ValueInfo>,
    pub initializers: Vec<InitializerTensor>,
    pub value_infos: Vec<ValueInfo>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodeDef {
    pub name: String,
    pub op_type: String,
    pub domain: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub attributes: BTreeMap<String, AttrValue>,
}

impl NodeDef {
    pub fn new(
        name: impl Into<String>,
        op_type: impl Into<String>,
        inputs: &[&str],
        outputs: &[&str],
    ) -> Self {
        NodeDef {
            name: name.into(),
            op_type: op_type.into(),
            domain: String::new(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            attributes: BTreeMap::new(),
        }
    }

    pub fn with_attr(mut self, name: &str, value: AttrValue) -> Self {
        self.attributes.insert(name.to_owned(), value);
        self
    }

    pub fn attr_int(&self, name: &str, default: i64) -> i64 {
        match self.attributes.get(name) {
            Some(AttrValue::Int(v)) => *v,
            _ => default,
        }
    }

    pub fn attr_float(&self, name: &str, default: f32) -> f32 {
        match self.attributes.get(name) {
            Some(AttrValue::Float(v)) => *v,
            _ => default,
        }
    }

    pub fn attr_ints(&self, name: &str) -> Option<&[i64]> {
        match self.attributes.get(name) {
            Some(AttrValue::Ints(v)) => Some(v),
            _ => None,
        }
    }

    pub fn attr_str(&self, name: &str) -> Option<&str> {
        match self.attributes.get(name) {
            Some(AttrValue::String(v)) => Some(v),
            _ => None,
        }
    }

    /// Non-empty input at `slot`.
    pub fn input(&self, slot: usize) -> Option<&str> {
        self.inputs
            .get(slot)
            .map(String::as_str)
            .filter(|s| !s.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttrValue {
    Float(f32),
    Int(i64),
    String(String),
    Floats(Vec<f32>),
    Ints(Vec<i64>),
    Strings(Vec<String>),
    Tensor(InitializerTensor),
}

/// Element payload of an initializer.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I64(Vec<i64>),
    /// Any other element type, carried through untouched.
    Opaque(OpaqueData),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OpaqueData {
    pub raw_data: Vec<u8>,
    pub int32_data: Vec<i32>,
    pub double_data: Vec<f64>,
    pub uint64_data: Vec<u64>,
    pub string_data: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitializerTensor {
    pub name: String,
    pub dtype: ElemType,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl InitializerTensor {
    pub fn from_f32(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        InitializerTensor {
            name: name.into(),
            dtype: ElemType::FLOAT,
            dims,
            data: TensorData::F32(data),
        }
    }

    pub fn from_i64(name: impl Into<String>, dims: Vec<usize>, data: Vec<i64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        InitializerTensor {
            name: name.into(),
            dtype: ElemType::INT64,
            dims,
            data: TensorData::I64(data),
        }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            _ => Err(Error::UnsupportedDtype {
                tensor: self.name.clone(),
                dtype: self.dtype.0,
            }),
        }
    }

    pub fn as_f32_mut(&mut self) -> Result<&mut Vec<f32>> {
        match &mut self.data {
            TensorData::F32(v) => Ok(v),
            _ => Err(Error::UnsupportedDtype {
                tensor: self.name.clone(),
                dtype: self.dtype.0,
            }),
        }
    }

    /// Integer view used for shape-like operands (int64, or int32 stored
    /// in `int32_data`).
    pub fn as_i64(&self) -> Option<Vec<i64>> {
        match &self.data {
            TensorData::I64(v) => Some(v.clone()),
            TensorData::Opaque(o) if self.dtype == ElemType::INT32 => {
                if !o.int32_data.is_empty() {
                    Some(o.int32_data.iter().map(|&v| v as i64).collect())
                } else {
                    Some(
                        o.raw_data
                            .chunks_exact(4)
                            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as i64)
                            .collect(),
                    )
                }
            }
            _ => None,
        }
    }

    /// Values as `f64`, for float or integer tensors.
    pub fn to_f64(&self) -> Option<Vec<f64>> {
        match &self.data {
            TensorData::F32(v) => Some(v.iter().map(|&x| x as f64).collect()),
            TensorData::I64(v) => Some(v.iter().map(|&x| x as f64).collect()),
            TensorData::Opaque(o) if !o.double_data.is_empty() => Some(o.double_data.clone()),
            _ => self.as_i64().map(|v| v.into_iter().map(|x| x as f64).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DimSpec {
    Value(i64),
    Param(String),
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueInfo {
    pub name: String,
    pub elem_type: ElemType,
    /// `None` when the type carries no shape at all.
    pub shape: Option<Vec<DimSpec>>,
}

impl ValueInfo {
    pub fn tensor(name: impl Into<String>, elem_type: ElemType, shape: Vec<DimSpec>) -> Self {
        ValueInfo {
            name: name.into(),
            elem_type,
            shape: Some(shape),
        }
    }
}
