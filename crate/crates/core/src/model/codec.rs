use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use prost::Message;

use super::proto::{self, attribute_type, Kind};
use super::{
    validate_syntax, AttrValue, DimSpec, ElemType, GraphDef, InitializerTensor, ModelArchive,
    NodeDef, OpaqueData, OpsetImport, TensorData, ValueInfo,
};
use crate::error::{Error, Result};

/// Reads and parses an ONNX model file.
///
/// Fields the in-memory model does not carry are dropped; each dropped field
/// is logged at warn level.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelArchive> {
    let (model, warnings) = load_model_with_warnings(path)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(model)
}

/// Like [`load_model`], returning the dropped-field warnings instead of
/// logging them.
pub fn load_model_with_warnings(path: impl AsRef<Path>) -> Result<(ModelArchive, Vec<String>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })?;
    decode_model(&bytes)
}

/// Validates and writes `model` to `path`.
pub fn save_model(model: &ModelArchive, path: impl AsRef<Path>) -> Result<()> {
    let errors: Vec<_> = validate_syntax(model)
        .into_iter()
        .filter(|d| d.is_error())
        .collect();
    if !errors.is_empty() {
        return Err(Error::Validation(errors));
    }
    let path = path.as_ref();
    std::fs::write(path, encode_model(model)).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn encode_model(model: &ModelArchive) -> Vec<u8> {
    model_to_proto(model).encode_to_vec()
}

pub fn decode_model(bytes: &[u8]) -> Result<(ModelArchive, Vec<String>)> {
    let proto = proto::ModelProto::decode(bytes).map_err(|e| Error::Parse(e.to_string()))?;
    let mut dropped = BTreeSet::new();
    scan_fields(bytes, Kind::Model, &mut dropped)?;
    let mut warnings: Vec<String> = dropped
        .into_iter()
        .map(|f| format!("dropped unsupported field {f}"))
        .collect();
    let model = model_from_proto(proto, &mut warnings)?;
    Ok((model, warnings))
}

fn read_varint(buf: &[u8], pos: &mut usize) -> Result<u64> {
    let mut value = 0u64;
    for shift in (0..64).step_by(7) {
        let byte = *buf
            .get(*pos)
            .ok_or_else(|| Error::Parse("truncated varint".into()))?;
        *pos += 1;
        value |= u64::from(byte & 0x7f) << shift;
        if byte & 0x80 == 0 {
            return Ok(value);
        }
    }
    Err(Error::Parse("varint overflow".into()))
}

/// Walks the raw wire bytes and records every field the domain model does
/// not keep, as `Message.field_number`.
fn scan_fields(buf: &[u8], kind: Kind, dropped: &mut BTreeSet<String>) -> Result<()> {
    let mut pos = 0;
    while pos < buf.len() {
        let key = read_varint(buf, &mut pos)?;
        let field = (key >> 3) as u32;
        let known = kind.known_fields().iter().find(|(f, _)| *f == field);
        if known.is_none() {
            dropped.insert(format!("{}.{}", kind.name(), field));
        }
        match key & 7 {
            0 => {
                read_varint(buf, &mut pos)?;
            }
            1 => pos += 8,
            5 => pos += 4,
            2 => {
                let len = read_varint(buf, &mut pos)? as usize;
                let end = pos
                    .checked_add(len)
                    .filter(|&e| e <= buf.len())
                    .ok_or_else(|| Error::Parse("truncated length-delimited field".into()))?;
                if let Some((_, Some(child))) = known {
                    scan_fields(&buf[pos..end], *child, dropped)?;
                }
                pos = end;
            }
            wt => return Err(Error::Parse(format!("unsupported wire type {wt}"))),
        }
        if pos > buf.len() {
            return Err(Error::Parse("truncated fixed-width field".into()));
        }
    }
    Ok(())
}

fn model_from_proto(p: proto::ModelProto, warnings: &mut Vec<String>) -> Result<ModelArchive> {
    let graph = p
        .graph
        .ok_or_else(|| Error::Parse("model has no graph".into()))?;
    Ok(ModelArchive {
        ir_version: p.ir_version,
        opset_imports: p
            .opset_import
            .into_iter()
            .map(|o| OpsetImport {
                domain: o.domain,
                version: o.version,
            })
            .collect(),
        producer_name: p.producer_name,
        producer_version: p.producer_version,
        domain: p.domain,
        model_version: p.model_version,
        graph: graph_from_proto(graph, warnings)?,
    })
}

fn graph_from_proto(g: proto::GraphProto, warnings: &mut Vec<String>) -> Result<GraphDef> {
    Ok(GraphDef {
        name: g.name,
        nodes: g
            .node
            .into_iter()
            .map(|n| node_from_proto(n, warnings))
            .collect::<Result<_>>()?,
        inputs: g.input.into_iter().map(value_info_from_proto).collect(),
        outputs: g.output.into_iter().map(value_info_from_proto).collect(),
        initializers: g
            .initializer
            .into_iter()
            .map(tensor_from_proto)
            .collect::<Result<_>>()?,
        value_infos: g.value_info.into_iter().map(value_info_from_proto).collect(),
    })
}

fn node_from_proto(n: proto::NodeProto, warnings: &mut Vec<String>) -> Result<NodeDef> {
    let mut attributes = BTreeMap::new();
    for a in n.attribute {
        let name = a.name.clone();
        match attr_from_proto(a)? {
            Some(v) => {
                attributes.insert(name, v);
            }
            None => warnings.push(format!(
                "dropped attribute `{name}` of node `{}`: unsupported attribute type",
                n.name
            )),
        }
    }
    Ok(NodeDef {
        name: n.name,
        op_type: n.op_type,
        domain: n.domain,
        inputs: n.input,
        outputs: n.output,
        attributes,
    })
}

fn attr_from_proto(a: proto::AttributeProto) -> Result<Option<AttrValue>> {
    let ty = if a.r#type != attribute_type::UNDEFINED {
        a.r#type
    } else if !a.floats.is_empty() {
        attribute_type::FLOATS
    } else if !a.ints.is_empty() {
        attribute_type::INTS
    } else if !a.strings.is_empty() {
        attribute_type::STRINGS
    } else if a.t.is_some() {
        attribute_type::TENSOR
    } else if !a.s.is_empty() {
        attribute_type::STRING
    } else if a.f != 0.0 {
        attribute_type::FLOAT
    } else {
        attribute_type::INT
    };
    Ok(Some(match ty {
        attribute_type::FLOAT => AttrValue::Float(a.f),
        attribute_type::INT => AttrValue::Int(a.i),
        attribute_type::STRING => AttrValue::String(String::from_utf8_lossy(&a.s).into_owned()),
        attribute_type::TENSOR => match a.t {
            Some(t) => AttrValue::Tensor(tensor_from_proto(t)?),
            None => return Err(Error::Parse(format!("tensor attribute `{}` has no value", a.name))),
        },
        attribute_type::FLOATS => AttrValue::Floats(a.floats),
        attribute_type::INTS => AttrValue::Ints(a.ints),
        attribute_type::STRINGS => AttrValue::Strings(
            a.strings
                .iter()
                .map(|s| String::from_utf8_lossy(s).into_owned())
                .collect(),
        ),
        _ => return Ok(None),
    }))
}

fn tensor_from_proto(t: proto::TensorProto) -> Result<InitializerTensor> {
    if t.data_location == 1 {
        return Err(Error::Parse(format!(
            "tensor `{}` uses external data, which is not supported",
            t.name
        )));
    }
    let dims = t
        .dims
        .iter()
        .map(|&d| {
            usize::try_from(d)
                .map_err(|_| Error::Parse(format!("tensor `{}` has negative dim {d}", t.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    let numel: usize = dims.iter().product();
    let dtype = ElemType(t.data_type);
    let data = match dtype {
        ElemType::FLOAT => {
            let v = if !t.float_data.is_empty() {
                t.float_data
            } else {
                decode_raw(&t.raw_data, 4, &t.name)?
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect()
            };
            TensorData::F32(v)
        }
        ElemType::INT64 => {
            let v = if !t.int64_data.is_empty() {
                t.int64_data
            } else {
                decode_raw(&t.raw_data, 8, &t.name)?
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            };
            TensorData::I64(v)
        }
        _ => TensorData::Opaque(OpaqueData {
            raw_data: t.raw_data,
            int32_data: t.int32_data,
            double_data: t.double_data,
            uint64_data: t.uint64_data,
            string_data: t.string_data,
        }),
    };
    let len = match &data {
        TensorData::F32(v) => Some(v.len()),
        TensorData::I64(v) => Some(v.len()),
        TensorData::Opaque(_) => None,
    };
    if let Some(len) = len {
        if len != numel {
            return Err(Error::Parse(format!(
                "tensor `{}` has {len} elements but dims {:?} imply {numel}",
                t.name, dims
            )));
        }
    }
    Ok(InitializerTensor {
        name: t.name,
        dtype,
        dims,
        data,
    })
}

fn decode_raw<'a>(
    raw: &'a [u8],
    width: usize,
    name: &str,
) -> Result<std::slice::ChunksExact<'a, u8>> {
    if !raw.len().is_multiple_of(width) {
        return Err(Error::Parse(format!(
            "tensor `{name}` raw_data length {} is not a multiple of {width}",
            raw.len()
        )));
    }
    Ok(raw.chunks_exact(width))
}

fn value_info_from_proto(v: proto::ValueInfoProto) -> ValueInfo {
    let tensor = v.r#type.and_then(|t| t.tensor_type);
    let (elem_type, shape) = match tensor {
        Some(t) => (
            ElemType(t.elem_type),
            t.shape.map(|s| {
                s.dim
                    .into_iter()
                    .map(|d| match d.value {
                        Some(proto::DimValue::DimValue(v)) => DimSpec::Value(v),
                        Some(proto::DimValue::DimParam(p)) => DimSpec::Param(p),
                        None => DimSpec::Unknown,
                    })
                    .collect()
            }),
        ),
        None => (ElemType::UNDEFINED, None),
    };
    ValueInfo {
        name: v.name,
        elem_type,
        shape,
    }
}

fn model_to_proto(m: &ModelArchive) -> proto::ModelProto {
    proto::ModelProto {
        ir_version: m.ir_version,
        opset_import: m
            .opset_imports
            .iter()
            .map(|o| proto::OperatorSetIdProto {
                domain: o.domain.clone(),
                version: o.version,
            })
            .collect(),
        producer_name: m.producer_name.clone(),
        producer_version: m.producer_version.clone(),
        domain: m.domain.clone(),
        model_version: m.model_version,
        graph: Some(graph_to_proto(&m.graph)),
    }
}

fn graph_to_proto(g: &GraphDef) -> proto::GraphProto {
    proto::GraphProto {
        node: g.nodes.iter().map(node_to_proto).collect(),
        name: g.name.clone(),
        initializer: g.initializers.iter().map(tensor_to_proto).collect(),
        input: g.inputs.iter().map(value_info_to_proto).collect(),
        output: g.outputs.iter().map(value_info_to_proto).collect(),
        value_info: g.value_infos.iter().map(value_info_to_proto).collect(),
    }
}

fn node_to_proto(n: &NodeDef) -> proto::NodeProto {
    proto::NodeProto {
        input: n.inputs.clone(),
        output: n.outputs.clone(),
        name: n.name.clone(),
        op_type: n.op_type.clone(),
        domain: n.domain.clone(),
        attribute: n
            .attributes
            .iter()
            .map(|(name, v)| attr_to_proto(name, v))
            .collect(),
    }
}

fn attr_to_proto(name: &str, v: &AttrValue) -> proto::AttributeProto {
    let mut a = proto::AttributeProto {
        name: name.to_owned(),
        ..Default::default()
    };
    match v {
        AttrValue::Float(f) => {
            a.r#type = attribute_type::FLOAT;
            a.f = *f;
        }
        AttrValue::Int(i) => {
            a.r#type = attribute_type::INT;
            a.i = *i;
        }
        AttrValue::String(s) => {
            a.r#type = attribute_type::STRING;
            a.s = s.as_bytes().to_vec();
        }
        AttrValue::Floats(v) => {
            a.r#type = attribute_type::FLOATS;
            a.floats = v.clone();
        }
        AttrValue::Ints(v) => {
            a.r#type = attribute_type::INTS;
            a.ints = v.clone();
        }
        AttrValue::Strings(v) => {
            a.r#type = attribute_type::STRINGS;
            a.strings = v.iter().map(|s| s.as_bytes().to_vec()).collect();
        }
        AttrValue::Tensor(t) => {
            a.r#type = attribute_type::TENSOR;
            a.t = Some(tensor_to_proto(t));
        }
    }
    a
}

fn tensor_to_proto(t: &InitializerTensor) -> proto::TensorProto {
    let mut p = proto::TensorProto {
        dims: t.dims.iter().map(|&d| d as i64).collect(),
        data_type: t.dtype.0,
        name: t.name.clone(),
        ..Default::default()
    };
    match &t.data {
        TensorData::F32(v) => p.float_data = v.clone(),
        TensorData::I64(v) => p.int64_data = v.clone(),
        TensorData::Opaque(o) => {
            p.raw_data = o.raw_data.clone();
            p.int32_data = o.int32_data.clone();
            p.double_data = o.double_data.clone();
            p.uint64_data = o.uint64_data.clone();
            p.string_data = o.string_data.clone();
        }
    }
    p
}

fn value_info_to_proto(v: &ValueInfo) -> proto::ValueInfoProto {
    proto::ValueInfoProto {
        name: v.name.clone(),
        r#type: Some(proto::TypeProto {
            tensor_type: Some(proto::TypeProtoTensor {
                elem_type: v.elem_type.0,
                shape: v.shape.as_ref().map(|dims| proto::TensorShapeProto {
                    dim: dims
                        .iter()
                        .map(|d| proto::Dimension {
                            value: match d {
                                DimSpec::Value(v) => Some(proto::DimValue::DimValue(*v)),
                                DimSpec::Param(p) => Some(proto::DimValue::DimParam(p.clone())),
                                DimSpec::Unknown => None,
                            },
                        })
                        .collect(),
                }),
            }),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelArchive {
        let mut graph = GraphDef {
            name: "g".into(),
            ..Default::default()
        };
        graph.inputs.push(ValueInfo::tensor(
            "x",
            ElemType::FLOAT,
            vec![DimSpec::Param("N".into()), DimSpec::Value(1), DimSpec::Value(4), DimSpec::Value(4)],
        ));
        graph.outputs.push(ValueInfo::tensor("y", ElemType::FLOAT, vec![]));
        graph.initializers.push(InitializerTensor::from_f32(
            "w",
            vec![2, 1, 1, 1],
            vec![2.0, -1.0],
        ));
        graph.nodes.push(
            NodeDef::new("conv", "Conv", &["x", "w"], &["y"])
                .with_attr("kernel_shape", AttrValue::Ints(vec![1, 1]))
                .with_attr("alpha", AttrValue::Float(0.0)),
        );
        ModelArchive {
            ir_version: 8,
            opset_imports: vec![OpsetImport {
                domain: String::new(),
                version: 13,
            }],
            producer_name: "test".into(),
            producer_version: String::new(),
            domain: String::new(),
            model_version: 0,
            graph,
        }
    }

    #[test]
    fn roundtrip_is_identity() {
        let m = tiny();
        let (back, warnings) = decode_model(&encode_model(&m)).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(back, m);
    }

    #[test]
    fn raw_data_tensors_are_accepted() {
        let mut p = model_to_proto(&tiny());
        let t = &mut p.graph.as_mut().unwrap().initializer[0];
        t.raw_data = t.float_data.iter().flat_map(|f| f.to_le_bytes()).collect();
        t.float_data.clear();
        let (back, _) = decode_model(&p.encode_to_vec()).unwrap();
        assert_eq!(back.graph.initializers[0].as_f32().unwrap(), &[2.0, -1.0]);
    }

    #[test]
    fn truncated_bytes_fail_to_parse() {
        let bytes = encode_model(&tiny());
        let err = decode_model(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Parse(_)), "{err}");
    }

    #[test]
    fn unknown_fields_are_reported() {
        let mut bytes = encode_model(&tiny());
        // ModelProto.doc_string (field 6, length-delimited)
        bytes.extend_from_slice(&[0x32, 0x02, b'h', b'i']);
        let (_, warnings) = decode_model(&bytes).unwrap();
        assert_eq!(warnings, vec!["dropped unsupported field ModelProto.6".to_string()]);
    }

    #[test]
    fn element_count_mismatch_is_rejected() {
        let mut p = model_to_proto(&tiny());
        p.graph.as_mut().unwrap().initializer[0].float_data.push(1.0);
        assert!(matches!(
            decode_model(&p.encode_to_vec()),
            Err(Error::Parse(_))
        ));
    }
}
