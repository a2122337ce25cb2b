//! Operator classification into the four node attributes used by tree
//! construction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Diagnostic, Error, Result};
use crate::graph::NodeGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeAttribute {
    /// Node whose output channels are removed (tree root).
    Pruned,
    /// Channel-preserving op that needs no rewrite.
    NextNoProcess,
    /// Op that carries the pruned axis and has parameters or offsets to adjust.
    NextProcess,
    /// Weighted consumer whose input slice is removed (tree leaf).
    StopProcess,
}

impl NodeAttribute {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeAttribute::Pruned => "pruned",
            NodeAttribute::NextNoProcess => "next_no_process",
            NodeAttribute::NextProcess => "next_process",
            NodeAttribute::StopProcess => "stop_process",
        }
    }
}

impl fmt::Display for NodeAttribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NodeAttribute {
    type Err = Error;

    /// Accepts both `NextNoProcess` and `next_no_process` spellings.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| *c != '_' && *c != '-')
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "pruned" => Ok(NodeAttribute::Pruned),
            "nextnoprocess" => Ok(NodeAttribute::NextNoProcess),
            "nextprocess" => Ok(NodeAttribute::NextProcess),
            "stopprocess" | "stop" => Ok(NodeAttribute::StopProcess),
            _ => Err(Error::InvalidArgument(format!("unknown node attribute `{s}`"))),
        }
    }
}

/// Position of a node in the traversal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Root,
    Descendant,
}

/// A user-registered operator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Extension {
    pub attribute: NodeAttribute,
    /// Identifier of a custom index-remap handler. None means the op is
    /// treated as opaque by layout analysis.
    pub handler: Option<String>,
}

pub const ROOT_OPS: &[&str] = &["Conv", "ConvTranspose", "Gemm", "MatMul", "Mul"];

pub const NO_PROCESS_OPS: &[&str] = &[
    "Relu",
    "Sigmoid",
    "Softmax",
    "Tanh",
    "MaxPool",
    "AveragePool",
    "Flatten",
    "GlobalAveragePool",
    "Pad",
    "Reshape",
    "Transpose",
    "ReduceMean",
    "ReduceMax",
    "Pow",
    "Sqrt",
    "Erf",
    "Unsqueeze",
    "Resize",
    "Slice",
    "Cast",
];

pub const PROCESS_OPS: &[&str] = &["Add", "Concat", "BatchNormalization", "Sub", "Div", "Gather"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeRegistry {
    root_set: BTreeSet<String>,
    no_process_set: BTreeSet<String>,
    process_set: BTreeSet<String>,
    extensions: BTreeMap<String, Extension>,
}

impl Default for AttributeRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl AttributeRegistry {
    pub fn builtin() -> Self {
        let set = |ops: &[&str]| ops.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        let reg = AttributeRegistry {
            root_set: set(ROOT_OPS),
            no_process_set: set(NO_PROCESS_OPS),
            process_set: set(PROCESS_OPS),
            extensions: BTreeMap::new(),
        };
        assert!(reg.root_set.is_disjoint(&reg.no_process_set));
        assert!(reg.root_set.is_disjoint(&reg.process_set));
        assert!(reg.no_process_set.is_disjoint(&reg.process_set));
        reg
    }

    fn builtin_attribute(&self, op_type: &str) -> Option<NodeAttribute> {
        if self.root_set.contains(op_type) {
            Some(NodeAttribute::Pruned)
        } else if self.no_process_set.contains(op_type) {
            Some(NodeAttribute::NextNoProcess)
        } else if self.process_set.contains(op_type) {
            Some(NodeAttribute::NextProcess)
        } else {
            None
        }
    }

    pub fn is_known(&self, op_type: &str) -> bool {
        self.builtin_attribute(op_type).is_some() || self.extensions.contains_key(op_type)
    }

    /// Whether `op_type` behaves like a root op (pruned as root, leaf otherwise).
    pub fn is_root_op(&self, op_type: &str) -> bool {
        self.root_set.contains(op_type)
            || self
                .extensions
                .get(op_type)
                .is_some_and(|e| e.attribute == NodeAttribute::Pruned)
    }

    pub fn extension(&self, op_type: &str) -> Option<&Extension> {
        self.extensions.get(op_type)
    }

    pub fn extensions(&self) -> &BTreeMap<String, Extension> {
        &self.extensions
    }

    /// Table lookup by op type and traversal role.
    ///
    /// A root op seen as a descendant is a leaf. For user extensions
    /// registered as `Pruned` the same rule applies; `StopProcess`
    /// extensions are leaves in either role.
    pub fn classify(&self, op_type: &str, role: Role) -> Result<NodeAttribute> {
        let attr = match self.builtin_attribute(op_type) {
            Some(a) => a,
            None => {
                self.extensions
                    .get(op_type)
                    .ok_or_else(|| Error::UnknownOperator {
                        op: op_type.to_owned(),
                    })?
                    .attribute
            }
        };
        Ok(match (attr, role) {
            (NodeAttribute::Pruned, Role::Descendant) => NodeAttribute::StopProcess,
            (a, _) => a,
        })
    }

    pub fn register_custom(&self, op_type: &str, attribute: NodeAttribute) -> Result<Self> {
        self.register_with_handler(op_type, attribute, None)
    }

    pub fn register_with_handler(
        &self,
        op_type: &str,
        attribute: NodeAttribute,
        handler: Option<String>,
    ) -> Result<Self> {
        if op_type.is_empty() {
            return Err(Error::InvalidArgument("empty operator type".into()));
        }
        if self.is_known(op_type) {
            return Err(Error::Conflict {
                op: op_type.to_owned(),
            });
        }
        let mut next = self.clone();
        next.extensions
            .insert(op_type.to_owned(), Extension { attribute, handler });
        Ok(next)
    }

    /// Registers every `OpType=Attribute` line of `text`.
    ///
    /// Blank lines and lines starting with `#` are skipped.
    pub fn with_extensions_text(&self, text: &str) -> Result<Self> {
        let mut reg = self.clone();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (op, attr) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("line {}: expected `OpType=Attribute`", lineno + 1))
            })?;
            let attr: NodeAttribute = attr
                .trim()
                .parse()
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
            reg = reg.register_custom(op.trim(), attr)?;
        }
        Ok(reg)
    }

    /// Node-level classification that also inspects operands.
    ///
    /// Weighted roots (Conv, ConvTranspose, Gemm, MatMul) need a constant
    /// weight in input 1. A `Mul` root needs exactly one constant operand
    /// with a single non-unit dimension, which becomes its channel axis; any
    /// other `Mul` is an elementwise merge or scale and classifies as
    /// `NextProcess`. Roots that fail these checks degrade to `NextProcess`
    /// and a diagnostic explains why.
    pub fn classify_node(
        &self,
        graph: &NodeGraph,
        index: usize,
        role: Role,
    ) -> Result<(NodeAttribute, Option<Diagnostic>)> {
        let node = graph.node(index);
        let op = node.op_type.as_str();
        let attr = self.classify(op, role)?;
        if !self.root_set.contains(op) {
            return Ok((attr, None));
        }
        let label = graph.label(index);
        let degrade = |why: String| {
            Ok((
                NodeAttribute::NextProcess,
                Some(Diagnostic::warning(Some(&label), why)),
            ))
        };
        if op == "Mul" {
            if role == Role::Descendant {
                return Ok((NodeAttribute::NextProcess, None));
            }
            let constants: Vec<&str> = node
                .inputs
                .iter()
                .map(String::as_str)
                .filter(|t| graph.is_constant(t))
                .collect();
            if constants.len() != 1 || node.inputs.len() != 2 {
                return degrade(format!(
                    "Mul has {} constant operands; exactly one is needed to prune it",
                    constants.len()
                ));
            }
            let dims = graph.constant_dims(constants[0]).unwrap_or(&[]);
            if dims.iter().filter(|&&d| d != 1).count() != 1 {
                return degrade(format!(
                    "Mul operand `{}` with dims {dims:?} has no single channel axis",
                    constants[0]
                ));
            }
            return Ok((attr, None));
        }
        if role == Role::Root {
            let weight = node.input(1).unwrap_or("");
            if !graph.is_constant(weight) {
                return degrade(format!("{op} has no constant weight operand"));
            }
        }
        Ok((attr, None))
    }
}
