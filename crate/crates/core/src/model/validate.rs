use std::collections::{BTreeMap, BTreeSet};

use super::{ModelArchive, TensorData};
use crate::error::Diagnostic;

/// Opset range of the default domain the toolkit is built against.
pub const SUPPORTED_OPSETS: std::ops::RangeInclusive<i64> = 11..=17;

/// Checks the structural invariants of `model.graph`.
///
/// Returns an empty list iff every invariant holds. Findings that do not
/// make the graph unusable (dangling initializers, opset outside the tested
/// range) are reported as warnings.
pub fn validate_syntax(model: &ModelArchive) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let graph = &model.graph;

    let mut domains = BTreeSet::new();
    for o in &model.opset_imports {
        let domain = if o.domain == "ai.onnx" { "" } else { o.domain.as_str() };
        if !domains.insert(domain) {
            diags.push(Diagnostic::error(
                None,
                format!("opset domain `{}` imported more than once", o.domain),
            ));
        }
    }
    match model.default_opset() {
        Some(v) if !SUPPORTED_OPSETS.contains(&v) => diags.push(Diagnostic::warning(
            None,
            format!("default opset {v} is outside the supported range 11-17"),
        )),
        None if !graph.nodes.is_empty() => diags.push(Diagnostic::warning(
            None,
            "model imports no default-domain opset",
        )),
        _ => {}
    }

    let mut defined: BTreeSet<&str> = BTreeSet::new();
    for vi in &graph.inputs {
        defined.insert(&vi.name);
    }
    let mut init_names = BTreeSet::new();
    for t in &graph.initializers {
        if !init_names.insert(t.name.as_str()) {
            diags.push(Diagnostic::error(
                None,
                format!("initializer `{}` is defined more than once", t.name),
            ));
        }
        defined.insert(&t.name);
        let len = match &t.data {
            TensorData::F32(v) => Some(v.len()),
            TensorData::I64(v) => Some(v.len()),
            TensorData::Opaque(_) => None,
        };
        if let Some(len) = len {
            if len != t.numel() {
                diags.push(Diagnostic::error(
                    None,
                    format!(
                        "initializer `{}` holds {len} values but dims {:?} imply {}",
                        t.name,
                        t.dims,
                        t.numel()
                    ),
                ));
            }
        }
    }

    // Outputs of every node, so that an out-of-order reference can be told
    // apart from a reference to nothing at all.
    let mut produced_later: BTreeMap<&str, &str> = BTreeMap::new();
    for node in &graph.nodes {
        for out in node.outputs.iter().filter(|o| !o.is_empty()) {
            produced_later.entry(out).or_insert(&node.name);
        }
    }

    let mut outputs_seen: BTreeSet<&str> = BTreeSet::new();
    for node in &graph.nodes {
        let label = Some(node.name.as_str());
        if node.op_type.is_empty() {
            diags.push(Diagnostic::error(label, "node has an empty op_type"));
        }
        for input in node.inputs.iter().filter(|i| !i.is_empty()) {
            if defined.contains(input.as_str()) {
                continue;
            }
            if produced_later.contains_key(input.as_str()) {
                diags.push(Diagnostic::error(
                    label,
                    format!("input `{input}` is produced by a later node (graph is not topologically sorted)"),
                ));
            } else {
                diags.push(Diagnostic::error(
                    label,
                    format!("input `{input}` is not produced by any graph input, initializer or node"),
                ));
            }
        }
        for out in node.outputs.iter().filter(|o| !o.is_empty()) {
            if !outputs_seen.insert(out) || init_names.contains(out.as_str()) {
                diags.push(Diagnostic::error(
                    label,
                    format!("output name `{out}` is not unique"),
                ));
            }
            defined.insert(out);
        }
    }

    for out in &graph.outputs {
        if !defined.contains(out.name.as_str()) {
            diags.push(Diagnostic::error(
                None,
                format!("graph output `{}` is never produced", out.name),
            ));
        }
    }

    let consumed: BTreeSet<&str> = graph
        .nodes
        .iter()
        .flat_map(|n| n.inputs.iter().map(String::as_str))
        .chain(graph.outputs.iter().map(|o| o.name.as_str()))
        .collect();
    for t in &graph.initializers {
        if !consumed.contains(t.name.as_str()) {
            diags.push(Diagnostic::warning(
                None,
                format!("initializer `{}` is not consumed by any node", t.name),
            ));
        }
    }

    diags
}
