use std::fmt::Write;

use serde::Serialize;

use super::AssocTree;
use crate::attrs::NodeAttribute;
use crate::graph::NodeGraph;

/// Nested JSON view of a tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TreeJson {
    pub name: String,
    pub op_type: String,
    pub attribute: NodeAttribute,
    pub children: Vec<TreeJson>,
}

pub fn tree_to_json(graph: &NodeGraph, tree: &AssocTree) -> TreeJson {
    fn walk(graph: &NodeGraph, tree: &AssocTree, pos: usize) -> TreeJson {
        let n = &tree.nodes()[pos];
        TreeJson {
            name: graph.label(n.node),
            op_type: graph.node(n.node).op_type.clone(),
            attribute: n.attribute,
            children: n.children.iter().map(|&c| walk(graph, tree, c)).collect(),
        }
    }
    walk(graph, tree, 0)
}

fn shape_for(attr: NodeAttribute) -> &'static str {
    match attr {
        NodeAttribute::Pruned => "doubleoctagon",
        NodeAttribute::NextNoProcess => "ellipse",
        NodeAttribute::NextProcess => "box",
        NodeAttribute::StopProcess => "octagon",
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

fn write_tree(out: &mut String, graph: &NodeGraph, tree: &AssocTree, prefix: &str, indent: &str) {
    for (pos, n) in tree.nodes().iter().enumerate() {
        let _ = writeln!(
            out,
            "{indent}{prefix}{pos} [label=\"{}\\n{}\\n{}\", shape={}];",
            escape(&graph.label(n.node)),
            escape(&graph.node(n.node).op_type),
            n.attribute,
            shape_for(n.attribute)
        );
    }
    for (pos, n) in tree.nodes().iter().enumerate() {
        for &c in &n.children {
            let _ = writeln!(out, "{indent}{prefix}{pos} -> {prefix}{c};");
        }
    }
}

/// Graphviz text for a single tree.
pub fn tree_to_dot(graph: &NodeGraph, tree: &AssocTree) -> String {
    let mut out = format!("digraph \"{}\" {{\n", escape(&graph.label(tree.root())));
    write_tree(&mut out, graph, tree, "n", "  ");
    out.push_str("}\n");
    out
}

/// Graphviz text with one cluster per tree.
pub fn forest_to_dot<'a>(graph: &NodeGraph, trees: impl IntoIterator<Item = &'a AssocTree>) -> String {
    let mut out = String::from("digraph forest {\n");
    for (i, tree) in trees.into_iter().enumerate() {
        let _ = writeln!(out, "  subgraph cluster_{i} {{");
        let _ = writeln!(out, "    label=\"{}\";", escape(&graph.label(tree.root())));
        write_tree(&mut out, graph, tree, &format!("t{i}_"), "    ");
        out.push_str("  }\n");
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attrs::AttributeRegistry;
    use crate::graph::build_graph;
    use crate::model::{synthesize_model, FixtureSpec};
    use crate::tree::build_tree;

    #[test]
    fn json_nests_children() {
        let m = synthesize_model(&FixtureSpec::new("fire_module")).unwrap();
        let g = build_graph(&m).unwrap();
        let t = build_tree(&g, &AttributeRegistry::builtin(), 0).unwrap();
        let v = serde_json::to_value(tree_to_json(&g, &t)).unwrap();
        assert_eq!(v["name"], "squeeze");
        assert_eq!(v["attribute"], "pruned");
        assert_eq!(v["children"][0]["children"][1]["name"], "expand3x3");
        assert_eq!(v["children"][0]["children"][1]["attribute"], "stop_process");
    }

    #[test]
    fn dot_has_one_edge_per_child() {
        let m = synthesize_model(&FixtureSpec::new("fire_module")).unwrap();
        let g = build_graph(&m).unwrap();
        let t = build_tree(&g, &AttributeRegistry::builtin(), 0).unwrap();
        let dot = tree_to_dot(&g, &t);
        assert_eq!(dot.matches("->").count(), t.len() - 1);
        assert!(dot.starts_with("digraph \"squeeze\""));
    }
}
