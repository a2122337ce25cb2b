//! Producer/consumer adjacency, topological ordering and shape inference.

mod shape;

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::cmp::Reverse;

pub use shape::{infer_shapes, input_shapes_from_model, Dim, ShapeEnv, TensorShape};
pub(crate) use shape::{
    concrete_input_shapes, slice_params_checked, slice_range, window_geometry, Geometry,
};

use crate::error::{Diagnostic, Error, Result};
use crate::model::{ModelArchive, NodeDef};

/// Indexed view over a model's nodes.
///
/// Node indices are positions in `GraphDef::nodes`. Consumer lists are in
/// ascending index order; a node consuming a tensor through several inputs
/// appears once.
#[derive(Debug, Clone)]
pub struct NodeGraph {
    nodes: Vec<NodeDef>,
    producer: BTreeMap<String, usize>,
    consumers: BTreeMap<String, Vec<usize>>,
    topo_order: Vec<usize>,
    initializer_dims: BTreeMap<String, Vec<usize>>,
    graph_inputs: BTreeSet<String>,
    graph_outputs: BTreeSet<String>,
}

pub fn build_graph(model: &ModelArchive) -> Result<NodeGraph> {
    let g = &model.graph;
    let mut producer = BTreeMap::new();
    let mut duplicates = Vec::new();
    for (i, node) in g.nodes.iter().enumerate() {
        for out in node.outputs.iter().filter(|o| !o.is_empty()) {
            if producer.insert(out.clone(), i).is_some() {
                duplicates.push(Diagnostic::error(
                    Some(&node.name),
                    format!("output name `{out}` is not unique"),
                ));
            }
        }
    }
    if !duplicates.is_empty() {
        return Err(Error::Validation(duplicates));
    }

    let mut consumers: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, node) in g.nodes.iter().enumerate() {
        for input in node.inputs.iter().filter(|s| !s.is_empty()) {
            let list = consumers.entry(input.clone()).or_default();
            if list.last() != Some(&i) {
                list.push(i);
            }
        }
    }

    // Kahn's algorithm, always releasing the lowest ready index so the
    // order is unique for a given node list.
    let n = g.nodes.len();
    let mut indegree = vec![0usize; n];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, node) in g.nodes.iter().enumerate() {
        let preds: BTreeSet<usize> = node
            .inputs
            .iter()
            .filter_map(|t| producer.get(t).copied())
            .collect();
        indegree[i] = preds.len();
        for p in preds {
            succ[p].push(i);
        }
    }
    let mut ready: BinaryHeap<Reverse<usize>> = (0..n)
        .filter(|&i| indegree[i] == 0)
        .map(Reverse)
        .collect();
    let mut topo_order = Vec::with_capacity(n);
    while let Some(Reverse(i)) = ready.pop() {
        topo_order.push(i);
        for &s in &succ[i] {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.push(Reverse(s));
            }
        }
    }
    if topo_order.len() != n {
        let stuck = (0..n).find(|&i| indegree[i] > 0).unwrap();
        return Err(Error::Cycle {
            node: node_label(&g.nodes[stuck], stuck),
        });
    }

    Ok(NodeGraph {
        nodes: g.nodes.clone(),
        producer,
        consumers,
        topo_order,
        initializer_dims: g
            .initializers
            .iter()
            .map(|t| (t.name.clone(), t.dims.clone()))
            .chain(g.nodes.iter().filter(|n| n.op_type == "Constant").filter_map(|n| {
                match n.attributes.get("value") {
                    Some(crate::model::AttrValue::Tensor(t)) => {
                        Some((n.outputs.first()?.clone(), t.dims.clone()))
                    }
                    _ => None,
                }
            }))
            .collect(),
        graph_inputs: g
            .inputs
            .iter()
            .map(|v| v.name.clone())
            .filter(|name| !g.initializers.iter().any(|t| &t.name == name))
            .collect(),
        graph_outputs: g.outputs.iter().map(|v| v.name.clone()).collect(),
    })
}

fn node_label(node: &NodeDef, index: usize) -> String {
    if node.name.is_empty() {
        format!("{}_{index}", node.op_type)
    } else {
        node.name.clone()
    }
}

impl NodeGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, index: usize) -> &NodeDef {
        &self.nodes[index]
    }

    pub fn nodes(&self) -> &[NodeDef] {
        &self.nodes
    }

    /// Node name, or `<op>_<index>` for unnamed nodes.
    pub fn label(&self, index: usize) -> String {
        node_label(&self.nodes[index], index)
    }

    /// Index of the node whose [`label`](Self::label) is `label`.
    pub fn find(&self, label: &str) -> Option<usize> {
        (0..self.nodes.len()).find(|&i| self.label(i) == label)
    }

    pub fn producer(&self, tensor: &str) -> Option<usize> {
        self.producer.get(tensor).copied()
    }

    pub fn consumers(&self, tensor: &str) -> &[usize] {
        self.consumers.get(tensor).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.topo_order
    }

    /// Whether `tensor` is a constant: an initializer or a `Constant` output.
    pub fn is_constant(&self, tensor: &str) -> bool {
        self.initializer_dims.contains_key(tensor)
    }

    pub fn constant_dims(&self, tensor: &str) -> Option<&[usize]> {
        self.initializer_dims.get(tensor).map(Vec::as_slice)
    }

    pub fn is_graph_input(&self, tensor: &str) -> bool {
        self.graph_inputs.contains(tensor)
    }

    pub fn is_graph_output(&self, tensor: &str) -> bool {
        self.graph_outputs.contains(tensor)
    }

    /// Number of consuming nodes, plus one if `tensor` is a graph output.
    pub fn use_count(&self, tensor: &str) -> usize {
        self.consumers(tensor).len() + usize::from(self.is_graph_output(tensor))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{synthesize_model, FixtureSpec};

    #[test]
    fn conv_chain_adjacency() {
        let m = synthesize_model(&FixtureSpec::new("conv_chain").depth(2).seed(7)).unwrap();
        let g = build_graph(&m).unwrap();
        let relu = g.find("relu1").unwrap();
        assert_eq!(g.consumers("conv1_out"), &[relu]);
        assert_eq!(g.topo_order(), &[0, 1, 2]);
    }

    #[test]
    fn fire_module_relu_feeds_two_branches() {
        let m = synthesize_model(&FixtureSpec::new("fire_module").seed(1)).unwrap();
        let g = build_graph(&m).unwrap();
        assert_eq!(g.consumers("squeeze_relu_out").len(), 2);
    }

    #[test]
    fn self_loop_is_a_cycle() {
        let mut m = synthesize_model(&FixtureSpec::new("conv_chain").seed(7)).unwrap();
        let out = m.graph.nodes[1].outputs[0].clone();
        m.graph.nodes[1].inputs[0] = out;
        assert!(matches!(build_graph(&m), Err(Error::Cycle { node }) if node == "relu1"));
    }

    #[test]
    fn reordered_nodes_keep_consumer_sets() {
        let m = synthesize_model(&FixtureSpec::new("fire_module").seed(1)).unwrap();
        let mut shuffled = m.clone();
        // expand branches are independent of each other
        shuffled.graph.nodes.swap(2, 3);
        let a = build_graph(&m).unwrap();
        let b = build_graph(&shuffled).unwrap();
        for t in ["squeeze_relu_out", "expand1x1_out", "expand3x3_out", "concat_out"] {
            let names = |g: &NodeGraph| -> BTreeSet<String> {
                g.consumers(t).iter().map(|&i| g.label(i)).collect()
            };
            assert_eq!(names(&a), names(&b), "{t}");
        }
        let order = |g: &NodeGraph| -> Vec<String> {
            g.topo_order().iter().map(|&i| g.label(i)).collect()
        };
        assert_eq!(order(&b).len(), 7);
        assert_eq!(order(&a)[0], order(&b)[0]);
    }
}
