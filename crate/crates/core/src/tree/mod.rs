//! Association trees and pruning groups.
//!
//! A tree starts at a prunable node and follows the dataflow of its output
//! through channel-carrying ops until weighted consumers (leaves) are reached.
//! Trees whose roots feed the same elementwise merge are unioned into one
//! [`PruningGroup`] because they must drop the same channels.

mod export;
mod groups;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rayon::prelude::*;
use serde::Serialize;

pub use export::{forest_to_dot, tree_to_dot, tree_to_json, TreeJson};
pub use groups::{merge_groups, PruningGroup, MERGE_OPS};

use crate::attrs::{AttributeRegistry, NodeAttribute, Role};
use crate::error::{Diagnostic, Error, Result};
use crate::graph::NodeGraph;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TreeNode {
    /// Index into the graph's node list.
    pub node: usize,
    pub attribute: NodeAttribute,
    /// Parent position in [`AssocTree::nodes`]; `None` for the root.
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Input slots through which this node reads its parent's outputs.
    pub input_slots: Vec<usize>,
}

/// Tree for one pruned root, stored as an arena in breadth-first order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AssocTree {
    nodes: Vec<TreeNode>,
    channels: usize,
    reaches_output: bool,
}

impl AssocTree {
    /// Graph index of the root node.
    pub fn root(&self) -> usize {
        self.nodes[0].node
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Output channel count of the root on its pruned axis.
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Whether some tree node (the root included) produces a graph output.
    pub fn reaches_output(&self) -> bool {
        self.reaches_output
    }

    /// Arena positions of leaf (stop-process) nodes.
    pub fn leaves(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes
            .iter()
            .filter(|n| n.attribute == NodeAttribute::StopProcess)
    }

    /// Distinct graph nodes appearing as leaves.
    pub fn leaf_nodes(&self) -> BTreeSet<usize> {
        self.leaves().map(|n| n.node).collect()
    }

    /// Distinct graph nodes in the tree.
    pub fn node_set(&self) -> BTreeSet<usize> {
        self.nodes.iter().map(|n| n.node).collect()
    }
}

/// Output channel count of a prunable node on its pruned axis, read from
/// the weight operand.
pub fn root_channels(graph: &NodeGraph, index: usize) -> Result<usize> {
    let node = graph.node(index);
    let label = graph.label(index);
    let dims_of = |slot: usize| -> Result<&[usize]> {
        node.input(slot)
            .and_then(|t| graph.constant_dims(t))
            .ok_or_else(|| Error::Axis(format!("`{label}` has no constant operand in slot {slot}")))
    };
    let axis_err = |what: &str| Error::Axis(format!("`{label}`: {what}"));
    match node.op_type.as_str() {
        "Conv" => dims_of(1)?.first().copied().ok_or_else(|| axis_err("scalar weight")),
        "ConvTranspose" => {
            let w = dims_of(1)?;
            let group = node.attr_int("group", 1).max(1) as usize;
            w.get(1).map(|c| c * group).ok_or_else(|| axis_err("weight rank < 2"))
        }
        "Gemm" => {
            let w = dims_of(1)?;
            if w.len() != 2 {
                return Err(axis_err("Gemm weight must be 2-D"));
            }
            Ok(if node.attr_int("transB", 0) != 0 { w[0] } else { w[1] })
        }
        "MatMul" => dims_of(1)?.last().copied().ok_or_else(|| axis_err("scalar weight")),
        "Mul" => {
            let dims = (0..2)
                .filter_map(|s| node.input(s).and_then(|t| graph.constant_dims(t)))
                .next()
                .ok_or_else(|| axis_err("Mul has no constant operand"))?;
            dims.iter()
                .copied()
                .find(|&d| d != 1)
                .ok_or_else(|| axis_err("Mul operand has no channel axis"))
        }
        op => Err(Error::Axis(format!(
            "`{label}`: no weight layout known for `{op}`"
        ))),
    }
}

/// Grows the association tree rooted at node `root`.
pub fn build_tree(graph: &NodeGraph, registry: &AttributeRegistry, root: usize) -> Result<AssocTree> {
    let (attr, diag) = registry.classify_node(graph, root, Role::Root)?;
    if attr != NodeAttribute::Pruned {
        let why = diag
            .map(|d| d.message)
            .unwrap_or_else(|| format!("`{}` is not a prunable op", graph.node(root).op_type));
        return Err(Error::InvalidArgument(format!(
            "`{}` cannot be a tree root: {why}",
            graph.label(root)
        )));
    }
    let channels = root_channels(graph, root)?;
    let limit = (64 * graph.len()).max(4096);
    let mut nodes = vec![TreeNode {
        node: root,
        attribute: NodeAttribute::Pruned,
        parent: None,
        children: Vec::new(),
        input_slots: Vec::new(),
    }];
    let mut reaches_output = false;
    let mut queue = VecDeque::from([0usize]);
    while let Some(pos) = queue.pop_front() {
        let current = nodes[pos].node;
        let expand = pos == 0 || nodes[pos].attribute != NodeAttribute::StopProcess;
        if !expand {
            continue;
        }
        let outputs = &graph.node(current).outputs;
        if outputs.iter().any(|o| graph.is_graph_output(o)) {
            reaches_output = true;
        }
        // Consumers in graph order; one child per consuming node.
        let mut consumers: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for out in outputs.iter().filter(|o| !o.is_empty()) {
            for &c in graph.consumers(out) {
                let slots = consumers.entry(c).or_default();
                for (slot, name) in graph.node(c).inputs.iter().enumerate() {
                    if name == out && !slots.contains(&slot) {
                        slots.push(slot);
                    }
                }
            }
        }
        for (consumer, mut slots) in consumers {
            slots.sort_unstable();
            let (attribute, _) = registry.classify_node(graph, consumer, Role::Descendant)?;
            let child = nodes.len();
            if child >= limit {
                return Err(Error::UnboundedTree {
                    root: graph.label(root),
                    limit,
                });
            }
            nodes.push(TreeNode {
                node: consumer,
                attribute,
                parent: Some(pos),
                children: Vec::new(),
                input_slots: slots,
            });
            nodes[pos].children.push(child);
            queue.push_back(child);
        }
    }
    Ok(AssocTree {
        nodes,
        channels,
        reaches_output,
    })
}

/// Which prunable nodes get a tree.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TreePolicy {
    /// Also prune roots whose tree reaches a graph output (the classifier).
    pub include_classifier: bool,
}

/// Graph indices, in topological order, of nodes that classify as `Pruned`
/// in the root role.
pub fn prunable_nodes(graph: &NodeGraph, registry: &AttributeRegistry) -> Vec<usize> {
    graph
        .topo_order()
        .iter()
        .copied()
        .filter(|&i| {
            matches!(
                registry.classify_node(graph, i, Role::Root),
                Ok((NodeAttribute::Pruned, _))
            )
        })
        .collect()
}

/// Trees for every prunable node admitted by `policy`, keyed by root index.
pub fn build_all_trees(
    graph: &NodeGraph,
    registry: &AttributeRegistry,
    policy: TreePolicy,
) -> Result<BTreeMap<usize, AssocTree>> {
    let built: Vec<(usize, AssocTree)> = prunable_nodes(graph, registry)
        .into_par_iter()
        .map(|r| build_tree(graph, registry, r).map(|t| (r, t)))
        .collect::<Result<_>>()?;
    Ok(built
        .into_iter()
        .filter(|(_, t)| policy.include_classifier || !t.reaches_output())
        .collect())
}

/// Result of tree construction that tolerates failing roots.
#[derive(Debug, Clone, Default)]
pub struct Forest {
    pub trees: BTreeMap<usize, AssocTree>,
    /// Roots left out by the classifier policy.
    pub excluded: Vec<usize>,
    /// Roots whose tree could not be built; they stay unpruned.
    pub skipped: Vec<(usize, Diagnostic)>,
}

/// Like [`build_all_trees`], but a root whose tree fails (for example
/// because it reaches an unregistered op) is skipped with a diagnostic.
pub fn build_forest(graph: &NodeGraph, registry: &AttributeRegistry, policy: TreePolicy) -> Forest {
    let results: Vec<(usize, Result<AssocTree>)> = prunable_nodes(graph, registry)
        .into_par_iter()
        .map(|r| (r, build_tree(graph, registry, r)))
        .collect();
    let mut forest = Forest::default();
    for (root, result) in results {
        match result {
            Ok(t) if !policy.include_classifier && t.reaches_output() => forest.excluded.push(root),
            Ok(t) => {
                forest.trees.insert(root, t);
            }
            Err(e) => {
                let label = graph.label(root);
                forest
                    .skipped
                    .push((root, Diagnostic::warning(Some(&label), format!("not pruned: {e}"))));
            }
        }
    }
    forest
}
