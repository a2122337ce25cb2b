use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::AssocTree;
use crate::error::{Error, Result};
use crate::graph::NodeGraph;

/// Elementwise ops that combine their inputs position by position; roots
/// reaching different inputs of one of these must share a channel mask.
pub const MERGE_OPS: &[&str] = &["Add", "Sub", "Mul", "Div", "Pow", "Max", "Min", "Sum", "Mean"];

/// Roots that drop the same channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PruningGroup {
    pub id: usize,
    /// Graph indices of the member roots, in topological order.
    pub members: Vec<usize>,
    /// Common channel count on the pruned axis.
    pub channels: usize,
    #[serde(skip)]
    pub trees: Vec<AssocTree>,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the smaller index as representative for determinism
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Unions trees whose roots reach the same merge node through different
/// input slots, then checks that every group agrees on its channel count.
pub fn merge_groups(graph: &NodeGraph, trees: &BTreeMap<usize, AssocTree>) -> Result<Vec<PruningGroup>> {
    let rank: BTreeMap<usize, usize> = graph
        .topo_order()
        .iter()
        .enumerate()
        .map(|(pos, &node)| (node, pos))
        .collect();
    let mut roots: Vec<usize> = trees.keys().copied().collect();
    roots.sort_by_key(|r| rank[r]);
    let slot_of: BTreeMap<usize, usize> = roots.iter().enumerate().map(|(i, &r)| (r, i)).collect();

    // merge node -> (input slot -> roots reaching it)
    let mut reach: BTreeMap<usize, BTreeMap<usize, BTreeSet<usize>>> = BTreeMap::new();
    for (&root, tree) in trees {
        for n in tree.nodes().iter().skip(1) {
            if MERGE_OPS.contains(&graph.node(n.node).op_type.as_str()) {
                for &slot in &n.input_slots {
                    reach
                        .entry(n.node)
                        .or_default()
                        .entry(slot)
                        .or_default()
                        .insert(root);
                }
            }
        }
    }

    let mut uf = UnionFind::new(roots.len());
    for slots in reach.values() {
        if slots.len() < 2 {
            continue;
        }
        let mut all = slots.values().flatten();
        let first = *all.next().unwrap();
        for &other in all {
            uf.union(slot_of[&first], slot_of[&other]);
        }
    }

    let mut by_rep: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &root) in roots.iter().enumerate() {
        by_rep.entry(uf.find(i)).or_default().push(root);
    }
    let mut groups: Vec<Vec<usize>> = by_rep.into_values().collect();
    groups.sort_by_key(|members| rank[&members[0]]);

    groups
        .into_iter()
        .enumerate()
        .map(|(id, members)| {
            let first = members[0];
            let channels = trees[&first].channels();
            for &m in &members[1..] {
                let c = trees[&m].channels();
                if c != channels {
                    return Err(Error::ChannelMismatch {
                        a: graph.label(first),
                        ca: channels,
                        b: graph.label(m),
                        cb: c,
                    });
                }
            }
            Ok(PruningGroup {
                id,
                trees: members.iter().map(|m| trees[m].clone()).collect(),
                members,
                channels,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attrs::AttributeRegistry;
    use crate::graph::build_graph;
    use crate::model::{synthesize_model, FixtureSpec};
    use crate::tree::{build_all_trees, TreePolicy};

    fn groups_of(template: &str) -> (NodeGraph, Vec<PruningGroup>) {
        let m = synthesize_model(&FixtureSpec::new(template).seed(3)).unwrap();
        let g = build_graph(&m).unwrap();
        let trees = build_all_trees(&g, &AttributeRegistry::builtin(), TreePolicy::default()).unwrap();
        let groups = merge_groups(&g, &trees).unwrap();
        (g, groups)
    }

    fn names(g: &NodeGraph, groups: &[PruningGroup]) -> Vec<Vec<String>> {
        groups
            .iter()
            .map(|gr| gr.members.iter().map(|&m| g.label(m)).collect())
            .collect()
    }

    #[test]
    fn residual_block_couples_add_inputs() {
        let (g, groups) = groups_of("residual_block");
        assert_eq!(names(&g, &groups), vec![vec!["stem", "conv_a"]]);
        assert_eq!(groups[0].channels, 16);
    }

    #[test]
    fn chained_stage_is_one_group() {
        let (g, groups) = groups_of("residual_stage");
        let n = names(&g, &groups);
        assert!(n.contains(&vec![
            "stem".to_string(),
            "conv_b1".into(),
            "conv_b2".into()
        ]), "{n:?}");
        for single in ["conv_a1", "conv_a2"] {
            assert!(n.contains(&vec![single.to_string()]), "{n:?}");
        }
    }

    #[test]
    fn fire_module_groups_are_singletons() {
        let (g, groups) = groups_of("fire_module");
        assert_eq!(
            names(&g, &groups),
            vec![vec!["squeeze"], vec!["expand1x1"], vec!["expand3x3"]]
        );
    }

    #[test]
    fn group_ids_are_sequential() {
        let (_, groups) = groups_of("many_to_many_block");
        for (i, gr) in groups.iter().enumerate() {
            assert_eq!(gr.id, i);
        }
    }
}
