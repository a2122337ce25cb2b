//! Everything derived from a model that planning, rewriting and validation
//! share.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::attrs::AttributeRegistry;
use crate::error::{Diagnostic, Error, Result};
use crate::graph::{build_graph, infer_shapes, input_shapes_from_model, NodeGraph, ShapeEnv};
use crate::model::{validate_syntax, ModelArchive};
use crate::scoring::{analyze_group, make_plan, ChannelScorer, GroupLayout, PruningPlan};
use crate::tree::{build_forest, build_tree, merge_groups, root_channels, Forest, PruningGroup, TreePolicy};

#[derive(Debug, Clone)]
pub struct PruneContext {
    pub model: ModelArchive,
    pub graph: NodeGraph,
    pub shapes: ShapeEnv,
    pub registry: AttributeRegistry,
    pub policy: TreePolicy,
    pub forest: Forest,
    pub groups: Vec<PruningGroup>,
    pub layouts: Vec<GroupLayout>,
}

impl PruneContext {
    /// Validates `model`, builds its graph, shapes, trees, groups and group
    /// layouts. Roots whose tree cannot be built are left out of the groups
    /// and reported by [`diagnostics`](Self::diagnostics).
    pub fn new(model: ModelArchive, registry: AttributeRegistry, policy: TreePolicy) -> Result<Self> {
        let errors: Vec<Diagnostic> = validate_syntax(&model).into_iter().filter(Diagnostic::is_error).collect();
        if !errors.is_empty() {
            return Err(Error::Validation(errors));
        }
        let graph = build_graph(&model)?;
        let shapes = infer_shapes(&model, &graph, &input_shapes_from_model(&model)?)?;
        let forest = build_forest(&graph, &registry, policy);
        let groups = merge_groups(&graph, &forest.trees)?;
        let layouts = groups
            .par_iter()
            .map(|g| analyze_group(&model, &graph, &shapes, &registry, g))
            .collect();
        Ok(PruneContext {
            model,
            graph,
            shapes,
            registry,
            policy,
            forest,
            groups,
            layouts,
        })
    }

    /// Skipped roots and pinned groups.
    pub fn diagnostics(&self) -> Vec<Diagnostic> {
        let mut out: Vec<Diagnostic> = self.forest.skipped.iter().map(|(_, d)| d.clone()).collect();
        for l in &self.layouts {
            for b in &l.blocked {
                out.push(Diagnostic::warning(b.node.as_deref(), format!("group {} kept whole: {}", l.group, b.message)));
            }
            out.extend(l.diagnostics.iter().cloned());
        }
        out
    }

    pub fn plan(&self, ratio: f64, scorer: &dyn ChannelScorer) -> Result<(PruningPlan, Vec<Diagnostic>)> {
        make_plan(&self.model, &self.graph, &self.layouts, ratio, scorer)
    }

    /// Layouts for the groups named in `plan`, in plan order.
    ///
    /// Groups matching this context's groups reuse their analysis; others
    /// are analyzed from the member list.
    pub fn layouts_for(&self, plan: &PruningPlan) -> Result<Vec<GroupLayout>> {
        let known: BTreeMap<Vec<usize>, &GroupLayout> =
            self.layouts.iter().map(|l| (l.members.clone(), l)).collect();
        let mut claimed = BTreeSet::new();
        plan.groups
            .iter()
            .map(|pg| {
                let mut members = Vec::with_capacity(pg.members.len());
                for name in &pg.members {
                    let idx = self.graph.find(name).ok_or_else(|| {
                        Error::InvalidArgument(format!("plan member `{name}` is not a node of the model"))
                    })?;
                    if !claimed.insert(idx) {
                        return Err(Error::InvalidArgument(format!("plan lists `{name}` in two groups")));
                    }
                    members.push(idx);
                }
                let mut layout = match known.get(&members) {
                    Some(l) => (*l).clone(),
                    None => {
                        let first = *members.first().ok_or_else(|| {
                            Error::InvalidArgument(format!("plan group {} has no members", pg.id))
                        })?;
                        let trees = members
                            .iter()
                            .map(|&m| build_tree(&self.graph, &self.registry, m))
                            .collect::<Result<Vec<_>>>()?;
                        let group = PruningGroup {
                            id: pg.id,
                            channels: root_channels(&self.graph, first)?,
                            members,
                            trees,
                        };
                        analyze_group(&self.model, &self.graph, &self.shapes, &self.registry, &group)
                    }
                };
                layout.group = pg.id;
                if layout.channels != pg.keep.len() {
                    return Err(Error::InvalidArgument(format!(
                        "plan group {} has {} mask entries but the model has {} channels",
                        pg.id,
                        pg.keep.len(),
                        layout.channels
                    )));
                }
                Ok(layout)
            })
            .collect()
    }
}
