use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{select_channels, ChannelScorer, GroupLayout};
use crate::error::{Diagnostic, Error, Result};
use crate::graph::NodeGraph;
use crate::model::ModelArchive;

pub const PLAN_VERSION: u32 = 1;

/// Keep masks for every pruning group.
///
/// Index maps from group channels to consumer positions are not stored;
/// they are recomputed from the model when the plan is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub version: u32,
    pub ratio: f64,
    /// Scorer name, e.g. `l1/tree`.
    pub criterion: String,
    pub groups: Vec<PlanGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanGroup {
    pub id: usize,
    /// Member node names.
    pub members: Vec<String>,
    pub keep: Vec<bool>,
    pub scores: Vec<f64>,
}

impl PlanGroup {
    pub fn pruned(&self) -> BTreeSet<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter(|(_, k)| !**k)
            .map(|(i, _)| i)
            .collect()
    }
}

impl PruningPlan {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: PruningPlan = serde_json::from_str(text)?;
        if plan.version != PLAN_VERSION {
            return Err(Error::InvalidArgument(format!(
                "plan version {} is not supported (expected {PLAN_VERSION})",
                plan.version
            )));
        }
        for g in &plan.groups {
            if !g.keep.is_empty() && !g.keep.iter().any(|&k| k) {
                return Err(Error::InvalidArgument(format!("group {} keeps no channel", g.id)));
            }
        }
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Group whose member list contains `node`.
    pub fn group_of(&self, node: &str) -> Option<&PlanGroup> {
        self.groups.iter().find(|g| g.members.iter().any(|m| m == node))
    }

    /// Total number of pruned channels over all groups.
    pub fn pruned_count(&self) -> usize {
        self.groups.iter().map(|g| g.pruned().len()).sum()
    }
}

/// Scores every group and selects channels at `ratio`.
///
/// Groups the layout analysis could not follow keep all channels; each
/// such group, and each score fallback, yields a diagnostic.
pub fn make_plan(
    model: &ModelArchive,
    graph: &NodeGraph,
    layouts: &[GroupLayout],
    ratio: f64,
    scorer: &dyn ChannelScorer,
) -> Result<(PruningPlan, Vec<Diagnostic>)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "pruning ratio {ratio} is outside [0, 1)"
        )));
    }
    let scored: Vec<_> = layouts
        .par_iter()
        .map(|l| scorer.score(model, l))
        .collect::<Result<_>>()?;
    let mut diagnostics = Vec::new();
    let mut groups = Vec::with_capacity(layouts.len());
    for (layout, scores) in layouts.iter().zip(scored) {
        if scores.values.len() != layout.channels
            || scores.values.iter().any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "scorer `{}` returned an invalid score vector for group {}",
                scorer.name(),
                layout.group
            )));
        }
        diagnostics.extend(scores.fallback.clone());
        let keep = if layout.is_prunable() {
            select_channels(&scores.values, ratio)
        } else {
            let names: Vec<String> = layout.members.iter().map(|&m| graph.label(m)).collect();
            for b in &layout.blocked {
                diagnostics.push(Diagnostic::warning(
                    b.node.as_deref(),
                    format!("group [{}] kept whole: {}", names.join(", "), b.message),
                ));
            }
            vec![true; layout.channels]
        };
        diagnostics.extend(layout.diagnostics.iter().cloned());
        groups.push(PlanGroup {
            id: layout.group,
            members: layout.members.iter().map(|&m| graph.label(m)).collect(),
            keep,
            scores: scores.values,
        });
    }
    Ok((
        PruningPlan {
            version: PLAN_VERSION,
            ratio,
            criterion: scorer.name(),
            groups,
        },
        diagnostics,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan() -> PruningPlan {
        PruningPlan {
            version: PLAN_VERSION,
            ratio: 0.5,
            criterion: "l1/tree".into(),
            groups: vec![PlanGroup {
                id: 0,
                members: vec!["conv1".into()],
                keep: vec![true, false],
                scores: vec![8.0, 1.5],
            }],
        }
    }

    #[test]
    fn json_key_order_is_stable() {
        let text = plan().to_json().unwrap();
        let keys: Vec<usize> = ["\"version\"", "\"ratio\"", "\"criterion\"", "\"groups\""]
            .iter()
            .map(|k| text.find(k).unwrap())
            .collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(PruningPlan::from_json(&text).unwrap(), plan());
    }

    #[test]
    fn rejects_mask_without_kept_channel() {
        let mut p = plan();
        p.groups[0].keep = vec![false, false];
        assert!(PruningPlan::from_json(&p.to_json().unwrap()).is_err());
    }
}
