use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Consumer, ModelGraph};

use super::activations::ActivationStats;
use super::kscore::AllocationPlan;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneMethod {
    /// Remove the units with the lowest summed absolute activation.
    Disha,
    /// Remove uniformly sampled units.
    Random,
}

impl fmt::Display for PruneMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneMethod::Disha => "disha",
            PruneMethod::Random => "random",
        })
    }
}

impl FromStr for PruneMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disha" => Ok(PruneMethod::Disha),
            "random" => Ok(PruneMethod::Random),
            other => Err(Error::Config(format!("unknown method {other:?}, expected disha|random"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupPrune {
    pub group: String,
    pub block: usize,
    pub members: Vec<String>,
    pub units: usize,
    pub heads: usize,
    /// `p_b` of the owning block.
    pub ratio: f64,
    /// Removed unit indices, ascending.
    pub removed: Vec<usize>,
    /// Ops whose input axis loses the same indices.
    pub consumers: Vec<Consumer>,
}

impl GroupPrune {
    /// `M`
    pub fn removed_count(&self) -> usize {
        self.removed.len()
    }

    pub fn kept(&self) -> Vec<usize> {
        let mut removed = self.removed.iter().peekable();
        (0..self.units)
            .filter(|u| {
                if removed.peek() == Some(&u) {
                    removed.next();
                    false
                } else {
                    true
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub group: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub method: PruneMethod,
    pub seed: u64,
    pub groups: Vec<GroupPrune>,
    pub skipped: Vec<SkipRecord>,
}

impl PrunePlan {
    pub fn empty(method: PruneMethod) -> Self {
        Self {
            method,
            seed: 0,
            groups: Vec::new(),
            skipped: Vec::new(),
        }
    }

    pub fn removed_units(&self) -> usize {
        self.groups.iter().map(GroupPrune::removed_count).sum()
    }
}

/// `M = round(ratio * units)`, never emptying the axis.
pub fn units_to_remove(ratio: f64, units: usize) -> usize {
    if units == 0 {
        return 0;
    }
    let m = (ratio * units as f64).round().max(0.0) as usize;
    m.min(units - 1)
}

/// The `m` lowest-scoring indices, ascending. Among equal scores the higher
/// index goes first, so the lower index is kept.
pub fn select_lowest(scores: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)));
    let mut out: Vec<usize> = idx.into_iter().take(m).collect();
    out.sort_unstable();
    out
}

/// Chooses which units every prune group loses. Each group is cut per head
/// slice at its block's ratio; `stats` is required for [`PruneMethod::Disha`].
pub fn make_prune_plan(
    model: &ModelGraph,
    stats: Option<&ActivationStats>,
    allocation: &AllocationPlan,
    method: PruneMethod,
    seed: u64,
) -> Result<PrunePlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::new();
    let mut skipped = Vec::new();
    for group in model.prune_groups() {
        let ratio = allocation
            .ratio_for(group.block)
            .ok_or_else(|| Error::Config(format!("allocation has no ratio for block {}", group.block)))?;
        let per_head = group.units / group.heads;
        if per_head <= 1 {
            log::warn!("skipping {}: one unit per head slice cannot be pruned", group.name);
            skipped.push(SkipRecord {
                group: group.name.clone(),
                reason: format!("{per_head} unit(s) per head slice"),
            });
            continue;
        }
        let m = units_to_remove(ratio, per_head);
        let scores = match method {
            PruneMethod::Disha => {
                let stats = stats.ok_or_else(|| Error::Config("activation-based pruning needs statistics".into()))?;
                Some(stats.group_scores(&group)?)
            }
            PruneMethod::Random => None,
        };
        let mut removed = Vec::with_capacity(m * group.heads);
        for h in 0..group.heads {
            let offset = h * per_head;
            match &scores {
                Some(s) => removed.extend(
                    select_lowest(&s[offset..offset + per_head], m)
                        .into_iter()
                        .map(|u| u + offset),
                ),
                None => {
                    let mut picked: Vec<usize> = sample(&mut rng, per_head, m).into_iter().collect();
                    picked.sort_unstable();
                    removed.extend(picked.into_iter().map(|u| u + offset));
                }
            }
        }
        groups.push(GroupPrune {
            group: group.name,
            block: group.block,
            members: group.members,
            units: group.units,
            heads: group.heads,
            ratio,
            removed,
            consumers: group.consumers,
        });
    }
    Ok(PrunePlan {
        method,
        seed,
        groups,
        skipped,
    })
}
