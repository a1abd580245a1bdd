//! k-score budget allocation and activation-ranked structured pruning.

mod activations;
mod apply;
mod kscore;
mod plan;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::ModelGraph;
use crate::profiler::BlockProfile;
use crate::tensor::Tensor;

pub use activations::{collect_activations, descending_order, ActivationStats};
pub use apply::{apply_prune, apply_prune_with_summary, PruneSummary};
pub use kscore::{
    allocate, allocate_capped, compute_kscores, AllocationPlan, BlockAllocation, BlockScore, KScoreTable,
    DEFAULT_MAX_BLOCK_RATIO,
};
pub use plan::{make_prune_plan, select_lowest, units_to_remove, GroupPrune, PruneMethod, PrunePlan, SkipRecord};

/// Everything produced by one profile-to-pruned-model run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneAudit {
    pub kscores: KScoreTable,
    pub allocation: AllocationPlan,
    pub plan: PrunePlan,
    pub summary: PruneSummary,
}

#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub model: ModelGraph,
    pub audit: PruneAudit,
}

/// k-scores from `profiles`, allocation at ratio `p`, (activation statistics
/// over `calibration` when needed), unit selection and structural removal.
pub fn prune_model(
    model: &ModelGraph,
    profiles: &[BlockProfile],
    calibration: &[Tensor],
    p: f64,
    method: PruneMethod,
    seed: u64,
) -> Result<PruneOutcome> {
    let kscores = compute_kscores(profiles)?;
    let allocation = allocate(p, &kscores)?;
    let stats = match method {
        PruneMethod::Disha => Some(collect_activations(model, calibration)?),
        PruneMethod::Random => None,
    };
    let plan = make_prune_plan(model, stats.as_ref(), &allocation, method, seed)?;
    let (pruned, summary) = apply_prune_with_summary(model, &plan)?;
    Ok(PruneOutcome {
        model: pruned,
        audit: PruneAudit {
            kscores,
            allocation,
            plan,
            summary,
        },
    })
}
