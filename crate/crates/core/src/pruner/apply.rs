use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Consumer, ModelGraph};

use super::plan::PrunePlan;

/// Parameter bookkeeping for one structured prune.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneSummary {
    pub params_before: usize,
    pub params_after: usize,
    pub prunable_before: usize,
    /// Parameters removed from the pruned ops' own output units, per block,
    /// counted at the unpruned shapes.
    pub direct_by_block: BTreeMap<usize, usize>,
    /// Everything else that disappeared: consumer input axes, pass-through
    /// ops, and the overlap between groups.
    pub cascade: usize,
}

impl PruneSummary {
    pub fn direct(&self) -> usize {
        self.direct_by_block.values().sum()
    }

    /// Directly removed parameters as a fraction of the prunable mass.
    pub fn prunable_reduction(&self) -> f64 {
        if self.prunable_before == 0 {
            0.0
        } else {
            self.direct() as f64 / self.prunable_before as f64
        }
    }

    pub fn total_reduction(&self) -> f64 {
        if self.params_before == 0 {
            0.0
        } else {
            (self.params_before - self.params_after) as f64 / self.params_before as f64
        }
    }
}

fn shrink_consumer(model: &mut ModelGraph, consumer: &Consumer, keep: &[usize]) -> Result<()> {
    let op = model.op_mut(&consumer.op)?;
    match consumer.axis {
        0 => {
            for p in op.params.iter_mut() {
                *p = p.select(0, keep)?;
            }
            if op.attrs.groups.is_some_and(|g| g > 1) {
                op.attrs.groups = Some(keep.len());
            }
        }
        1 => {
            if op.attrs.groups.is_some_and(|g| g > 1) {
                return Err(Error::Consistency(format!(
                    "{} is grouped and cannot lose input channels",
                    op.id
                )));
            }
            let w = op.weight()?.select(1, keep)?;
            op.params[0] = w;
        }
        axis => {
            return Err(Error::Consistency(format!("{} cannot consume on axis {axis}", op.id)));
        }
    }
    if consumer.axis == 0 {
        let next = op.consumers.clone();
        for c in &next {
            shrink_consumer(model, c, keep)?;
        }
    }
    Ok(())
}

/// Removes the planned units and every dependent slice, returning a new model
/// and its parameter bookkeeping.
pub fn apply_prune_with_summary(model: &ModelGraph, plan: &PrunePlan) -> Result<(ModelGraph, PruneSummary)> {
    let mut out = model.clone();
    let mut summary = PruneSummary {
        params_before: model.param_count(),
        prunable_before: model.prunable_param_count(),
        ..Default::default()
    };
    for g in &plan.groups {
        if g.removed.is_empty() {
            continue;
        }
        if g.removed.windows(2).any(|w| w[0] >= w[1]) || g.removed.last().is_some_and(|&u| u >= g.units) {
            return Err(Error::Consistency(format!(
                "group {} removal indices are not ascending within 0..{}",
                g.group, g.units
            )));
        }
        if g.removed.len() >= g.units {
            return Err(Error::Consistency(format!("group {} would lose every unit", g.group)));
        }
        let keep = g.kept();
        let mut direct = 0;
        for member in &g.members {
            let op = out.op_mut(member)?;
            if op.units() != Some(g.units) {
                return Err(Error::Consistency(format!(
                    "{member} has {:?} units, plan expects {}",
                    op.units(),
                    g.units
                )));
            }
            for p in op.params.iter_mut() {
                *p = p.select(0, &keep)?;
            }
            // measured on the original shapes so earlier cascades do not shrink it
            direct += model.op(member)?.param_count() / g.units * g.removed.len();
        }
        *summary.direct_by_block.entry(g.block).or_default() += direct;
        for c in &g.consumers {
            shrink_consumer(&mut out, c, &keep)?;
        }
    }
    out.check_consistency()?;
    summary.params_after = out.param_count();
    summary.cascade = summary.params_before - summary.params_after - summary.direct();
    Ok((out, summary))
}

pub fn apply_prune(model: &ModelGraph, plan: &PrunePlan) -> Result<ModelGraph> {
    apply_prune_with_summary(model, plan).map(|(m, _)| m)
}
