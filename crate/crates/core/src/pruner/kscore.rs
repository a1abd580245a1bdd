use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiler::BlockProfile;

/// Default upper bound on any block's pruning ratio.
pub const DEFAULT_MAX_BLOCK_RATIO: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockScore {
    pub block: usize,
    /// `w_b`
    pub params: usize,
    /// `l_b` in milliseconds.
    pub latency_ms: f64,
    /// `k_b = w_b * l_b`
    pub k_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KScoreTable {
    pub blocks: Vec<BlockScore>,
    pub sum_k: f64,
}

impl KScoreTable {
    /// Builds the table from `(block, w_b, l_b)` triples.
    pub fn from_entries(entries: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut blocks = Vec::new();
        for (block, params, latency_ms) in entries {
            if !(latency_ms > 0.0 && latency_ms.is_finite()) {
                return Err(Error::Domain(format!("block {block} latency must be positive, got {latency_ms}")));
            }
            if params == 0 {
                return Err(Error::Domain(format!("block {block} has no prunable parameters")));
            }
            blocks.push(BlockScore {
                block,
                params,
                latency_ms,
                k_score: params as f64 * latency_ms,
            });
        }
        if blocks.is_empty() {
            return Err(Error::Domain("k-scores need at least one block".into()));
        }
        let sum_k = blocks.iter().map(|b| b.k_score).sum();
        Ok(Self { blocks, sum_k })
    }

    pub fn total_params(&self) -> usize {
        self.blocks.iter().map(|b| b.params).sum()
    }

    /// Same table with every latency multiplied by `factor`.
    pub fn scale_latency(&self, factor: f64) -> Result<Self> {
        Self::from_entries(self.blocks.iter().map(|b| (b.block, b.params, b.latency_ms * factor)))
    }
}

/// k-score of every profiled block, weighted by its prunable parameter count.
pub fn compute_kscores(profiles: &[BlockProfile]) -> Result<KScoreTable> {
    KScoreTable::from_entries(profiles.iter().map(|p| (p.block, p.prunable_params, p.latency_ms)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockAllocation {
    pub block: usize,
    pub params: usize,
    pub k_score: f64,
    /// `w_b'` before integer rounding.
    pub pruned_exact: f64,
    /// `w_b'` rounded to whole parameters.
    pub pruned: usize,
    /// `p_b = w_b' / w_b`
    pub ratio: f64,
    /// Whether the block hit the ratio cap.
    pub clamped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    /// Global target ratio `p`.
    pub ratio: f64,
    /// `w`
    pub total_params: usize,
    /// `w' = p * w`
    pub total_pruned: f64,
    /// `c = w' / sum_k`
    pub constant: f64,
    pub sum_k: f64,
    pub max_block_ratio: f64,
    pub blocks: Vec<BlockAllocation>,
}

impl AllocationPlan {
    pub fn ratio_for(&self, block: usize) -> Option<f64> {
        self.blocks.iter().find(|b| b.block == block).map(|b| b.ratio)
    }

    pub fn rounded_total(&self) -> usize {
        self.blocks.iter().map(|b| b.pruned).sum()
    }
}

pub fn allocate(p: f64, table: &KScoreTable) -> Result<AllocationPlan> {
    allocate_capped(p, table, DEFAULT_MAX_BLOCK_RATIO)
}

/// Splits a global pruning ratio across blocks in proportion to k-score.
///
/// Blocks whose ratio would exceed `max_block_ratio` are pinned at the cap
/// and the leftover budget is re-split over the remaining blocks, again in
/// proportion to k-score.
pub fn allocate_capped(p: f64, table: &KScoreTable, max_block_ratio: f64) -> Result<AllocationPlan> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("pruning ratio must lie in (0, 1), got {p}")));
    }
    if !(max_block_ratio > 0.0 && max_block_ratio < 1.0) {
        return Err(Error::Domain(format!("block ratio cap must lie in (0, 1), got {max_block_ratio}")));
    }
    let w = table.total_params() as f64;
    let w_pruned = p * w;
    let n = table.blocks.len();
    let mut clamped = vec![false; n];
    let mut ratios = vec![0.0; n];
    loop {
        let any_clamped = clamped.iter().any(|&c| c);
        let fixed: f64 = table
            .blocks
            .iter()
            .zip(&clamped)
            .filter(|(_, &c)| c)
            .map(|(b, _)| max_block_ratio * b.params as f64)
            .sum();
        let residue = w_pruned - fixed;
        let k_free: f64 = table
            .blocks
            .iter()
            .zip(&clamped)
            .filter(|(_, &c)| !c)
            .map(|(b, _)| b.k_score)
            .sum();
        if k_free == 0.0 {
            if residue > 1e-9 * w {
                return Err(Error::Infeasible(format!(
                    "ratio {p} needs more than {max_block_ratio} of every block"
                )));
            }
            break;
        }
        let mut newly = false;
        for (i, b) in table.blocks.iter().enumerate() {
            if clamped[i] {
                ratios[i] = max_block_ratio;
                continue;
            }
            ratios[i] = if any_clamped {
                residue * (b.k_score / k_free) / b.params as f64
            } else {
                p * (w / b.params as f64) * (b.k_score / table.sum_k)
            };
            if ratios[i] > max_block_ratio {
                clamped[i] = true;
                newly = true;
            }
        }
        if !newly {
            break;
        }
    }
    let blocks = table
        .blocks
        .iter()
        .zip(ratios.iter().zip(&clamped))
        .map(|(b, (&ratio, &clamped))| {
            let pruned_exact = ratio * b.params as f64;
            BlockAllocation {
                block: b.block,
                params: b.params,
                k_score: b.k_score,
                pruned_exact,
                pruned: pruned_exact.round() as usize,
                ratio,
                clamped,
            }
        })
        .collect();
    Ok(AllocationPlan {
        ratio: p,
        total_params: table.total_params(),
        total_pruned: w_pruned,
        constant: w_pruned / table.sum_k,
        sum_k: table.sum_k,
        max_block_ratio,
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(entries: &[(usize, f64)]) -> KScoreTable {
        KScoreTable::from_entries(entries.iter().enumerate().map(|(i, &(w, l))| (i + 1, w, l))).unwrap()
    }

    #[test]
    fn kscore_examples() {
        let t = table(&[(10, 2.0)]);
        assert_eq!(t.blocks[0].k_score, 20.0);
        assert_eq!(t.sum_k, 20.0);

        let t = table(&[(100, 2.0), (300, 1.0)]);
        assert_eq!(t.blocks.iter().map(|b| b.k_score).collect::<Vec<_>>(), vec![200.0, 300.0]);
        assert_eq!(t.sum_k, 500.0);

        let t = table(&[(1_597_952, 2.4)]);
        assert!((t.blocks[0].k_score - 3_835_085.0).abs() <= 1.0);
    }

    #[test]
    fn kscore_errors() {
        assert!(matches!(KScoreTable::from_entries(vec![]), Err(Error::Domain(_))));
        assert!(matches!(KScoreTable::from_entries(vec![(1, 5, 0.0)]), Err(Error::Domain(_))));
        assert!(matches!(KScoreTable::from_entries(vec![(1, 0, 1.0)]), Err(Error::Domain(_))));
    }

    #[test]
    fn hand_computed_allocation() {
        // w' = 0.25 * 400 = 100, c = 100 / 500, w_b' = (40, 60)
        let plan = allocate(0.25, &table(&[(100, 2.0), (300, 1.0)])).unwrap();
        assert!((plan.total_pruned - 100.0).abs() < 1e-12);
        assert!((plan.constant - 0.2).abs() < 1e-12);
        let pruned: Vec<_> = plan.blocks.iter().map(|b| b.pruned).collect();
        assert_eq!(pruned, vec![40, 60]);
        assert!((plan.blocks[0].ratio - 0.40).abs() < 1e-12);
        assert!((plan.blocks[1].ratio - 0.20).abs() < 1e-12);
    }

    #[test]
    fn single_block_gets_global_ratio_exactly() {
        for p in [0.1, 0.35, 0.4, 0.123456789] {
            let plan = allocate(p, &table(&[(3, 0.7)])).unwrap();
            assert_eq!(plan.blocks[0].ratio, p);
        }
    }

    #[test]
    fn ratio_domain() {
        let t = table(&[(10, 1.0)]);
        for p in [0.0, 1.0, -0.2, 1.5, f64::NAN] {
            assert!(matches!(allocate(p, &t), Err(Error::Domain(_))), "{p}");
        }
    }

    #[test]
    fn clamp_redistributes_residue() {
        // Raw ratios: block 1 = 0.5 * 1100 * 10 / 1100 = 5.0, far above the cap.
        let t = table(&[(100, 10.0), (1000, 0.1)]);
        let plan = allocate(0.5, &t).unwrap();
        assert!(plan.blocks[0].clamped);
        assert_eq!(plan.blocks[0].ratio, DEFAULT_MAX_BLOCK_RATIO);
        let total: f64 = plan.blocks.iter().map(|b| b.pruned_exact).sum();
        assert!((total - 550.0).abs() < 1e-9);
        assert!((plan.blocks[1].ratio - 0.46).abs() < 1e-12);
    }

    #[test]
    fn infeasible_when_every_block_capped() {
        let t = table(&[(100, 1.0), (100, 1.0)]);
        assert!(matches!(allocate_capped(0.95, &t, 0.9), Err(Error::Infeasible(_))));
    }
}
