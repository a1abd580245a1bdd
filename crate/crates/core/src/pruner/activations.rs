use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActivationTrace, ModelGraph, PruneGroup};
use crate::tensor::Tensor;

/// Summed absolute activation of every output unit of every prunable op,
/// accumulated over a calibration set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub ops: BTreeMap<String, Vec<f64>>,
    pub samples: usize,
}

/// Unit indices ordered by descending score; equal scores keep the lower index first.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

impl ActivationStats {
    pub fn from_trace(trace: ActivationTrace, samples: usize) -> Self {
        Self {
            ops: trace.sums,
            samples,
        }
    }

    pub fn units(&self, op: &str) -> Option<usize> {
        self.ops.get(op).map(Vec::len)
    }

    pub fn sorted_desc(&self, op: &str) -> Option<Vec<usize>> {
        self.ops.get(op).map(|a| descending_order(a))
    }

    /// Elementwise sum of the members' activation sums.
    pub fn group_scores(&self, group: &PruneGroup) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; group.units];
        for m in &group.members {
            let a = self
                .ops
                .get(m)
                .ok_or_else(|| Error::Config(format!("no activation statistics for {m}")))?;
            if a.len() != group.units {
                return Err(Error::Consistency(format!(
                    "statistics for {m} cover {} units, op has {}",
                    a.len(),
                    group.units
                )));
            }
            for (s, v) in acc.iter_mut().zip(a) {
                *s += v;
            }
        }
        Ok(acc)
    }
}

/// Runs every calibration image through the model in order and accumulates
/// per-unit absolute activations.
pub fn collect_activations(model: &ModelGraph, calibration: &[Tensor]) -> Result<ActivationStats> {
    if calibration.is_empty() {
        return Err(Error::Domain("calibration set is empty".into()));
    }
    let mut trace = ActivationTrace::default();
    for image in calibration {
        model.forward_observed(image, &mut trace)?;
    }
    Ok(ActivationStats::from_trace(trace, calibration.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_toyformer, ArchitectureConfig, ForwardObserver, OpKind, OpSpec};
    use crate::tensor::linear;
    use rand::{Rng, SeedableRng};

    fn images(cfg: &ArchitectureConfig, n: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Tensor::from_fn(&[3, cfg.input_height, cfg.input_width], |_| rng.random::<f32>()))
            .collect()
    }

    fn linear_op(id: &str, w: Tensor, b: Tensor) -> OpSpec {
        OpSpec {
            id: id.into(),
            kind: OpKind::Linear,
            params: vec![w, b],
            prunable: true,
            tie: None,
            prune_heads: 1,
            consumers: vec![],
            attrs: Default::default(),
        }
    }

    #[test]
    fn zero_row_gives_zero_activation() {
        let op = linear_op(
            "l",
            Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap(),
            Tensor::zeros(&[2]),
        );
        let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let y = linear(&x, &op.params[0], op.bias()).unwrap();
        let mut trace = ActivationTrace::default();
        trace.activation(&op, &y, 1);
        assert_eq!(trace.sums["l"], vec![2.0, 0.0]);
    }

    #[test]
    fn two_op_chain_matches_loop_oracle() {
        let w1 = Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap();
        let b1 = Tensor::new(vec![3], vec![0.1, -0.2, 0.0]).unwrap();
        let w2 = Tensor::new(vec![2, 3], vec![1.0, -1.0, 0.5, 0.0, 2.0, -0.5]).unwrap();
        let b2 = Tensor::new(vec![2], vec![0.3, 0.0]).unwrap();
        let (a, b) = (linear_op("a", w1.clone(), b1.clone()), linear_op("b", w2.clone(), b2.clone()));
        let inputs = [[1.0f32, 2.0], [-0.5, 0.75], [3.0, -1.0], [0.0, 0.0]];

        let mut trace = ActivationTrace::default();
        for x in &inputs {
            let x = Tensor::new(vec![1, 2], x.to_vec()).unwrap();
            let h = linear(&x, &a.params[0], a.bias()).unwrap();
            trace.activation(&a, &h, 1);
            let y = linear(&h, &b.params[0], b.bias()).unwrap();
            trace.activation(&b, &y, 1);
        }

        let (mut oa, mut ob) = (vec![0.0f64; 3], vec![0.0f64; 2]);
        for x in &inputs {
            let mut h = [0.0f64; 3];
            for u in 0..3 {
                h[u] = b1.data()[u] as f64
                    + (0..2).map(|i| w1.data()[u * 2 + i] as f64 * x[i] as f64).sum::<f64>();
                oa[u] += (h[u] as f32).abs() as f64;
            }
            for u in 0..2 {
                let y = b2.data()[u] as f64
                    + (0..3).map(|i| w2.data()[u * 3 + i] as f64 * (h[i] as f32) as f64).sum::<f64>();
                ob[u] += (y as f32).abs() as f64;
            }
        }
        for (g, w) in trace.sums["a"].iter().zip(&oa) {
            assert!((g - w).abs() < 1e-9);
        }
        for (g, w) in trace.sums["b"].iter().zip(&ob) {
            assert!((g - w).abs() < 1e-6);
        }
    }

    #[test]
    fn duplicated_calibration_doubles_sums() {
        let cfg = ArchitectureConfig::tiny(3);
        let m = build_toyformer(&cfg).unwrap();
        let imgs = images(&cfg, 2, 1);
        let once = collect_activations(&m, &imgs).unwrap();
        let twice_set: Vec<_> = imgs.iter().chain(imgs.iter()).cloned().collect();
        let twice = collect_activations(&m, &twice_set).unwrap();
        assert_eq!(twice.samples, 4);
        for (id, a) in &once.ops {
            for (x, y) in a.iter().zip(&twice.ops[id]) {
                assert!((2.0 * x - y).abs() <= 1e-9 * y.abs().max(1.0), "{id}");
                assert!(*x >= 0.0);
            }
        }
        assert_eq!(once, collect_activations(&m, &imgs).unwrap());
    }

    #[test]
    fn empty_calibration_rejected() {
        let m = build_toyformer(&ArchitectureConfig::tiny(0)).unwrap();
        assert!(matches!(collect_activations(&m, &[]), Err(Error::Domain(_))));
    }

    #[test]
    fn sort_order_is_a_stable_permutation() {
        let order = descending_order(&[1.0, 3.0, 1.0, 2.0]);
        assert_eq!(order, vec![1, 3, 0, 2]);
    }
}
