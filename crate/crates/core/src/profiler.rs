//! Per-block wall-clock profiling and the energy / battery estimators built on it.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardObserver, ModelGraph};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockProfile {
    #[serde(rename = "b")]
    pub block: usize,
    #[serde(rename = "l_b_ms")]
    pub latency_ms: f64,
    pub latency_stddev_ms: f64,
    /// Every parameter in the block.
    #[serde(rename = "w_b")]
    pub param_count: usize,
    /// Parameters of ops that can lose units; the k-score weight.
    pub prunable_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub blocks: Vec<BlockProfile>,
    pub decoder_ms: f64,
    pub decoder_stddev_ms: f64,
    pub total_ms: f64,
    pub reps: usize,
    pub warmup: usize,
}

static PROFILING: AtomicBool = AtomicBool::new(false);

/// Serialises unit tests that profile, since the guard rejects overlap.
#[cfg(test)]
pub(crate) fn test_lock() -> std::sync::MutexGuard<'static, ()> {
    static LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

struct ProfilingGuard;

impl ProfilingGuard {
    fn acquire() -> Result<Self> {
        PROFILING
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .map(|_| ProfilingGuard)
            .map_err(|_| Error::ProfilerBusy)
    }
}

impl Drop for ProfilingGuard {
    fn drop(&mut self) {
        PROFILING.store(false, Ordering::Release);
    }
}

#[derive(Default)]
struct Timer {
    started: Option<Instant>,
    blocks: BTreeMap<usize, Vec<f64>>,
    decoder: Vec<f64>,
}

impl Timer {
    fn stop(&mut self) -> f64 {
        self.started
            .take()
            .map_or(0.0, |t| t.elapsed().as_secs_f64() * 1e3)
    }
}

impl ForwardObserver for Timer {
    fn block_start(&mut self, _block: usize) {
        self.started = Some(Instant::now());
    }

    fn block_end(&mut self, block: usize) {
        let ms = self.stop();
        self.blocks.entry(block).or_default().push(ms);
    }

    fn decoder_start(&mut self) {
        self.started = Some(Instant::now());
    }

    fn decoder_end(&mut self) {
        let ms = self.stop();
        self.decoder.push(ms);
    }
}

/// Median of the means of (up to) five contiguous groups of samples.
pub fn median_of_means(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let groups = samples.len().min(5);
    let mut means: Vec<f64> = (0..groups)
        .map(|g| {
            let lo = g * samples.len() / groups;
            let hi = (g + 1) * samples.len() / groups;
            samples[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    if groups % 2 == 1 {
        means[groups / 2]
    } else {
        0.5 * (means[groups / 2 - 1] + means[groups / 2])
    }
}

fn stddev(samples: &[f64]) -> f64 {
    if samples.len() < 2 {
        return 0.0;
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
    var.sqrt()
}

/// Times every block (and the decoder) inside `reps` full forward passes
/// after `warmup` discarded passes. Only one profiling run may be active per
/// process.
pub fn profile_model(model: &ModelGraph, input: &Tensor, reps: usize, warmup: usize) -> Result<ModelProfile> {
    if reps == 0 {
        return Err(Error::Domain("reps must be at least 1".into()));
    }
    let _guard = ProfilingGuard::acquire()?;
    for _ in 0..warmup {
        model.forward_observed(input, &mut ())?;
    }
    let mut timer = Timer::default();
    let mut totals = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        model.forward_observed(input, &mut timer)?;
        totals.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let blocks = model
        .blocks
        .iter()
        .map(|b| {
            let samples = timer.blocks.get(&b.index).map(Vec::as_slice).unwrap_or(&[]);
            BlockProfile {
                block: b.index,
                // a block can never take literally zero time
                latency_ms: median_of_means(samples).max(1e-9),
                latency_stddev_ms: stddev(samples),
                param_count: b.param_count(),
                prunable_params: b.prunable_param_count(),
            }
        })
        .collect();
    Ok(ModelProfile {
        blocks,
        decoder_ms: median_of_means(&timer.decoder),
        decoder_stddev_ms: stddev(&timer.decoder),
        total_ms: median_of_means(&totals),
        reps,
        warmup,
    })
}

pub fn profile_blocks(model: &ModelGraph, reps: usize, warmup: usize, input: &Tensor) -> Result<Vec<BlockProfile>> {
    Ok(profile_model(model, input, reps, warmup)?.blocks)
}

/// Watts drawn while each block (and optionally the decoder) executes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerModel {
    pub block_watts: BTreeMap<usize, f64>,
    pub decoder_watts: Option<f64>,
}

impl PowerModel {
    pub fn uniform(watts: f64, blocks: usize) -> Self {
        Self {
            block_watts: (1..=blocks).map(|b| (b, watts)).collect(),
            decoder_watts: Some(watts),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            block_watts: self.block_watts.iter().map(|(&b, &w)| (b, w * factor)).collect(),
            decoder_watts: self.decoder_watts.map(|w| w * factor),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockEnergy {
    pub b: usize,
    pub l_b_ms: f64,
    pub w_b: usize,
    #[serde(rename = "power_W")]
    pub power_w: f64,
    #[serde(rename = "energy_J")]
    pub energy_j: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageEnergy {
    pub latency_ms: f64,
    #[serde(rename = "power_W")]
    pub power_w: f64,
    #[serde(rename = "energy_J")]
    pub energy_j: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub blocks: Vec<BlockEnergy>,
    pub decoder: Option<StageEnergy>,
    pub total_latency_ms: f64,
    #[serde(rename = "total_energy_J")]
    pub total_energy_j: f64,
    #[serde(rename = "avg_power_W")]
    pub avg_power_w: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub latency_pct: f64,
    pub energy_pct: f64,
}

pub fn reduction_pct(baseline: f64, value: f64) -> f64 {
    if baseline == 0.0 {
        0.0
    } else {
        100.0 * (baseline - value) / baseline
    }
}

impl EnergyReport {
    pub fn reduction_vs(&self, baseline: &EnergyReport) -> Reduction {
        Reduction {
            latency_pct: reduction_pct(baseline.total_latency_ms, self.total_latency_ms),
            energy_pct: reduction_pct(baseline.total_energy_j, self.total_energy_j),
        }
    }
}

/// `energy_J(b) = power_W(b) * latency_s(b)`, summed with the decoder stage
/// when a decoder latency is supplied.
pub fn estimate_energy(
    profiles: &[BlockProfile],
    decoder_latency_ms: Option<f64>,
    power: &PowerModel,
) -> Result<EnergyReport> {
    let check = |what: String, w: f64| {
        if w > 0.0 && w.is_finite() {
            Ok(w)
        } else {
            Err(Error::Domain(format!("{what} power must be positive, got {w}")))
        }
    };
    let mut blocks = Vec::with_capacity(profiles.len());
    for p in profiles {
        let w = *power
            .block_watts
            .get(&p.block)
            .ok_or_else(|| Error::Config(format!("power model has no entry for block {}", p.block)))?;
        let w = check(format!("block {}", p.block), w)?;
        blocks.push(BlockEnergy {
            b: p.block,
            l_b_ms: p.latency_ms,
            w_b: p.param_count,
            power_w: w,
            energy_j: w * p.latency_ms / 1e3,
        });
    }
    let decoder = match decoder_latency_ms {
        Some(ms) => {
            let w = power
                .decoder_watts
                .ok_or_else(|| Error::Config("power model has no decoder entry".into()))?;
            let w = check("decoder".into(), w)?;
            Some(StageEnergy {
                latency_ms: ms,
                power_w: w,
                energy_j: w * ms / 1e3,
            })
        }
        None => None,
    };
    let total_latency_ms =
        blocks.iter().map(|b| b.l_b_ms).sum::<f64>() + decoder.as_ref().map_or(0.0, |d| d.latency_ms);
    let total_energy_j =
        blocks.iter().map(|b| b.energy_j).sum::<f64>() + decoder.as_ref().map_or(0.0, |d| d.energy_j);
    let avg_power_w = if total_latency_ms > 0.0 {
        total_energy_j / (total_latency_ms / 1e3)
    } else {
        0.0
    };
    Ok(EnergyReport {
        blocks,
        decoder,
        total_latency_ms,
        total_energy_j,
        avg_power_w,
    })
}

/// Runtime of a battery pack at a constant draw, using nominal-voltage energy.
pub fn estimate_battery_hours(avg_power_w: f64, capacity_mah: f64, voltage_v: f64) -> Result<f64> {
    for (name, v) in [("power", avg_power_w), ("capacity", capacity_mah), ("voltage", voltage_v)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Domain(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(capacity_mah / 1000.0 * voltage_v / avg_power_w)
}

/// Extra hours gained by drawing `pruned_w` instead of `baseline_w`.
pub fn battery_extension_hours(baseline_w: f64, pruned_w: f64, capacity_mah: f64, voltage_v: f64) -> Result<f64> {
    Ok(estimate_battery_hours(pruned_w, capacity_mah, voltage_v)?
        - estimate_battery_hours(baseline_w, capacity_mah, voltage_v)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_toyformer, ArchitectureConfig};

    fn profile(block: usize, ms: f64, w: usize) -> BlockProfile {
        BlockProfile {
            block,
            latency_ms: ms,
            latency_stddev_ms: 0.0,
            param_count: w,
            prunable_params: w,
        }
    }

    #[test]
    fn one_profile_per_block() {
        let _serial = test_lock();
        let cfg = ArchitectureConfig::tiny(0);
        let m = build_toyformer(&cfg).unwrap();
        let p = profile_model(&m, &Tensor::zeros(&[3, 32, 32]), 3, 1).unwrap();
        assert_eq!(p.blocks.len(), 4);
        for (bp, b) in p.blocks.iter().zip(&m.blocks) {
            assert!(bp.latency_ms > 0.0 && bp.latency_stddev_ms >= 0.0);
            assert_eq!(bp.param_count, b.param_count());
        }
        assert!(matches!(
            profile_blocks(&m, 0, 0, &Tensor::zeros(&[3, 32, 32])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn concurrent_profiling_rejected() {
        let _serial = test_lock();
        let _held = ProfilingGuard::acquire().unwrap();
        let m = build_toyformer(&ArchitectureConfig::tiny(0)).unwrap();
        let r = profile_model(&m, &Tensor::zeros(&[3, 32, 32]), 1, 0);
        assert!(matches!(r, Err(Error::ProfilerBusy)));
    }

    #[test]
    fn median_of_means_groups() {
        assert_eq!(median_of_means(&[1.0, 2.0, 3.0, 4.0, 100.0]), 3.0);
        assert_eq!(median_of_means(&[2.0]), 2.0);
        assert_eq!(median_of_means(&[1.0, 3.0]), 2.0);
    }

    #[test]
    fn energy_unit_arithmetic_and_linearity() {
        let ps = [profile(1, 10.0, 5)];
        let r = estimate_energy(&ps, None, &PowerModel::uniform(2.0, 1)).unwrap();
        assert!((r.blocks[0].energy_j - 0.02).abs() < 1e-12);

        let ps = [profile(1, 3.0, 1), profile(2, 7.0, 1)];
        let pm = PowerModel::uniform(1.5, 2);
        let a = estimate_energy(&ps, Some(4.0), &pm).unwrap();
        let b = estimate_energy(&ps, Some(4.0), &pm.scaled(2.0)).unwrap();
        assert!((b.total_energy_j - 2.0 * a.total_energy_j).abs() < 1e-12);
        let sum: f64 = a.blocks.iter().map(|b| b.energy_j).sum::<f64>() + a.decoder.unwrap().energy_j;
        assert!((a.total_energy_j - sum).abs() < 1e-15);
    }

    #[test]
    fn energy_errors() {
        let ps = [profile(1, 1.0, 1), profile(2, 1.0, 1)];
        assert!(matches!(
            estimate_energy(&ps, None, &PowerModel::uniform(1.0, 1)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            estimate_energy(&ps, None, &PowerModel::uniform(0.0, 2)),
            Err(Error::Domain(_))
        ));
        let mut pm = PowerModel::uniform(1.0, 2);
        pm.decoder_watts = None;
        assert!(matches!(estimate_energy(&ps, Some(1.0), &pm), Err(Error::Config(_))));
    }

    #[test]
    fn reduction_against_baseline() {
        let base = estimate_energy(&[profile(1, 100.0, 1)], None, &PowerModel::uniform(1.0, 1)).unwrap();
        let pruned = estimate_energy(&[profile(1, 79.54, 1)], None, &PowerModel::uniform(1.0, 1)).unwrap();
        let r = pruned.reduction_vs(&base);
        assert!((r.energy_pct - 20.46).abs() < 1e-9);
        assert!((r.latency_pct - 20.46).abs() < 1e-9);
    }

    #[test]
    fn battery_formula() {
        let h = estimate_battery_hours(9.36, 7800.0, 12.0).unwrap();
        assert!((h - 10.0).abs() < 1e-12);
        let half = estimate_battery_hours(4.68, 7800.0, 12.0).unwrap();
        assert!((half - 2.0 * h).abs() < 1e-9);
        assert!(battery_extension_hours(10.0, 8.0, 7800.0, 12.0).unwrap() > 0.0);
        assert_eq!(battery_extension_hours(10.0, 10.0, 7800.0, 12.0).unwrap(), 0.0);
        assert!(matches!(estimate_battery_hours(0.0, 1.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(estimate_battery_hours(1.0, -1.0, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn json_field_names() {
        let r = estimate_energy(&[profile(1, 10.0, 5)], None, &PowerModel::uniform(2.0, 1)).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        let b = &v["blocks"][0];
        for key in ["b", "l_b_ms", "w_b", "power_W", "energy_J"] {
            assert!(b.get(key).is_some(), "{key}");
        }
    }
}
