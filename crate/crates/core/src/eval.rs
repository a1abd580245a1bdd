//! Segmentation quality metrics and the pruned-vs-unpruned comparison report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::model::{ModelGraph, SegMask, CLASS_NAMES};
use crate::profiler::{estimate_battery_hours, estimate_energy, profile_model, reduction_pct, EnergyReport, PowerModel};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    /// Per class id, `None` when the class appears in neither mask.
    pub per_class: Vec<Option<f64>>,
    pub global: f64,
}

fn same_shape(a: &SegMask, b: &SegMask) -> Result<()> {
    if a.height() != b.height() {
        return Err(dim_err("mask height", a.height(), b.height()));
    }
    if a.width() != b.width() {
        return Err(dim_err("mask width", a.width(), b.width()));
    }
    Ok(())
}

/// Per-class IoU on a 0-100 scale; global is the plain mean over classes
/// present in either mask (100 when both masks are empty of every class).
pub fn iou(pred: &SegMask, truth: &SegMask) -> Result<IoUReport> {
    same_shape(pred, truth)?;
    let k = pred
        .classes()
        .iter()
        .chain(truth.classes())
        .map(|&c| c as usize + 1)
        .max()
        .unwrap_or(0)
        .max(CLASS_NAMES.len());
    let mut inter = vec![0usize; k];
    let mut union = vec![0usize; k];
    for (&p, &t) in pred.classes().iter().zip(truth.classes()) {
        if p == t {
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[t as usize] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| (u > 0).then(|| 100.0 * i as f64 / u as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let global = if present.is_empty() {
        100.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(IoUReport { per_class, global })
}

/// `100 * |disha - random| / random`; `None` when `random` is zero.
pub fn improvement(disha: f64, random: f64) -> Option<f64> {
    if random == 0.0 {
        None
    } else {
        Some(100.0 * (disha - random).abs() / random)
    }
}

/// Fraction of pixels on which two predictions agree.
pub fn fidelity(pruned: &SegMask, unpruned: &SegMask) -> Result<f64> {
    same_shape(pruned, unpruned)?;
    let n = pruned.classes().len();
    if n == 0 {
        return Ok(1.0);
    }
    let agree = pruned
        .classes()
        .iter()
        .zip(unpruned.classes())
        .filter(|(a, b)| a == b)
        .count();
    Ok(agree as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareOptions {
    pub reps: usize,
    pub warmup: usize,
    /// Draw of the unpruned system.
    pub power_w: f64,
    pub battery_mah: f64,
    pub battery_v: f64,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self {
            reps: 20,
            warmup: 3,
            power_w: 10.0,
            battery_mah: 7800.0,
            battery_v: 12.0,
        }
    }
}

/// Timing-independent quality and size figures of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub label: String,
    pub params: usize,
    pub param_reduction_pct: f64,
    pub prunable_params: usize,
    pub prunable_reduction_pct: f64,
    /// Mean pixel agreement with the unpruned model.
    pub fidelity: f64,
    /// Mean global IoU against the unpruned model's predictions.
    pub iou_vs_unpruned: f64,
    /// Mean global IoU against ground truth, when the dataset has it.
    pub iou_vs_truth: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub label: String,
    pub energy: EnergyReport,
    pub latency_reduction_pct: f64,
    pub energy_reduction_pct: f64,
    #[serde(rename = "avg_power_W")]
    pub avg_power_w: f64,
    pub battery_hours: f64,
    pub battery_extension_hours: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub scenes: usize,
    /// Rows for unpruned, random and disha, in that order.
    pub quality: Vec<QualityRow>,
    /// `improvement` of disha over random fidelity, in percent.
    pub fidelity_improvement_pct: Option<f64>,
    /// Everything derived from wall-clock measurements; excluded from
    /// determinism checks.
    pub timing: Vec<TimingRow>,
}

struct Scored {
    fidelity: f64,
    iou_vs_unpruned: f64,
    iou_vs_truth: Option<f64>,
}

fn score(model: &ModelGraph, base_preds: &[SegMask], dataset: &[(Tensor, Option<SegMask>)]) -> Result<Scored> {
    let (mut fid, mut iou_base, mut iou_truth, mut truths) = (0.0, 0.0, 0.0, 0usize);
    for ((img, truth), base) in dataset.iter().zip(base_preds) {
        let pred = model.predict(img)?;
        fid += fidelity(&pred, base)?;
        iou_base += iou(&pred, base)?.global;
        if let Some(t) = truth {
            iou_truth += iou(&pred, t)?.global;
            truths += 1;
        }
    }
    let n = dataset.len() as f64;
    Ok(Scored {
        fidelity: fid / n,
        iou_vs_unpruned: iou_base / n,
        iou_vs_truth: (truths > 0).then(|| iou_truth / truths as f64),
    })
}

/// Profiles and scores the unpruned, random-pruned and activation-pruned
/// models over `dataset`. Pruned systems are assumed to draw power in
/// proportion to their energy per frame.
pub fn compare_report(
    base: &ModelGraph,
    disha: &ModelGraph,
    random: &ModelGraph,
    dataset: &[(Tensor, Option<SegMask>)],
    opts: &CompareOptions,
) -> Result<ComparisonReport> {
    if dataset.is_empty() {
        return Err(Error::Domain("comparison needs at least one scene".into()));
    }
    for m in [disha, random] {
        let (a, b) = (&base.config, &m.config);
        if (a.input_height, a.input_width, a.num_classes) != (b.input_height, b.input_width, b.num_classes) {
            return Err(Error::Config("models do not share input size and class count".into()));
        }
    }
    let base_preds = dataset
        .iter()
        .map(|(img, _)| base.predict(img))
        .collect::<Result<Vec<_>>>()?;
    let power = PowerModel::uniform(opts.power_w, base.num_blocks());
    let probe = &dataset[0].0;

    let models = [("unpruned", base), ("random", random), ("disha", disha)];
    let mut quality = Vec::new();
    let mut energies = Vec::new();
    for (label, m) in models {
        let s = score(m, &base_preds, dataset)?;
        quality.push(QualityRow {
            label: label.into(),
            params: m.param_count(),
            param_reduction_pct: reduction_pct(base.param_count() as f64, m.param_count() as f64),
            prunable_params: m.prunable_param_count(),
            prunable_reduction_pct: reduction_pct(base.prunable_param_count() as f64, m.prunable_param_count() as f64),
            fidelity: s.fidelity,
            iou_vs_unpruned: s.iou_vs_unpruned,
            iou_vs_truth: s.iou_vs_truth,
        });
        // an unchanged model reuses the baseline measurement instead of a noisy retime
        let energy = match energies.first() {
            Some(e) if m == base => Clone::clone(e),
            _ => {
                let prof = profile_model(m, probe, opts.reps, opts.warmup)?;
                estimate_energy(&prof.blocks, Some(prof.decoder_ms), &power)?
            }
        };
        energies.push(energy);
    }

    let base_energy = energies[0].clone();
    let base_hours = estimate_battery_hours(opts.power_w, opts.battery_mah, opts.battery_v)?;
    let mut timing = Vec::new();
    for ((label, _), energy) in models.iter().zip(energies) {
        let red = energy.reduction_vs(&base_energy);
        let draw = opts.power_w * energy.total_energy_j / base_energy.total_energy_j;
        let hours = estimate_battery_hours(draw, opts.battery_mah, opts.battery_v)?;
        timing.push(TimingRow {
            label: (*label).into(),
            latency_reduction_pct: red.latency_pct,
            energy_reduction_pct: red.energy_pct,
            avg_power_w: draw,
            battery_hours: hours,
            battery_extension_hours: hours - base_hours,
            energy,
        });
    }
    Ok(ComparisonReport {
        scenes: dataset.len(),
        fidelity_improvement_pct: improvement(100.0 * quality[2].fidelity, 100.0 * quality[1].fidelity),
        quality,
        timing,
    })
}

impl ComparisonReport {
    /// The report without its timing section, for determinism checks.
    pub fn without_timing(&self) -> Self {
        Self {
            timing: Vec::new(),
            ..self.clone()
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let find = |label: &str| self.timing.iter().find(|t| t.label == label);
        let _ = writeln!(out, "{:<10} {:>12} {:>12}", "", "Latency (%)", "Energy (%)");
        for label in ["random", "disha"] {
            if let Some(t) = find(label) {
                let _ = writeln!(
                    out,
                    "{:<10} {:>12.2} {:>12.2}",
                    label, t.latency_reduction_pct, t.energy_reduction_pct
                );
            }
        }
        out.push('\n');
        let _ = writeln!(
            out,
            "{:<10} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "model", "params", "param%", "prun%", "fidelity", "IoU/base", "IoU/gt", "battery+h"
        );
        for q in &self.quality {
            let ext = find(&q.label).map_or(f64::NAN, |t| t.battery_extension_hours);
            let gt = q.iou_vs_truth.map_or("-".to_string(), |v| format!("{v:.2}"));
            let _ = writeln!(
                out,
                "{:<10} {:>9} {:>9.2} {:>9.2} {:>9.4} {:>9.2} {:>9} {:>9.2}",
                q.label,
                q.params,
                q.param_reduction_pct,
                q.prunable_reduction_pct,
                q.fidelity,
                q.iou_vs_unpruned,
                gt,
                ext
            );
        }
        if let Some(imp) = self.fidelity_improvement_pct {
            let _ = writeln!(out, "\nfidelity improvement over random: {imp:.2}%");
        }
        out
    }
}
