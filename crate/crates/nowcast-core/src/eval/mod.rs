//! Forecast verification: confusion counting, CSI/F1/IoU reports, and the
//! per-(region, year) threshold sweep.
//!
//! Metrics are always derived from confusion counts pooled over the full
//! evaluation set, never averaged per batch. Degenerate denominators yield
//! `None` rather than a silent 0 or 1, so sparse regions cannot corrupt an
//! aggregate.

use std::collections::BTreeMap;
use std::ops::Add;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::datagen::RainMask;
use crate::error::CoreError;
use crate::Result;

/// The nine sweep thresholds p = 0.1, 0.2, …, 0.9.
pub const SWEEP_THRESHOLDS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Pixel-level contingency counts for the rain/no-rain decision.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, other: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            true_pos: self.true_pos + other.true_pos,
            false_pos: self.false_pos + other.false_pos,
            false_neg: self.false_neg + other.false_neg,
            true_neg: self.true_neg + other.true_neg,
        }
    }
}

/// Counts prediction/truth agreement pixel by pixel.
pub fn confusion(pred: &RainMask, truth: &RainMask) -> Result<ConfusionCounts> {
    if pred.mask.dim() != truth.mask.dim() {
        return Err(CoreError::invalid(format!(
            "confusion shape mismatch: pred {:?} vs truth {:?}",
            pred.mask.dim(),
            truth.mask.dim()
        )));
    }
    let mut counts = ConfusionCounts::default();
    for (&p, &t) in pred.mask.iter().zip(truth.mask.iter()) {
        match (p, t) {
            (1, 1) => counts.true_pos += 1,
            (1, 0) => counts.false_pos += 1,
            (0, 1) => counts.false_neg += 1,
            (0, 0) => counts.true_neg += 1,
            _ => {
                return Err(CoreError::invalid(format!(
                    "confusion expects binary masks, got pred={p} truth={t}"
                )))
            }
        }
    }
    Ok(counts)
}

/// Critical Success Index `TP/(TP+FN+FP)`; `None` when no positives exist
/// on either side.
pub fn csi(counts: &ConfusionCounts) -> Option<f64> {
    ratio(counts.true_pos, counts.true_pos + counts.false_neg + counts.false_pos)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// Derived verification metrics; `None` marks an undefined (0/0) value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub csi: Option<f64>,
    pub f1: Option<f64>,
    pub iou: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Full metric report from pooled counts.
pub fn metrics_report(counts: &ConfusionCounts) -> MetricsReport {
    let tp = counts.true_pos;
    MetricsReport {
        csi: csi(counts),
        f1: ratio(2 * tp, 2 * tp + counts.false_pos + counts.false_neg),
        iou: ratio(tp, tp + counts.false_pos + counts.false_neg),
        accuracy: ratio(tp + counts.true_neg, counts.total()),
        precision: ratio(tp, tp + counts.false_pos),
        recall: ratio(tp, tp + counts.false_neg),
    }
}

/// Binarizes a probability tensor `[1][T][H][W]` with a strict `> p`
/// comparison.
pub fn predict_with_threshold(prob: &Array4<f32>, p: f64) -> Result<RainMask> {
    if !(p > 0.0 && p < 1.0) {
        return Err(CoreError::invalid(format!(
            "threshold must lie in (0,1), got {p}"
        )));
    }
    let (c, t, h, w) = prob.dim();
    if c != 1 {
        return Err(CoreError::invalid(format!(
            "probability tensor must have a single channel, got {c}"
        )));
    }
    let p = p as f32;
    let mut mask = Array3::<u8>::zeros((t, h, w));
    for ((ti, hi, wi), m) in mask.indexed_iter_mut() {
        *m = u8::from(prob[[0, ti, hi, wi]] > p);
    }
    RainMask::new(mask)
}

/// Evaluation group: one region in one year.
pub type GroupKey = (u32, i32);

/// Per-threshold outcome inside one group's sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub metrics: MetricsReport,
}

/// Sweep outcome for a single (region, year) group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupSweep {
    pub region_id: u32,
    pub year: i32,
    pub reports: Vec<ThresholdReport>,
    /// Threshold attaining the maximum CSI, ties broken toward the smaller
    /// p; `None` when CSI is undefined at every bin.
    pub best_threshold: Option<f64>,
    pub best_csi: Option<f64>,
}

/// Threshold sweep over all groups (ordered by key), plus warnings for
/// degenerate ones.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub groups: Vec<GroupSweep>,
    pub warnings: Vec<String>,
}

impl SweepResult {
    pub fn group(&self, region_id: u32, year: i32) -> Option<&GroupSweep> {
        self.groups
            .iter()
            .find(|g| g.region_id == region_id && g.year == year)
    }

    pub fn best_threshold(&self, region_id: u32, year: i32) -> Option<f64> {
        self.group(region_id, year).and_then(|g| g.best_threshold)
    }
}

/// Sweeps all nine thresholds over per-group (probability, truth) pairs.
///
/// Counts are pooled within a group; the best threshold maximizes the
/// group's pooled CSI. Empty groups are dropped with a warning record.
pub fn threshold_sweep(
    groups: &BTreeMap<GroupKey, Vec<(Array4<f32>, RainMask)>>,
) -> Result<SweepResult> {
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for (&(region_id, year), pairs) in groups {
        if pairs.is_empty() {
            warnings.push(format!(
                "region {region_id} year {year}: no samples, skipped"
            ));
            continue;
        }
        let mut reports = Vec::with_capacity(SWEEP_THRESHOLDS.len());
        for &p in &SWEEP_THRESHOLDS {
            let mut counts = ConfusionCounts::default();
            for (prob, truth) in pairs {
                let pred = predict_with_threshold(prob, p)?;
                counts = counts + confusion(&pred, truth)?;
            }
            reports.push(ThresholdReport {
                threshold: p,
                counts,
                metrics: metrics_report(&counts),
            });
        }
        let mut best: Option<(f64, f64)> = None;
        for r in &reports {
            if let Some(c) = r.metrics.csi {
                let better = match best {
                    None => true,
                    Some((_, best_c)) => c > best_c,
                };
                if better {
                    best = Some((r.threshold, c));
                }
            }
        }
        if best.is_none() {
            warnings.push(format!(
                "region {region_id} year {year}: CSI undefined at every threshold"
            ));
        }
        out.push(GroupSweep {
            region_id,
            year,
            reports,
            best_threshold: best.map(|(p, _)| p),
            best_csi: best.map(|(_, c)| c),
        });
    }
    Ok(SweepResult {
        groups: out,
        warnings,
    })
}

fn fmt_metric(m: Option<f64>) -> String {
    match m {
        Some(v) => format!("{v:.6}"),
        None => "NA".to_string(),
    }
}

/// Renders the sweep as the report CSV
/// (`region,year,threshold,TP,FP,FN,TN,csi,f1,iou,accuracy,precision,recall`).
pub fn sweep_to_csv(sweep: &SweepResult) -> String {
    let mut out = String::from(
        "region,year,threshold,TP,FP,FN,TN,csi,f1,iou,accuracy,precision,recall\n",
    );
    for group in &sweep.groups {
        for r in &group.reports {
            out.push_str(&format!(
                "{},{},{:.1},{},{},{},{},{},{},{},{},{},{}\n",
                group.region_id,
                group.year,
                r.threshold,
                r.counts.true_pos,
                r.counts.false_pos,
                r.counts.false_neg,
                r.counts.true_neg,
                fmt_metric(r.metrics.csi),
                fmt_metric(r.metrics.f1),
                fmt_metric(r.metrics.iou),
                fmt_metric(r.metrics.accuracy),
                fmt_metric(r.metrics.precision),
                fmt_metric(r.metrics.recall),
            ));
        }
    }
    out
}
