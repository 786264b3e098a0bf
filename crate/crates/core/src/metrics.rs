//! Smoke-class IoU, threshold sweeps and report tables.
//!
//! Dataset IoU accumulates one confusion over every evaluated pixel rather than
//! averaging per-image scores.

use std::fmt::Write as _;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::cam::{cam_to_mask, ActivationMap, PseudoMask};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Confusion of one binary prediction against a binary ground truth.
pub fn confusion(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<ConfusionCounts> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn accumulate_confusion(
    pred: &PseudoMask,
    gt: ArrayView2<u8>,
    acc: ConfusionCounts,
) -> Result<ConfusionCounts> {
    Ok(acc + confusion(pred.labels(), gt)?)
}

/// `tp / (tp + fp + fn)`, or `None` when the denominator is zero.
pub fn smoke_iou(acc: &ConfusionCounts) -> Option<f64> {
    let d = acc.tp + acc.fp + acc.fn_;
    (d > 0).then(|| acc.tp as f64 / d as f64)
}

/// `0.05, 0.10, …, 0.95`.
pub fn default_grid() -> Vec<f32> {
    (1..=19).map(|i| i as f32 * 0.05).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub grid: Vec<f32>,
    /// Dataset IoU per grid value (`None` when undefined).
    pub curve: Vec<Option<f64>>,
    pub best_threshold: f32,
    pub best_iou: Option<f64>,
    /// Per image: index into `grid` of its best threshold, or `None` when
    /// the image's IoU is undefined at every threshold.
    pub per_image_best: Vec<Option<usize>>,
    /// Count of images whose optimum is each grid value.
    pub histogram: Vec<usize>,
}

fn argmax_first(values: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.iter().enumerate() {
        if let Some(v) = v {
            if best.is_none_or(|(_, b)| *v > b) {
                best = Some((i, *v));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Sweep a background threshold over `grid`, scoring each value by dataset
/// IoU. Ties resolve to the smallest threshold.
pub fn threshold_sweep(cams: &[ActivationMap], gts: &[ArrayView2<u8>], grid: &[f32]) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::invalid("threshold grid is empty"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("threshold grid must be strictly increasing"));
    }
    if cams.len() != gts.len() {
        return Err(Error::shape(format!("{} cams vs {} masks", cams.len(), gts.len())));
    }
    use rayon::prelude::*;
    // per_image[i][g] = confusion of image i at grid value g
    let per_image: Vec<Vec<ConfusionCounts>> = cams
        .par_iter()
        .zip(gts.par_iter())
        .map(|(cam, gt)| {
            grid.iter()
                .map(|&t| confusion(cam_to_mask(cam, t)?.labels(), *gt))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let curve: Vec<Option<f64>> = (0..grid.len())
        .map(|g| smoke_iou(&per_image.iter().map(|c| c[g]).sum()))
        .collect();
    let best = argmax_first(&curve).unwrap_or(0);
    let per_image_best: Vec<Option<usize>> = per_image
        .iter()
        .map(|c| argmax_first(&c.iter().map(smoke_iou).collect::<Vec<_>>()))
        .collect();
    let mut histogram = vec![0; grid.len()];
    for g in per_image_best.iter().flatten() {
        histogram[*g] += 1;
    }
    Ok(SweepResult {
        grid: grid.to_vec(),
        best_threshold: grid[best],
        best_iou: curve[best],
        curve,
        per_image_best,
        histogram,
    })
}

/// One row of a method comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub counts: ConfusionCounts,
}

impl ReportRow {
    pub fn miou(&self) -> Option<f64> {
        smoke_iou(&self.counts)
    }
}

fn fmt_iou(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "n/a".into())
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("method,miou,tp,fp,fn,tn\n");
    for r in rows {
        let iou = r.miou().map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".into());
        let c = r.counts;
        let _ = writeln!(s, "{},{iou},{},{},{},{}", r.method, c.tp, c.fp, c.fn_, c.tn);
    }
    s
}

pub fn report_text(rows: &[ReportRow]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut s = format!("{:<width$}  mIoU\n", "Method");
    for r in rows {
        let _ = writeln!(s, "{:<width$}  {}", r.method, fmt_iou(r.miou()));
    }
    s.push_str("(smoke class; one confusion accumulated over all pixels)\n");
    s
}

pub fn sweep_csv(r: &SweepResult) -> String {
    let mut s = String::from("threshold,miou,images_with_optimum_here\n");
    for (i, t) in r.grid.iter().enumerate() {
        let iou = r.curve[i].map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".into());
        let _ = writeln!(s, "{t:.4},{iou},{}", r.histogram[i]);
    }
    s
}

pub fn sweep_text(r: &SweepResult) -> String {
    let mut s = format!(
        "Optimal threshold: {:.2}  mIoU {}\n\nPer-image optimal thresholds\n",
        r.best_threshold,
        fmt_iou(r.best_iou)
    );
    let peak = r.histogram.iter().copied().max().unwrap_or(0).max(1);
    for (t, &n) in r.grid.iter().zip(&r.histogram) {
        let bar = "#".repeat((n * 40).div_ceil(peak));
        let _ = writeln!(s, "{t:>5.2} {n:>5} {bar}");
    }
    s
}
