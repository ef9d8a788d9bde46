//! Depth and segmentation evaluation metrics.

use crate::error::{shape_err, Error, Result};
use crate::losses::IGNORE_LABEL;
use serde::{Deserialize, Serialize};

/// Lower clamp applied to depths before taking the logarithm in RMSElog.
pub const LOG_EPS: f64 = 1e-6;

/// Base of the logarithm used by RMSElog.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    #[default]
    Natural,
    Ten,
}

impl LogBase {
    fn log(self, x: f64) -> f64 {
        match self {
            LogBase::Natural => x.ln(),
            LogBase::Ten => x.log10(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub mre: f64,
    pub mae: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub pixels: usize,
}

/// Running sums for depth metrics, mergeable across batches.
#[derive(Clone, Copy, Debug, Default)]
pub struct DepthAccumulator {
    rel: f64,
    abs: f64,
    sq: f64,
    sq_log: f64,
    within: [usize; 3],
    n: usize,
    base: LogBase,
}

impl DepthAccumulator {
    pub fn new(base: LogBase) -> Self {
        Self { base, ..Default::default() }
    }

    /// Add the valid pixels of one prediction. Pixels with `gt <= 0` are skipped.
    pub fn update(&mut self, pred: &[f64], gt: &[f64], mask: Option<&[bool]>) -> Result<()> {
        if pred.len() != gt.len() || mask.is_some_and(|m| m.len() != gt.len()) {
            return Err(shape_err("depth_metrics", "pred, gt and mask lengths differ"));
        }
        for i in 0..gt.len() {
            let (p, g) = (pred[i], gt[i]);
            if mask.is_some_and(|m| !m[i]) || !(g > 0.0) || !g.is_finite() {
                continue;
            }
            let d = p - g;
            self.rel += d.abs() / g;
            self.abs += d.abs();
            self.sq += d * d;
            let dl = self.base.log(p.max(LOG_EPS)) - self.base.log(g.max(LOG_EPS));
            self.sq_log += dl * dl;
            let ratio = (p / g).max(g / p);
            for (n, count) in self.within.iter_mut().enumerate() {
                if ratio < 1.25f64.powi(n as i32 + 1) {
                    *count += 1;
                }
            }
            self.n += 1;
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<DepthMetrics> {
        if self.n == 0 {
            return Err(Error::Empty {
                op: "depth_metrics",
                detail: "no valid depth pixels".into(),
            });
        }
        let n = self.n as f64;
        Ok(DepthMetrics {
            mre: self.rel / n,
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            rmse_log: (self.sq_log / n).sqrt(),
            delta1: self.within[0] as f64 / n,
            delta2: self.within[1] as f64 / n,
            delta3: self.within[2] as f64 / n,
            pixels: self.n,
        })
    }
}

/// Depth metrics over the valid pixels (mask true and gt > 0).
pub fn depth_metrics(pred: &[f64], gt: &[f64], mask: Option<&[bool]>, base: LogBase) -> Result<DepthMetrics> {
    let mut acc = DepthAccumulator::new(base);
    acc.update(pred, gt, mask)?;
    acc.finish()
}

/// `C × C` confusion matrix; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    unknown: Option<u8>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    /// Ground-truth pixels labelled `unknown` (or the ignore label) are not counted.
    pub fn new(classes: usize, unknown: Option<u8>) -> Self {
        Self {
            classes,
            unknown,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn update(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(shape_err("seg_metrics", "pred and gt lengths differ"));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_LABEL || Some(g) == self.unknown {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.classes || g >= self.classes {
                return Err(shape_err(
                    "seg_metrics",
                    format!("label {} outside {} classes", p.max(g), self.classes),
                ));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn finish(&self) -> SegMetrics {
        let c = self.classes;
        let mut iou = vec![None; c];
        let mut acc = vec![None; c];
        let mut pixels = 0;
        for i in 0..c {
            let tp = self.get(i, i);
            let row: u64 = (0..c).map(|j| self.get(i, j)).sum();
            let col: u64 = (0..c).map(|j| self.get(j, i)).sum();
            pixels += row;
            if row == 0 || Some(i as u8) == self.unknown {
                continue;
            }
            iou[i] = Some(tp as f64 / (row + col - tp) as f64);
            acc[i] = Some(tp as f64 / row as f64);
        }
        let mean = |v: &[Option<f64>]| {
            let present: Vec<f64> = v.iter().flatten().copied().collect();
            if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            }
        };
        SegMetrics {
            miou: mean(&iou),
            macc: mean(&acc),
            per_class_iou: iou,
            per_class_acc: acc,
            pixels: pixels as usize,
        }
    }
}

/// Per-class values are `None` for the unknown class and classes absent from gt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_acc: Vec<Option<f64>>,
    pub miou: f64,
    pub macc: f64,
    pub pixels: usize,
}

pub fn seg_metrics(pred: &[u8], gt: &[u8], classes: usize, unknown: Option<u8>) -> Result<SegMetrics> {
    let mut cm = ConfusionMatrix::new(classes, unknown);
    cm.update(pred, gt)?;
    Ok(cm.finish())
}

/// Everything reported by an evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mre: f64,
    pub mae: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_acc: Vec<Option<f64>>,
    pub miou: f64,
    pub macc: f64,
    pub depth_pixels: usize,
    pub seg_pixels: usize,
}

impl MetricsReport {
    pub fn new(depth: &DepthMetrics, seg: &SegMetrics) -> Self {
        Self {
            mre: depth.mre,
            mae: depth.mae,
            rmse: depth.rmse,
            rmse_log: depth.rmse_log,
            delta1: depth.delta1,
            delta2: depth.delta2,
            delta3: depth.delta3,
            per_class_iou: seg.per_class_iou.clone(),
            per_class_acc: seg.per_class_acc.clone(),
            miou: seg.miou,
            macc: seg.macc,
            depth_pixels: depth.pixels,
            seg_pixels: seg.pixels,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
