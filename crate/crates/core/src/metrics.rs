//! Keypoint and segmentation evaluation.

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::SoftMask;
use crate::skeleton::Skeleton3D;

/// Default PCK interval in model units. The toy hand is about 0.85 units
/// long, so this spans roughly the customary 20 to 50 mm.
pub const DEFAULT_PCK_RANGE: [f64; 2] = [0.1, 0.25];
pub const DEFAULT_PCK_STEPS: usize = 16;

/// `steps` evenly spaced thresholds over `[lo, hi]`.
pub fn threshold_grid(lo: f64, hi: f64, steps: usize) -> Result<Vec<f64>> {
    if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && hi >= lo) || steps == 0 || (steps == 1 && hi > lo) {
        return Err(Error::InvalidArgument(format!(
            "threshold grid needs 0 <= lo <= hi and steps >= 2 (or lo = hi), got [{lo}, {hi}] x {steps}"
        )));
    }
    if steps == 1 {
        return Ok(vec![lo]);
    }
    Ok((0..steps).map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PckPoint {
    #[serde(serialize_with = "fixed4")]
    pub threshold: f64,
    #[serde(serialize_with = "fixed4")]
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckAuc {
    /// Ascending thresholds.
    pub pck: Vec<PckPoint>,
    #[serde(serialize_with = "fixed4")]
    pub auc: f64,
}

/// Euclidean error of every (sample, joint) pair.
pub fn pair_errors(pred: &[Skeleton3D], gt: &[Skeleton3D]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension {
            what: "prediction list".into(),
            expected: gt.len(),
            found: pred.len(),
        });
    }
    Ok(pred
        .iter()
        .zip(gt)
        .flat_map(|(p, g)| p.0.iter().zip(&g.0).map(|(a, b)| (a - b).norm()))
        .collect())
}

/// PCK at each threshold and its normalized trapezoidal integral. A single
/// threshold yields AUC equal to its PCK.
pub fn pck_auc_from_errors(errors: &[f64], thresholds: &[f64]) -> Result<PckAuc> {
    if errors.is_empty() {
        return Err(Error::InvalidArgument("no joint errors to evaluate".into()));
    }
    if thresholds.is_empty() || thresholds.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("thresholds must be non-empty and strictly increasing".into()));
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("joint errors".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let pck: Vec<PckPoint> = thresholds
        .iter()
        .map(|&t| PckPoint {
            threshold: t,
            ratio: sorted.partition_point(|&e| e <= t) as f64 / n,
        })
        .collect();
    let auc = pck_curve_auc(&pck);
    Ok(PckAuc { pck, auc })
}

pub fn compute_pck_auc(pred: &[Skeleton3D], gt: &[Skeleton3D], thresholds: &[f64]) -> Result<PckAuc> {
    pck_auc_from_errors(&pair_errors(pred, gt)?, thresholds)
}

/// Foreground overlap scores in `[0, 1]`, except `f1` which is a percentage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    #[serde(serialize_with = "fixed4")]
    pub iou: f64,
    #[serde(serialize_with = "fixed4")]
    pub precision: f64,
    #[serde(serialize_with = "fixed4")]
    pub recall: f64,
    #[serde(serialize_with = "fixed4")]
    pub f1: f64,
}

/// Masks are binarized at 0.5. Every ratio whose denominator is empty counts
/// as a perfect score only when both masks are empty, so empty vs empty is
/// all ones and anything vs empty is all zeros.
pub fn compute_seg_metrics(pred: &SoftMask, gt: &SoftMask) -> Result<SegMetrics> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::Dimension {
            what: "mask pixels".into(),
            expected: gt.data.len(),
            found: pred.data.len(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p >= 0.5, g >= 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(SegMetrics {
            iou: 1.0,
            precision: 1.0,
            recall: 1.0,
            f1: 100.0,
        });
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        200.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(SegMetrics {
        iou: ratio(tp, tp + fp + fn_),
        precision,
        recall,
        f1,
    })
}

impl SegMetrics {
    /// Per-field mean over masks.
    pub fn mean(items: &[SegMetrics]) -> Result<SegMetrics> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("no masks to evaluate".into()));
        }
        let n = items.len() as f64;
        let avg = |f: fn(&SegMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Ok(SegMetrics {
            iou: avg(|m| m.iou),
            precision: avg(|m| m.precision),
            recall: avg(|m| m.recall),
            f1: avg(|m| m.f1),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    #[serde(serialize_with = "fixed4")]
    pub mean_joint_error: f64,
    pub pck: Vec<PckPoint>,
    #[serde(serialize_with = "fixed4")]
    pub auc: f64,
    pub seg: SegMetrics,
}

impl EvalReport {
    /// PCK non-decreasing in the threshold and AUC equal to the trapezoidal
    /// mean of the listed PCK values.
    pub fn check_consistency(&self) -> Result<()> {
        if self.pck.windows(2).any(|w| w[1].ratio < w[0].ratio) {
            return Err(Error::InvalidArgument("PCK decreases with the threshold".into()));
        }
        let integral = pck_curve_auc(&self.pck);
        if (integral - self.auc).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "AUC {} differs from the PCK curve integral {integral}",
                self.auc
            )));
        }
        Ok(())
    }

    /// Pretty JSON with every real printed to 4 decimal places.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn pck_curve_auc(pck: &[PckPoint]) -> f64 {
    match pck {
        [] => f64::NAN,
        [only] => only.ratio,
        [first, .., last] => {
            pck.windows(2)
                .map(|w| 0.5 * (w[1].threshold - w[0].threshold) * (w[0].ratio + w[1].ratio))
                .sum::<f64>()
                / (last.threshold - first.threshold)
        }
    }
}

/// Writes a real with exactly 4 decimals; non-finite values become `null`.
pub fn fixed4<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if !x.is_finite() {
        return s.serialize_none();
    }
    let text = format!("{x:.4}");
    let text = if text == "-0.0000" { "0.0000".to_string() } else { text };
    serde_json::value::RawValue::from_string(text)
        .map_err(serde::ser::Error::custom)?
        .serialize(s)
}
