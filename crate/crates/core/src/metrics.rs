//! Evaluation metrics (PCK, ADD, AUC) and the training losses over detection
//! heads.

use serde::{Deserialize, Serialize};

use crate::beliefmap::{DetectionHead, HeadConfig, KeypointSet2D};
use crate::error::{Error, Result};
use crate::geometry::PoseSE3;
use crate::kinematics::KeypointSet3D;

/// 2D keypoint AUC threshold, pixels.
pub const PCK_THRESHOLD_PX: f64 = 12.0;
/// Pose AUC threshold, millimeters.
pub const ADD_THRESHOLD_MM: f64 = 60.0;
/// Sample count of emitted accuracy curves.
pub const CURVE_POINTS: usize = 256;

/// L2 errors of predicted keypoints whose ground truth lies in frame.
/// A prediction that is missing or non-finite counts as an infinite error.
pub fn pck_errors(pred: &KeypointSet2D, gt: &KeypointSet2D) -> Result<Vec<f64>> {
    let mut errors = Vec::with_capacity(gt.len());
    for (i, &id) in gt.ids.iter().enumerate() {
        if !gt.in_frame[i] {
            continue;
        }
        let j = pred
            .ids
            .iter()
            .position(|&p| p == id)
            .ok_or_else(|| Error::IdMismatch(format!("keypoint {id} missing from prediction")))?;
        let e = (pred.points[j] - gt.points[i]).norm();
        errors.push(if e.is_finite() { e } else { f64::INFINITY });
    }
    if pred.ids.iter().any(|id| !gt.ids.contains(id)) {
        return Err(Error::IdMismatch("prediction has ids absent from ground truth".into()));
    }
    Ok(errors)
}

/// Mean keypoint displacement between the two poses, in millimeters.
pub fn add_error(est: &PoseSE3, gt: &PoseSE3, kp: &KeypointSet3D) -> f64 {
    if kp.points.is_empty() {
        return 0.0;
    }
    let sum: f64 = kp
        .points
        .iter()
        .map(|p| (est.transform_point(p) - gt.transform_point(p)).norm())
        .sum();
    1e3 * sum / kp.points.len() as f64
}

/// Normalized area under `a(τ) = |{e ≤ τ}| / n` for `τ ∈ [0, threshold]`.
///
/// Each error contributes `max(0, threshold − e) / threshold`, which is the
/// exact integral of its step; infinite errors contribute nothing.
pub fn auc_below(errors: &[f64], threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(threshold > 0.0) {
        return Err(Error::InvalidConfig(format!("AUC threshold must be positive, got {threshold}")));
    }
    let area: f64 = errors
        .iter()
        .map(|&e| ((threshold - e.max(0.0)) / threshold).max(0.0))
        .sum();
    Ok(area / errors.len() as f64)
}

/// Median, averaging the two middle values for even counts. Infinite values
/// take part like any other.
pub fn median(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut v = errors.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else if v[n / 2 - 1] == v[n / 2] {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Median of the finite values only; `None` when there are none.
pub fn finite_median(errors: &[f64]) -> Option<f64> {
    let finite: Vec<f64> = errors.iter().copied().filter(|e| e.is_finite()).collect();
    median(&finite).ok()
}

/// `(τ, a(τ))` at `points` evenly spaced thresholds in `[0, threshold]`.
pub fn accuracy_curve(errors: &[f64], threshold: f64, points: usize) -> Vec<(f64, f64)> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len().max(1) as f64;
    let steps = points.max(2) - 1;
    (0..=steps)
        .map(|k| {
            let tau = threshold * k as f64 / steps as f64;
            let hit = sorted.partition_point(|&e| e <= tau);
            (tau, hit as f64 / n)
        })
        .collect()
}

/// Curve as CSV text with a `threshold,accuracy` header.
pub fn accuracy_curve_csv(errors: &[f64], threshold: f64) -> String {
    let mut out = String::from("threshold,accuracy\n");
    for (t, a) in accuracy_curve(errors, threshold, CURVE_POINTS) {
        out.push_str(&format!("{t},{a}\n"));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pck_auc: f64,
    /// Median 2D error, pixels; infinite when more than half the keypoints failed.
    #[serde(with = "nonfinite_as_null")]
    pub pck_median: f64,
    pub add_auc: f64,
    /// Median ADD including failed frames, millimeters.
    #[serde(with = "nonfinite_as_null")]
    pub add_median: f64,
    /// Median ADD over successful frames only.
    pub add_median_finite: Option<f64>,
    pub n_frames: usize,
    pub n_failed: usize,
    pub n_keypoints_evaluated: usize,
    pub pck_threshold_px: f64,
    pub add_threshold_mm: f64,
}

impl MetricsReport {
    /// Builds a report from pooled per-keypoint pixel errors and per-frame ADD
    /// values (millimeters, infinite for failed frames). Empty inputs yield
    /// zero AUC and infinite medians.
    pub fn from_errors(pck: &[f64], add_mm: &[f64]) -> MetricsReport {
        MetricsReport {
            pck_auc: auc_below(pck, PCK_THRESHOLD_PX).unwrap_or(0.0),
            pck_median: median(pck).unwrap_or(f64::INFINITY),
            add_auc: auc_below(add_mm, ADD_THRESHOLD_MM).unwrap_or(0.0),
            add_median: median(add_mm).unwrap_or(f64::INFINITY),
            add_median_finite: finite_median(add_mm),
            n_frames: add_mm.len(),
            n_failed: add_mm.iter().filter(|e| !e.is_finite()).count(),
            n_keypoints_evaluated: pck.len(),
            pck_threshold_px: PCK_THRESHOLD_PX,
            add_threshold_mm: ADD_THRESHOLD_MM,
        }
    }
}

pub(crate) mod nonfinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_b: f64,
    pub lambda_off: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_b: 1.0,
            lambda_off: 0.01,
            smooth_l1_beta: 1.0,
        }
    }
}

/// Sum of squared heatmap differences and its gradient `2(Ŷ − Y)` with
/// respect to the prediction.
pub fn loss_belief(pred: &DetectionHead, target: &DetectionHead) -> Result<(f64, Vec<f64>)> {
    if pred.heatmaps.len() != target.heatmaps.len()
        || (pred.width, pred.height, pred.channels) != (target.width, target.height, target.channels)
    {
        return Err(Error::ShapeMismatch(format!(
            "heatmaps {}x{}x{} vs {}x{}x{}",
            pred.channels, pred.height, pred.width, target.channels, target.height, target.width
        )));
    }
    let mut loss = 0.0;
    let grad = pred
        .heatmaps
        .iter()
        .zip(&target.heatmaps)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d
        })
        .collect();
    Ok((loss, grad))
}

fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    let a = x.abs();
    if a < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (a - 0.5 * beta, x.signum())
    }
}

/// Smooth-L1 offset loss at each supervised keypoint's `p_low` cell, with its
/// gradient over `pred.offsets`. Ground truth is in the input frame.
pub fn loss_offset(
    pred: &DetectionHead,
    gt: &KeypointSet2D,
    cfg: &HeadConfig,
    beta: f64,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; pred.offsets.len()];
    let plane = pred.width * pred.height;
    let r = cfg.downsample as f64;
    let size = cfg.input_size as f64;
    let mut loss = 0.0;
    for (i, p) in gt.points.iter().enumerate() {
        if !gt.in_frame[i] || !(p.x >= 0.0 && p.y >= 0.0 && p.x < size && p.y < size) {
            continue;
        }
        let s = p / r;
        let (col, row) = (s.x.floor(), s.y.floor());
        let (cu, ru) = (col as usize, row as usize);
        if cu >= pred.width || ru >= pred.height {
            continue;
        }
        let cell = pred.cell(ru, cu);
        for (axis, target) in [(0, s.x - col), (1, s.y - row)] {
            let (l, g) = smooth_l1(pred.offsets[axis * plane + cell] - target, beta);
            loss += l;
            grad[axis * plane + cell] += g;
        }
    }
    (loss, grad)
}

pub fn loss_total(lb: f64, loff: f64, cfg: &LossConfig) -> f64 {
    cfg.lambda_b * lb + cfg.lambda_off * loff
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Vector2, Vector3};

    #[test]
    fn pck_pythagorean_and_exclusion() {
        let gt = KeypointSet2D::new(vec![Vector2::new(10.0, 10.0), Vector2::new(50.0, 5.0)]);
        let mut pred = gt.clone();
        pred.points[0] += Vector2::new(3.0, 4.0);
        assert_eq!(pck_errors(&pred, &gt).unwrap(), vec![5.0, 0.0]);
        let mut gt2 = gt.clone();
        gt2.in_frame[1] = false;
        assert_eq!(pck_errors(&pred, &gt2).unwrap(), vec![5.0]);
        let mut bad = pred.clone();
        bad.ids[1] = 9;
        assert!(matches!(pck_errors(&bad, &gt), Err(Error::IdMismatch(_))));
    }

    #[test]
    fn add_chord_length() {
        let kp = KeypointSet3D {
            points: (0..8)
                .map(|k| {
                    let a = k as f64 * std::f64::consts::FRAC_PI_4;
                    Vector3::new(0.5 * a.cos(), 0.5 * a.sin(), 0.0)
                })
                .collect(),
            ids: (0..8).collect(),
        };
        let gt = PoseSE3::from_translation(Vector3::new(0.0, 0.0, 2.0));
        let shifted = PoseSE3::from_translation(Vector3::new(0.01, 0.0, 2.0));
        assert!((add_error(&shifted, &gt, &kp) - 10.0).abs() < 1e-9);
        let rot = PoseSE3::from_axis_angle(Vector3::z() * 5f64.to_radians(), gt.translation);
        let expect = 1e3 * 2.0 * 0.5 * 2.5f64.to_radians().sin();
        assert!((add_error(&rot, &gt, &kp) - expect).abs() < 1e-9);
        assert!((expect - 43.6).abs() < 0.05);
        assert_eq!(add_error(&gt, &gt, &kp), 0.0);
    }

    #[test]
    fn auc_edges() {
        assert_eq!(auc_below(&[0.0; 10], 12.0).unwrap(), 1.0);
        assert_eq!(auc_below(&[13.0, 20.0, f64::INFINITY], 12.0).unwrap(), 0.0);
        assert!((auc_below(&[6.0], 12.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(auc_below(&[], 12.0), Err(Error::EmptyInput)));
    }

    #[test]
    fn auc_matches_sampled_curve() {
        let errors = [0.5, 1.0, 3.0, 7.5, 11.9, 40.0];
        let curve = accuracy_curve(&errors, 12.0, 1_000_001);
        // right Riemann sum of the step function converges from above
        let h = 12.0 / 1_000_000.0;
        let riemann: f64 = curve[1..].iter().map(|&(_, a)| a * h).sum::<f64>() / 12.0;
        assert!((riemann - auc_below(&errors, 12.0).unwrap()).abs() < 1e-5);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
        assert_eq!(median(&[1.0, f64::INFINITY, f64::INFINITY]).unwrap(), f64::INFINITY);
        assert_eq!(finite_median(&[1.0, f64::INFINITY, f64::INFINITY]), Some(1.0));
        assert_eq!(finite_median(&[f64::INFINITY]), None);
    }

    #[test]
    fn report_round_trips_through_json() {
        let r = MetricsReport::from_errors(&[1.0, 2.0], &[f64::INFINITY, f64::INFINITY, 3.0]);
        assert_eq!(r.add_median, f64::INFINITY);
        assert_eq!(r.n_failed, 2);
        let s = serde_json::to_string(&r).unwrap();
        let back: MetricsReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn loss_values() {
        let cfg = HeadConfig {
            input_size: 32,
            keypoints: 6,
            ..HeadConfig::default()
        };
        let target = DetectionHead::for_config(&cfg);
        let mut pred = target.clone();
        pred.heatmaps[17] = 0.5;
        let (l, g) = loss_belief(&pred, &target).unwrap();
        assert_eq!(l, 0.25);
        assert_eq!(g[17], 1.0);
        assert_eq!(loss_total(2.0, 100.0, &LossConfig::default()), 3.0);
        assert_eq!(loss_total(0.0, 0.0, &LossConfig::default()), 0.0);
    }

    #[test]
    fn offset_loss_half_pixel() {
        let cfg = HeadConfig {
            input_size: 32,
            keypoints: 6,
            ..HeadConfig::default()
        };
        let gt = KeypointSet2D::new(vec![Vector2::new(8.0, 12.0)]);
        let mut pred = DetectionHead::for_config(&cfg);
        let (l, _) = loss_offset(&pred, &gt, &cfg, 1.0);
        assert_eq!(l, 0.0);
        pred.set_offset(3, 2, Vector2::new(0.5, -0.5));
        let (l, g) = loss_offset(&pred, &gt, &cfg, 1.0);
        assert_eq!(l, 0.25);
        let nonzero: Vec<usize> = (0..g.len()).filter(|&i| g[i] != 0.0).collect();
        let plane = pred.width * pred.height;
        assert_eq!(nonzero, vec![pred.cell(3, 2), plane + pred.cell(3, 2)]);
    }
}
