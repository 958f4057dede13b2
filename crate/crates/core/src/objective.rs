//! Training losses and depth-completion evaluation metrics.
//!
//! Losses are evaluated over the valid (nonzero) pixels of the ground
//! truth only; predictions at unlabeled pixels carry zero gradient.

use crate::error::{Error, Result};
use crate::geometry::DepthImage;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Mean squared error over valid pixels.
    L2,
    /// Mean smooth-L1 (Huber, delta = 1) over valid pixels.
    SmoothL1,
    /// L2 plus `gamma` times smooth-L1.
    Combined,
}

/// Scalar smooth-L1: quadratic inside the unit interval, linear outside.
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// Builds the training loss on the tape. `pred` must be `[B,1,H,W]` or
/// `[1,H,W]` matching the ground-truth image; only masked pixels
/// contribute.
pub fn loss<E: Element>(
    tape: &mut Tape<E>,
    pred: Var,
    truth: &DepthImage,
    kind: LossKind,
    gamma: f64,
) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    let (h, w) = match shape.as_slice() {
        [1, 1, h, w] | [1, h, w] => (*h, *w),
        other => {
            return Err(Error::shape(
                "loss",
                format!("prediction shape {other:?} is not a single depth map"),
            ))
        }
    };
    if h != truth.height || w != truth.width {
        return Err(Error::shape(
            "loss",
            format!(
                "prediction {}x{} vs ground truth {}x{}",
                h, w, truth.height, truth.width
            ),
        ));
    }
    let m = truth.mask_count();
    if m == 0 {
        return Err(Error::invalid("loss", "ground truth has no valid pixels"));
    }
    // Masked residual: (pred - truth) on valid pixels, zero elsewhere.
    // Multiplying by the constant mask keeps unlabeled pixels out of
    // both the value and the gradient.
    let mut mask_t = Tensor::zeros(&shape);
    let mut truth_t = Tensor::zeros(&shape);
    for i in 0..h * w {
        if truth.mask[i] {
            mask_t.data[i] = E::one();
            truth_t.data[i] = E::from_f64(truth.values[i]);
        }
    }
    let mask_v = tape.leaf(mask_t);
    let truth_v = tape.leaf(truth_t);
    let diff = tape.sub(pred, truth_v)?;
    let masked = tape.mul(diff, mask_v)?;
    let inv_m = 1.0 / m as f64;
    let l2 = {
        let sq = tape.mul(masked, masked)?;
        let s = tape.sum_all(sq);
        tape.scale(s, E::from_f64(inv_m))
    };
    match kind {
        LossKind::L2 => Ok(l2),
        LossKind::SmoothL1 => {
            let sl = tape.smooth_l1(masked);
            let s = tape.sum_all(sl);
            Ok(tape.scale(s, E::from_f64(inv_m)))
        }
        LossKind::Combined => {
            let sl = tape.smooth_l1(masked);
            let s = tape.sum_all(sl);
            let l1 = tape.scale(s, E::from_f64(inv_m * gamma));
            tape.add(l2, l1)
        }
    }
}

/// Error metrics in the units conventional for depth completion:
/// depth errors in millimeters, inverse-depth errors in 1/km.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub rmse_mm: f64,
    pub mae_mm: f64,
    pub irmse_inv_km: f64,
    pub imae_inv_km: f64,
    pub pixel_count: usize,
}

impl MetricReport {
    /// Plain `key: value` text, two decimals, units spelled in the keys.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "rmse_mm: {:.2}", self.rmse_mm);
        let _ = writeln!(s, "mae_mm: {:.2}", self.mae_mm);
        let _ = writeln!(s, "irmse_inv_km: {:.2}", self.irmse_inv_km);
        let _ = writeln!(s, "imae_inv_km: {:.2}", self.imae_inv_km);
        let _ = writeln!(s, "pixel_count: {}", self.pixel_count);
        s
    }
}

/// Running error sums so metrics can be pooled across frames with
/// every masked pixel weighted equally.
#[derive(Clone, Copy, Debug, Default)]
pub struct MetricAccumulator {
    se: f64,
    ae: f64,
    ise: f64,
    iae: f64,
    count: usize,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one frame's masked pixels. Predictions are clamped to at
    /// least 1 mm before inversion.
    pub fn add(&mut self, pred: &[f64], truth: &DepthImage) -> Result<()> {
        if pred.len() != truth.height * truth.width {
            return Err(Error::shape(
                "metrics",
                format!(
                    "prediction has {} values for a {}x{} image",
                    pred.len(),
                    truth.height,
                    truth.width
                ),
            ));
        }
        for i in 0..pred.len() {
            if !truth.mask[i] {
                continue;
            }
            let p = pred[i].max(1e-3);
            let t = truth.values[i];
            let d_mm = (p - t) * 1000.0;
            self.se += d_mm * d_mm;
            self.ae += d_mm.abs();
            // Inverse depth in 1/km: 1000/d with d in meters.
            let di = 1000.0 / p - 1000.0 / t;
            self.ise += di * di;
            self.iae += di.abs();
            self.count += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> Result<MetricReport> {
        if self.count == 0 {
            return Err(Error::invalid("metrics", "no valid pixels accumulated"));
        }
        let mf = self.count as f64;
        Ok(MetricReport {
            rmse_mm: (self.se / mf).sqrt(),
            mae_mm: self.ae / mf,
            irmse_inv_km: (self.ise / mf).sqrt(),
            imae_inv_km: self.iae / mf,
            pixel_count: self.count,
        })
    }
}

/// Computes metrics between a predicted depth map (meters, `[H*W]` in
/// row-major order) and ground truth, over valid pixels. Predictions
/// are clamped to at least 1 mm before inversion.
pub fn metrics(pred: &[f64], truth: &DepthImage) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new();
    acc.add(pred, truth)?;
    acc.report()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn truth_from(vals: &[f64], h: usize, w: usize) -> DepthImage {
        DepthImage::from_values(h, w, vals.to_vec()).unwrap()
    }

    #[test]
    fn smooth_l1_branch_values() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(-0.5), 0.125);
        assert_eq!(smooth_l1(1.5), 1.0);
        assert_eq!(smooth_l1(-1.5), 1.0);
        // Continuous at the knee.
        assert!((smooth_l1(1.0 - 1e-9) - 0.5).abs() < 1e-8);
    }

    #[test]
    fn smooth_l1_loss_two_pixel_case() {
        // Residuals 0.5 and 1.5 -> mean(0.125, 1.0) = 0.5625.
        let truth = truth_from(&[1.0, 1.0], 1, 2);
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(Tensor::new(vec![1, 1, 2], vec![1.5, 2.5]).unwrap());
        let l = loss(&mut tape, pred, &truth, LossKind::SmoothL1, 1.0).unwrap();
        assert!((tape.value(l).item() - 0.5625).abs() < 1e-12);
    }

    #[test]
    fn combined_with_zero_gamma_equals_l2() {
        let truth = truth_from(&[1.0, 2.0, 0.0, 3.0], 2, 2);
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(Tensor::new(vec![1, 2, 2], vec![1.2, 1.7, 9.0, 3.4]).unwrap());
        let a = loss(&mut tape, pred, &truth, LossKind::Combined, 0.0).unwrap();
        let b = loss(&mut tape, pred, &truth, LossKind::L2, 1.0).unwrap();
        assert_eq!(tape.value(a).item(), tape.value(b).item());
    }

    #[test]
    fn unlabeled_pixels_carry_no_gradient() {
        let truth = truth_from(&[1.0, 0.0], 1, 2);
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(Tensor::new(vec![1, 1, 2], vec![2.0, 7.0]).unwrap());
        let l = loss(&mut tape, pred, &truth, LossKind::Combined, 1.0).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(pred).unwrap();
        assert!(g.data[0] != 0.0);
        assert_eq!(g.data[1], 0.0);
    }

    #[test]
    fn loss_rejects_empty_mask() {
        let truth = DepthImage::empty(1, 2);
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(Tensor::zeros(&[1, 1, 2]));
        assert!(loss(&mut tape, pred, &truth, LossKind::L2, 1.0).is_err());
    }

    #[test]
    fn metric_hand_case() {
        // Errors of 100 mm and 200 mm: mae = 150 mm,
        // rmse = sqrt((100^2 + 200^2)/2) = 158.113...
        let truth = truth_from(&[1.0, 2.0], 1, 2);
        let r = metrics(&[1.1, 2.2], &truth).unwrap();
        assert!((r.mae_mm - 150.0).abs() < 1e-9);
        assert!((r.rmse_mm - 158.11388300841898).abs() < 1e-9);
        assert_eq!(r.pixel_count, 2);
    }

    #[test]
    fn inverse_metrics_hand_case() {
        // truth 2 m (500 /km), pred 1 m (1000 /km) -> error 500 /km.
        let truth = truth_from(&[2.0], 1, 1);
        let r = metrics(&[1.0], &truth).unwrap();
        assert!((r.irmse_inv_km - 500.0).abs() < 1e-9);
        assert!((r.imae_inv_km - 500.0).abs() < 1e-9);
    }

    #[test]
    fn rmse_dominates_mae() {
        let truth = truth_from(&[1.0, 1.0, 1.0, 2.0], 2, 2);
        let r = metrics(&[1.3, 0.9, 1.05, 2.5], &truth).unwrap();
        assert!(r.rmse_mm >= r.mae_mm);
    }

    #[test]
    fn near_zero_predictions_are_clamped_before_inversion() {
        let truth = truth_from(&[1.0], 1, 1);
        let r = metrics(&[0.0], &truth).unwrap();
        assert!(r.irmse_inv_km.is_finite());
        // Clamp to 1 mm -> 1e6 /km minus 1000 /km.
        assert!((r.imae_inv_km - 999_000.0).abs() < 1e-6);
    }

    #[test]
    fn report_text_has_units_in_keys() {
        let truth = truth_from(&[1.0], 1, 1);
        let r = metrics(&[1.1], &truth).unwrap();
        let text = r.to_text();
        assert!(text.contains("rmse_mm: 100.00"));
        assert!(text.contains("irmse_inv_km:"));
        assert!(text.contains("pixel_count: 1"));
    }
}
