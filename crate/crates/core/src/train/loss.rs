//! Segmentation losses on probability maps, with analytic gradients.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::TrainError;

/// Smoothing constant of the soft dice loss.
pub const DICE_EPS: f64 = 1e-6;
/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub dice: f64,
    pub bce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { dice: 1.0, bce: 0.2 }
    }
}

fn check(p: &Array2<f64>, t: &Array2<f64>) -> Result<(), TrainError> {
    if p.dim() != t.dim() {
        return Err(TrainError::ShapeMismatch {
            prediction: p.dim(),
            target: t.dim(),
        });
    }
    Ok(())
}

pub fn soft_dice_loss(p: &Array2<f64>, t: &Array2<f64>) -> Result<f64, TrainError> {
    check(p, t)?;
    let inter: f64 = Zip::from(p).and(t).fold(0.0, |acc, &a, &b| acc + a * b);
    let total = p.sum() + t.sum();
    Ok(1.0 - (2.0 * inter + DICE_EPS) / (total + DICE_EPS))
}

/// Mean binary cross-entropy over pixels.
pub fn bce_loss(p: &Array2<f64>, t: &Array2<f64>) -> Result<f64, TrainError> {
    check(p, t)?;
    let sum = Zip::from(p).and(t).fold(0.0, |acc, &a, &b| {
        let a = a.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        acc - (b * a.ln() + (1.0 - b) * (1.0 - a).ln())
    });
    Ok(sum / p.len() as f64)
}

pub fn combined_loss(p: &Array2<f64>, t: &Array2<f64>, w: LossWeights) -> Result<f64, TrainError> {
    Ok(w.dice * soft_dice_loss(p, t)? + w.bce * bce_loss(p, t)?)
}

/// Gradient of [`combined_loss`] with respect to each probability.
pub fn combined_loss_grad(
    p: &Array2<f64>,
    t: &Array2<f64>,
    w: LossWeights,
) -> Result<Array2<f64>, TrainError> {
    check(p, t)?;
    let inter: f64 = Zip::from(p).and(t).fold(0.0, |acc, &a, &b| acc + a * b);
    let denom = p.sum() + t.sum() + DICE_EPS;
    let numer = 2.0 * inter + DICE_EPS;
    let n = p.len() as f64;
    Ok(Zip::from(p).and(t).map_collect(|&a, &b| {
        let dice = -(2.0 * b * denom - numer) / (denom * denom);
        let bce = if a > BCE_CLAMP && a < 1.0 - BCE_CLAMP {
            (-b / a + (1.0 - b) / (1.0 - a)) / n
        } else {
            0.0
        };
        w.dice * dice + w.bce * bce
    }))
}
