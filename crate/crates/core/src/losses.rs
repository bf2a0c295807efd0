//! Reconstruction and position-classification objectives.

use serde::{Deserialize, Serialize};

use cmae_tensor::{Scalar, Tape, Tensor, Var};

use crate::error::{config_err, Result};
use crate::model::select_rows;

pub const NORM_PIX_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_rec: 1.0,
            lambda_cls: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_rec) || !ok(self.lambda_cls) {
            return Err(config_err("loss weights must be finite and non-negative"));
        }
        if self.lambda_rec == 0.0 && self.lambda_cls == 0.0 {
            return Err(config_err("loss weights must not both be zero"));
        }
        Ok(())
    }
}

/// Mean and `sqrt(var + ε)` of one patch row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchStats {
    pub mean: f64,
    pub std: f64,
}

pub fn patch_stats<T: Scalar>(row: &[T]) -> PatchStats {
    let n = row.len() as f64;
    let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
    PatchStats {
        mean,
        std: (var + NORM_PIX_EPS).sqrt(),
    }
}

/// `(x − mean) / sqrt(var + ε)`. Constant rows map to exact zeros.
pub fn norm_pix<T: Scalar>(row: &[T]) -> Vec<T> {
    if row.iter().all(|v| *v == row[0]) {
        return vec![T::from_f64(0.0); row.len()];
    }
    let s = patch_stats(row);
    row.iter().map(|v| T::from_f64((v.as_f64() - s.mean) / s.std)).collect()
}

pub fn denorm_pix<T: Scalar>(row: &[T], s: PatchStats) -> Vec<T> {
    row.iter().map(|v| T::from_f64(v.as_f64() * s.std + s.mean)).collect()
}

/// `norm_pix` applied to every row along the last axis.
pub fn norm_pix_rows<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let d = *t.shape().last().unwrap_or(&1);
    let data = t.data().chunks(d.max(1)).flat_map(norm_pix).collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

/// MSE between predicted rows and normalized clean rows, masked rows only.
pub fn rec_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    clean_patches: &Tensor<T>,
    masked: &[Vec<usize>],
) -> Result<Var> {
    if masked.is_empty() || masked.iter().any(|m| m.is_empty()) {
        return Err(config_err("reconstruction loss needs at least one masked patch"));
    }
    if tape.shape(pred) != clean_patches.shape() {
        return Err(config_err(format!(
            "reconstruction {:?} vs target {:?}",
            tape.shape(pred),
            clean_patches.shape()
        )));
    }
    let target = norm_pix_rows(&select_rows(clean_patches, masked)?);
    let pred_m = tape.gather_rows(pred, masked)?;
    Ok(tape.mse(pred_m, &target)?)
}

pub fn cls_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    Ok(tape.softmax_cross_entropy(logits, labels)?)
}

pub fn total_loss(rec: f64, cls: f64, w: LossWeights) -> f64 {
    w.lambda_rec * rec + w.lambda_cls * cls
}
