//! Image-quality metrics, classification reports, denoising evaluation and
//! latent export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use cmae_tensor::{ParamSet, Tape, Tensor};

use crate::dataset::{PairSource, Sample};
use crate::error::{config_err, Result};
use crate::losses::{denorm_pix, patch_stats};
use crate::model::{
    classify_patches, decode, encode, mask_seed, patchify, patchify_batch, plan_mask, pooled_features, select_rows,
    unpatchify, MaskPlan, ModelConfig, PretrainBatch,
};
use crate::sigsynth::Scheme;
use crate::train::{argmax, predict};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psnr {
    pub db: f64,
    /// Set when the images are identical and `db` is the cap.
    pub identical: bool,
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> Psnr {
    if mse == 0.0 {
        Psnr {
            db: PSNR_CAP_DB,
            identical: true,
        }
    } else {
        Psnr {
            db: 10.0 * (max_val * max_val / mse).log10(),
            identical: false,
        }
    }
}

fn same_shape(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(config_err(format!(
            "image shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape(a, b)?;
    if a.numel() == 0 {
        return Err(config_err("empty image"));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(s / a.numel() as f64)
}

pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, max_val: f64) -> Result<Psnr> {
    Ok(psnr_from_mse(mse(a, b)?, max_val))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|t| k[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean SSIM of one `h × w` plane over all fully-contained windows.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(config_err(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let e_aa = filter_valid(&aa, h, w, &k);
    let e_bb = filter_valid(&bb, h, w, &k);
    let e_ab = filter_valid(&ab, h, w, &k);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// SSIM of `[C, H, W]` (or `[H, W]`) images, averaged over channels.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape(a, b)?;
    let (c, h, w) = match *a.shape() {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        _ => {
            return Err(config_err(format!(
                "SSIM needs [C, H, W] or [H, W], got {:?}",
                a.shape()
            )))
        }
    };
    let to64 = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    let (a, b) = (to64(a), to64(b));
    let mut s = 0.0;
    for ch in 0..c {
        let r = ch * h * w..(ch + 1) * h * w;
        s += ssim_plane(&a[r.clone()], &b[r], h, w)?;
    }
    Ok(s / c as f64)
}

/// Something that assigns a class to each sample.
pub trait Classifier {
    fn n_classes(&self) -> usize;
    fn predict(&self, data: &dyn PairSource) -> Result<Vec<usize>>;
}

/// A fine-tuned encoder with its downstream head.
pub struct ModelClassifier<'a> {
    pub params: &'a ParamSet<f32>,
    pub model: &'a ModelConfig,
}

impl Classifier for ModelClassifier<'_> {
    fn n_classes(&self) -> usize {
        self.params
            .get("head.bias")
            .map_or(self.model.n_downstream_classes, |t| t.numel())
    }

    fn predict(&self, data: &dyn PairSource) -> Result<Vec<usize>> {
        predict(self.params, self.model, data, 64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrAccuracy {
    pub snr_db: f64,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseReport {
    pub pairs: usize,
    pub noisy_psnr: f64,
    pub noisy_ssim: f64,
    pub denoised_psnr: f64,
    pub denoised_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub per_snr: Vec<SnrAccuracy>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub denoising: Option<DenoiseReport>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "accuracy {:.4}", self.accuracy);
        let _ = writeln!(s, "\nclass    accuracy");
        for (i, a) in self.per_class_accuracy.iter().enumerate() {
            let name = Scheme::from_index(i)
                .map(|s| s.name().to_string())
                .unwrap_or_else(|_| i.to_string());
            let _ = writeln!(s, "{name:<8} {a:.4}");
        }
        let _ = writeln!(s, "\nconfusion (rows: true, cols: predicted)");
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:>4}")).collect();
            let _ = writeln!(s, "{}", cells.join(""));
        }
        let _ = writeln!(s, "\nsnr_db   accuracy   n");
        for r in &self.per_snr {
            let _ = writeln!(s, "{:>6.1}   {:.4}   {:>4}", r.snr_db, r.accuracy, r.total);
        }
        if let Some(d) = &self.denoising {
            let _ = writeln!(s, "\ndenoising over {} pairs", d.pairs);
            let _ = writeln!(s, "noisy    psnr {:.4} dB  ssim {:.4}", d.noisy_psnr, d.noisy_ssim);
            let _ = writeln!(
                s,
                "denoised psnr {:.4} dB  ssim {:.4}",
                d.denoised_psnr, d.denoised_ssim
            );
        }
        s
    }
}

pub fn evaluate_classifier(clf: &dyn Classifier, data: &dyn PairSource) -> Result<EvalReport> {
    let k = clf.n_classes();
    let pred = clf.predict(data)?;
    if pred.len() != data.len() {
        return Err(config_err("classifier returned the wrong number of predictions"));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    let mut by_snr: BTreeMap<i64, (f64, usize, usize)> = BTreeMap::new();
    for (i, &p) in pred.iter().enumerate() {
        let s = data.get(i)?;
        if s.label >= k || p >= k {
            return Err(config_err(format!(
                "class {} outside the classifier's {k} classes",
                s.label.max(p)
            )));
        }
        confusion[s.label][p] += 1;
        // Keyed on millidecibels so float SNRs group exactly.
        let e = by_snr
            .entry((s.snr_db * 1000.0).round() as i64)
            .or_insert((s.snr_db, 0, 0));
        e.1 += (s.label == p) as usize;
        e.2 += 1;
    }
    let total: usize = confusion.iter().flatten().sum();
    let trace: usize = (0..k).map(|i| confusion[i][i]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let n: usize = row.iter().sum();
            if n == 0 {
                0.0
            } else {
                row[i] as f64 / n as f64
            }
        })
        .collect();
    let per_snr = by_snr
        .into_values()
        .map(|(snr_db, correct, total)| SnrAccuracy {
            snr_db,
            correct,
            total,
            accuracy: correct as f64 / total as f64,
        })
        .collect();
    Ok(EvalReport {
        accuracy: if total == 0 { 0.0 } else { trace as f64 / total as f64 },
        per_class_accuracy,
        confusion,
        per_snr,
        denoising: None,
    })
}

/// Produces per-patch predictions in normalized pixel space, `[N, P²C]` per image.
pub trait Reconstructor {
    fn reconstruct(&self, noisy: &[&Tensor<f32>], plans: &[MaskPlan]) -> Result<Vec<Tensor<f32>>>;
}

/// A pretrained encoder/decoder.
pub struct ModelReconstructor<'a> {
    pub params: &'a ParamSet<f32>,
    pub model: &'a ModelConfig,
}

impl Reconstructor for ModelReconstructor<'_> {
    fn reconstruct(&self, noisy: &[&Tensor<f32>], plans: &[MaskPlan]) -> Result<Vec<Tensor<f32>>> {
        let m = self.model;
        let patches = patchify_batch::<f32>(noisy, m.patch_size)?;
        let ids: Vec<Vec<usize>> = plans.iter().map(|p| p.visible_ids.clone()).collect();
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let vis = tape.constant(select_rows(&patches, &ids)?);
        let q = encode(&mut tape, &bound, m, vis, &ids)?;
        let pred = decode(&mut tape, &bound, m, q, plans)?;
        let pv = tape.value(pred);
        let (n, d) = (m.n_patches(), m.patch_dim());
        Ok((0..noisy.len())
            .map(|b| Tensor::new(vec![n, d], pv.data()[b * n * d..(b + 1) * n * d].to_vec()).unwrap())
            .collect())
    }
}

/// Assemble a denoised image: masked patches from the prediction, mapped back
/// through the noisy patch's statistics; visible patches copied from the input.
pub fn assemble_denoised(noisy: &Tensor<f32>, pred: &Tensor<f32>, plan: &MaskPlan, p: usize) -> Result<Tensor<f32>> {
    let &[c, h, w] = noisy.shape() else {
        return Err(config_err("denoising needs [C, H, W] images"));
    };
    let mut rows = patchify(noisy, p)?;
    let d = rows.shape()[1];
    if pred.shape() != rows.shape() {
        return Err(config_err(format!(
            "prediction {:?} vs patches {:?}",
            pred.shape(),
            rows.shape()
        )));
    }
    for &i in &plan.masked_ids {
        let stats = patch_stats(rows.row(i));
        let restored = denorm_pix(pred.row(i), stats);
        rows.data_mut()[i * d..(i + 1) * d].copy_from_slice(&restored);
    }
    let img = unpatchify(&rows, c, h, w, p)?;
    Ok(img.map(|v| v.clamp(0.0, 1.0)))
}

/// Mean PSNR/SSIM of (noisy, clean) and (denoised, clean) over `pairs`.
pub fn evaluate_denoising(
    recon: &dyn Reconstructor,
    model: &ModelConfig,
    pairs: &dyn PairSource,
    seed: u64,
) -> Result<DenoiseReport> {
    if pairs.is_empty() {
        return Err(config_err("no pairs to evaluate"));
    }
    let (mut np, mut ns, mut dp, mut ds) = (0.0, 0.0, 0.0, 0.0);
    let idx: Vec<usize> = (0..pairs.len()).collect();
    for chunk in idx.chunks(32) {
        let samples: Vec<Sample> = chunk.iter().map(|&i| pairs.get(i)).collect::<Result<_>>()?;
        let plans = chunk
            .iter()
            .map(|&i| plan_mask(model.n_patches(), model.mask_ratio, mask_seed(seed, 0, i)))
            .collect::<Result<Vec<_>>>()?;
        let noisy: Vec<_> = samples.iter().map(|s| &s.noisy).collect();
        let preds = recon.reconstruct(&noisy, &plans)?;
        for ((s, pred), plan) in samples.iter().zip(&preds).zip(&plans) {
            let den = assemble_denoised(&s.noisy, pred, plan, model.patch_size)?;
            np += psnr(&s.noisy, &s.clean, 1.0)?.db;
            ns += ssim(&s.noisy, &s.clean)?;
            dp += psnr(&den, &s.clean, 1.0)?.db;
            ds += ssim(&den, &s.clean)?;
        }
    }
    let n = pairs.len() as f64;
    Ok(DenoiseReport {
        pairs: pairs.len(),
        noisy_psnr: np / n,
        noisy_ssim: ns / n,
        denoised_psnr: dp / n,
        denoised_ssim: ds / n,
    })
}

/// Fraction of visible patches whose position label is predicted correctly,
/// under masks drawn from `seed`.
pub fn position_accuracy(params: &ParamSet<f32>, model: &ModelConfig, data: &dyn PairSource, seed: u64) -> Result<f64> {
    let (mut correct, mut total) = (0usize, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(64) {
        let samples: Vec<Sample> = chunk.iter().map(|&i| data.get(i)).collect::<Result<_>>()?;
        let plans = chunk
            .iter()
            .map(|&i| plan_mask(model.n_patches(), model.mask_ratio, mask_seed(seed, 0, i)))
            .collect::<Result<Vec<_>>>()?;
        let imgs: Vec<_> = samples.iter().map(|s| &s.noisy).collect();
        let batch = PretrainBatch::<f32>::new(model, &imgs, &imgs, plans)?;
        let ids = batch.visible_ids();
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let vis = tape.constant(select_rows(&batch.noisy, &ids)?);
        let q = encode(&mut tape, &bound, model, vis, &ids)?;
        let logits = classify_patches(&mut tape, &bound, model, q)?;
        let lv = tape.value(logits);
        let k = lv.shape()[2];
        for (r, &y) in batch.labels().iter().enumerate() {
            correct += (argmax(&lv.data()[r * k..(r + 1) * k]) == y) as usize;
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Write one CSV row per sample: label, scheme, snr_db, then the mean-pooled
/// encoder features. `mask_ratio` of `None` or 0 encodes every patch.
pub fn export_latents(
    params: &ParamSet<f32>,
    model: &ModelConfig,
    data: &dyn PairSource,
    mask_ratio: Option<f64>,
    seed: u64,
    out: &mut dyn Write,
) -> Result<usize> {
    let ratio = mask_ratio.unwrap_or(0.0);
    let n = model.n_patches();
    let d = model.enc_dim;
    let header: Vec<String> = ["label", "scheme", "snr_db"]
        .into_iter()
        .map(String::from)
        .chain((0..d).map(|i| format!("f{i}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(64) {
        let samples: Vec<Sample> = chunk.iter().map(|&i| data.get(i)).collect::<Result<_>>()?;
        let ids: Vec<Vec<usize>> = chunk
            .iter()
            .map(|&i| {
                if ratio == 0.0 {
                    Ok((0..n).collect())
                } else {
                    plan_mask(n, ratio, mask_seed(seed, 0, i)).map(|p| p.visible_ids)
                }
            })
            .collect::<Result<_>>()?;
        let imgs: Vec<_> = samples.iter().map(|s| &s.noisy).collect();
        let patches = patchify_batch::<f32>(&imgs, model.patch_size)?;
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let feats = pooled_features(&mut tape, &bound, model, &patches, &ids)?;
        let fv = tape.value(feats);
        for (r, s) in samples.iter().enumerate() {
            let scheme = Scheme::from_index(s.label).map(|x| x.name()).unwrap_or("?");
            let mut line = format!("{},{},{}", s.label, scheme, s.snr_db);
            for v in fv.row(r) {
                let _ = write!(line, ",{v}");
            }
            writeln!(out, "{line}")?;
        }
    }
    Ok(data.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_cap_and_reference_point() {
        assert_eq!(
            psnr_from_mse(0.0, 1.0),
            Psnr {
                db: 100.0,
                identical: true
            }
        );
        assert_eq!(psnr_from_mse(0.01, 1.0).db, 20.0);
    }

    #[test]
    fn window_is_normalized_and_symmetric() {
        let w = gaussian_window(11, 1.5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..11 {
            assert_eq!(w[i], w[10 - i]);
        }
    }

    #[test]
    fn small_images_rejected() {
        let a = Tensor::zeros(vec![1, 10, 10]);
        assert!(ssim(&a, &a).is_err());
    }
}
