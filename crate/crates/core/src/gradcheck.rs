//! Finite-difference check of the full pretraining objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use cmae_tensor::{ParamSet, Tape, Tensor};

use crate::error::Result;
use crate::losses::LossWeights;
use crate::model::{forward_pretrain, init_params, mask_seed, plan_mask, ModelConfig, Phase, PretrainBatch};

/// Gradients smaller than this count as zero. Key biases have an exact zero
/// gradient (softmax ignores a per-query shift) and only round-off remains.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub name: String,
    pub numel: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, GRAD_FLOOR)`.
    pub rel_error: f64,
}

fn random_image(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Tensor<f32> {
    let n = cfg.in_channels * cfg.img_size * cfg.img_size;
    Tensor::new(
        vec![cfg.in_channels, cfg.img_size, cfg.img_size],
        (0..n).map(|_| rng.gen::<f32>()).collect(),
    )
    .unwrap()
}

/// Random-weight f64 model, batch of two random pairs.
pub fn setup(cfg: &ModelConfig, seed: u64) -> Result<(ParamSet<f64>, PretrainBatch<f64>)> {
    let mut params: ParamSet<f64> = init_params(cfg, Phase::Pretrain, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Larger weights than the default init give every path a non-trivial gradient.
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let noisy: Vec<Tensor<f32>> = (0..2).map(|_| random_image(&mut rng, cfg)).collect();
    let clean: Vec<Tensor<f32>> = (0..2).map(|_| random_image(&mut rng, cfg)).collect();
    let plans = (0..2)
        .map(|i| plan_mask(cfg.n_patches(), cfg.mask_ratio, mask_seed(seed, 0, i)))
        .collect::<Result<Vec<_>>>()?;
    let batch = PretrainBatch::new(
        cfg,
        &noisy.iter().collect::<Vec<_>>(),
        &clean.iter().collect::<Vec<_>>(),
        plans,
    )?;
    Ok((params, batch))
}

pub fn total_loss(
    params: &ParamSet<f64>,
    cfg: &ModelConfig,
    batch: &PretrainBatch<f64>,
    w: LossWeights,
) -> Result<f64> {
    let mut tape = Tape::new();
    let b = params.bind_frozen(&mut tape);
    let out = forward_pretrain(&mut tape, &b, cfg, batch, w)?;
    Ok(tape.value(out.total).item())
}

/// Compare backprop against central differences for every parameter tensor.
pub fn gradcheck(cfg: &ModelConfig, seed: u64, h: f64) -> Result<Vec<GradcheckRow>> {
    let w = LossWeights::default();
    let (params, batch) = setup(cfg, seed)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = forward_pretrain(&mut tape, &bound, cfg, &batch, w)?;
    let grads = params.gradients(&bound, &tape.backward(out.total)?);
    let mut rows = Vec::new();
    for (name, t) in params.iter() {
        let analytic = grads.get(name).unwrap().data();
        let mut num = Vec::with_capacity(t.numel());
        for j in 0..t.numel() {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[j] += h;
            let up = total_loss(&p, cfg, &batch, w)?;
            p.get_mut(name).unwrap().data_mut()[j] -= 2.0 * h;
            let down = total_loss(&p, cfg, &batch, w)?;
            num.push((up - down) / (2.0 * h));
        }
        let diff = analytic
            .iter()
            .zip(&num)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = num.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn).max(GRAD_FLOOR);
        rows.push(GradcheckRow {
            name: name.to_string(),
            numel: t.numel(),
            rel_error: diff / denom,
        });
    }
    Ok(rows)
}
