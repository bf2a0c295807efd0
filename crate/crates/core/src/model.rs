//! Masked autoencoder with a per-patch position classifier.
//!
//! All forward functions are generic over the scalar type so the same graph
//! can be checked in f64 and trained in f32.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use cmae_tensor::nn::{attention, linear};
use cmae_tensor::{Bound, ParamSet, Scalar, Tape, Tensor, Var};

use crate::error::{config_err, Result};
use crate::losses::{cls_loss, rec_loss, LossWeights};
use crate::rng::{hash_str, mix, trunc_normal, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub img_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub mask_ratio: f64,
    /// Hidden width of the position head; 0 makes it a single linear layer.
    pub cls_head_hidden: usize,
    pub n_downstream_classes: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig {
            img_size: 224,
            patch_size: 16,
            in_channels: 3,
            enc_dim: 768,
            enc_depth: 12,
            enc_heads: 12,
            dec_dim: 512,
            dec_depth: 8,
            dec_heads: 8,
            mask_ratio: 0.75,
            cls_head_hidden: 768,
            n_downstream_classes: 10,
            mlp_ratio: 4,
            ln_eps: 1e-6,
        }
    }

    pub fn desk() -> Self {
        ModelConfig {
            img_size: 64,
            patch_size: 8,
            enc_dim: 128,
            enc_depth: 4,
            enc_heads: 4,
            dec_dim: 64,
            dec_depth: 2,
            dec_heads: 4,
            cls_head_hidden: 128,
            ..ModelConfig::paper()
        }
    }

    /// Smallest useful graph, for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            img_size: 16,
            patch_size: 8,
            enc_dim: 8,
            enc_depth: 1,
            enc_heads: 2,
            dec_dim: 8,
            dec_depth: 1,
            dec_heads: 2,
            mask_ratio: 0.5,
            cls_head_hidden: 8,
            ..ModelConfig::paper()
        }
    }

    pub fn grid(&self) -> usize {
        self.img_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn n_visible(&self) -> usize {
        visible_count(self.n_patches(), self.mask_ratio)
    }

    /// Number of position classes: `(img/patch)² · (1 − r)`.
    pub fn n_position_classes(&self) -> usize {
        self.n_visible()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.img_size == 0 || self.img_size % self.patch_size != 0 {
            return Err(config_err(format!(
                "model.img_size {} is not divisible by model.patch_size {}",
                self.img_size, self.patch_size
            )));
        }
        for (what, dim, heads) in [
            ("encoder", self.enc_dim, self.enc_heads),
            ("decoder", self.dec_dim, self.dec_heads),
        ] {
            if heads == 0 || dim == 0 || dim % heads != 0 {
                return Err(config_err(format!(
                    "{what} width {dim} is not divisible by {heads} heads"
                )));
            }
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(config_err(format!(
                "model.mask_ratio {} must lie in (0, 1)",
                self.mask_ratio
            )));
        }
        let v = self.n_visible();
        if v == 0 || v == self.n_patches() {
            return Err(config_err(format!(
                "mask ratio {} leaves {v} of {} patches visible",
                self.mask_ratio,
                self.n_patches()
            )));
        }
        if self.in_channels == 0 || self.enc_depth == 0 || self.mlp_ratio == 0 || self.n_downstream_classes == 0 {
            return Err(config_err(
                "channels, depth, mlp ratio and class count must be positive",
            ));
        }
        Ok(())
    }
}

pub fn visible_count(n: usize, mask_ratio: f64) -> usize {
    (n as f64 * (1.0 - mask_ratio)).round() as usize
}

/// `[C, H, W]` → `[N, P·P·C]`, patches in row-major grid order, pixels
/// within a patch row-major with channels innermost.
pub fn patchify<T: Scalar>(img: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let &[c, h, w] = img.shape() else {
        return Err(config_err(format!("patchify needs [C, H, W], got {:?}", img.shape())));
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(config_err(format!(
            "image {h}x{w} is not divisible into {p}x{p} patches"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let src = img.data();
    let mut out = Vec::with_capacity(img.numel());
    for gi in 0..gh {
        for gj in 0..gw {
            for py in 0..p {
                for px in 0..p {
                    let (y, x) = (gi * p + py, gj * p + px);
                    for ch in 0..c {
                        out.push(src[(ch * h + y) * w + x]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![gh * gw, p * p * c], out)?)
}

pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, c: usize, h: usize, w: usize, p: usize) -> Result<Tensor<T>> {
    if p == 0 || h % p != 0 || w % p != 0 || patches.shape() != [(h / p) * (w / p), p * p * c] {
        return Err(config_err(format!(
            "cannot unpatchify {:?} into [{c}, {h}, {w}] with patch {p}",
            patches.shape()
        )));
    }
    let gw = w / p;
    let src = patches.data();
    let mut out = vec![T::zero(); c * h * w];
    for (i, row) in src.chunks_exact(p * p * c).enumerate() {
        let (gi, gj) = (i / gw, i % gw);
        for py in 0..p {
            for px in 0..p {
                for ch in 0..c {
                    out[(ch * h + gi * p + py) * w + gj * p + px] = row[(py * p + px) * c + ch];
                }
            }
        }
    }
    Ok(Tensor::new(vec![c, h, w], out)?)
}

/// Stack per-image patch matrices into `[B, N, D]`.
pub fn patchify_batch<T: Scalar>(imgs: &[&Tensor<f32>], p: usize) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut nd = (0, 0);
    for img in imgs {
        let t = patchify(&img.cast::<T>(), p)?;
        nd = (t.shape()[0], t.shape()[1]);
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::new(vec![imgs.len(), nd.0, nd.1], data)?)
}

/// Rows `idx[b]` of each batch element of a `[B, N, D]` tensor.
pub fn select_rows<T: Scalar>(x: &Tensor<T>, idx: &[Vec<usize>]) -> Result<Tensor<T>> {
    let &[b, n, d] = x.shape() else {
        return Err(config_err(format!("select_rows needs [B, N, D], got {:?}", x.shape())));
    };
    if idx.len() != b {
        return Err(config_err(format!("{} index lists for batch {b}", idx.len())));
    }
    let m = idx.first().map_or(0, |v| v.len());
    let mut data = Vec::with_capacity(b * m * d);
    for (bi, rows) in idx.iter().enumerate() {
        for &r in rows {
            if r >= n {
                return Err(config_err(format!("patch index {r} out of range ({n} patches)")));
            }
            let o = (bi * n + r) * d;
            data.extend_from_slice(&x.data()[o..o + d]);
        }
    }
    Ok(Tensor::new(vec![b, m, d], data)?)
}

/// Visible / masked partition of the patch grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub n_patches: usize,
    pub visible_ids: Vec<usize>,
    pub masked_ids: Vec<usize>,
    pub position_labels: Vec<usize>,
}

impl MaskPlan {
    /// Every patch visible (fine-tuning and unmasked latents).
    pub fn full(n: usize) -> MaskPlan {
        MaskPlan {
            n_patches: n,
            visible_ids: (0..n).collect(),
            masked_ids: Vec::new(),
            position_labels: (0..n).collect(),
        }
    }

    /// For each patch, its row in `visible ++ masked`.
    pub fn restore_index(&self) -> Vec<usize> {
        let mut r = vec![0; self.n_patches];
        for (k, &p) in self.visible_ids.iter().chain(&self.masked_ids).enumerate() {
            r[p] = k;
        }
        r
    }
}

/// Rank-k visible patch (ascending spatial index) gets label k.
pub fn position_labels(visible_ids: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..visible_ids.len()).collect();
    order.sort_by_key(|&k| visible_ids[k]);
    let mut labels = vec![0; visible_ids.len()];
    for (rank, k) in order.into_iter().enumerate() {
        labels[k] = rank;
    }
    labels
}

/// Rank `n` i.i.d. uniforms; the lowest `round(n(1−r))` ranks are visible.
pub fn plan_mask(n: usize, mask_ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(config_err(format!("mask ratio {mask_ratio} must lie in (0, 1)")));
    }
    let n_vis = visible_count(n, mask_ratio);
    if n_vis == 0 || n_vis >= n {
        return Err(config_err(format!(
            "mask ratio {mask_ratio} leaves {n_vis} of {n} patches visible"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..n).map(|_| rand::Rng::gen(&mut rng)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| noise[a].total_cmp(&noise[b]).then(a.cmp(&b)));
    let mut visible_ids = order[..n_vis].to_vec();
    let mut masked_ids = order[n_vis..].to_vec();
    visible_ids.sort_unstable();
    masked_ids.sort_unstable();
    let position_labels = position_labels(&visible_ids);
    Ok(MaskPlan {
        n_patches: n,
        visible_ids,
        masked_ids,
        position_labels,
    })
}

/// Mask seed for sample `index` in `epoch`.
pub fn mask_seed(master: u64, epoch: usize, index: usize) -> u64 {
    mix(master, &[Stream::Mask as u64, epoch as u64, index as u64])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

fn block_specs(prefix: &str, d: usize, mlp: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    let mut add = |n: &str, s: Vec<usize>, i| out.push((format!("{prefix}.{n}"), s, i));
    add("norm1.weight", vec![d], Init::Ones);
    add("norm1.bias", vec![d], Init::Zeros);
    for p in ["q", "k", "v", "proj"] {
        add(&format!("attn.{p}.weight"), vec![d, d], Init::Normal);
        add(&format!("attn.{p}.bias"), vec![d], Init::Zeros);
    }
    add("norm2.weight", vec![d], Init::Ones);
    add("norm2.bias", vec![d], Init::Zeros);
    add("mlp.fc1.weight", vec![d, d * mlp], Init::Normal);
    add("mlp.fc1.bias", vec![d * mlp], Init::Zeros);
    add("mlp.fc2.weight", vec![d * mlp, d], Init::Normal);
    add("mlp.fc2.bias", vec![d], Init::Zeros);
}

fn param_specs(cfg: &ModelConfig, phase: Phase) -> Vec<(String, Vec<usize>, Init)> {
    let (n, pd, e, dd) = (cfg.n_patches(), cfg.patch_dim(), cfg.enc_dim, cfg.dec_dim);
    let mut s: Vec<(String, Vec<usize>, Init)> = vec![
        ("encoder.patch_embed.weight".into(), vec![pd, e], Init::Normal),
        ("encoder.patch_embed.bias".into(), vec![e], Init::Zeros),
        ("encoder.pos_embed".into(), vec![n, e], Init::Normal),
        ("encoder.norm.weight".into(), vec![e], Init::Ones),
        ("encoder.norm.bias".into(), vec![e], Init::Zeros),
    ];
    for i in 0..cfg.enc_depth {
        block_specs(&format!("encoder.blocks.{i}"), e, cfg.mlp_ratio, &mut s);
    }
    match phase {
        Phase::Pretrain => {
            s.extend([
                ("decoder.embed.weight".into(), vec![e, dd], Init::Normal),
                ("decoder.embed.bias".into(), vec![dd], Init::Zeros),
                ("decoder.mask_token".into(), vec![dd], Init::Normal),
                ("decoder.pos_embed".into(), vec![n, dd], Init::Normal),
                ("decoder.norm.weight".into(), vec![dd], Init::Ones),
                ("decoder.norm.bias".into(), vec![dd], Init::Zeros),
                ("decoder.pred.weight".into(), vec![dd, pd], Init::Normal),
                ("decoder.pred.bias".into(), vec![pd], Init::Zeros),
            ]);
            for i in 0..cfg.dec_depth {
                block_specs(&format!("decoder.blocks.{i}"), dd, cfg.mlp_ratio, &mut s);
            }
            let nc = cfg.n_position_classes();
            if cfg.cls_head_hidden == 0 {
                s.push(("cls_head.fc.weight".into(), vec![e, nc], Init::Normal));
                s.push(("cls_head.fc.bias".into(), vec![nc], Init::Zeros));
            } else {
                let h = cfg.cls_head_hidden;
                s.push(("cls_head.fc1.weight".into(), vec![e, h], Init::Normal));
                s.push(("cls_head.fc1.bias".into(), vec![h], Init::Zeros));
                s.push(("cls_head.fc2.weight".into(), vec![h, nc], Init::Normal));
                s.push(("cls_head.fc2.bias".into(), vec![nc], Init::Zeros));
            }
        }
        Phase::Finetune => {
            let k = cfg.n_downstream_classes;
            s.push(("head.weight".into(), vec![e, k], Init::Normal));
            s.push(("head.bias".into(), vec![k], Init::Zeros));
        }
    }
    s
}

/// Fresh parameters. Each tensor draws from its own name-keyed stream, so a
/// tensor's initial value depends only on (seed, name, shape).
pub fn init_params<T: Scalar>(cfg: &ModelConfig, phase: Phase, seed: u64) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut out = ParamSet::new();
    for (name, shape, init) in param_specs(cfg, phase) {
        let n: usize = shape.iter().product();
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Normal => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, &[Stream::Init as u64, hash_str(&name)]));
                let v: Vec<f64> = (0..n).map(|_| trunc_normal(&mut rng, 0.02)).collect();
                Tensor::from_f64(shape, &v)?
            }
        };
        out.insert(name, t);
    }
    Ok(out)
}

/// Check that `params` holds every tensor `phase` needs, with the right shapes.
pub fn check_params<T: Scalar>(params: &ParamSet<T>, cfg: &ModelConfig, phase: Phase) -> Result<()> {
    for (name, shape, _) in param_specs(cfg, phase) {
        match params.get(&name) {
            None => return Err(config_err(format!("checkpoint has no tensor {name:?}"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(config_err(format!(
                    "tensor {name:?} has shape {:?}, the model config expects {shape:?}",
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Pre-norm transformer block.
pub fn block<T: Scalar>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var, heads: usize, eps: f64) -> Result<Var> {
    let g = |n: &str| p.get(&format!("{prefix}.{n}"));
    let h = tape.layer_norm(x, g("norm1.weight"), g("norm1.bias"), eps)?;
    let q = linear(tape, h, g("attn.q.weight"), Some(g("attn.q.bias")))?;
    let k = linear(tape, h, g("attn.k.weight"), Some(g("attn.k.bias")))?;
    let v = linear(tape, h, g("attn.v.weight"), Some(g("attn.v.bias")))?;
    let a = attention(tape, q, k, v, heads)?;
    let a = linear(tape, a, g("attn.proj.weight"), Some(g("attn.proj.bias")))?;
    let x = tape.add(x, a)?;
    let h = tape.layer_norm(x, g("norm2.weight"), g("norm2.bias"), eps)?;
    let h = linear(tape, h, g("mlp.fc1.weight"), Some(g("mlp.fc1.bias")))?;
    let h = tape.gelu(h)?;
    let h = linear(tape, h, g("mlp.fc2.weight"), Some(g("mlp.fc2.bias")))?;
    Ok(tape.add(x, h)?)
}

/// `[B, n, P²C]` visible patches with their original indices → `[B, n, enc_dim]`.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    patches: Var,
    ids: &[Vec<usize>],
) -> Result<Var> {
    let x = linear(
        tape,
        patches,
        p.get("encoder.patch_embed.weight"),
        Some(p.get("encoder.patch_embed.bias")),
    )?;
    let pos = tape.gather_rows(p.get("encoder.pos_embed"), ids)?;
    let mut x = tape.add(x, pos)?;
    for i in 0..cfg.enc_depth {
        x = block(tape, p, &format!("encoder.blocks.{i}"), x, cfg.enc_heads, cfg.ln_eps)?;
    }
    Ok(tape.layer_norm(x, p.get("encoder.norm.weight"), p.get("encoder.norm.bias"), cfg.ln_eps)?)
}

/// Encoded visible tokens → `[B, N, P²C]` predictions for every patch.
pub fn decode<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    q_v: Var,
    plans: &[MaskPlan],
) -> Result<Var> {
    let &[b, n_vis, _] = tape.shape(q_v) else {
        return Err(config_err("decoder input must be [B, n, D]"));
    };
    if plans.len() != b {
        return Err(config_err(format!("{} mask plans for batch {b}", plans.len())));
    }
    let n = cfg.n_patches();
    let n_mask = n - n_vis;
    for plan in plans {
        if plan.visible_ids.len() != n_vis || plan.masked_ids.len() != n_mask {
            return Err(config_err(format!(
                "mask plan has {} visible patches but the encoder produced {n_vis}",
                plan.visible_ids.len()
            )));
        }
    }
    let x = linear(
        tape,
        q_v,
        p.get("decoder.embed.weight"),
        Some(p.get("decoder.embed.bias")),
    )?;
    let x = if n_mask > 0 {
        let tokens = tape.broadcast_to(p.get("decoder.mask_token"), &[b, n_mask, cfg.dec_dim])?;
        tape.concat(&[x, tokens], 1)?
    } else {
        x
    };
    let restore: Vec<Vec<usize>> = plans.iter().map(|pl| pl.restore_index()).collect();
    let x = tape.gather_rows(x, &restore)?;
    let mut x = tape.add_broadcast(x, p.get("decoder.pos_embed"))?;
    for i in 0..cfg.dec_depth {
        x = block(tape, p, &format!("decoder.blocks.{i}"), x, cfg.dec_heads, cfg.ln_eps)?;
    }
    let x = tape.layer_norm(x, p.get("decoder.norm.weight"), p.get("decoder.norm.bias"), cfg.ln_eps)?;
    Ok(linear(
        tape,
        x,
        p.get("decoder.pred.weight"),
        Some(p.get("decoder.pred.bias")),
    )?)
}

/// Shared head over each visible token → `[B, n, N_classes]`.
pub fn classify_patches<T: Scalar>(tape: &mut Tape<T>, p: &Bound, cfg: &ModelConfig, q_v: Var) -> Result<Var> {
    if cfg.cls_head_hidden == 0 {
        return Ok(linear(
            tape,
            q_v,
            p.get("cls_head.fc.weight"),
            Some(p.get("cls_head.fc.bias")),
        )?);
    }
    let h = linear(
        tape,
        q_v,
        p.get("cls_head.fc1.weight"),
        Some(p.get("cls_head.fc1.bias")),
    )?;
    let h = tape.gelu(h)?;
    Ok(linear(
        tape,
        h,
        p.get("cls_head.fc2.weight"),
        Some(p.get("cls_head.fc2.bias")),
    )?)
}

/// Patchified pretraining batch with its mask plans.
#[derive(Clone, Debug)]
pub struct PretrainBatch<T: Scalar> {
    pub noisy: Tensor<T>,
    pub clean: Tensor<T>,
    pub plans: Vec<MaskPlan>,
}

impl<T: Scalar> PretrainBatch<T> {
    pub fn new(
        cfg: &ModelConfig,
        noisy: &[&Tensor<f32>],
        clean: &[&Tensor<f32>],
        plans: Vec<MaskPlan>,
    ) -> Result<Self> {
        if noisy.len() != clean.len() || noisy.len() != plans.len() {
            return Err(config_err("noisy, clean and plan counts differ"));
        }
        for (a, b) in noisy.iter().zip(clean) {
            if a.shape() != b.shape() {
                return Err(config_err(format!("noisy {:?} vs clean {:?}", a.shape(), b.shape())));
            }
            if a.shape() != [cfg.in_channels, cfg.img_size, cfg.img_size] {
                return Err(config_err(format!(
                    "image {:?} does not match model input [{}, {}, {}]",
                    a.shape(),
                    cfg.in_channels,
                    cfg.img_size,
                    cfg.img_size
                )));
            }
        }
        Ok(PretrainBatch {
            noisy: patchify_batch(noisy, cfg.patch_size)?,
            clean: patchify_batch(clean, cfg.patch_size)?,
            plans,
        })
    }

    pub fn visible_ids(&self) -> Vec<Vec<usize>> {
        self.plans.iter().map(|p| p.visible_ids.clone()).collect()
    }

    pub fn masked_ids(&self) -> Vec<Vec<usize>> {
        self.plans.iter().map(|p| p.masked_ids.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.plans
            .iter()
            .flat_map(|p| p.position_labels.iter().copied())
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PretrainOutput {
    pub total: Var,
    pub rec: Var,
    pub cls: Var,
    /// `[B, N, P²C]` decoder output.
    pub pred: Var,
    /// `[B·n, N_classes]` position logits.
    pub logits: Var,
}

/// Mask the noisy input, reconstruct clean masked patches, classify visible
/// positions. A zero weight keeps its loss on the tape but out of `total`.
pub fn forward_pretrain<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    batch: &PretrainBatch<T>,
    w: LossWeights,
) -> Result<PretrainOutput> {
    w.validate()?;
    let vis_ids = batch.visible_ids();
    let visible = tape.constant(select_rows(&batch.noisy, &vis_ids)?);
    let q_v = encode(tape, p, cfg, visible, &vis_ids)?;
    let pred = decode(tape, p, cfg, q_v, &batch.plans)?;
    let rec = rec_loss(tape, pred, &batch.clean, &batch.masked_ids())?;
    let logits = classify_patches(tape, p, cfg, q_v)?;
    let &[b, n, k] = tape.shape(logits) else { unreachable!() };
    let logits = tape.reshape(logits, &[b * n, k])?;
    let cls = cls_loss(tape, logits, &batch.labels())?;
    let total = match (w.lambda_rec > 0.0, w.lambda_cls > 0.0) {
        (true, true) => {
            let r = tape.scale(rec, w.lambda_rec)?;
            let c = tape.scale(cls, w.lambda_cls)?;
            tape.add(r, c)?
        }
        (true, false) => tape.scale(rec, w.lambda_rec)?,
        (false, _) => tape.scale(cls, w.lambda_cls)?,
    };
    Ok(PretrainOutput {
        total,
        rec,
        cls,
        pred,
        logits,
    })
}

/// Mean-pooled encoder features of all patches, `[B, enc_dim]`.
pub fn pooled_features<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    patches: &Tensor<T>,
    ids: &[Vec<usize>],
) -> Result<Var> {
    let x = tape.constant(select_rows(patches, ids)?);
    let q = encode(tape, p, cfg, x, ids)?;
    Ok(tape.mean_axis(q, 1)?)
}

/// Downstream logits `[B, n_downstream_classes]` from all patches.
pub fn forward_finetune<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    patches: &Tensor<T>,
) -> Result<Var> {
    let b = patches.shape()[0];
    let ids = vec![(0..cfg.n_patches()).collect::<Vec<_>>(); b];
    let pooled = pooled_features(tape, p, cfg, patches, &ids)?;
    Ok(linear(tape, pooled, p.get("head.weight"), Some(p.get("head.bias")))?)
}
