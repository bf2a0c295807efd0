//! Pretraining and fine-tuning loops.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cmae_tensor::checkpoint;
use cmae_tensor::optim::{AdamWConfig, OptimState};
use cmae_tensor::{ParamSet, Tape, TensorError};

use crate::dataset::{PairSource, Sample};
use crate::error::{config_err, Error, Result};
use crate::losses::LossWeights;
use crate::model::{
    forward_finetune, forward_pretrain, init_params, mask_seed, patchify_batch, plan_mask, ModelConfig, Phase,
    PretrainBatch,
};
use crate::rng::{set_global_seed, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Ignored when fine-tuning.
    pub loss_weights: LossWeights,
    /// Save a resumable checkpoint every this many epochs (0: final only).
    pub ckpt_every: usize,
    /// Cosine decay to zero over the run instead of a constant rate.
    pub cosine: bool,
}

impl TrainConfig {
    pub fn pretrain_paper() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 100,
            lr: 3e-4,
            weight_decay: 0.05,
            loss_weights: LossWeights::default(),
            ckpt_every: 10,
            cosine: false,
        }
    }

    pub fn finetune_paper() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 150,
            lr: 1e-4,
            ..TrainConfig::pretrain_paper()
        }
    }

    pub fn pretrain_desk() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 30,
            lr: 5e-4,
            ckpt_every: 5,
            ..TrainConfig::pretrain_paper()
        }
    }

    pub fn finetune_desk() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 15,
            lr: 3e-4,
            ckpt_every: 0,
            ..TrainConfig::finetune_paper()
        }
    }

    pub fn validate(&self, phase: Phase) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(config_err("batch size and epochs must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err("weight decay must be non-negative"));
        }
        if phase == Phase::Pretrain {
            self.loss_weights.validate()?;
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    fn lr_at(&self, step: u64, total: u64) -> f64 {
        if !self.cosine || total == 0 {
            return self.lr;
        }
        let t = (step as f64 / total as f64).min(1.0);
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Where and how a run persists its state.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Checkpoints and `train_log.jsonl` go here; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Continue from the latest checkpoint in `out_dir`, if any.
    pub resume: bool,
    /// Return after this many epochs in total (simulates an interruption).
    pub stop_after: Option<usize>,
    /// Print one line per epoch to stderr.
    pub progress: bool,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub steps: u64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub total: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rec: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cls: Option<f64>,
    /// Position accuracy (pretrain) or scheme accuracy (fine-tune) on training batches.
    pub train_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_acc: Option<f64>,
    pub wall_secs: f64,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn read(path: &Path) -> Result<TrainLog> {
        let text = fs::read_to_string(path)?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(TrainLog { records })
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
        Ok(())
    }
}

/// Per-step losses, kept in memory for inspection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub rec: f64,
    pub cls: f64,
    pub correct: usize,
    pub count: usize,
}

pub fn config_hash(model: &ModelConfig, train: &TrainConfig, phase: Phase, seed: u64) -> Result<String> {
    let doc = serde_json::to_vec(&(model, train, phase, seed))?;
    Ok(hex::encode(&Sha256::digest(&doc)[..8]))
}

/// Visit order of the training set in `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut set_global_seed(seed).rng(Stream::Shuffle, &[epoch as u64]));
    order
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ResumeState {
    epoch: usize,
    step: u64,
    config_hash: String,
}

/// Resumable checkpoint files of one run.
struct Checkpoints {
    dir: PathBuf,
}

impl Checkpoints {
    fn new(out: &Path) -> Result<Self> {
        let dir = out.join("ckpt");
        fs::create_dir_all(&dir)?;
        Ok(Checkpoints { dir })
    }

    fn params_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:04}.ckpt"))
    }

    fn optim_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:04}.optim.ckpt"))
    }

    fn save(&self, epoch: usize, params: &ParamSet<f32>, opt: &OptimState<f32>, hash: &str) -> Result<()> {
        checkpoint::save(&self.params_path(epoch), params)?;
        checkpoint::save(&self.optim_path(epoch), &opt.moments())?;
        let state = ResumeState {
            epoch,
            step: opt.step,
            config_hash: hash.to_string(),
        };
        // Written last: a checkpoint only counts once this pointer names it.
        let tmp = self.dir.join("latest.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&state)?)?;
        fs::rename(tmp, self.dir.join("latest.json"))?;
        Ok(())
    }

    fn load_latest(&self, cfg: AdamWConfig, hash: &str) -> Result<Option<(usize, ParamSet<f32>, OptimState<f32>)>> {
        let p = self.dir.join("latest.json");
        if !p.exists() {
            return Ok(None);
        }
        let state: ResumeState = serde_json::from_slice(&fs::read(&p)?)?;
        if state.config_hash != hash {
            return Err(config_err(format!(
                "checkpoint in {} was written by a different configuration ({} vs {hash})",
                self.dir.display(),
                state.config_hash
            )));
        }
        let params = checkpoint::load(&self.params_path(state.epoch))?;
        let moments = checkpoint::load(&self.optim_path(state.epoch))?;
        Ok(Some((
            state.epoch,
            params,
            OptimState::from_moments(cfg, state.step, &moments),
        )))
    }
}

fn diverged(epoch: usize, step: u64, e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op, what }) => Error::Diverged {
            epoch,
            step: step as usize,
            detail: format!("non-finite {what} in {op}"),
        },
        other => other,
    }
}

struct Loop<'a> {
    phase: Phase,
    train: &'a TrainConfig,
    hash: String,
    run: &'a RunOptions,
    ckpt: Option<Checkpoints>,
    log: TrainLog,
    log_path: Option<PathBuf>,
}

impl<'a> Loop<'a> {
    fn new(phase: Phase, model: &ModelConfig, train: &'a TrainConfig, seed: u64, run: &'a RunOptions) -> Result<Self> {
        model.validate()?;
        train.validate(phase)?;
        let hash = config_hash(model, train, phase, seed)?;
        let (ckpt, log_path) = match &run.out_dir {
            Some(d) => {
                fs::create_dir_all(d)?;
                (Some(Checkpoints::new(d)?), Some(d.join("train_log.jsonl")))
            }
            None => (None, None),
        };
        Ok(Loop {
            phase,
            train,
            hash,
            run,
            ckpt,
            log: TrainLog::default(),
            log_path,
        })
    }

    /// Starting epoch, parameters and optimizer, from a checkpoint when resuming.
    fn start(&mut self, fresh: ParamSet<f32>) -> Result<(usize, ParamSet<f32>, OptimState<f32>)> {
        let cfg = self.train.adamw();
        if self.run.resume {
            let ckpt = self
                .ckpt
                .as_ref()
                .ok_or_else(|| config_err("resuming needs an output directory"))?;
            if let Some((epoch, params, opt)) = ckpt.load_latest(cfg, &self.hash)? {
                if let Some(p) = &self.log_path {
                    if p.exists() {
                        self.log = TrainLog::read(p)?;
                        self.log.records.retain(|r| r.epoch <= epoch);
                    }
                }
                return Ok((epoch + 1, params, opt));
            }
        }
        Ok((1, fresh, OptimState::new(cfg)))
    }

    fn finish_epoch(&mut self, rec: EpochRecord, params: &ParamSet<f32>, opt: &OptimState<f32>) -> Result<()> {
        if self.run.progress {
            eprintln!(
                "[{:?}] epoch {:>3} loss {:.5} acc {:.3}{}",
                self.phase,
                rec.epoch,
                rec.total.or(rec.loss).unwrap_or(f64::NAN),
                rec.train_acc,
                rec.test_acc.map(|a| format!(" test {a:.3}")).unwrap_or_default()
            );
        }
        let epoch = rec.epoch;
        self.log.records.push(rec);
        if let Some(p) = &self.log_path {
            self.log.write(p)?;
        }
        let every = self.train.ckpt_every;
        if let Some(c) = &self.ckpt {
            if epoch == self.train.epochs || (every > 0 && epoch % every == 0) {
                c.save(epoch, params, opt, &self.hash)?;
            }
        }
        Ok(())
    }

    fn stop(&self, epoch: usize) -> bool {
        self.run.stop_after.is_some_and(|s| epoch >= s)
    }

    fn write_final(&self, params: &ParamSet<f32>) -> Result<Option<PathBuf>> {
        match &self.run.out_dir {
            Some(d) => {
                let p = d.join("final.ckpt");
                checkpoint::save(&p, params)?;
                Ok(Some(p))
            }
            None => Ok(None),
        }
    }
}

fn load_batch(data: &dyn PairSource, idx: &[usize]) -> Result<Vec<Sample>> {
    idx.iter().map(|&i| data.get(i)).collect()
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub params: ParamSet<f32>,
    pub log: TrainLog,
    pub steps: Vec<StepLosses>,
    pub final_checkpoint: Option<PathBuf>,
    /// False when `stop_after` ended the run early.
    pub completed: bool,
}

/// One optimizer step on a pretraining batch.
pub fn pretrain_step(
    params: &mut ParamSet<f32>,
    opt: &mut OptimState<f32>,
    model: &ModelConfig,
    batch: &PretrainBatch<f32>,
    w: LossWeights,
    lr: f64,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = forward_pretrain(&mut tape, &bound, model, batch, w)?;
    let logits = tape.value(out.logits);
    let labels = batch.labels();
    let k = logits.shape()[1];
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(r, &y)| argmax(logits.row(*r)) == y)
        .count();
    let losses = StepLosses {
        total: tape.value(out.total).item() as f64,
        rec: tape.value(out.rec).item() as f64,
        cls: tape.value(out.cls).item() as f64,
        correct,
        count: labels.len(),
    };
    debug_assert_eq!(k, model.n_position_classes());
    let grads = tape.backward(out.total)?;
    let grads = params.gradients(&bound, &grads);
    opt.step_with_lr(params, &grads, lr)?;
    Ok(losses)
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Masked denoising pretraining.
pub fn pretrain(
    data: &dyn PairSource,
    model: &ModelConfig,
    train: &TrainConfig,
    seed: u64,
    init: Option<ParamSet<f32>>,
    run: &RunOptions,
) -> Result<PretrainReport> {
    if data.is_empty() {
        return Err(config_err("pretraining set is empty"));
    }
    let mut lp = Loop::new(Phase::Pretrain, model, train, seed, run)?;
    let fresh = match init {
        Some(p) => p,
        None => init_params(model, Phase::Pretrain, seed)?,
    };
    let (first, mut params, mut opt) = lp.start(fresh)?;
    let n = data.len();
    let steps_per_epoch = n.div_ceil(train.batch_size) as u64;
    let total_steps = steps_per_epoch * train.epochs as u64;
    let mut steps = Vec::new();
    let mut completed = true;
    for epoch in first..=train.epochs {
        let t0 = Instant::now();
        let order = epoch_order(seed, epoch, n);
        let mut sums = StepLosses {
            total: 0.0,
            rec: 0.0,
            cls: 0.0,
            correct: 0,
            count: 0,
        };
        let mut n_steps = 0;
        let mut lr = train.lr;
        for chunk in order.chunks(train.batch_size) {
            let samples = load_batch(data, chunk)?;
            let plans = chunk
                .iter()
                .map(|&i| plan_mask(model.n_patches(), model.mask_ratio, mask_seed(seed, epoch, i)))
                .collect::<Result<Vec<_>>>()?;
            let noisy: Vec<_> = samples.iter().map(|s| &s.noisy).collect();
            let clean: Vec<_> = samples.iter().map(|s| &s.clean).collect();
            let batch = PretrainBatch::new(model, &noisy, &clean, plans)?;
            lr = train.lr_at(opt.step, total_steps);
            let s = pretrain_step(&mut params, &mut opt, model, &batch, train.loss_weights, lr)
                .map_err(|e| diverged(epoch, opt.step + 1, e))?;
            sums.total += s.total;
            sums.rec += s.rec;
            sums.cls += s.cls;
            sums.correct += s.correct;
            sums.count += s.count;
            n_steps += 1;
            steps.push(s);
        }
        let k = n_steps as f64;
        let rec = EpochRecord {
            phase: Phase::Pretrain,
            epoch,
            steps: opt.step,
            lr,
            total: Some(sums.total / k),
            rec: Some(sums.rec / k),
            cls: Some(sums.cls / k),
            train_acc: sums.correct as f64 / sums.count.max(1) as f64,
            loss: None,
            test_acc: None,
            wall_secs: t0.elapsed().as_secs_f64(),
            seed,
            config_hash: lp.hash.clone(),
        };
        lp.finish_epoch(rec, &params, &opt)?;
        if lp.stop(epoch) && epoch < train.epochs {
            completed = false;
            break;
        }
    }
    let final_checkpoint = if completed { lp.write_final(&params)? } else { None };
    Ok(PretrainReport {
        params,
        log: lp.log,
        steps,
        final_checkpoint,
        completed,
    })
}

/// Encoder initialization for fine-tuning.
#[derive(Clone, Debug)]
pub enum FinetuneInit {
    /// Encoder tensors copied by name from a pretraining checkpoint.
    Pretrained(ParamSet<f32>),
    Random,
}

/// Fresh fine-tuning parameters; with `Pretrained`, every `encoder.*` tensor
/// is replaced from the source.
pub fn finetune_params(model: &ModelConfig, seed: u64, init: &FinetuneInit) -> Result<ParamSet<f32>> {
    let mut p = init_params(model, Phase::Finetune, seed)?;
    if let FinetuneInit::Pretrained(src) = init {
        p.load_prefix(src, "encoder.")?;
    }
    Ok(p)
}

#[derive(Clone, Debug)]
pub struct FinetuneReport {
    pub params: ParamSet<f32>,
    pub log: TrainLog,
    pub final_checkpoint: Option<PathBuf>,
    pub completed: bool,
}

/// Downstream logits for a list of samples, batched, without gradients.
pub fn predict(params: &ParamSet<f32>, model: &ModelConfig, data: &dyn PairSource, batch: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let samples = load_batch(data, chunk)?;
        let imgs: Vec<_> = samples.iter().map(|s| &s.noisy).collect();
        let patches = patchify_batch::<f32>(&imgs, model.patch_size)?;
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let logits = forward_finetune(&mut tape, &bound, model, &patches)?;
        let lv = tape.value(logits);
        out.extend((0..chunk.len()).map(|r| argmax(lv.row(r))));
    }
    Ok(out)
}

pub fn accuracy(params: &ParamSet<f32>, model: &ModelConfig, data: &dyn PairSource) -> Result<f64> {
    let pred = predict(params, model, data, 64)?;
    let correct = pred
        .iter()
        .enumerate()
        .map(|(i, &p)| data.get(i).map(|s| (s.label == p) as usize))
        .sum::<Result<usize>>()?;
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Supervised scheme classification on noisy images, all patches visible.
pub fn finetune(
    data: &dyn PairSource,
    test: Option<&dyn PairSource>,
    model: &ModelConfig,
    train: &TrainConfig,
    seed: u64,
    init: &FinetuneInit,
    run: &RunOptions,
) -> Result<FinetuneReport> {
    if data.is_empty() {
        return Err(config_err("fine-tuning set is empty"));
    }
    let mut lp = Loop::new(Phase::Finetune, model, train, seed, run)?;
    let (first, mut params, mut opt) = lp.start(finetune_params(model, seed, init)?)?;
    let n = data.len();
    let total_steps = (n.div_ceil(train.batch_size) * train.epochs) as u64;
    let mut completed = true;
    for epoch in first..=train.epochs {
        let t0 = Instant::now();
        let order = epoch_order(seed, epoch, n);
        let (mut loss_sum, mut n_steps, mut correct) = (0.0, 0usize, 0usize);
        let mut lr = train.lr;
        for chunk in order.chunks(train.batch_size) {
            let samples = load_batch(data, chunk)?;
            for s in &samples {
                if s.label >= model.n_downstream_classes {
                    return Err(config_err(format!(
                        "label {} outside {} downstream classes",
                        s.label, model.n_downstream_classes
                    )));
                }
            }
            let imgs: Vec<_> = samples.iter().map(|s| &s.noisy).collect();
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let patches = patchify_batch::<f32>(&imgs, model.patch_size)?;
            lr = train.lr_at(opt.step, total_steps);
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let step = (|| -> Result<f64> {
                let logits = forward_finetune(&mut tape, &bound, model, &patches)?;
                let lv = tape.value(logits);
                correct += labels
                    .iter()
                    .enumerate()
                    .filter(|(r, &y)| argmax(lv.row(*r)) == y)
                    .count();
                let loss = tape.softmax_cross_entropy(logits, &labels)?;
                let g = tape.backward(loss)?;
                let grads = params.gradients(&bound, &g);
                opt.step_with_lr(&mut params, &grads, lr)?;
                Ok(tape.value(loss).item() as f64)
            })()
            .map_err(|e| diverged(epoch, opt.step + 1, e))?;
            loss_sum += step;
            n_steps += 1;
        }
        let test_acc = match test {
            Some(t) => Some(accuracy(&params, model, t)?),
            None => None,
        };
        let rec = EpochRecord {
            phase: Phase::Finetune,
            epoch,
            steps: opt.step,
            lr,
            total: None,
            rec: None,
            cls: None,
            train_acc: correct as f64 / n as f64,
            loss: Some(loss_sum / n_steps as f64),
            test_acc,
            wall_secs: t0.elapsed().as_secs_f64(),
            seed,
            config_hash: lp.hash.clone(),
        };
        lp.finish_epoch(rec, &params, &opt)?;
        if lp.stop(epoch) && epoch < train.epochs {
            completed = false;
            break;
        }
    }
    let final_checkpoint = if completed { lp.write_final(&params)? } else { None };
    Ok(FinetuneReport {
        params,
        log: lp.log,
        final_checkpoint,
        completed,
    })
}
