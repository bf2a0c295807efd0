use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use cmae_core::ablate::{parse_sweep, run_ablation, AblationData};
use cmae_core::config::{load_config, Settings};
use cmae_core::dataset::{gen_dataset, generate_split, Dataset, DatasetConfig, DiskSplit, Split};
use cmae_core::eval::{evaluate_classifier, evaluate_denoising, export_latents, ModelClassifier, ModelReconstructor};
use cmae_core::gradcheck::gradcheck;
use cmae_core::model::{check_params, ModelConfig, Phase};
use cmae_core::rng::{hash_str, mix};
use cmae_core::tensor::checkpoint;
use cmae_core::train::{finetune, pretrain, FinetuneInit, RunOptions};

const VERSION: &str = env!("CARGO_PKG_VERSION");
const OUT_ROOT_VAR: &str = "CMAE_OUT";

#[derive(Parser, Debug)]
#[command(
    name = "cmae",
    version,
    about = "Constellation-image masked autoencoder: data, training and evaluation"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Starting point for every setting.
    #[arg(long, global = true, default_value = "desk", value_parser = ["desk", "paper"])]
    preset: String,
    /// `key = value` file applied over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set model.mask_ratio=0.9`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed (same as `--set seed=N`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: `$CMAE_OUT/<command>`, or `runs/<command>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// No per-epoch progress on stderr.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the pretraining and downstream splits to disk.
    Gen {
        /// Also write 8-bit PPM previews.
        #[arg(long)]
        ppm: bool,
    },
    /// Masked denoising pretraining.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs in total.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Supervised fine-tuning on the downstream split.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        /// Pretraining checkpoint; the encoder starts from random weights when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Accuracy, confusion matrix and per-SNR table of a fine-tuned checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "test"])]
        split: String,
    },
    /// SSIM/PSNR of noisy and denoised images against clean references.
    Denoise {
        #[arg(long)]
        ckpt: PathBuf,
        /// Use this dataset's test split instead of freshly rendered pairs at `eval.denoise_snr_db`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Mean-pooled encoder features, one CSV row per sample.
    ExportLatents {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["pretrain", "train", "test"])]
        split: String,
        /// Mask this fraction of patches (fixed seed) before encoding.
        #[arg(long)]
        mask_ratio: Option<f64>,
    },
    /// Pretrain and fine-tune once per value of one setting.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// `key=v1,v2,...`; short keys such as `lambda_cls` resolve to their section.
        #[arg(long)]
        sweep: String,
    },
    /// Finite-difference check of every parameter gradient on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen { .. } => "gen",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::Denoise { .. } => "denoise",
            Command::ExportLatents { .. } => "export-latents",
            Command::Ablate { .. } => "ablate",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    version: &'a str,
    preset: &'a str,
    seed: u64,
    config_file: Option<String>,
    overrides: &'a [String],
}

fn settings(c: &Common) -> Result<Settings> {
    let mut overrides = c.overrides.clone();
    if let Some(s) = c.seed {
        overrides.push(format!("seed={s}"));
    }
    Ok(load_config(&c.preset, c.config.as_deref(), &overrides)?)
}

fn out_dir(c: &Common, command: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ROOT_VAR).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(command)
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Config snapshot, seed and version beside the outputs.
fn record_run(dir: &Path, c: &Common, s: &Settings, command: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(&dir.join("config.txt"), s.snapshot().as_bytes())?;
    let rec = RunRecord {
        command,
        version: VERSION,
        preset: &c.preset,
        seed: s.seed,
        config_file: c.config.as_ref().map(|p| p.display().to_string()),
        overrides: &c.overrides,
    };
    write_atomic(&dir.join("run.json"), &serde_json::to_vec_pretty(&rec)?)?;
    Ok(())
}

fn open_split(data: &Path, split: Split, s: &Settings) -> Result<DiskSplit> {
    let ds = Dataset::open(data).with_context(|| format!("opening dataset {}", data.display()))?;
    if ds.manifest.image_size != s.model.img_size {
        bail!(
            "dataset images are {0}x{0} but model.img_size is {1}",
            ds.manifest.image_size,
            s.model.img_size
        );
    }
    let with_signal = split == Split::Pretrain && s.data.signal_images;
    let out = ds.split(split, with_signal);
    if out.entries.is_empty() {
        bail!("dataset {} has no {} samples", data.display(), split.name());
    }
    Ok(out)
}

fn parse_split(name: &str) -> Split {
    match name {
        "pretrain" => Split::Pretrain,
        "train" => Split::Train,
        _ => Split::Test,
    }
}

fn load_ckpt(path: &Path) -> Result<cmae_core::tensor::ParamSet<f32>> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let s = settings(c)?;
    let name = cli.command.name();
    let dir = out_dir(c, name);
    let progress = !c.quiet;
    let run_opts = |resume: bool, stop_after: Option<usize>| RunOptions {
        out_dir: Some(dir.clone()),
        resume,
        stop_after,
        progress,
    };
    match &cli.command {
        Command::Gen { ppm } => {
            if dir.join("manifest.json").exists() {
                bail!("{} already holds a dataset", dir.display());
            }
            // Render into a staging directory so a finished dataset appears at once.
            let staging = dir.with_extension("partial");
            if staging.exists() {
                fs::remove_dir_all(&staging)?;
            }
            let m = gen_dataset(&s.data, &s.render, &staging, *ppm)?;
            record_run(&staging, c, &s, name)?;
            if let Some(parent) = dir.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::rename(&staging, &dir).with_context(|| format!("moving dataset into {}", dir.display()))?;
            println!("wrote {} pairs to {}", m.entries.len(), dir.display());
        }
        Command::Pretrain {
            data,
            resume,
            stop_after,
        } => {
            let split = open_split(data, Split::Pretrain, &s)?;
            record_run(&dir, c, &s, name)?;
            let r = pretrain(
                &split,
                &s.model,
                &s.pretrain,
                s.seed,
                None,
                &run_opts(*resume, *stop_after),
            )?;
            match r.final_checkpoint {
                Some(p) => println!("final checkpoint {}", p.display()),
                None => println!("stopped early; resume with --resume"),
            }
        }
        Command::Finetune {
            data,
            init,
            resume,
            stop_after,
        } => {
            let train = open_split(data, Split::Train, &s)?;
            let test = open_split(data, Split::Test, &s)?;
            let init = match init {
                Some(p) => FinetuneInit::Pretrained(load_ckpt(p)?),
                None => FinetuneInit::Random,
            };
            record_run(&dir, c, &s, name)?;
            let r = finetune(
                &train,
                Some(&test),
                &s.model,
                &s.finetune,
                s.seed,
                &init,
                &run_opts(*resume, *stop_after),
            )?;
            if let Some(rec) = r.log.records.last() {
                println!(
                    "epoch {} test accuracy {:.4}",
                    rec.epoch,
                    rec.test_acc.unwrap_or(f64::NAN)
                );
            }
            if let Some(p) = r.final_checkpoint {
                println!("final checkpoint {}", p.display());
            }
        }
        Command::Eval { data, ckpt, split } => {
            let params = load_ckpt(ckpt)?;
            check_params(&params, &s.model, Phase::Finetune).context("eval needs a fine-tuned checkpoint")?;
            let split = open_split(data, parse_split(split), &s)?;
            let report = evaluate_classifier(
                &ModelClassifier {
                    params: &params,
                    model: &s.model,
                },
                &split,
            )?;
            record_run(&dir, c, &s, name)?;
            write_atomic(&dir.join("report.json"), &serde_json::to_vec_pretty(&report)?)?;
            write_atomic(&dir.join("report.txt"), report.to_text().as_bytes())?;
            print!("{}", report.to_text());
        }
        Command::Denoise { ckpt, data } => {
            let params = load_ckpt(ckpt)?;
            check_params(&params, &s.model, Phase::Pretrain).context("denoise needs a pretraining checkpoint")?;
            let pairs = match data {
                Some(d) => open_split(d, Split::Test, &s)?.load_all()?,
                None => {
                    let n = s.eval.denoise_pairs.div_ceil(10) * 10;
                    let cfg = DatasetConfig {
                        master_seed: mix(s.seed, &[hash_str("denoise")]),
                        test_count: n,
                        snr_min: s.eval.denoise_snr_db,
                        snr_max: s.eval.denoise_snr_db,
                        ..s.data.clone()
                    };
                    generate_split(&cfg, &s.render, Split::Test)?
                }
            };
            let rep = evaluate_denoising(
                &ModelReconstructor {
                    params: &params,
                    model: &s.model,
                },
                &s.model,
                &pairs,
                s.seed,
            )?;
            record_run(&dir, c, &s, name)?;
            write_atomic(&dir.join("denoise.json"), &serde_json::to_vec_pretty(&rep)?)?;
            println!("pairs    {}", rep.pairs);
            println!("noisy    psnr {:.4} dB  ssim {:.4}", rep.noisy_psnr, rep.noisy_ssim);
            println!(
                "denoised psnr {:.4} dB  ssim {:.4}",
                rep.denoised_psnr, rep.denoised_ssim
            );
        }
        Command::ExportLatents {
            data,
            ckpt,
            split,
            mask_ratio,
        } => {
            let params = load_ckpt(ckpt)?;
            check_params(&params, &s.model, Phase::Pretrain)
                .or_else(|_| check_params(&params, &s.model, Phase::Finetune))
                .context("checkpoint does not match the model config")?;
            let split = open_split(data, parse_split(split), &s)?;
            let ratio = mask_ratio.or(Some(s.eval.latent_mask_ratio));
            record_run(&dir, c, &s, name)?;
            let path = dir.join("latents.csv");
            let mut f = BufWriter::new(fs::File::create(&path)?);
            let rows = export_latents(&params, &s.model, &split, ratio, s.seed, &mut f)?;
            f.flush()?;
            println!("wrote {rows} rows to {}", path.display());
        }
        Command::Ablate { data, sweep } => {
            let sweep = parse_sweep(sweep)?;
            let pre = open_split(data, Split::Pretrain, &s)?;
            let train = open_split(data, Split::Train, &s)?;
            let test = open_split(data, Split::Test, &s)?;
            record_run(&dir, c, &s, name)?;
            let rows = run_ablation(
                &s,
                &sweep,
                &AblationData {
                    pretrain: &pre,
                    train: &train,
                    test: &test,
                },
                Some(&dir),
                progress,
            )?;
            println!("{:<24} {:>10} {:>10}", sweep.key, "rec+cls", "accuracy");
            for r in rows {
                println!("{:<24} {:>10.5} {:>10.4}", r.value, r.pretrain_loss, r.accuracy);
            }
        }
        Command::Gradcheck { step, tolerance } => {
            let rows = gradcheck(&ModelConfig::tiny(), s.seed, *step)?;
            let mut worst = 0.0f64;
            for r in &rows {
                println!("{:<40} {:>6} {:.3e}", r.name, r.numel, r.rel_error);
                worst = worst.max(r.rel_error);
            }
            println!("max relative error {worst:.3e} over {} tensors", rows.len());
            if !(worst < *tolerance) {
                bail!("gradient check failed: {worst:.3e} >= {tolerance:.1e}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
