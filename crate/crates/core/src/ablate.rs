//! One-dimensional hyperparameter sweeps: pretrain, fine-tune, score.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{resolve_key, Settings};
use crate::dataset::PairSource;
use crate::error::{config_err, Result};
use crate::train::{accuracy, finetune, pretrain, FinetuneInit, RunOptions};

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub key: &'static str,
    pub values: Vec<String>,
}

/// Parse `key=v1,v2,...`; short keys resolve by unique suffix.
pub fn parse_sweep(spec: &str) -> Result<Sweep> {
    let (k, vs) = spec
        .split_once('=')
        .ok_or_else(|| config_err(format!("sweep must look like key=v1,v2,..., got {spec:?}")))?;
    let key = resolve_key(k.trim())?;
    let values: Vec<String> = vs
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(config_err(format!("sweep over {key} has no values")));
    }
    Ok(Sweep { key, values })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub key: String,
    pub value: String,
    pub pretrain_loss: f64,
    pub accuracy: f64,
}

pub struct AblationData<'a> {
    pub pretrain: &'a dyn PairSource,
    pub train: &'a dyn PairSource,
    pub test: &'a dyn PairSource,
}

/// Run every grid point independently. With `out_dir`, each point gets its
/// own run directory and rows are appended to `ablation.csv` as they finish.
pub fn run_ablation(
    base: &Settings,
    sweep: &Sweep,
    data: &AblationData,
    out_dir: Option<&Path>,
    progress: bool,
) -> Result<Vec<AblationRow>> {
    let mut settings = Vec::with_capacity(sweep.values.len());
    for v in &sweep.values {
        let mut s = base.clone();
        s.set(sweep.key, v)?;
        settings.push(s.finalize()?);
    }
    let csv = match out_dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            let p = d.join("ablation.csv");
            fs::write(&p, "key,value,pretrain_loss,accuracy\n")?;
            Some(p)
        }
        None => None,
    };
    let mut rows = Vec::new();
    for (v, s) in sweep.values.iter().zip(settings) {
        let point_dir = out_dir.map(|d| d.join(format!("{}={v}", sweep.key)));
        let run = |sub: &str| RunOptions {
            out_dir: point_dir.as_ref().map(|d| d.join(sub)),
            progress,
            ..RunOptions::default()
        };
        if let Some(d) = &point_dir {
            fs::create_dir_all(d)?;
            fs::write(d.join("config.txt"), s.snapshot())?;
        }
        let pre = pretrain(data.pretrain, &s.model, &s.pretrain, s.seed, None, &run("pretrain"))?;
        let ft = finetune(
            data.train,
            None,
            &s.model,
            &s.finetune,
            s.seed,
            &FinetuneInit::Pretrained(pre.params),
            &run("finetune"),
        )?;
        let row = AblationRow {
            key: sweep.key.to_string(),
            value: v.clone(),
            pretrain_loss: pre.log.records.last().and_then(|r| r.total).unwrap_or(f64::NAN),
            accuracy: accuracy(&ft.params, &s.model, data.test)?,
        };
        if let Some(p) = &csv {
            let mut f = fs::OpenOptions::new().append(true).open(p)?;
            writeln!(f, "{},{},{},{}", row.key, row.value, row.pretrain_loss, row.accuracy)?;
        }
        if progress {
            eprintln!("{}={} accuracy {:.4}", row.key, row.value, row.accuracy);
        }
        rows.push(row);
    }
    Ok(rows)
}
