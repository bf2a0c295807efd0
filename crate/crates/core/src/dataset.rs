//! Paired-image datasets: planning, generation, on-disk layout and loading.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use cmae_tensor::Tensor;

use crate::constellation::{pair_signals, signal_to_image, to_rgb, RenderConfig};
use crate::error::{config_err, Error, Result};
use crate::rng::{set_global_seed, Stream};
use crate::sigsynth::Scheme;

pub const IMAGE_MAGIC: &[u8; 6] = b"DMIMG1";
pub const MANIFEST_VERSION: u32 = 1;
const N_CLASSES: usize = Scheme::ALL.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Pretrain, Split::Train, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn code(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Constellation,
    Signal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub master_seed: u64,
    pub pretrain_count: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub snr_min: f64,
    pub snr_max: f64,
    /// Add signal-image pairs to the pretraining split.
    pub signal_images: bool,
}

impl DatasetConfig {
    pub fn paper() -> Self {
        DatasetConfig {
            master_seed: 0,
            pretrain_count: 10_000,
            train_count: 1_000,
            test_count: 100,
            snr_min: -10.0,
            snr_max: 10.0,
            signal_images: false,
        }
    }

    pub fn desk() -> Self {
        DatasetConfig {
            pretrain_count: 500,
            ..DatasetConfig::paper()
        }
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Pretrain => self.pretrain_count,
            Split::Train => self.train_count,
            Split::Test => self.test_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in Split::ALL {
            if self.count(s) % N_CLASSES != 0 {
                return Err(config_err(format!(
                    "{} count {} is not divisible by {N_CLASSES} classes",
                    s.name(),
                    self.count(s)
                )));
            }
        }
        if !(self.snr_min <= self.snr_max) || !self.snr_min.is_finite() || !self.snr_max.is_finite() {
            return Err(config_err("data.snr_min must not exceed data.snr_max"));
        }
        Ok(())
    }
}

/// Everything needed to render one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub split: Split,
    pub kind: SampleKind,
    pub index: usize,
    pub scheme: Scheme,
    pub label: usize,
    pub snr_db: f64,
    pub seed: u64,
}

impl SampleSpec {
    fn stem(&self) -> (String, String, String) {
        let (n, c) = match self.kind {
            SampleKind::Constellation => ("noisy", "clean"),
            SampleKind::Signal => ("signal_noisy", "signal_clean"),
        };
        let split = self.split.name();
        let file = format!("{:06}.dmimg", self.index);
        (
            format!("{split}/{n}/{file}"),
            format!("{split}/{c}/{file}"),
            format!("{split}/{:06}", self.index),
        )
    }
}

/// Sample specs for one split. Classes are interleaved so any prefix of a
/// multiple of ten samples is balanced.
pub fn plan_split(cfg: &DatasetConfig, split: Split) -> Vec<SampleSpec> {
    let seeds = set_global_seed(cfg.master_seed);
    let n = cfg.count(split);
    let span = (cfg.snr_max - cfg.snr_min).round() as i64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let scheme = Scheme::ALL[i % N_CLASSES];
        let snr_db = match split {
            Split::Pretrain => {
                let mut rng = seeds.rng(Stream::Dataset, &[split.code(), i as u64]);
                rng.gen_range(cfg.snr_min..=cfg.snr_max)
            }
            // Integer grid, cycling so each class sees every level.
            _ => cfg.snr_min + (i as i64 % (span + 1)) as f64,
        };
        out.push(SampleSpec {
            split,
            kind: SampleKind::Constellation,
            index: i,
            scheme,
            label: scheme.index(),
            snr_db,
            seed: seeds.seed(Stream::Signal, &[split.code(), i as u64]),
        });
    }
    if split == Split::Pretrain && cfg.signal_images {
        let extra: Vec<SampleSpec> = out
            .iter()
            .map(|s| SampleSpec {
                kind: SampleKind::Signal,
                ..s.clone()
            })
            .collect();
        out.extend(extra);
    }
    out
}

pub fn plan_dataset(cfg: &DatasetConfig) -> Result<Vec<SampleSpec>> {
    cfg.validate()?;
    Ok(Split::ALL.iter().flat_map(|&s| plan_split(cfg, s)).collect())
}

/// A loaded training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub noisy: Tensor<f32>,
    pub clean: Tensor<f32>,
    pub label: usize,
    pub snr_db: f64,
}

pub fn render_sample(spec: &SampleSpec, render: &RenderConfig) -> Result<Sample> {
    let (noisy, clean) = pair_signals(spec.scheme, spec.snr_db, spec.seed)?;
    let (n, c) = match spec.kind {
        SampleKind::Constellation => (to_rgb(&noisy.samples, render)?, to_rgb(&clean.samples, render)?),
        SampleKind::Signal => (
            signal_to_image(&noisy, render.image_size)?,
            signal_to_image(&clean, render.image_size)?,
        ),
    };
    Ok(Sample {
        noisy: n,
        clean: c,
        label: spec.label,
        snr_db: spec.snr_db,
    })
}

/// Render a split in memory.
pub fn generate_split(cfg: &DatasetConfig, render: &RenderConfig, split: Split) -> Result<Vec<Sample>> {
    plan_split(cfg, split)
        .iter()
        .map(|s| render_sample(s, render))
        .collect()
}

/// Indexable source of training pairs.
pub trait PairSource {
    fn len(&self) -> usize;
    fn get(&self, i: usize) -> Result<Sample>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PairSource for [Sample] {
    fn len(&self) -> usize {
        <[Sample]>::len(self)
    }
    fn get(&self, i: usize) -> Result<Sample> {
        <[Sample]>::get(self, i)
            .cloned()
            .ok_or_else(|| config_err(format!("sample {i} out of range")))
    }
}

impl PairSource for Vec<Sample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn get(&self, i: usize) -> Result<Sample> {
        PairSource::get(self.as_slice(), i)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(flatten)]
    pub spec: SampleSpec,
    pub noisy: String,
    pub clean: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub master_seed: u64,
    pub image_size: usize,
    pub data: DatasetConfig,
    pub render: RenderConfig,
    pub entries: Vec<ManifestEntry>,
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

pub fn encode_image(img: &Tensor<f32>) -> Result<Vec<u8>> {
    if img.rank() != 3 {
        return Err(config_err(format!("image must be rank 3, got shape {:?}", img.shape())));
    }
    let mut out = Vec::with_capacity(18 + 4 * img.numel());
    out.extend_from_slice(IMAGE_MAGIC);
    for &d in img.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    if bytes.len() < 18 || &bytes[..6] != IMAGE_MAGIC {
        return Err(format_err(path, "missing image header"));
    }
    let dims: Vec<usize> = (0..3)
        .map(|i| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != 18 + 4 * n {
        return Err(format_err(path, format!("payload length does not match dims {dims:?}")));
    }
    let data = bytes[18..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(dims, data)?)
}

pub fn write_image(path: &Path, img: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_image(img)?)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    decode_image(&fs::read(path)?, path)
}

/// 8-bit binary PPM of a `[3, H, W]` image, for viewing only.
pub fn write_ppm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(config_err(format!("PPM export needs a [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write!(f, "P6\n{w} {h}\n255\n")?;
    let d = img.data();
    for i in 0..h * w {
        for c in 0..3 {
            f.write_all(&[(d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8])?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Render every split into `dir` and write `manifest.json` last.
pub fn gen_dataset(cfg: &DatasetConfig, render: &RenderConfig, dir: &Path, ppm: bool) -> Result<Manifest> {
    render.validate()?;
    let plan = plan_dataset(cfg)?;
    let mut entries = Vec::with_capacity(plan.len());
    for spec in plan {
        let (noisy, clean, id) = spec.stem();
        let sample = render_sample(&spec, render)?;
        for (rel, img) in [(&noisy, &sample.noisy), (&clean, &sample.clean)] {
            let p = dir.join(rel);
            fs::create_dir_all(p.parent().unwrap())?;
            write_image(&p, img)?;
            if ppm {
                write_ppm(&p.with_extension("ppm"), img)?;
            }
        }
        entries.push(ManifestEntry { id, spec, noisy, clean });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        master_seed: cfg.master_seed,
        image_size: render.image_size,
        data: cfg.clone(),
        render: render.clone(),
        entries,
    };
    fs::create_dir_all(dir)?;
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// A generated dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset> {
        let path = root.join("manifest.json");
        let bytes = fs::read(&path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(format_err(
                &path,
                format!("unsupported manifest version {}", manifest.version),
            ));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    /// Lazily loaded split. Signal-image pairs are included only when asked.
    pub fn split(&self, split: Split, with_signal_images: bool) -> DiskSplit {
        let entries = self
            .manifest
            .entries
            .iter()
            .filter(|e| e.spec.split == split && (with_signal_images || e.spec.kind == SampleKind::Constellation))
            .cloned()
            .collect();
        DiskSplit {
            root: self.root.clone(),
            entries,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiskSplit {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DiskSplit {
    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.entries.len()).map(|i| self.get(i)).collect()
    }
}

impl PairSource for DiskSplit {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn get(&self, i: usize) -> Result<Sample> {
        let e = self
            .entries
            .get(i)
            .ok_or_else(|| config_err(format!("sample {i} out of range")))?;
        Ok(Sample {
            noisy: read_image(&self.root.join(&e.noisy))?,
            clean: read_image(&self.root.join(&e.clean))?,
            label: e.spec.label,
            snr_db: e.spec.snr_db,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_codec_round_trip() {
        let img = Tensor::new(vec![3, 2, 2], (0..12).map(|v| v as f32 / 11.0).collect()).unwrap();
        let bytes = encode_image(&img).unwrap();
        assert_eq!(&bytes[..6], b"DMIMG1");
        assert_eq!(decode_image(&bytes, Path::new("x")).unwrap(), img);
        assert!(decode_image(&bytes[..20], Path::new("x")).is_err());
    }

    #[test]
    fn downstream_snrs_cover_integer_grid() {
        let cfg = DatasetConfig::paper();
        let test = plan_split(&cfg, Split::Test);
        let mut snrs: Vec<i64> = test.iter().map(|s| s.snr_db as i64).collect();
        snrs.sort();
        snrs.dedup();
        assert_eq!(snrs, (-10..=10).collect::<Vec<_>>());
        assert!(test.iter().all(|s| s.snr_db.fract() == 0.0));
    }

    #[test]
    fn indivisible_counts_rejected() {
        let cfg = DatasetConfig {
            train_count: 15,
            ..DatasetConfig::desk()
        };
        assert!(plan_dataset(&cfg).is_err());
    }
}
