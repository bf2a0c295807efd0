//! Baseband waveform synthesis for the ten modulation classes.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::rng::normal_pair;

pub const DEFAULT_LEN: usize = 1024;
pub const SAMPLE_RATE: f64 = 200_000.0;
pub const GMSK_RAW_LEN: usize = 8196;

/// Modulation class, in canonical label order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "4ASK")]
    Ask4,
    #[serde(rename = "4PAM")]
    Pam4,
    #[serde(rename = "8ASK")]
    Ask8,
    #[serde(rename = "16PAM")]
    Pam16,
    #[serde(rename = "CPFSK")]
    Cpfsk,
    #[serde(rename = "DQPSK")]
    Dqpsk,
    #[serde(rename = "GFSK")]
    Gfsk,
    #[serde(rename = "GMSK")]
    Gmsk,
    #[serde(rename = "OOK")]
    Ook,
    #[serde(rename = "OQPSK")]
    Oqpsk,
}

impl Scheme {
    pub const ALL: [Scheme; 10] = [
        Scheme::Ask4,
        Scheme::Pam4,
        Scheme::Ask8,
        Scheme::Pam16,
        Scheme::Cpfsk,
        Scheme::Dqpsk,
        Scheme::Gfsk,
        Scheme::Gmsk,
        Scheme::Ook,
        Scheme::Oqpsk,
    ];

    pub fn index(self) -> usize {
        Scheme::ALL.iter().position(|&s| s == self).unwrap()
    }

    pub fn from_index(i: usize) -> Result<Scheme> {
        Scheme::ALL
            .get(i)
            .copied()
            .ok_or_else(|| config_err(format!("class index {i} out of range (10 schemes)")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Ask4 => "4ASK",
            Scheme::Pam4 => "4PAM",
            Scheme::Ask8 => "8ASK",
            Scheme::Pam16 => "16PAM",
            Scheme::Cpfsk => "CPFSK",
            Scheme::Dqpsk => "DQPSK",
            Scheme::Gfsk => "GFSK",
            Scheme::Gmsk => "GMSK",
            Scheme::Ook => "OOK",
            Scheme::Oqpsk => "OQPSK",
        }
    }

    pub fn params(self) -> SchemeParams {
        SchemeParams::for_scheme(self)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Scheme> {
        Scheme::ALL
            .iter()
            .copied()
            .find(|sc| sc.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| config_err(format!("unknown modulation scheme {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pulse {
    Rect,
    RaisedCosine { rolloff: f64, span: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kind {
    /// Real amplitude levels, one per symbol.
    Amplitude,
    /// Differential quadrature phase.
    DiffPhase,
    /// QPSK with the Q rail delayed by half a symbol.
    OffsetQpsk,
    /// Continuous-phase frequency modulation.
    Frequency { h: f64, gaussian_bt: Option<f64> },
}

/// Waveform parameters of one scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct SchemeParams {
    pub kind: Kind,
    /// Symbol alphabet (real levels, unit mean energy). Empty for phase and
    /// frequency schemes, which draw from `order` equiprobable symbols.
    pub levels: Vec<f64>,
    pub order: usize,
    pub pulse: Pulse,
    pub samples_per_symbol: usize,
}

fn pam_levels(m: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..m).map(|i| 2.0 * i as f64 - (m as f64 - 1.0)).collect();
    let energy = raw.iter().map(|v| v * v).sum::<f64>() / m as f64;
    raw.iter().map(|v| v / energy.sqrt()).collect()
}

impl SchemeParams {
    pub fn for_scheme(scheme: Scheme) -> SchemeParams {
        let rc = Pulse::RaisedCosine { rolloff: 0.35, span: 6 };
        let amp = |levels: Vec<f64>, pulse| SchemeParams {
            kind: Kind::Amplitude,
            order: levels.len(),
            levels,
            pulse,
            samples_per_symbol: 8,
        };
        let freq = |order, h, bt| SchemeParams {
            kind: Kind::Frequency { h, gaussian_bt: bt },
            levels: Vec::new(),
            order,
            pulse: Pulse::Rect,
            samples_per_symbol: 8,
        };
        match scheme {
            Scheme::Ask4 => amp(pam_levels(4), Pulse::Rect),
            Scheme::Pam4 => amp(pam_levels(4), rc),
            Scheme::Ask8 => amp(pam_levels(8), Pulse::Rect),
            Scheme::Pam16 => amp(pam_levels(16), rc),
            Scheme::Ook => amp(vec![0.0, 2f64.sqrt()], Pulse::Rect),
            Scheme::Cpfsk => freq(2, 0.5, None),
            Scheme::Gfsk => freq(2, 1.0, Some(0.35)),
            Scheme::Gmsk => SchemeParams {
                samples_per_symbol: 64,
                ..freq(2, 0.5, Some(0.35))
            },
            Scheme::Dqpsk => SchemeParams {
                kind: Kind::DiffPhase,
                levels: Vec::new(),
                order: 4,
                pulse: Pulse::Rect,
                samples_per_symbol: 8,
            },
            Scheme::Oqpsk => SchemeParams {
                kind: Kind::OffsetQpsk,
                levels: Vec::new(),
                order: 4,
                pulse: Pulse::Rect,
                samples_per_symbol: 8,
            },
        }
    }
}

/// Complex baseband samples with their provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct IqSignal {
    pub samples: Vec<Complex64>,
    pub sample_rate: f64,
    pub scheme: Scheme,
    /// `None` for a clean signal.
    pub snr_db: Option<f64>,
}

impl IqSignal {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean_power(&self) -> f64 {
        mean_power(&self.samples)
    }
}

pub fn mean_power(s: &[Complex64]) -> f64 {
    if s.is_empty() {
        return 0.0;
    }
    s.iter().map(|z| z.norm_sqr()).sum::<f64>() / s.len() as f64
}

/// `n` symbol indices in `0..order`, as balanced as `n` allows, in random order.
pub fn balanced_symbols(rng: &mut ChaCha8Rng, n: usize, order: usize) -> Vec<usize> {
    let mut s: Vec<usize> = (0..n).map(|i| i % order).collect();
    s.shuffle(rng);
    s
}

fn raised_cosine(t: f64, beta: f64) -> f64 {
    let sinc = if t.abs() < 1e-12 {
        1.0
    } else {
        (PI * t).sin() / (PI * t)
    };
    let denom = 1.0 - (2.0 * beta * t).powi(2);
    if denom.abs() < 1e-10 {
        PI / 4.0 * sinc_of(1.0 / (2.0 * beta))
    } else {
        sinc * (PI * beta * t).cos() / denom
    }
}

fn sinc_of(x: f64) -> f64 {
    (PI * x).sin() / (PI * x)
}

/// Superpose real symbol values onto a sample grid with the given pulse.
fn shape_pulses(values: &[f64], sps: usize, n: usize, pulse: Pulse) -> Vec<f64> {
    match pulse {
        Pulse::Rect => (0..n).map(|i| values[(i / sps) % values.len()]).collect(),
        Pulse::RaisedCosine { rolloff, span } => {
            let mut out = vec![0.0; n];
            // Symbols are placed cyclically so the filter has no start-up transient.
            let nsym = values.len() as isize;
            for (i, o) in out.iter_mut().enumerate() {
                let t = i as f64 / sps as f64;
                let centre = (t - 0.5).round() as isize;
                for k in centre - span as isize..=centre + span as isize {
                    let v = values[k.rem_euclid(nsym) as usize];
                    *o += v * raised_cosine(t - k as f64 - 0.5, rolloff);
                }
            }
            out
        }
    }
}

fn gaussian_kernel(bt: f64, sps: usize) -> Vec<f64> {
    // Gaussian frequency filter: σ = sqrt(ln 2) / (2π BT) symbol periods.
    let sigma = (2f64.ln()).sqrt() / (2.0 * PI * bt) * sps as f64;
    let half = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-half..=half)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

fn frequency_phase(symbols: &[f64], sps: usize, n: usize, h: f64, bt: Option<f64>) -> Vec<f64> {
    let nrz: Vec<f64> = (0..n).map(|i| symbols[(i / sps) % symbols.len()]).collect();
    let freq = match bt {
        None => nrz,
        Some(bt) => {
            let k = gaussian_kernel(bt, sps);
            let half = (k.len() / 2) as isize;
            (0..n as isize)
                .map(|i| {
                    k.iter()
                        .enumerate()
                        .map(|(j, w)| {
                            let idx = (i + j as isize - half).rem_euclid(n as isize);
                            w * nrz[idx as usize]
                        })
                        .sum()
                })
                .collect()
        }
    };
    let step = PI * h / sps as f64;
    let mut phase = Vec::with_capacity(n);
    let mut acc = 0.0;
    for f in freq {
        phase.push(acc);
        acc += step * f;
    }
    phase
}

/// Clean, unit-power baseband signal of `n_samples` samples.
pub fn gen_clean(scheme: Scheme, n_samples: usize, seed: u64) -> Result<IqSignal> {
    if n_samples < 2 {
        return Err(config_err(format!("signal length {n_samples} is too short")));
    }
    let p = scheme.params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let samples: Vec<Complex64> = if scheme == Scheme::Gmsk {
        // Generate at the raw length, resample the unwrapped phase.
        let raw_len = GMSK_RAW_LEN * n_samples / DEFAULT_LEN;
        let sps = p.samples_per_symbol;
        let nsym = raw_len.div_ceil(sps);
        let bits: Vec<f64> = balanced_symbols(&mut rng, nsym, 2)
            .into_iter()
            .map(|b| 2.0 * b as f64 - 1.0)
            .collect();
        let Kind::Frequency { h, gaussian_bt } = p.kind else {
            unreachable!()
        };
        let phase = frequency_phase(&bits, sps, raw_len, h, gaussian_bt);
        resample_real(&phase, n_samples)
            .into_iter()
            .map(|ph| Complex64::from_polar(1.0, ph))
            .collect()
    } else {
        let sps = p.samples_per_symbol;
        let nsym = n_samples.div_ceil(sps);
        let sym = balanced_symbols(&mut rng, nsym, p.order);
        match p.kind {
            Kind::Amplitude => {
                let vals: Vec<f64> = sym.iter().map(|&s| p.levels[s]).collect();
                shape_pulses(&vals, sps, n_samples, p.pulse)
                    .into_iter()
                    .map(|v| Complex64::new(v, 0.0))
                    .collect()
            }
            Kind::DiffPhase => {
                let mut phase = 0.0;
                let phases: Vec<f64> = sym
                    .iter()
                    .map(|&s| {
                        phase += s as f64 * PI / 2.0;
                        phase
                    })
                    .collect();
                (0..n_samples)
                    .map(|i| Complex64::from_polar(1.0, phases[i / sps]))
                    .collect()
            }
            Kind::OffsetQpsk => {
                let q_bits = balanced_symbols(&mut rng, nsym, 2);
                let level = |b: usize| if b == 1 { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
                let delay = sps / 2;
                (0..n_samples)
                    .map(|i| {
                        let qi = (i + n_samples - delay) % n_samples;
                        Complex64::new(level(sym[i / sps] % 2), level(q_bits[qi / sps]))
                    })
                    .collect()
            }
            Kind::Frequency { h, gaussian_bt } => {
                let bits: Vec<f64> = sym.iter().map(|&b| 2.0 * b as f64 - 1.0).collect();
                frequency_phase(&bits, sps, n_samples, h, gaussian_bt)
                    .into_iter()
                    .map(|ph| Complex64::from_polar(1.0, ph))
                    .collect()
            }
        }
    };

    let power = mean_power(&samples);
    let scale = 1.0 / power.sqrt();
    Ok(IqSignal {
        samples: samples.into_iter().map(|z| z * scale).collect(),
        sample_rate: SAMPLE_RATE,
        scheme,
        snr_db: None,
    })
}

/// Add complex white Gaussian noise at `snr_db` relative to the measured signal power.
pub fn add_awgn(signal: &IqSignal, snr_db: f64, seed: u64) -> Result<IqSignal> {
    let p = signal.mean_power();
    if !(p > 0.0) {
        return Err(config_err("cannot add noise relative to a zero-power signal"));
    }
    if snr_db.is_nan() {
        return Err(config_err("SNR is NaN"));
    }
    let mut out = signal.clone();
    out.snr_db = Some(snr_db);
    if snr_db == f64::INFINITY {
        return Ok(out);
    }
    let sigma2 = p * 10f64.powf(-snr_db / 10.0);
    let std = (sigma2 / 2.0).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for z in &mut out.samples {
        let (a, b) = normal_pair(&mut rng);
        *z += Complex64::new(a * std, b * std);
    }
    Ok(out)
}

/// Linear interpolation onto `target_len` points that keep both endpoints.
pub fn resample_real(x: &[f64], target_len: usize) -> Vec<f64> {
    let n = x.len();
    if n == 1 {
        return vec![x[0]; target_len];
    }
    (0..target_len)
        .map(|i| {
            let pos = if target_len == 1 {
                0.0
            } else {
                (i * (n - 1)) as f64 / (target_len - 1) as f64
            };
            let lo = (pos.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            let t = pos - lo as f64;
            x[lo] + t * (x[hi] - x[lo])
        })
        .collect()
}

pub fn resample(signal: &IqSignal, target_len: usize) -> Result<IqSignal> {
    if target_len < 2 {
        return Err(config_err(format!("resample target length {target_len} < 2")));
    }
    if signal.is_empty() {
        return Err(config_err("cannot resample an empty signal"));
    }
    let re: Vec<f64> = signal.samples.iter().map(|z| z.re).collect();
    let im: Vec<f64> = signal.samples.iter().map(|z| z.im).collect();
    let samples = resample_real(&re, target_len)
        .into_iter()
        .zip(resample_real(&im, target_len))
        .map(|(r, i)| Complex64::new(r, i))
        .collect();
    Ok(IqSignal {
        samples,
        ..signal.clone()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IqSidecar {
    pub scheme: Scheme,
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub length: usize,
    pub sample_rate: f64,
}

/// Write interleaved little-endian f32 I/Q plus a `<path>.json` sidecar.
pub fn write_iq(path: &Path, signal: &IqSignal, seed: u64) -> Result<()> {
    let mut bytes = Vec::with_capacity(signal.len() * 8);
    for z in &signal.samples {
        bytes.extend_from_slice(&(z.re as f32).to_le_bytes());
        bytes.extend_from_slice(&(z.im as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    let side = IqSidecar {
        scheme: signal.scheme,
        snr_db: signal.snr_db,
        seed,
        length: signal.len(),
        sample_rate: signal.sample_rate,
    };
    std::fs::write(sidecar(path), serde_json::to_vec_pretty(&side)?)?;
    Ok(())
}

pub fn read_iq(path: &Path) -> Result<(IqSignal, IqSidecar)> {
    let side: IqSidecar = serde_json::from_slice(&std::fs::read(sidecar(path))?)?;
    let bytes = std::fs::read(path)?;
    if bytes.len() != side.length * 8 {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!("expected {} bytes, found {}", side.length * 8, bytes.len()),
        });
    }
    let samples = bytes
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes(c[..4].try_into().unwrap());
            let im = f32::from_le_bytes(c[4..].try_into().unwrap());
            Complex64::new(re as f64, im as f64)
        })
        .collect();
    let sig = IqSignal {
        samples,
        sample_rate: side.sample_rate,
        scheme: side.scheme,
        snr_db: side.snr_db,
    };
    Ok((sig, side))
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_follow_class_table() {
        let names: Vec<&str> = Scheme::ALL.iter().map(|s| s.name()).collect();
        assert_eq!(
            names,
            ["4ASK", "4PAM", "8ASK", "16PAM", "CPFSK", "DQPSK", "GFSK", "GMSK", "OOK", "OQPSK"]
        );
        for (i, s) in Scheme::ALL.iter().enumerate() {
            assert_eq!(s.index(), i);
            assert_eq!(s.name().parse::<Scheme>().unwrap(), *s);
        }
        assert!("QAM64".parse::<Scheme>().is_err());
    }

    #[test]
    fn level_tables_have_unit_energy() {
        for s in Scheme::ALL {
            let p = s.params();
            if p.levels.is_empty() {
                continue;
            }
            let e = p.levels.iter().map(|v| v * v).sum::<f64>() / p.levels.len() as f64;
            assert!((e - 1.0).abs() < 1e-12, "{s}: {e}");
        }
    }

    #[test]
    fn resample_identity_and_constant() {
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        assert_eq!(resample_real(&x, 50), x);
        let c = vec![0.7; 33];
        assert!(resample_real(&c, 200).iter().all(|&v| v == 0.7));
    }
}
