//! Rasterization of IQ samples into enhanced-grayscale constellation images.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use cmae_tensor::Tensor;

use crate::error::{config_err, Result};
use crate::rng::{mix, Stream};
use crate::sigsynth::{add_awgn, gen_clean, IqSignal, Scheme, DEFAULT_LEN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Side of the square complex-plane window, centred at the origin.
    pub plane_extent: f64,
    pub image_size: usize,
    /// Per-channel decay rates, in inverse pixels.
    pub alphas: [f64; 3],
    /// Pixels farther than this from a sample receive nothing from it.
    pub neighborhood_radius: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            plane_extent: 7.0,
            image_size: 224,
            alphas: [0.6, 1.2, 2.4],
            neighborhood_radius: 6.0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.plane_extent > 0.0) {
            return Err(config_err("render.plane_extent must be positive"));
        }
        if self.image_size == 0 {
            return Err(config_err("image size must be positive"));
        }
        if self.alphas.iter().any(|a| !(*a > 0.0)) {
            return Err(config_err("render.alphas must be strictly positive"));
        }
        let [a, b, c] = self.alphas;
        if a == b || b == c || a == c {
            return Err(config_err("render.alphas must be pairwise distinct"));
        }
        if !(self.neighborhood_radius > 0.0) {
            return Err(config_err("render.neighborhood_radius must be positive"));
        }
        Ok(())
    }

    /// Continuous pixel coordinates (column, row) of a complex point, after
    /// clipping it to the plane. Pixel (i, j) has its centroid at (j, i).
    pub fn to_pixel(&self, z: Complex64) -> (f64, f64) {
        let half = self.plane_extent / 2.0;
        let scale = self.image_size as f64 / self.plane_extent;
        let re = z.re.clamp(-half, half);
        let im = z.im.clamp(-half, half);
        ((re + half) * scale - 0.5, (half - im) * scale - 0.5)
    }

    /// Complex point at the centroid of pixel (row, col).
    pub fn pixel_centre(&self, row: usize, col: usize) -> Complex64 {
        let half = self.plane_extent / 2.0;
        let scale = self.image_size as f64 / self.plane_extent;
        Complex64::new((col as f64 + 0.5) / scale - half, half - (row as f64 + 0.5) / scale)
    }
}

/// Unnormalized decay-model accumulation with explicit per-point weights.
pub fn accumulate(points: &[(Complex64, f64)], cfg: &RenderConfig, alpha: f64) -> Vec<f64> {
    let s = cfg.image_size;
    let r = cfg.neighborhood_radius;
    let mut grid = vec![0.0f64; s * s];
    for &(z, w) in points {
        let (u, v) = cfg.to_pixel(z);
        let r0 = (v - r).ceil().max(0.0) as usize;
        let r1 = (v + r).floor().min(s as f64 - 1.0);
        let c0 = (u - r).ceil().max(0.0) as usize;
        let c1 = (u + r).floor().min(s as f64 - 1.0);
        if r1 < 0.0 || c1 < 0.0 {
            continue;
        }
        for i in r0..=r1 as usize {
            let dv = i as f64 - v;
            for j in c0..=c1 as usize {
                let du = j as f64 - u;
                let d = (du * du + dv * dv).sqrt();
                if d <= r {
                    grid[i * s + j] += w * (-alpha * d).exp();
                }
            }
        }
    }
    grid
}

fn normalize_max(grid: &[f64]) -> Vec<f32> {
    let max = grid.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        grid.iter().map(|&v| (v / max) as f32).collect()
    } else {
        vec![0.0; grid.len()]
    }
}

/// One channel: `Σ_k |s_k|² exp(-α d)`, normalized to a maximum of 1.
pub fn enhanced_gray(samples: &[Complex64], cfg: &RenderConfig, alpha: f64) -> Result<Vec<f32>> {
    if !(alpha > 0.0) {
        return Err(config_err(format!("decay rate must be positive, got {alpha}")));
    }
    let pts: Vec<(Complex64, f64)> = samples.iter().map(|&z| (z, z.norm_sqr())).collect();
    Ok(normalize_max(&accumulate(&pts, cfg, alpha)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Noisy,
    Clean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstellationImage {
    /// `[3, S, S]`, values in `[0, 1]`.
    pub pixels: Tensor<f32>,
    pub variant: Variant,
    pub scheme: Scheme,
    pub snr_db: Option<f64>,
}

/// Three channels with decay rates `cfg.alphas`.
pub fn to_rgb(samples: &[Complex64], cfg: &RenderConfig) -> Result<Tensor<f32>> {
    let s = cfg.image_size;
    let mut data = Vec::with_capacity(3 * s * s);
    for &a in &cfg.alphas {
        data.extend(enhanced_gray(samples, cfg, a)?);
    }
    Ok(Tensor::new(vec![3, s, s], data)?)
}

pub fn render(signal: &IqSignal, variant: Variant, cfg: &RenderConfig) -> Result<ConstellationImage> {
    Ok(ConstellationImage {
        pixels: to_rgb(&signal.samples, cfg)?,
        variant,
        scheme: signal.scheme,
        snr_db: signal.snr_db,
    })
}

/// Bilinear resize with aligned corners.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |i: usize, n_out: usize, n_in: usize| {
        if n_out == 1 || n_in == 1 {
            0.0
        } else {
            (i * (n_in - 1)) as f64 / (n_out - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let y = coord(i, out_h, h);
        let y0 = (y.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let ty = y - y0 as f64;
        for j in 0..out_w {
            let x = coord(j, out_w, w);
            let x0 = (x.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let tx = x - x0 as f64;
            let top = src[y0 * w + x0] + tx * (src[y0 * w + x1] - src[y0 * w + x0]);
            let bot = src[y1 * w + x0] + tx * (src[y1 * w + x1] - src[y1 * w + x0]);
            out.push(top + ty * (bot - top));
        }
    }
    out
}

/// Real part as a 32×32 grid, resized to `size`, min-max scaled, three channels.
pub fn signal_to_image(signal: &IqSignal, size: usize) -> Result<Tensor<f32>> {
    if signal.len() != DEFAULT_LEN {
        return Err(config_err(format!(
            "signal image needs {DEFAULT_LEN} samples, got {}",
            signal.len()
        )));
    }
    let re: Vec<f64> = signal.samples.iter().map(|z| z.re).collect();
    let up = resize_bilinear(&re, 32, 32, size, size);
    let lo = up.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = up.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f32> = if hi > lo {
        up.iter().map(|v| ((v - lo) / (hi - lo)) as f32).collect()
    } else {
        vec![0.0; up.len()]
    };
    let mut data = Vec::with_capacity(3 * size * size);
    for _ in 0..3 {
        data.extend_from_slice(&scaled);
    }
    Ok(Tensor::new(vec![3, size, size], data)?)
}

/// A rendered denoising pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub noisy: ConstellationImage,
    pub clean: ConstellationImage,
    pub label: usize,
}

/// Seeds for the clean waveform and its noise, both derived from `seed`.
pub fn pair_seeds(seed: u64) -> (u64, u64) {
    (mix(seed, &[Stream::Signal as u64]), mix(seed, &[Stream::Noise as u64]))
}

/// Clean and noisy signals for one pair. `snr_db = +∞` disables noise.
pub fn pair_signals(scheme: Scheme, snr_db: f64, seed: u64) -> Result<(IqSignal, IqSignal)> {
    let (sig_seed, noise_seed) = pair_seeds(seed);
    let clean = gen_clean(scheme, DEFAULT_LEN, sig_seed)?;
    let noisy = add_awgn(&clean, snr_db, noise_seed)?;
    Ok((noisy, clean))
}

pub fn make_pair(scheme: Scheme, snr_db: f64, seed: u64, cfg: &RenderConfig) -> Result<Pair> {
    let (noisy, clean) = pair_signals(scheme, snr_db, seed)?;
    Ok(Pair {
        noisy: render(&noisy, Variant::Noisy, cfg)?,
        clean: render(&clean, Variant::Clean, cfg)?,
        label: scheme.index(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(size: usize) -> RenderConfig {
        RenderConfig {
            image_size: size,
            ..RenderConfig::default()
        }
    }

    #[test]
    fn pixel_mapping_round_trips() {
        let c = cfg(224);
        for (r, col) in [(0, 0), (10, 200), (223, 223), (111, 5)] {
            let (u, v) = c.to_pixel(c.pixel_centre(r, col));
            assert!((u - col as f64).abs() < 1e-9 && (v - r as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn origin_maps_to_image_centre() {
        let c = cfg(224);
        let (u, v) = c.to_pixel(Complex64::new(0.0, 0.0));
        assert_eq!((u, v), (111.5, 111.5));
    }

    #[test]
    fn out_of_plane_points_are_clipped() {
        let c = cfg(32);
        let (u, v) = c.to_pixel(Complex64::new(100.0, -100.0));
        assert_eq!((u, v), (31.5, 31.5));
    }

    #[test]
    fn empty_grid_is_zero() {
        let g = enhanced_gray(&[], &cfg(16), 1.0).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(enhanced_gray(&[], &cfg(16), 0.0).is_err());
    }

    #[test]
    fn validate_rejects_repeated_alphas() {
        let mut c = cfg(16);
        assert!(c.validate().is_ok());
        c.alphas = [1.0, 1.0, 2.0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn resize_identity() {
        let src: Vec<f64> = (0..12).map(|v| v as f64).collect();
        assert_eq!(resize_bilinear(&src, 3, 4, 3, 4), src);
    }
}
