//! AdamW: adaptive moments with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result, TensorError};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers and step counter.
///
/// Weight decay applies to rank >= 2 tensors only (matrices and embedding
/// tables); biases, norm scales and the mask token are not decayed.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T = f32> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(config: AdamWConfig) -> Self {
        OptimState {
            config,
            step: 0,
            m: ParamSet::new(),
            v: ParamSet::new(),
        }
    }

    /// One update with the configured learning rate.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(params, grads, lr)
    }

    /// One update with an explicit learning rate (for schedules).
    pub fn step_with_lr(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64) -> Result<()> {
        for (name, g) in grads.iter() {
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite {
                    op: "adamw_step",
                    what: format!(
                        "gradient of {name} at flat index {i} (value {}, step {})",
                        g.data()[i],
                        self.step + 1
                    ),
                });
            }
            match params.get(name) {
                Some(p) if p.shape() == g.shape() => {}
                Some(p) => {
                    return Err(shape_err(
                        "adamw_step",
                        format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape()),
                    ))
                }
                None => return Err(TensorError::Missing(vec![name.to_string()])),
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let step_size = T::from_f64(lr / bc1);
        let inv_bc2_sqrt = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(c.eps);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).expect("checked above");
            let decay = if p.rank() >= 2 {
                T::from_f64(1.0 - lr * c.weight_decay)
            } else {
                T::one()
            };
            if !self.m.contains(name) {
                self.m.insert(name, Tensor::zeros(p.shape().to_vec()));
                self.v.insert(name, Tensor::zeros(p.shape().to_vec()));
            }
            let m = self.m.get_mut(name).expect("inserted").data_mut();
            let v = self.v.get_mut(name).expect("inserted").data_mut();
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let denom = vi.sqrt() * inv_bc2_sqrt + eps;
                *pi = *pi * decay - step_size * *mi / denom;
            }
        }
        Ok(())
    }

    /// Moments flattened into one bundle (`m.<name>`, `v.<name>`) for checkpoints.
    pub fn moments(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (k, t) in self.m.iter() {
            out.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in self.v.iter() {
            out.insert(format!("v.{k}"), t.clone());
        }
        out
    }

    pub fn from_moments(config: AdamWConfig, step: u64, moments: &ParamSet<T>) -> Self {
        let mut s = OptimState::new(config);
        s.step = step;
        for (k, t) in moments.iter() {
            if let Some(name) = k.strip_prefix("m.") {
                s.m.insert(name, t.clone());
            } else if let Some(name) = k.strip_prefix("v.") {
                s.v.insert(name, t.clone());
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(name: &str, v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::from_f64(vec![1], &[v]).unwrap());
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimState::new(cfg);
        let mut p = scalar_set("w", 1.25);
        for _ in 0..5 {
            st.step(&mut p, &scalar_set("w", 0.0)).unwrap();
        }
        assert_eq!(p.get("w").unwrap().item(), 1.25);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut st = OptimState::new(cfg);
        let mut p = scalar_set("w", 1.0);
        st.step(&mut p, &scalar_set("w", 0.5)).unwrap();
        // m = 0.05, v = 0.00025; m_hat = 0.5, v_hat = 0.25
        let expected = 1.0 - 0.1 * 0.5 / (0.25f64.sqrt() + 1e-8);
        assert!((p.get("w").unwrap().item() - expected).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn constant_gradient_drives_parameter_against_its_sign() {
        let mut st = OptimState::new(AdamWConfig {
            lr: 0.01,
            ..Default::default()
        });
        let mut p = scalar_set("b", 0.0);
        for _ in 0..200 {
            st.step(&mut p, &scalar_set("b", 0.3)).unwrap();
        }
        assert!(p.get("b").unwrap().item() < -1.0);
    }

    #[test]
    fn nan_gradient_aborts_with_name() {
        let mut st = OptimState::new(AdamWConfig::default());
        let mut p = scalar_set("enc.w", 1.0);
        let err = st.step(&mut p, &scalar_set("enc.w", f64::NAN)).unwrap_err();
        assert!(err.to_string().contains("enc.w"));
        assert_eq!(st.step, 0);
        assert_eq!(p.get("enc.w").unwrap().item(), 1.0);
    }

    #[test]
    fn decoupled_decay_only_touches_matrices() {
        let mut st = OptimState::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        });
        let mut p = ParamSet::<f64>::new();
        p.insert("w", Tensor::ones(vec![1, 1]));
        p.insert("b", Tensor::ones(vec![1]));
        let mut g = ParamSet::new();
        g.insert("w", Tensor::zeros(vec![1, 1]));
        g.insert("b", Tensor::zeros(vec![1]));
        st.step(&mut p, &g).unwrap();
        assert!((p.get("w").unwrap().item() - 0.95).abs() < 1e-15);
        assert_eq!(p.get("b").unwrap().item(), 1.0);
    }
}
