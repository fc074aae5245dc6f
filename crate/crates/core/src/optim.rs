//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use crate::encoder::{is_matrix_weight, EncoderParams};
use crate::error::{invalid, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.02,
        }
    }
}

/// Moment estimates aligned with the tensors of one [`EncoderParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &EncoderParams) -> Self {
        AdamW::for_shapes(cfg, params.tensors())
    }

    /// Moments for an arbitrary list of tensors.
    pub fn for_shapes(cfg: AdamWConfig, like: &[Tensor]) -> Self {
        let zeros = || like.iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamW {
            cfg,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One update of encoder parameters with learning rate `lr`. Decay
    /// applies to matrix weights only.
    pub fn update(&mut self, params: &mut EncoderParams, grads: &[Tensor], lr: f64) -> Result<()> {
        let slots: Vec<(&mut [f64], bool)> = params
            .tensor_data_mut()
            .map(|(name, p)| (p, is_matrix_weight(name)))
            .collect();
        self.update_slots(slots, grads, lr)
    }

    /// One update of raw parameter slices; the flag selects weight decay.
    pub fn update_slots(
        &mut self,
        params: Vec<(&mut [f64], bool)>,
        grads: &[Tensor],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return invalid("gradient count does not match optimizer state");
        }
        for ((g, m), (p, _)) in grads.iter().zip(&self.m).zip(&params) {
            if g.len() != m.len() || p.len() != m.len() {
                return invalid("gradient shape does not match optimizer state");
            }
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (p, decays)) in params.into_iter().enumerate() {
            let decay = if decays { c.weight_decay } else { 0.0 };
            let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), grads[i].data());
            for j in 0..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * (mh / (vh.sqrt() + c.eps) + decay * p[j]);
            }
        }
        Ok(())
    }
}

/// `lr_init * (1 + cos(pi * step / total)) / 2`, clamped to `step <= total`.
pub fn cosine_lr(lr_init: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return lr_init;
    }
    let x = step.min(total) as f64 / total as f64;
    if step >= total {
        return 0.0;
    }
    lr_init * (1.0 + (std::f64::consts::PI * x).cos()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_encoder, EncoderConfig};
    use crate::numerics::Rng;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!(cosine_lr(1e-3, 100, 100).abs() <= 1e-15);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(1.0, 30, 100) > cosine_lr(1.0, 31, 100));
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let cfg = EncoderConfig {
            frames: 2,
            tokens: 1,
            d_in: 2,
            d_embed: 4,
            d_out: 2,
            blocks: 1,
            heads: 1,
            mlp_hidden: 4,
        };
        let mut p = init_encoder(&cfg, &mut Rng::new(1)).unwrap();
        let before = p.clone();
        let grads: Vec<Tensor> = p
            .tensors()
            .iter()
            .map(|t| Tensor::filled(t.shape(), 0.5))
            .collect();
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            &p,
        );
        opt.update(&mut p, &grads, 0.01).unwrap();
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                // bias-corrected first step is lr * g / (|g| + eps)
                assert!((y - x - 0.01 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn decay_only_touches_matrix_weights() {
        let cfg = EncoderConfig {
            frames: 2,
            tokens: 1,
            d_in: 2,
            d_embed: 4,
            d_out: 2,
            blocks: 1,
            heads: 1,
            mlp_hidden: 4,
        };
        let mut p = init_encoder(&cfg, &mut Rng::new(1)).unwrap();
        let before = p.clone();
        let grads: Vec<Tensor> = p
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.update(&mut p, &grads, 0.1).unwrap();
        for ((n, a), b) in p.named().zip(before.tensors()) {
            if is_matrix_weight(n) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert!((x - y * (1.0 - 0.1 * 0.02)).abs() < 1e-15);
                }
            } else {
                assert_eq!(a, b, "{n}");
            }
        }
    }
}
