//! Frame-level pretraining on still images of the synthetic world, standing
//! in for a pretrained image-text encoder. Only the frame path is trained;
//! temporal parameters keep their initial zeros.

use crate::encoder::{init_encoder, record_frames, EncoderConfig, EncoderParams, ParamVars};
use crate::error::{invalid, LssError, Result};
use crate::numerics::{Rng, Tape, Tensor};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::synth_world::SynthWorld;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 300,
            batch_size: 64,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Mean cosine between frame features and image latents of one batch, and
/// its gradient.
fn batch_alignment(
    params: &EncoderParams,
    images: &[Tensor],
    latents: &[Vec<f64>],
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let pv = ParamVars::record(&mut tape, params);
    let refs: Vec<&Tensor> = images.iter().collect();
    let f = record_frames(&mut tape, params, &pv, &refs)?;
    let unit = tape.normalize_rows(f);
    let b = images.len() as f64;
    let mut target = Vec::with_capacity(latents.len() * latents[0].len());
    for l in latents {
        let n = l.iter().map(|v| v * v).sum::<f64>().sqrt();
        target.extend(l.iter().map(|v| -v / (n * b)));
    }
    let d = latents[0].len();
    let loss = tape.dot_const(unit, Tensor::new(vec![latents.len(), d], target)?);
    let value = tape.value(loss).data()[0];
    let mut g = tape.backward(loss);
    let grads = pv
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(v, t)| g.take_or_zeros(*v, t))
        .collect();
    Ok((-value, grads))
}

/// Trains the frame path of a fresh encoder so frame features point along
/// the latent of the image they came from.
pub fn pretrain_frame_encoder(
    world: &SynthWorld,
    enc: &EncoderConfig,
    cfg: &PretrainConfig,
) -> Result<EncoderParams> {
    let w = world.config();
    if enc.d_out != w.d || enc.d_in != w.d_in || enc.tokens != w.tokens {
        return invalid(format!(
            "encoder (tokens {}, d_in {}, d_out {}) does not fit the world (tokens {}, d_in {}, d {})",
            enc.tokens, enc.d_in, enc.d_out, w.tokens, w.d_in, w.d
        ));
    }
    if cfg.batch_size == 0 {
        return invalid("pretraining batch size must be positive");
    }
    let mut params = init_encoder(enc, &mut Rng::derived(cfg.seed, &[10]))?;
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        &params,
    );
    let mut rng = Rng::derived(cfg.seed, &[11]);
    for step in 0..cfg.steps {
        let mut images = Vec::with_capacity(cfg.batch_size);
        let mut latents = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (img, lat) = world.generate_image(rng.below(w.num_classes), &mut rng)?;
            images.push(img);
            latents.push(lat);
        }
        let (_, grads) = batch_alignment(&params, &images, &latents)?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(LssError::NumericalFailure(format!(
                "non-finite pretraining gradient at step {step}"
            )));
        }
        opt.update(&mut params, &grads, cosine_lr(cfg.lr, step, cfg.steps))?;
    }
    Ok(params)
}

/// Mean cosine between frame features and latents on fresh images.
pub fn image_alignment(
    world: &SynthWorld,
    params: &EncoderParams,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = Rng::derived(seed, &[12]);
    let mut images = Vec::with_capacity(n);
    let mut latents = Vec::with_capacity(n);
    for _ in 0..n {
        let (img, lat) = world.generate_image(rng.below(world.config().num_classes), &mut rng)?;
        images.push(img);
        latents.push(lat);
    }
    Ok(batch_alignment(params, &images, &latents)?.0)
}
