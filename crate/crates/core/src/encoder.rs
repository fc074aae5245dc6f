//! Toy factorized space-time transformer over pre-tokenized patch features.
//!
//! Each frame contributes `S` patch tokens plus its own copy of a learned CLS
//! token. A block runs pre-norm temporal attention (every token position
//! attends across frames), pre-norm spatial attention (tokens of one frame
//! attend to each other) and a pre-norm MLP. The clip feature is the
//! frame-average of the final-normed CLS tokens, mapped through a linear head.
//!
//! All temporal additions (temporal attention output projections and the
//! temporal position embedding) start at exactly zero, so a freshly built
//! encoder reproduces the frame-level encoder averaged over frames.

use std::collections::HashMap;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{invalid, LssError, Result};
use crate::numerics::{rand_uniform, Groups, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// frames per clip (T)
    pub frames: usize,
    /// patch tokens per frame (S)
    pub tokens: usize,
    pub d_in: usize,
    pub d_embed: usize,
    pub d_out: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            frames: 8,
            tokens: 4,
            d_in: 24,
            d_embed: 32,
            d_out: 16,
            blocks: 2,
            heads: 2,
            mlp_hidden: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("frames", self.frames),
            ("tokens", self.tokens),
            ("d_in", self.d_in),
            ("d_embed", self.d_embed),
            ("d_out", self.d_out),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("mlp_hidden", self.mlp_hidden),
        ];
        for (name, v) in fields {
            if v == 0 {
                return invalid(format!("encoder {name} must be positive"));
            }
        }
        if !self.d_embed.is_multiple_of(self.heads) {
            return invalid(format!(
                "d_embed {} is not divisible by {} heads",
                self.d_embed, self.heads
            ));
        }
        Ok(())
    }

    /// Parameter names and shapes in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (de, h) = (self.d_embed, self.mlp_hidden);
        let mut l = vec![
            ("patch.w".to_string(), vec![self.d_in, de]),
            ("patch.b".to_string(), vec![de]),
            ("cls".to_string(), vec![1, de]),
            ("pos.spatial".to_string(), vec![self.tokens + 1, de]),
            ("pos.temporal".to_string(), vec![self.frames, de]),
        ];
        for b in 0..self.blocks {
            for part in ["temporal", "spatial"] {
                let p = format!("blocks.{b}.{part}");
                l.push((format!("{p}.ln.g"), vec![de]));
                l.push((format!("{p}.ln.b"), vec![de]));
                for m in ["q", "k", "v", "o"] {
                    l.push((format!("{p}.w_{m}"), vec![de, de]));
                    l.push((format!("{p}.b_{m}"), vec![de]));
                }
            }
            let p = format!("blocks.{b}.mlp");
            l.push((format!("{p}.ln.g"), vec![de]));
            l.push((format!("{p}.ln.b"), vec![de]));
            l.push((format!("{p}.w1"), vec![de, h]));
            l.push((format!("{p}.b1"), vec![h]));
            l.push((format!("{p}.w2"), vec![h, de]));
            l.push((format!("{p}.b2"), vec![de]));
        }
        l.push(("final_ln.g".to_string(), vec![de]));
        l.push(("final_ln.b".to_string(), vec![de]));
        l.push(("head.w".to_string(), vec![de, self.d_out]));
        l
    }

    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// True for parameters that exist only for temporal modelling.
pub fn is_temporal_param(name: &str) -> bool {
    name == "pos.temporal" || name.contains(".temporal.")
}

/// Temporal parameters that must start at zero for the frame-average
/// equivalence at initialization.
pub fn is_zero_init_param(name: &str) -> bool {
    name == "pos.temporal"
        || (name.contains(".temporal.") && (name.ends_with(".w_o") || name.ends_with(".b_o")))
}

/// Matrix weights (subject to weight decay); embeddings, norms, biases excluded.
pub fn is_matrix_weight(name: &str) -> bool {
    name.rsplit('.')
        .next()
        .is_some_and(|last| last.starts_with('w'))
}

/// Named learnable tensors of one encoder copy (student or teacher).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    cfg: EncoderConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl EncoderParams {
    /// Assembles parameters from named tensors, checking them against the
    /// layout of `cfg`.
    pub fn from_named(cfg: EncoderConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.layout();
        if layout.len() != named.len() {
            return Err(LssError::Format(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for ((lname, lshape), (name, t)) in layout.into_iter().zip(named) {
            if lname != name || lshape != t.shape() {
                return Err(LssError::Format(format!(
                    "parameter '{name}' {:?} does not match expected '{lname}' {:?}",
                    t.shape(),
                    lshape
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(EncoderParams {
            cfg,
            names,
            tensors,
            index,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Mutable access to the values; shapes cannot change through this.
    pub fn tensor_data_mut(&mut self) -> impl Iterator<Item = (&str, &mut [f64])> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.tensors.iter_mut().map(|t| t.data_mut()))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.tensors)
    }

    /// Replaces all values, keeping names and shapes.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        let named = self.names.iter().cloned().zip(tensors).collect();
        EncoderParams::from_named(self.cfg, named)
    }

    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (n, t) in self.named() {
            h.update(n.as_bytes());
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn bit_equal(&self, other: &EncoderParams) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Euclidean distance over all parameters.
    pub fn distance(&self, other: &EncoderParams) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x - y) * (x - y))
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn temporal_projections_are_zero(&self) -> bool {
        self.named()
            .filter(|(n, _)| is_zero_init_param(n))
            .all(|(_, t)| t.data().iter().all(|v| *v == 0.0))
    }
}

/// Fresh encoder: matrices and embeddings uniform in `+-1/sqrt(fan_in)`,
/// biases zero, norms identity, temporal output projections and temporal
/// position embedding exactly zero.
pub fn init_encoder(cfg: &EncoderConfig, rng: &mut Rng) -> Result<EncoderParams> {
    cfg.validate()?;
    let mut named = Vec::new();
    for (name, shape) in cfg.layout() {
        let last = name.rsplit('.').next().unwrap_or("");
        let t = if is_zero_init_param(&name) {
            Tensor::zeros(&shape)
        } else if name.ends_with(".ln.g") || name == "final_ln.g" {
            Tensor::filled(&shape, 1.0)
        } else if last.starts_with('w') {
            rand_uniform(&shape, 1.0 / (shape[0] as f64).sqrt(), rng)
        } else if name == "cls" || name == "pos.spatial" {
            rand_uniform(&shape, 1.0 / (cfg.d_embed as f64).sqrt(), rng)
        } else {
            Tensor::zeros(&shape)
        };
        named.push((name, t));
    }
    EncoderParams::from_named(*cfg, named)
}

/// One augmented view: `T x S x d_in` patch features. The optional class id
/// is for evaluation bookkeeping and is never read by the training losses.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    features: Tensor,
    label: Option<usize>,
}

impl Clip {
    pub fn new(features: Tensor) -> Result<Self> {
        if features.rank() != 3 {
            return invalid(format!(
                "clip must be T x S x d_in, got {:?}",
                features.shape()
            ));
        }
        if !features.is_finite() {
            return invalid("clip contains non-finite features");
        }
        Ok(Clip {
            features,
            label: None,
        })
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    /// The `S x d_in` features of frame `t`.
    pub fn frame(&self, t: usize) -> Tensor {
        let (s, d) = (self.features.shape()[1], self.features.shape()[2]);
        Tensor::from_parts(
            vec![s, d],
            self.features.data()[t * s * d..(t + 1) * s * d].to_vec(),
        )
    }
}

/// Tape leaves for every parameter, aligned with [`EncoderParams::names`].
pub struct ParamVars {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl ParamVars {
    pub fn record(tape: &mut Tape, params: &EncoderParams) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect();
        ParamVars {
            vars,
            index: params.index.clone(),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn get(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }
}

fn check_clip_shape(cfg: &EncoderConfig, clip: &Clip) -> Result<()> {
    let want = [cfg.frames, cfg.tokens, cfg.d_in];
    if clip.features.shape() != want {
        return invalid(format!(
            "clip shape {:?} does not match encoder {:?}",
            clip.features.shape(),
            want
        ));
    }
    Ok(())
}

fn check_frame_shape(cfg: &EncoderConfig, frame: &Tensor) -> Result<()> {
    let want = [cfg.tokens, cfg.d_in];
    if frame.shape() != want {
        return invalid(format!(
            "frame shape {:?} does not match encoder {:?}",
            frame.shape(),
            want
        ));
    }
    Ok(())
}

/// Records the clip path for a batch; returns the `B x d_out` feature node.
pub fn record_clips(
    tape: &mut Tape,
    params: &EncoderParams,
    pv: &ParamVars,
    clips: &[&Clip],
) -> Result<Var> {
    if clips.is_empty() {
        return invalid("empty clip batch");
    }
    let cfg = params.config();
    let mut data = Vec::with_capacity(clips.len() * cfg.frames * cfg.tokens * cfg.d_in);
    for c in clips {
        check_clip_shape(cfg, c)?;
        data.extend_from_slice(c.features.data());
    }
    let rows = clips.len() * cfg.frames * cfg.tokens;
    let x = Tensor::from_parts(vec![rows, cfg.d_in], data);
    Ok(forward(tape, cfg, pv, x, clips.len(), cfg.frames, true))
}

/// Records the frame-only path (temporal sub-layers skipped) for a batch of
/// single frames; returns the `B x d_out` feature node.
pub fn record_frames(
    tape: &mut Tape,
    params: &EncoderParams,
    pv: &ParamVars,
    frames: &[&Tensor],
) -> Result<Var> {
    if frames.is_empty() {
        return invalid("empty frame batch");
    }
    let cfg = params.config();
    let mut data = Vec::with_capacity(frames.len() * cfg.tokens * cfg.d_in);
    for f in frames {
        check_frame_shape(cfg, f)?;
        data.extend_from_slice(f.data());
    }
    let x = Tensor::from_parts(vec![frames.len() * cfg.tokens, cfg.d_in], data);
    Ok(forward(tape, cfg, pv, x, frames.len(), 1, false))
}

fn finite_features(t: &Tensor) -> Result<Tensor> {
    if !t.is_finite() {
        return Err(LssError::NumericalFailure(
            "encoder produced non-finite activations".into(),
        ));
    }
    Ok(t.clone())
}

/// Clip features for a batch (no gradient), `B x d_out`.
pub fn encode_clips(params: &EncoderParams, clips: &[&Clip]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = ParamVars::record(&mut tape, params);
    let out = record_clips(&mut tape, params, &pv, clips)?;
    finite_features(tape.value(out))
}

pub fn encode_clip(params: &EncoderParams, clip: &Clip) -> Result<Vec<f64>> {
    Ok(encode_clips(params, &[clip])?.into_data())
}

/// Frame-level encoder: the same blocks with temporal attention skipped.
pub fn encode_frame(params: &EncoderParams, frame: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let pv = ParamVars::record(&mut tape, params);
    let out = record_frames(&mut tape, params, &pv, &[frame])?;
    Ok(finite_features(tape.value(out))?.into_data())
}

fn forward(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    pv: &ParamVars,
    x: Tensor,
    batch: usize,
    frames: usize,
    temporal: bool,
) -> Var {
    let s = cfg.tokens;
    let tok = s + 1;
    let n_frames = batch * frames;
    let rows = n_frames * tok;

    let xin = tape.leaf(x);
    let pe = tape.matmul(xin, pv.get("patch.w"));
    let pe = tape.add_row(pe, pv.get("patch.b"));

    // token row r = frame * tok + position; position 0 is the frame's CLS copy
    let mut tok_index = Vec::with_capacity(rows);
    let mut spatial_pos = Vec::with_capacity(rows);
    let mut temporal_pos = Vec::with_capacity(rows);
    for fr in 0..n_frames {
        for si in 0..tok {
            tok_index.push(if si == 0 {
                (1, 0)
            } else {
                (0, fr * s + si - 1)
            });
            spatial_pos.push((0, si));
            temporal_pos.push((0, fr % frames));
        }
    }
    let mut h = tape.gather_rows(&[pe, pv.get("cls")], Arc::new(tok_index));
    let sp = tape.gather_rows(&[pv.get("pos.spatial")], Arc::new(spatial_pos));
    h = tape.add(h, sp);
    if temporal {
        let tp = tape.gather_rows(&[pv.get("pos.temporal")], Arc::new(temporal_pos));
        h = tape.add(h, tp);
    }

    let spatial_groups: Groups = Arc::new(
        (0..n_frames)
            .map(|fr| (fr * tok..(fr + 1) * tok).collect())
            .collect(),
    );
    let temporal_groups: Groups = Arc::new(
        (0..batch)
            .flat_map(|b| {
                (0..tok).map(move |si| (0..frames).map(|t| (b * frames + t) * tok + si).collect())
            })
            .collect(),
    );

    for b in 0..cfg.blocks {
        if temporal {
            h = attention_sublayer(
                tape,
                cfg,
                pv,
                h,
                &format!("blocks.{b}.temporal"),
                &temporal_groups,
            );
        }
        h = attention_sublayer(
            tape,
            cfg,
            pv,
            h,
            &format!("blocks.{b}.spatial"),
            &spatial_groups,
        );
        let p = format!("blocks.{b}.mlp");
        let n = tape.layer_norm(
            h,
            pv.get(&format!("{p}.ln.g")),
            pv.get(&format!("{p}.ln.b")),
        );
        let m = tape.matmul(n, pv.get(&format!("{p}.w1")));
        let m = tape.add_row(m, pv.get(&format!("{p}.b1")));
        let m = tape.gelu(m);
        let m = tape.matmul(m, pv.get(&format!("{p}.w2")));
        let m = tape.add_row(m, pv.get(&format!("{p}.b2")));
        h = tape.add(h, m);
    }

    let cls_rows = Arc::new((0..n_frames).map(|fr| (0, fr * tok)).collect());
    let cls = tape.gather_rows(&[h], cls_rows);
    let cls = tape.layer_norm(cls, pv.get("final_ln.g"), pv.get("final_ln.b"));
    let per_clip: Groups = Arc::new(
        (0..batch)
            .map(|b| (b * frames..(b + 1) * frames).collect())
            .collect(),
    );
    let pooled = tape.group_mean(cls, per_clip);
    tape.matmul(pooled, pv.get("head.w"))
}

fn attention_sublayer(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    pv: &ParamVars,
    h: Var,
    prefix: &str,
    groups: &Groups,
) -> Var {
    let p = |s: &str| pv.get(&format!("{prefix}.{s}"));
    let n = tape.layer_norm(h, p("ln.g"), p("ln.b"));
    let q = tape.matmul(n, p("w_q"));
    let q = tape.add_row(q, p("b_q"));
    let k = tape.matmul(n, p("w_k"));
    let k = tape.add_row(k, p("b_k"));
    let v = tape.matmul(n, p("w_v"));
    let v = tape.add_row(v, p("b_v"));
    let a = tape.grouped_attention(q, k, v, cfg.heads, groups.clone());
    let o = tape.matmul(a, p("w_o"));
    let o = tape.add_row(o, p("b_o"));
    tape.add(h, o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, randn, Coordinates};

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            frames: 3,
            tokens: 2,
            d_in: 5,
            d_embed: 8,
            d_out: 4,
            blocks: 2,
            heads: 2,
            mlp_hidden: 12,
        }
    }

    fn random_clip(cfg: &EncoderConfig, rng: &mut Rng) -> Clip {
        Clip::new(randn(&[cfg.frames, cfg.tokens, cfg.d_in], rng)).unwrap()
    }

    /// Perturbs every parameter so the temporal path is active.
    fn activate(params: &EncoderParams, rng: &mut Rng) -> EncoderParams {
        let t = params
            .tensors()
            .iter()
            .map(|t| {
                let noise = randn(t.shape(), rng);
                let d = t
                    .data()
                    .iter()
                    .zip(noise.data())
                    .map(|(a, b)| a + 0.3 * b)
                    .collect();
                Tensor::new(t.shape().to_vec(), d).unwrap()
            })
            .collect();
        params.with_tensors(t).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_zero_initialized() {
        let cfg = EncoderConfig {
            frames: 8,
            tokens: 4,
            d_embed: 32,
            blocks: 2,
            ..EncoderConfig::default()
        };
        let a = init_encoder(&cfg, &mut Rng::new(7)).unwrap();
        let b = init_encoder(&cfg, &mut Rng::new(7)).unwrap();
        assert!(a.bit_equal(&b));
        assert!(a.temporal_projections_are_zero());
        assert_eq!(
            a.tensors().iter().map(|t| t.len()).sum::<usize>(),
            cfg.param_count()
        );
        for (n, t) in a.named() {
            if n.ends_with("temporal.w_o") || n.ends_with("temporal.b_o") {
                assert!(t.data().iter().all(|v| *v == 0.0), "{n}");
            }
        }
    }

    #[test]
    fn invalid_head_split() {
        let cfg = EncoderConfig {
            d_embed: 33,
            heads: 2,
            ..EncoderConfig::default()
        };
        assert!(matches!(
            init_encoder(&cfg, &mut Rng::new(0)),
            Err(LssError::InvalidArgument(_))
        ));
    }

    #[test]
    fn clip_equals_frame_average_at_init() {
        let cfg = small_cfg();
        let mut rng = Rng::new(3);
        let p = init_encoder(&cfg, &mut rng).unwrap();
        for _ in 0..5 {
            let clip = random_clip(&cfg, &mut rng);
            let f = encode_clip(&p, &clip).unwrap();
            let mut mean = vec![0.0; cfg.d_out];
            for t in 0..cfg.frames {
                for (m, v) in mean
                    .iter_mut()
                    .zip(encode_frame(&p, &clip.frame(t)).unwrap())
                {
                    *m += v / cfg.frames as f64;
                }
            }
            let err = f
                .iter()
                .zip(&mean)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-10, "{err}");
        }
    }

    #[test]
    fn identical_frames_and_permutations_at_init() {
        let cfg = small_cfg();
        let mut rng = Rng::new(4);
        let p = init_encoder(&cfg, &mut rng).unwrap();
        let frame = randn(&[cfg.tokens, cfg.d_in], &mut rng);
        let mut data = Vec::new();
        for _ in 0..cfg.frames {
            data.extend_from_slice(frame.data());
        }
        let clip =
            Clip::new(Tensor::new(vec![cfg.frames, cfg.tokens, cfg.d_in], data).unwrap()).unwrap();
        let a = encode_clip(&p, &clip).unwrap();
        let b = encode_frame(&p, &frame).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));

        let clip = random_clip(&cfg, &mut rng);
        let mut rev = Vec::new();
        for t in (0..cfg.frames).rev() {
            rev.extend_from_slice(clip.frame(t).data());
        }
        let rclip = Clip::new(Tensor::new(clip.features().shape().to_vec(), rev).unwrap()).unwrap();
        let x = encode_clip(&p, &clip).unwrap();
        let y = encode_clip(&p, &rclip).unwrap();
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn frames_of_zeros_and_ones_differ() {
        let cfg = small_cfg();
        let p = init_encoder(&cfg, &mut Rng::new(8)).unwrap();
        let z = encode_frame(&p, &Tensor::zeros(&[cfg.tokens, cfg.d_in])).unwrap();
        let o = encode_frame(&p, &Tensor::filled(&[cfg.tokens, cfg.d_in], 1.0)).unwrap();
        assert!(z.iter().zip(&o).any(|(a, b)| (a - b).abs() > 1e-6));
        let again = encode_frame(&p, &Tensor::zeros(&[cfg.tokens, cfg.d_in])).unwrap();
        assert_eq!(z, again);
    }

    #[test]
    fn trained_temporal_path_breaks_frame_equivalence() {
        let cfg = small_cfg();
        let mut rng = Rng::new(9);
        let p = activate(&init_encoder(&cfg, &mut rng).unwrap(), &mut rng);
        let clip = random_clip(&cfg, &mut rng);
        let f = encode_clip(&p, &clip).unwrap();
        let mut mean = vec![0.0; cfg.d_out];
        for t in 0..cfg.frames {
            for (m, v) in mean
                .iter_mut()
                .zip(encode_frame(&p, &clip.frame(t)).unwrap())
            {
                *m += v / cfg.frames as f64;
            }
        }
        assert!(f.iter().zip(&mean).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cfg = small_cfg();
        let p = init_encoder(&cfg, &mut Rng::new(1)).unwrap();
        let clip = Clip::new(Tensor::zeros(&[cfg.frames + 1, cfg.tokens, cfg.d_in])).unwrap();
        assert!(matches!(
            encode_clip(&p, &clip),
            Err(LssError::InvalidArgument(_))
        ));
        assert!(encode_frame(&p, &Tensor::zeros(&[cfg.tokens, cfg.d_in + 1])).is_err());
    }

    #[test]
    fn batched_encoding_matches_single() {
        let cfg = small_cfg();
        let mut rng = Rng::new(12);
        let p = activate(&init_encoder(&cfg, &mut rng).unwrap(), &mut rng);
        let clips: Vec<Clip> = (0..3).map(|_| random_clip(&cfg, &mut rng)).collect();
        let refs: Vec<&Clip> = clips.iter().collect();
        let batch = encode_clips(&p, &refs).unwrap();
        for (i, c) in clips.iter().enumerate() {
            let single = encode_clip(&p, c).unwrap();
            for (a, b) in batch.row(i).iter().zip(&single) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_of_feature_functional_matches_finite_differences() {
        let cfg = small_cfg();
        let mut rng = Rng::new(21);
        let p = activate(&init_encoder(&cfg, &mut rng).unwrap(), &mut rng);
        let clips: Vec<Clip> = (0..2).map(|_| random_clip(&cfg, &mut rng)).collect();
        let refs: Vec<&Clip> = clips.iter().collect();
        let w = randn(&[2, cfg.d_out], &mut rng);
        let value = |params: &EncoderParams| -> (Tape, ParamVars, Var) {
            let mut tape = Tape::new();
            let pv = ParamVars::record(&mut tape, params);
            let f = record_clips(&mut tape, params, &pv, &refs).unwrap();
            let s = tape.dot_const(f, w.clone());
            (tape, pv, s)
        };
        let (tape, pv, s) = value(&p);
        let mut g = tape.backward(s);
        let analytic: Vec<Tensor> = pv
            .vars()
            .iter()
            .zip(p.tensors())
            .map(|(v, t)| g.take_or_zeros(*v, t))
            .collect();
        let f = |t: &[Tensor]| {
            let q = p.with_tensors(t.to_vec())?;
            let (tape, _, s) = value(&q);
            Ok(tape.value(s).data()[0])
        };
        let r = grad_check(f, p.tensors(), &analytic, 1e-5, Coordinates::All).unwrap();
        assert!(r.max_rel_error < 1e-6, "{:?}", r);
    }
}
