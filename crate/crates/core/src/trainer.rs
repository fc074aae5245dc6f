//! Teacher-student self-distillation: view sampling, the student update,
//! the EMA teacher, moving-average prior state, metrics and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::binio::{Reader, Writer};
use crate::concept_space::ConceptSpace;
use crate::encoder::{encode_clips, record_clips, Clip, EncoderConfig, EncoderParams, ParamVars};
use crate::error::{invalid, LssError, Result};
use crate::numerics::{Rng, Tape, Tensor};
use crate::objectives::{
    record_batch_loss, record_projection, BatchScores, LossBreakdown, MovingAverageState,
    ObjectiveConfig,
};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};

/// How the EMA rate is read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmaConvention {
    /// `teacher <- (1 - rho) teacher + rho student`
    PullRate,
    /// `teacher <- rho teacher + (1 - rho) student`
    Momentum,
}

impl EmaConvention {
    pub fn as_str(self) -> &'static str {
        match self {
            EmaConvention::PullRate => "pull-rate",
            EmaConvention::Momentum => "momentum",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pull-rate" => Some(EmaConvention::PullRate),
            "momentum" => Some(EmaConvention::Momentum),
            _ => None,
        }
    }
}

/// Feature-space augmentation of the two views.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewConfig {
    /// standard deviation of additive gaussian jitter
    pub aug_noise: f64,
    /// per-dimension scaling drawn from [0.9, 1.1]
    pub scale_jitter: bool,
    /// both views use the same frame indices
    pub force_equal_intervals: bool,
}

impl Default for ViewConfig {
    fn default() -> Self {
        ViewConfig {
            aug_noise: 0.05,
            scale_jitter: true,
            force_equal_intervals: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub weight_decay: f64,
    pub ema_rho: f64,
    pub ema_convention: EmaConvention,
    pub seed: u64,
    /// steps between checkpoints; 0 disables periodic checkpoints
    pub checkpoint_interval: u64,
    /// also train with the views swapped and average the two losses
    pub symmetric: bool,
    /// stop after this many steps in total; 0 means no cap
    pub max_steps: u64,
    pub objective: ObjectiveConfig,
    pub views: ViewConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 32,
            lr_init: 3e-4,
            weight_decay: 0.02,
            ema_rho: 0.02,
            ema_convention: EmaConvention::PullRate,
            seed: 0,
            checkpoint_interval: 0,
            symmetric: false,
            max_steps: 0,
            objective: ObjectiveConfig::default(),
            views: ViewConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return invalid("batch_size must be positive");
        }
        if !(self.lr_init >= 0.0 && self.lr_init.is_finite()) {
            return invalid(format!(
                "lr_init must be non-negative, got {}",
                self.lr_init
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return invalid(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if !(self.ema_rho > 0.0 && self.ema_rho <= 1.0) {
            return invalid(format!("ema_rho must lie in (0, 1], got {}", self.ema_rho));
        }
        if !(self.views.aug_noise >= 0.0 && self.views.aug_noise.is_finite()) {
            return invalid("aug_noise must be non-negative");
        }
        self.objective.validate()
    }

    pub fn steps_per_epoch(&self, n_videos: usize) -> u64 {
        n_videos.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self, n_videos: usize) -> u64 {
        let full = self.epochs as u64 * self.steps_per_epoch(n_videos);
        if self.max_steps > 0 {
            full.min(self.max_steps)
        } else {
            full
        }
    }

    /// Effective per-step pull toward the student.
    pub fn pull_rate(&self) -> f64 {
        match self.ema_convention {
            EmaConvention::PullRate => self.ema_rho,
            EmaConvention::Momentum => 1.0 - self.ema_rho,
        }
    }
}

/// The frozen category space and optional description space.
#[derive(Clone, Debug)]
pub struct ConceptSpaces {
    pub category: ConceptSpace,
    pub description: Option<ConceptSpace>,
}

impl ConceptSpaces {
    pub fn content_hash(&self) -> Vec<u8> {
        let mut h = self.category.content_hash().to_vec();
        if let Some(d) = &self.description {
            h.extend_from_slice(&d.content_hash());
        }
        h
    }

    fn check(&self, cfg: &ObjectiveConfig, d_out: usize) -> Result<()> {
        if self.category.dim() != d_out {
            return invalid(format!(
                "category space has dimension {}, encoder outputs {}",
                self.category.dim(),
                d_out
            ));
        }
        if cfg.use_description_space {
            let d = self
                .description
                .as_ref()
                .ok_or_else(|| LssError::InvalidArgument("description space required".into()))?;
            if d.dim() != d_out {
                return invalid("description space dimension does not match the encoder");
            }
            if cfg.use_alignment && d.len() != self.category.len() {
                return invalid(format!(
                    "alignment needs equal space sizes, got {} and {}",
                    self.category.len(),
                    d.len()
                ));
            }
        }
        Ok(())
    }
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub const METRICS_HEADER: &str =
    "step,epoch,lr,L_total,L_CD_C,L_UP_C,L_CD_D,L_UP_D,L_CA,w_s_mean,H_MA_C,H_MA_D,H_teacher_C";

impl MetricsRow {
    fn values(&self) -> [f64; 13] {
        let l = &self.loss;
        [
            self.step as f64,
            self.epoch as f64,
            self.lr,
            l.total,
            l.cd_c,
            l.up_c,
            l.cd_d,
            l.up_d,
            l.ca,
            l.ws_mean,
            l.h_ma_c,
            l.h_ma_d,
            l.h_teacher_c,
        ]
    }

    fn from_values(v: &[f64]) -> Self {
        MetricsRow {
            step: v[0] as u64,
            epoch: v[1] as u64,
            lr: v[2],
            loss: LossBreakdown {
                total: v[3],
                cd_c: v[4],
                up_c: v[5],
                cd_d: v[6],
                up_d: v[7],
                ca: v[8],
                ws_mean: v[9],
                h_ma_c: v[10],
                h_ma_d: v[11],
                h_teacher_c: v[12],
            },
        }
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let v = r.values();
        let _ = write!(s, "{},{}", r.step, r.epoch);
        for x in &v[2..] {
            let _ = write!(s, ",{x}");
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub student: EncoderParams,
    pub teacher: EncoderParams,
    pub opt: AdamW,
    pub ma: MovingAverageState,
    pub rng: Rng,
    pub step: u64,
    pub metrics: Vec<MetricsRow>,
}

impl TrainerState {
    /// Teacher and student both start from `init`.
    pub fn new(init: EncoderParams, spaces: &ConceptSpaces, cfg: &TrainConfig) -> Self {
        let n_c = spaces.category.len();
        let n_d = spaces.description.as_ref().map_or(n_c, |d| d.len());
        TrainerState {
            teacher: init.clone(),
            opt: AdamW::new(
                AdamWConfig {
                    weight_decay: cfg.weight_decay,
                    ..AdamWConfig::default()
                },
                &init,
            ),
            student: init,
            ma: MovingAverageState::uniform(n_c, n_d),
            rng: Rng::derived(cfg.seed, &[3]),
            step: 0,
            metrics: Vec::new(),
        }
    }
}

fn augment(
    frames: &[f64],
    tokens: usize,
    d_in: usize,
    cfg: &ViewConfig,
    rng: &mut Rng,
) -> Vec<f64> {
    let scales: Vec<f64> = if cfg.scale_jitter {
        (0..d_in).map(|_| rng.uniform_range(0.9, 1.1)).collect()
    } else {
        vec![1.0; d_in]
    };
    let _ = tokens;
    frames
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let y = x * scales[i % d_in];
            if cfg.aug_noise > 0.0 {
                y + cfg.aug_noise * rng.normal()
            } else {
                y
            }
        })
        .collect()
}

/// Frame indices of one view: `frames` indices with a common gap inside a
/// random interval of a video of `length` frames.
pub fn sample_interval(length: usize, frames: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if frames == 0 {
        return invalid("a view needs at least one frame");
    }
    if length < frames {
        return invalid(format!("video has {length} frames, a view needs {frames}"));
    }
    let max_gap = if frames == 1 {
        1
    } else {
        (length - 1) / (frames - 1)
    };
    let gap = 1 + rng.below(max_gap);
    let span = (frames - 1) * gap + 1;
    let start = rng.below(length - span + 1);
    Ok((0..frames).map(|i| start + i * gap).collect())
}

fn gather_frames(video: &Tensor, idx: &[usize]) -> Vec<f64> {
    let per = video.shape()[1] * video.shape()[2];
    let mut out = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        out.extend_from_slice(&video.data()[i * per..(i + 1) * per]);
    }
    out
}

/// Two augmented views of a `length x S x d_in` video.
pub fn sample_views(
    video: &Tensor,
    frames: usize,
    cfg: &ViewConfig,
    rng: &mut Rng,
) -> Result<(Clip, Clip)> {
    if video.rank() != 3 {
        return invalid(format!(
            "video must be length x S x d_in, got {:?}",
            video.shape()
        ));
    }
    let (len, s, d_in) = (video.shape()[0], video.shape()[1], video.shape()[2]);
    let i1 = sample_interval(len, frames, rng)?;
    let i2 = if cfg.force_equal_intervals {
        i1.clone()
    } else {
        sample_interval(len, frames, rng)?
    };
    let mut make = |idx: &[usize]| -> Result<Clip> {
        let raw = gather_frames(video, idx);
        let data = augment(&raw, s, d_in, cfg, rng);
        Clip::new(Tensor::new(vec![frames, s, d_in], data)?)
    };
    let a = make(&i1)?;
    let b = make(&i2)?;
    Ok((a, b))
}

/// `teacher <- (1 - rho) teacher + rho student` for every tensor.
pub fn ema_update(
    teacher: &EncoderParams,
    student: &EncoderParams,
    rho: f64,
) -> Result<EncoderParams> {
    if !(rho > 0.0 && rho <= 1.0) {
        return invalid(format!("EMA rate must lie in (0, 1], got {rho}"));
    }
    if teacher.names() != student.names()
        || teacher
            .tensors()
            .iter()
            .zip(student.tensors())
            .any(|(a, b)| a.shape() != b.shape())
    {
        return invalid("teacher and student parameters do not match");
    }
    let tensors = teacher
        .tensors()
        .iter()
        .zip(student.tensors())
        .map(|(t, s)| {
            let d = t
                .data()
                .iter()
                .zip(s.data())
                .map(|(a, b)| if rho == 1.0 { *b } else { a + rho * (b - a) })
                .collect();
            Tensor::new(t.shape().to_vec(), d)
        })
        .collect::<Result<Vec<_>>>()?;
    teacher.with_tensors(tensors)
}

/// Constant teacher scores of a batch of views in both spaces.
pub fn teacher_scores(
    teacher: &EncoderParams,
    views: &[&Clip],
    spaces: &ConceptSpaces,
    cfg: &ObjectiveConfig,
) -> Result<BatchScores> {
    let f = encode_clips(teacher, views)?;
    Ok(BatchScores {
        category: spaces.category.project_rows(&f)?,
        description: match (&spaces.description, cfg.use_description_space) {
            (Some(d), true) => Some(d.project_rows(&f)?),
            _ => None,
        },
    })
}

/// Student loss for fixed teacher scores. Returns the breakdown, the
/// gradient for every student tensor and the advanced prior state.
pub fn student_loss(
    student: &EncoderParams,
    teacher: &BatchScores,
    views: &[&Clip],
    spaces: &ConceptSpaces,
    ma: &MovingAverageState,
    cfg: &ObjectiveConfig,
) -> Result<(LossBreakdown, Vec<Tensor>, MovingAverageState)> {
    let mut tape = Tape::new();
    let pv = ParamVars::record(&mut tape, student);
    let feat = record_clips(&mut tape, student, &pv, views)?;
    let sc = record_projection(&mut tape, feat, &spaces.category);
    let sd = match (&spaces.description, cfg.use_description_space) {
        (Some(d), true) => Some(record_projection(&mut tape, feat, d)),
        _ => None,
    };
    let (total, br, next) = record_batch_loss(&mut tape, teacher, sc, sd, ma, cfg)?;
    let mut g = tape.backward(total);
    let grads = pv
        .vars()
        .iter()
        .zip(student.tensors())
        .map(|(v, t)| g.take_or_zeros(*v, t))
        .collect();
    Ok((br, grads, next))
}

fn average(a: LossBreakdown, b: LossBreakdown) -> LossBreakdown {
    let m = |x: f64, y: f64| 0.5 * (x + y);
    LossBreakdown {
        total: m(a.total, b.total),
        cd_c: m(a.cd_c, b.cd_c),
        up_c: m(a.up_c, b.up_c),
        cd_d: m(a.cd_d, b.cd_d),
        up_d: m(a.up_d, b.up_d),
        ca: m(a.ca, b.ca),
        ws_mean: m(a.ws_mean, b.ws_mean),
        h_ma_c: b.h_ma_c,
        h_ma_d: b.h_ma_d,
        h_teacher_c: m(a.h_teacher_c, b.h_teacher_c),
    }
}

/// One optimization step on a batch of label-free videos. On error the
/// state is left exactly as it was.
pub fn train_step(
    state: &mut TrainerState,
    videos: &[&Tensor],
    spaces: &ConceptSpaces,
    cfg: &TrainConfig,
    lr: f64,
    epoch: u64,
) -> Result<LossBreakdown> {
    if videos.is_empty() {
        return invalid("empty training batch");
    }
    let obj = &cfg.objective;
    let enc = *state.student.config();
    spaces.check(obj, enc.d_out)?;
    let mut rng = state.rng.clone();
    let mut v1 = Vec::with_capacity(videos.len());
    let mut v2 = Vec::with_capacity(videos.len());
    for v in videos {
        let (a, b) = sample_views(v, enc.frames, &cfg.views, &mut rng)?;
        v1.push(a);
        v2.push(b);
    }
    let r1: Vec<&Clip> = v1.iter().collect();
    let r2: Vec<&Clip> = v2.iter().collect();

    let t1 = teacher_scores(&state.teacher, &r1, spaces, obj)?;
    let (mut br, mut grads, mut ma) =
        student_loss(&state.student, &t1, &r2, spaces, &state.ma, obj)?;
    if cfg.symmetric {
        let t2 = teacher_scores(&state.teacher, &r2, spaces, obj)?;
        let (br2, g2, ma2) = student_loss(&state.student, &t2, &r1, spaces, &ma, obj)?;
        for (a, b) in grads.iter_mut().zip(&g2) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = 0.5 * (*x + y);
            }
        }
        br = average(br, br2);
        ma = ma2;
    }
    if !br.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(LssError::NumericalFailure(format!(
            "non-finite loss or gradient at step {}",
            state.step
        )));
    }

    let mut student = state.student.clone();
    let mut opt = state.opt.clone();
    opt.update(&mut student, &grads, lr)?;
    if student.tensors().iter().any(|t| !t.is_finite()) {
        return Err(LssError::NumericalFailure(format!(
            "non-finite parameters after step {}",
            state.step
        )));
    }
    let teacher = ema_update(&state.teacher, &student, cfg.pull_rate())?;

    state.student = student;
    state.teacher = teacher;
    state.opt = opt;
    state.ma = ma;
    state.rng = rng;
    state.metrics.push(MetricsRow {
        step: state.step,
        epoch,
        lr,
        loss: br,
    });
    state.step += 1;
    Ok(br)
}

/// Where a run writes its metrics log and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub metrics: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

/// Trains until the configured step budget, resuming from `state.step`.
/// Each epoch visits the videos in a seeded permutation; only frame tensors
/// are passed in, so labels cannot reach the losses.
pub fn run_training(
    state: TrainerState,
    videos: &[&Tensor],
    spaces: &ConceptSpaces,
    cfg: &TrainConfig,
    out: &RunOutput,
) -> Result<TrainerState> {
    run_training_until(state, videos, spaces, cfg, out, u64::MAX)
}

/// As [`run_training`], but returns once `stop_at` steps are done. The
/// schedule still spans the full run, so a later call resumes exactly.
pub fn run_training_until(
    mut state: TrainerState,
    videos: &[&Tensor],
    spaces: &ConceptSpaces,
    cfg: &TrainConfig,
    out: &RunOutput,
    stop_at: u64,
) -> Result<TrainerState> {
    cfg.validate()?;
    if videos.is_empty() {
        return invalid("no training videos");
    }
    let per_epoch = cfg.steps_per_epoch(videos.len());
    let total = cfg.total_steps(videos.len());
    let mut order: Option<(u64, Vec<usize>)> = None;
    while state.step < total.min(stop_at) {
        let epoch = state.step / per_epoch;
        let b = (state.step % per_epoch) as usize;
        if order.as_ref().map(|o| o.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..videos.len()).collect();
            Rng::derived(cfg.seed, &[2, epoch]).shuffle(&mut perm);
            order = Some((epoch, perm));
        }
        let perm = &order.as_ref().unwrap().1;
        let lo = b * cfg.batch_size;
        let hi = (lo + cfg.batch_size).min(videos.len());
        let batch: Vec<&Tensor> = perm[lo..hi].iter().map(|&i| videos[i]).collect();
        let lr = cosine_lr(cfg.lr_init, state.step, total);
        train_step(&mut state, &batch, spaces, cfg, lr, epoch)?;

        if cfg.checkpoint_interval > 0 && state.step.is_multiple_of(cfg.checkpoint_interval) {
            if let Some(dir) = &out.checkpoint_dir {
                let path = dir.join(format!("ckpt_{:06}.bin", state.step));
                if let Err(e) = save_checkpoint(&state, &path) {
                    write_metrics_with_warning(
                        &state,
                        out,
                        &format!(
                        "checkpoint write to {} failed at step {}: {e}; metrics above are partial",
                        path.display(),
                        state.step
                    ),
                    );
                    return Err(e);
                }
            }
            if let Some(p) = &out.metrics {
                fs::write(p, metrics_csv(&state.metrics))?;
            }
        }
    }
    if let Some(p) = &out.metrics {
        fs::write(p, metrics_csv(&state.metrics))?;
    }
    Ok(state)
}

fn write_metrics_with_warning(state: &TrainerState, out: &RunOutput, warning: &str) {
    if let Some(p) = &out.metrics {
        let mut s = metrics_csv(&state.metrics);
        let _ = writeln!(s, "# warning: {warning}");
        let _ = fs::write(p, s);
    }
}

const CKPT_MAGIC: &[u8; 8] = b"LSSCKPT1";

fn put(w: &mut Writer, name: &str, t: &Tensor) {
    w.u32(name.len() as u32);
    w.bytes(name.as_bytes());
    w.u32(t.rank() as u32);
    for d in t.shape() {
        w.u32(*d as u32);
    }
    w.f64s(t.data());
}

fn encoder_config_tensor(c: &EncoderConfig) -> Tensor {
    Tensor::vector(
        [
            c.frames,
            c.tokens,
            c.d_in,
            c.d_embed,
            c.d_out,
            c.blocks,
            c.heads,
            c.mlp_hidden,
        ]
        .iter()
        .map(|v| *v as f64)
        .collect(),
    )
}

/// Serializes the whole trainer state as a named-tensor table.
pub fn checkpoint_bytes(state: &TrainerState) -> Vec<u8> {
    let mut entries: Vec<(String, Tensor)> = Vec::new();
    entries.push((
        "encoder.config".into(),
        encoder_config_tensor(state.student.config()),
    ));
    for (n, t) in state.student.named() {
        entries.push((format!("student.{n}"), t.clone()));
    }
    for (n, t) in state.teacher.named() {
        entries.push((format!("teacher.{n}"), t.clone()));
    }
    for (i, n) in state.student.names().iter().enumerate() {
        entries.push((format!("adam.m.{n}"), state.opt.m[i].clone()));
        entries.push((format!("adam.v.{n}"), state.opt.v[i].clone()));
    }
    let c = state.opt.cfg;
    entries.push((
        "adam.hyper".into(),
        Tensor::vector(vec![c.beta1, c.beta2, c.eps, c.weight_decay]),
    ));
    entries.push((
        "adam.step".into(),
        Tensor::vector(vec![state.opt.step as f64]),
    ));
    entries.push((
        "ma.category".into(),
        Tensor::vector(state.ma.category.clone()),
    ));
    entries.push((
        "ma.description".into(),
        Tensor::vector(state.ma.description.clone()),
    ));
    entries.push((
        "rng.words".into(),
        Tensor::vector(state.rng.to_words().iter().map(|w| *w as f64).collect()),
    ));
    entries.push(("step".into(), Tensor::vector(vec![state.step as f64])));
    let rows = state.metrics.len();
    let mut flat = Vec::with_capacity(rows * 13);
    for r in &state.metrics {
        flat.extend(r.values());
    }
    entries.push(("metrics".into(), Tensor::from_parts(vec![rows, 13], flat)));

    let mut w = Writer::new(CKPT_MAGIC);
    w.u32(entries.len() as u32);
    for (n, t) in &entries {
        put(&mut w, n, t);
    }
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    w.buf
}

pub fn save_checkpoint(state: &TrainerState, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(state))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainerState> {
    checkpoint_from_bytes(&fs::read(path)?)
}

pub fn checkpoint_from_bytes(data: &[u8]) -> Result<TrainerState> {
    let mut r = Reader::new(data, CKPT_MAGIC, "checkpoint")?;
    let count = r.u32()? as usize;
    let mut entries: Vec<(String, Tensor)> = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| LssError::Format("checkpoint entry name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape.iter().product();
        let values = r.f64s(n)?;
        entries.push((name, Tensor::from_parts(shape, values)));
    }
    let body_end = r.position();
    let crc = r.u32()?;
    if r.remaining() != 0 {
        return Err(LssError::Format(
            "trailing bytes after checkpoint checksum".into(),
        ));
    }
    if crc32fast::hash(&data[..body_end]) != crc {
        return Err(LssError::Format("checkpoint checksum mismatch".into()));
    }

    let mut take = |name: &str| -> Result<Tensor> {
        let i = entries
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| LssError::Format(format!("checkpoint lacks entry '{name}'")))?;
        Ok(entries.remove(i).1)
    };
    let cfg_t = take("encoder.config")?;
    let c: Vec<usize> = cfg_t.data().iter().map(|v| *v as usize).collect();
    if c.len() != 8 {
        return Err(LssError::Format("malformed encoder config entry".into()));
    }
    let enc = EncoderConfig {
        frames: c[0],
        tokens: c[1],
        d_in: c[2],
        d_embed: c[3],
        d_out: c[4],
        blocks: c[5],
        heads: c[6],
        mlp_hidden: c[7],
    };
    enc.validate()
        .map_err(|e| LssError::Format(format!("bad encoder config: {e}")))?;
    let names: Vec<String> = enc.layout().into_iter().map(|(n, _)| n).collect();
    let mut load_params = |prefix: &str| -> Result<EncoderParams> {
        let named = names
            .iter()
            .map(|n| Ok((n.clone(), take(&format!("{prefix}.{n}"))?)))
            .collect::<Result<Vec<_>>>()?;
        EncoderParams::from_named(enc, named)
    };
    let student = load_params("student")?;
    let teacher = load_params("teacher")?;
    let mut m = Vec::with_capacity(names.len());
    let mut v = Vec::with_capacity(names.len());
    for n in &names {
        m.push(take(&format!("adam.m.{n}"))?);
        v.push(take(&format!("adam.v.{n}"))?);
    }
    let hyper = take("adam.hyper")?;
    let h = hyper.data();
    if h.len() != 4 {
        return Err(LssError::Format(
            "malformed optimizer hyper-parameters".into(),
        ));
    }
    let scalar = |t: Tensor, what: &str| -> Result<u64> {
        match t.data() {
            [x] if *x >= 0.0 => Ok(*x as u64),
            _ => Err(LssError::Format(format!("malformed '{what}' entry"))),
        }
    };
    let opt = AdamW {
        cfg: AdamWConfig {
            beta1: h[0],
            beta2: h[1],
            eps: h[2],
            weight_decay: h[3],
        },
        m,
        v,
        step: scalar(take("adam.step")?, "adam.step")?,
    };
    let ma = MovingAverageState {
        category: take("ma.category")?.into_data(),
        description: take("ma.description")?.into_data(),
    };
    let words: Vec<u32> = take("rng.words")?
        .data()
        .iter()
        .map(|w| *w as u32)
        .collect();
    let rng = Rng::from_words(&words)?;
    let step = scalar(take("step")?, "step")?;
    let mt = take("metrics")?;
    if mt.rank() != 2 || mt.shape()[1] != 13 {
        return Err(LssError::Format("malformed metrics table".into()));
    }
    let metrics = (0..mt.rows())
        .map(|i| MetricsRow::from_values(mt.row(i)))
        .collect();
    Ok(TrainerState {
        student,
        teacher,
        opt,
        ma,
        rng,
        step,
        metrics,
    })
}
