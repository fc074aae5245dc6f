//! Zero-shot classification against a concept space and linear probing on
//! frozen features.

use std::fmt::Write as _;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::concept_space::ConceptSpace;
use crate::encoder::{encode_clips, Clip, EncoderParams};
use crate::error::{invalid, LssError, Result};
use crate::numerics::{argmax, l2_normalize, Rng, Tape, Tensor};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    ZeroShot,
    LinearProbe,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::ZeroShot => "zero_shot",
            Protocol::LinearProbe => "linear_probe",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub top1: f64,
    /// `(correct, total)` per class
    pub per_class: Vec<(usize, usize)>,
    pub num_samples: usize,
    pub config_hash: String,
    /// test classes that never occur in the probe's training split
    pub missing_classes: Vec<usize>,
}

impl EvalReport {
    fn build(
        protocol: Protocol,
        preds: &[usize],
        labels: &[usize],
        num_classes: usize,
        config_hash: String,
        missing: Vec<usize>,
    ) -> Result<Self> {
        let top1 = top1_accuracy(preds, labels)?;
        let mut per_class = vec![(0, 0); num_classes];
        for (p, l) in preds.iter().zip(labels) {
            if *l >= num_classes {
                return invalid(format!("label {l} outside {num_classes} classes"));
            }
            per_class[*l].1 += 1;
            if p == l {
                per_class[*l].0 += 1;
            }
        }
        Ok(EvalReport {
            protocol,
            top1,
            per_class,
            num_samples: labels.len(),
            config_hash,
            missing_classes: missing,
        })
    }

    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        self.per_class
            .iter()
            .map(|&(c, t)| {
                if t == 0 {
                    None
                } else {
                    Some(c as f64 / t as f64)
                }
            })
            .collect()
    }

    /// One row per class, then a summary row.
    pub fn to_csv(&self, labels: &[String]) -> String {
        let mut s = String::from("protocol,class,label,correct,total,accuracy\n");
        for (k, &(c, t)) in self.per_class.iter().enumerate() {
            let name = labels.get(k).map(String::as_str).unwrap_or("");
            let acc = if t == 0 {
                String::new()
            } else {
                format!("{}", c as f64 / t as f64)
            };
            let _ = writeln!(s, "{},{k},{name},{c},{t},{acc}", self.protocol.as_str());
        }
        let correct: usize = self.per_class.iter().map(|p| p.0).sum();
        let _ = writeln!(
            s,
            "{},all,,{correct},{},{}",
            self.protocol.as_str(),
            self.num_samples,
            self.top1
        );
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "protocol: {}", self.protocol.as_str());
        let _ = writeln!(s, "top1: {:.4}", self.top1);
        let _ = writeln!(s, "samples: {}", self.num_samples);
        let _ = writeln!(s, "classes: {}", self.per_class.len());
        if !self.missing_classes.is_empty() {
            let _ = writeln!(
                s,
                "classes absent from probe training: {:?}",
                self.missing_classes
            );
        }
        let _ = writeln!(s, "config: {}", self.config_hash);
        s
    }
}

pub fn top1_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        ));
    }
    if labels.is_empty() {
        return invalid("no samples to score");
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `n_crops` clips of `frames` frames with a common gap spread evenly over
/// the video. Deterministic.
pub fn temporal_crops(video: &Tensor, frames: usize, n_crops: usize) -> Result<Vec<Clip>> {
    if video.rank() != 3 {
        return invalid(format!(
            "video must be length x S x d_in, got {:?}",
            video.shape()
        ));
    }
    let (len, s, d) = (video.shape()[0], video.shape()[1], video.shape()[2]);
    if frames == 0 || n_crops == 0 {
        return invalid("crop count and frames must be positive");
    }
    if len < frames {
        return invalid(format!("video has {len} frames, a crop needs {frames}"));
    }
    let gap = (len / frames).max(1);
    let span = (frames - 1) * gap + 1;
    let max_start = len - span;
    let per = s * d;
    (0..n_crops)
        .map(|c| {
            let start = if n_crops == 1 {
                max_start / 2
            } else {
                (c * max_start + (n_crops - 1) / 2) / (n_crops - 1)
            };
            let mut data = Vec::with_capacity(frames * per);
            for i in 0..frames {
                let f = start + i * gap;
                data.extend_from_slice(&video.data()[f * per..(f + 1) * per]);
            }
            Clip::new(Tensor::new(vec![frames, s, d], data)?)
        })
        .collect()
}

/// Per-video features: encoder outputs averaged over temporal crops, not
/// normalized. Returns an `N x d_out` matrix.
pub fn extract_features(
    params: &EncoderParams,
    videos: &[&Tensor],
    n_crops: usize,
) -> Result<Tensor> {
    if videos.is_empty() {
        return invalid("no videos to encode");
    }
    let cfg = params.config();
    let mut out = Vec::with_capacity(videos.len() * cfg.d_out);
    for chunk in videos.chunks(32) {
        let mut clips = Vec::with_capacity(chunk.len() * n_crops);
        for v in chunk {
            clips.extend(temporal_crops(v, cfg.frames, n_crops)?);
        }
        let refs: Vec<&Clip> = clips.iter().collect();
        let f = encode_clips(params, &refs)?;
        for i in 0..chunk.len() {
            let mut acc = vec![0.0; cfg.d_out];
            for c in 0..n_crops {
                for (a, v) in acc.iter_mut().zip(f.row(i * n_crops + c)) {
                    *a += v;
                }
            }
            out.extend(acc.into_iter().map(|v| v / n_crops as f64));
        }
    }
    Tensor::matrix(videos.len(), cfg.d_out, out)
}

/// Argmax of the concept scores of each feature row; lowest index on ties.
pub fn zero_shot_predict(features: &Tensor, space: &ConceptSpace) -> Result<Vec<usize>> {
    let scores = space.project_rows(features)?;
    Ok((0..scores.rows()).map(|i| argmax(scores.row(i))).collect())
}

fn short_hash(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize()[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Zero-shot top-1 of `videos` against `space`, with `n_crops` crops.
pub fn zero_shot_classify(
    params: &EncoderParams,
    videos: &[&Tensor],
    labels: &[usize],
    space: &ConceptSpace,
    n_crops: usize,
) -> Result<(Vec<usize>, EvalReport)> {
    if videos.is_empty() {
        return invalid("empty clip set");
    }
    let f = extract_features(params, videos, n_crops)?;
    let preds = zero_shot_predict(&f, space)?;
    let hash = short_hash(&[
        &params.content_hash(),
        &space.content_hash(),
        &(n_crops as u64).to_le_bytes(),
    ]);
    let report = EvalReport::build(
        Protocol::ZeroShot,
        &preds,
        labels,
        space.len(),
        hash,
        vec![],
    )?;
    Ok((preds, report))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// 0 picks `clamp(n_train / 100, 8, 128)`
    pub batch_size: usize,
    pub weight_decay: f64,
    pub n_crops: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 15,
            lr: 1e-3,
            batch_size: 0,
            weight_decay: 0.0,
            n_crops: 3,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn effective_batch(&self, n_train: usize) -> usize {
        if self.batch_size > 0 {
            self.batch_size
        } else {
            (n_train / 100).clamp(8, 128)
        }
    }
}

fn normalized_rows(f: &Tensor) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(f.rows());
    for i in 0..f.rows() {
        rows.push(l2_normalize(f.row(i))?);
    }
    Tensor::from_rows(&rows)
}

/// Linear softmax classifier with bias, trained on fixed feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearClassifier {
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let mut logits = x.matmul(&self.weight)?;
        let k = self.bias.len();
        for i in 0..logits.rows() {
            for (l, b) in logits.row_mut(i).iter_mut().zip(self.bias.data()) {
                *l += b;
            }
        }
        debug_assert_eq!(logits.cols(), k);
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }
}

/// Trains a classifier on `x` (`N x d`) with labels in `0..num_classes`.
pub fn train_linear_classifier(
    x: &Tensor,
    labels: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<LinearClassifier> {
    if x.rows() != labels.len() || labels.is_empty() {
        return invalid("probe features and labels differ in length or are empty");
    }
    let d = x.cols();
    let bound = 1.0 / (d as f64).sqrt();
    let mut rng = Rng::derived(cfg.seed, &[20]);
    let mut w = Tensor::new(
        vec![d, num_classes],
        (0..d * num_classes)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect(),
    )?;
    let mut b = Tensor::zeros(&[num_classes]);
    let mut opt = AdamW::for_shapes(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &[w.clone(), b.clone()],
    );
    let batch = cfg.effective_batch(labels.len());
    let per_epoch = labels.len().div_ceil(batch) as u64;
    let total = per_epoch * cfg.epochs as u64;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..labels.len()).collect();
        Rng::derived(cfg.seed, &[21, epoch as u64]).shuffle(&mut order);
        for idx in order.chunks(batch) {
            let mut tape = Tape::new();
            let rows = Arc::new(idx.iter().map(|&i| (0, i)).collect());
            let xl = tape.leaf(x.clone());
            let xb = tape.gather_rows(&[xl], rows);
            let wv = tape.leaf(w.clone());
            let bv = tape.leaf(b.clone());
            let logits = tape.matmul(xb, wv);
            let logits = tape.add_row(logits, bv);
            let lp = tape.log_softmax_rows(logits, 1.0);
            let mut onehot = Tensor::zeros(&[idx.len(), num_classes]);
            for (r, &i) in idx.iter().enumerate() {
                onehot.row_mut(r)[labels[i]] = -1.0 / idx.len() as f64;
            }
            let loss = tape.dot_const(lp, onehot);
            let mut g = tape.backward(loss);
            let grads = [g.take_or_zeros(wv, &w), g.take_or_zeros(bv, &b)];
            let lr = cosine_lr(cfg.lr, step, total);
            opt.update_slots(
                vec![(w.data_mut(), true), (b.data_mut(), false)],
                &grads,
                lr,
            )?;
            step += 1;
        }
    }
    if !w.is_finite() || !b.is_finite() {
        return Err(LssError::NumericalFailure("linear probe diverged".into()));
    }
    Ok(LinearClassifier { weight: w, bias: b })
}

/// Linear probe on frozen features. Features are extracted once, L2
/// normalized, and a classifier is trained on the train split. Test
/// samples of classes absent from training are counted wrong.
pub fn linear_probe(
    params: &EncoderParams,
    train: (&[&Tensor], &[usize]),
    test: (&[&Tensor], &[usize]),
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<EvalReport> {
    let before = params.content_hash();
    let xtr = normalized_rows(&extract_features(params, train.0, cfg.n_crops)?)?;
    let xte = normalized_rows(&extract_features(params, test.0, cfg.n_crops)?)?;
    let report = probe_on_features(&xtr, train.1, &xte, test.1, num_classes, cfg, &before)?;
    if params.content_hash() != before {
        return Err(LssError::NumericalFailure(
            "encoder changed during probing".into(),
        ));
    }
    Ok(report)
}

/// Probe on precomputed feature rows.
pub fn probe_on_features(
    xtr: &Tensor,
    ytr: &[usize],
    xte: &Tensor,
    yte: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
    encoder_hash: &[u8],
) -> Result<EvalReport> {
    if yte.is_empty() {
        return invalid("empty test split");
    }
    if let Some(bad) = ytr.iter().chain(yte).find(|l| **l >= num_classes) {
        return invalid(format!("label {bad} outside {num_classes} classes"));
    }
    let clf = train_linear_classifier(xtr, ytr, num_classes, cfg)?;
    let mut seen = vec![false; num_classes];
    for &l in ytr {
        seen[l] = true;
    }
    let mut missing: Vec<usize> = yte.iter().filter(|l| !seen[**l]).cloned().collect();
    missing.sort_unstable();
    missing.dedup();
    let mut preds = clf.predict(xte)?;
    for (p, l) in preds.iter_mut().zip(yte) {
        if !seen[*l] {
            // never credit a class the probe could not have learned
            *p = usize::MAX;
        }
    }
    let hash = short_hash(&[
        encoder_hash,
        &(cfg.epochs as u64).to_le_bytes(),
        &cfg.lr.to_le_bytes(),
        &(cfg.effective_batch(ytr.len()) as u64).to_le_bytes(),
        &cfg.seed.to_le_bytes(),
    ]);
    EvalReport::build(
        Protocol::LinearProbe,
        &preds,
        yte,
        num_classes,
        hash,
        missing,
    )
}
