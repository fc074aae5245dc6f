//! Synthetic stand-in for a pretrained vision-language universe.
//!
//! Class prototypes live on the unit sphere of a shared embedding space and
//! act both as label embeddings and as generative centers of video frames.
//! A frame latent is the class prototype plus per-frame noise, a random-walk
//! drift and a fixed video-domain offset; a fixed full-rank linear map turns
//! the latent into `S` patch feature vectors.

use std::fs;
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::concept_space::{description_label, EmbeddingSet, SourceTag};
use crate::error::{invalid, LssError, Result};
use crate::numerics::{cosine, dot, l2_normalize, Rng, Tensor};

/// Largest allowed cosine between two class prototypes.
pub const PROTOTYPE_SEPARATION: f64 = 0.5;
const PLACEMENT_RETRIES: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldConfig {
    pub num_classes: usize,
    /// shared embedding dimension
    pub d: usize,
    /// patch feature dimension
    pub d_in: usize,
    pub descriptions_per_class: usize,
    /// frames per generated video
    pub frames_per_video: usize,
    /// patches per frame
    pub tokens: usize,
    pub intra_class_noise: f64,
    pub description_noise: f64,
    pub temporal_drift: f64,
    /// norm of the offset shared by every video frame (absent from images)
    pub domain_shift: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            num_classes: 20,
            d: 16,
            d_in: 24,
            descriptions_per_class: 4,
            frames_per_video: 32,
            tokens: 4,
            intra_class_noise: 0.4,
            description_noise: 0.2,
            temporal_drift: 0.3,
            domain_shift: 2.2,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_classes", self.num_classes),
            ("d", self.d),
            ("d_in", self.d_in),
            ("descriptions_per_class", self.descriptions_per_class),
            ("frames_per_video", self.frames_per_video),
            ("tokens", self.tokens),
        ] {
            if v == 0 {
                return invalid(format!("world {name} must be at least 1"));
            }
        }
        for (name, v) in [
            ("intra_class_noise", self.intra_class_noise),
            ("description_noise", self.description_noise),
            ("temporal_drift", self.temporal_drift),
            ("domain_shift", self.domain_shift),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return invalid(format!("world {name} must be non-negative, got {v}"));
            }
        }
        if self.tokens * self.d_in < self.d {
            return invalid(format!(
                "patch space ({} x {}) is too small to embed dimension {} without loss",
                self.tokens, self.d_in, self.d
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthWorld {
    cfg: WorldConfig,
    prototypes: Tensor,
    descriptions: Vec<Tensor>,
    /// `d x (S * d_in)`: latent row vector times this gives the frame tokens
    mixing: Tensor,
    shift: Vec<f64>,
}

fn random_unit(d: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

pub fn generate_world(cfg: &WorldConfig) -> Result<SynthWorld> {
    cfg.validate()?;
    let mut rng = Rng::derived(cfg.seed, &[0]);
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_classes);
    for k in 0..cfg.num_classes {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let c = random_unit(cfg.d, &mut rng);
            if protos.iter().all(|p| dot(p, &c) < PROTOTYPE_SEPARATION) {
                protos.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(LssError::GenerationFailure(format!(
                "could not place prototype {} of {} with pairwise cosine below {} in dimension {} \
                 after {} attempts",
                k + 1,
                cfg.num_classes,
                PROTOTYPE_SEPARATION,
                cfg.d,
                PLACEMENT_RETRIES
            )));
        }
    }
    let mut descriptions = Vec::with_capacity(cfg.num_classes);
    for p in &protos {
        let mut rows = Vec::with_capacity(cfg.descriptions_per_class);
        for _ in 0..cfg.descriptions_per_class {
            let v: Vec<f64> = p
                .iter()
                .map(|x| x + cfg.description_noise * rng.normal())
                .collect();
            rows.push(l2_normalize(&v).map_err(|_| {
                LssError::GenerationFailure("description prototype collapsed to zero".into())
            })?);
        }
        descriptions.push(Tensor::from_rows(&rows)?);
    }
    let width = cfg.tokens * cfg.d_in;
    let scale = 1.0 / (cfg.d as f64).sqrt();
    let mixing = Tensor::new(
        vec![cfg.d, width],
        (0..cfg.d * width).map(|_| scale * rng.normal()).collect(),
    )?;
    let shift: Vec<f64> = random_unit(cfg.d, &mut rng)
        .into_iter()
        .map(|v| v * cfg.domain_shift)
        .collect();
    Ok(SynthWorld {
        cfg: *cfg,
        prototypes: Tensor::from_rows(&protos)?,
        descriptions,
        mixing,
        shift,
    })
}

/// One generated video: `length x S x d_in` patch features and its class.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub class: usize,
    pub frames: Tensor,
}

impl Video {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SynthWorld {
    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn descriptions(&self, class: usize) -> &Tensor {
        &self.descriptions[class]
    }

    pub fn mixing(&self) -> &Tensor {
        &self.mixing
    }

    pub fn domain_offset(&self) -> &[f64] {
        &self.shift
    }

    /// Patch tokens (`S x d_in`, flattened) of a latent vector.
    pub fn tokens_of(&self, latent: &[f64]) -> Vec<f64> {
        let width = self.mixing.cols();
        let mut out = vec![0.0; width];
        for (i, l) in latent.iter().enumerate() {
            for (o, m) in out.iter_mut().zip(self.mixing.row(i)) {
                *o += l * m;
            }
        }
        out
    }

    /// Index of the prototype with the highest cosine to `latent`.
    pub fn nearest_class(&self, latent: &[f64]) -> Result<usize> {
        let mut best = (0, f64::NEG_INFINITY);
        for k in 0..self.cfg.num_classes {
            let c = cosine(self.prototypes.row(k), latent)?;
            if c > best.1 {
                best = (k, c);
            }
        }
        Ok(best.0)
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.cfg.num_classes {
            return invalid(format!(
                "unknown class {class} (world has {})",
                self.cfg.num_classes
            ));
        }
        Ok(())
    }

    /// Frame latents of a video around `center`.
    fn latents(&self, center: &[f64], length: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
        let c = &self.cfg;
        let step = c.temporal_drift / (length as f64).sqrt();
        let mut drift = vec![0.0; c.d];
        (0..length)
            .map(|_| {
                for v in drift.iter_mut() {
                    *v += step * rng.normal();
                }
                (0..c.d)
                    .map(|j| {
                        center[j] + self.shift[j] + drift[j] + c.intra_class_noise * rng.normal()
                    })
                    .collect()
            })
            .collect()
    }

    fn render(&self, class: usize, latents: &[Vec<f64>]) -> Result<Video> {
        let c = &self.cfg;
        let mut data = Vec::with_capacity(latents.len() * c.tokens * c.d_in);
        for l in latents {
            data.extend(self.tokens_of(l));
        }
        Ok(Video {
            class,
            frames: Tensor::new(vec![latents.len(), c.tokens, c.d_in], data)?,
        })
    }

    /// Video of `class` together with its per-frame latents.
    pub fn generate_video_with_latents(
        &self,
        class: usize,
        length: usize,
        rng: &mut Rng,
    ) -> Result<(Video, Vec<Vec<f64>>)> {
        self.check_class(class)?;
        if length == 0 {
            return invalid("video length must be positive");
        }
        let lat = self.latents(self.prototypes.row(class), length, rng);
        Ok((self.render(class, &lat)?, lat))
    }

    pub fn generate_video(&self, class: usize, length: usize, rng: &mut Rng) -> Result<Video> {
        Ok(self.generate_video_with_latents(class, length, rng)?.0)
    }

    /// Ambiguous video centered halfway between two classes; labelled `class`.
    pub fn generate_mixed_video(
        &self,
        class: usize,
        other: usize,
        length: usize,
        rng: &mut Rng,
    ) -> Result<Video> {
        self.check_class(class)?;
        self.check_class(other)?;
        let center: Vec<f64> = self
            .prototypes
            .row(class)
            .iter()
            .zip(self.prototypes.row(other))
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        let lat = self.latents(&center, length, rng);
        self.render(class, &lat)
    }

    /// A single still image of `class`: prototype plus noise, no video
    /// offset or drift. Returns the `S x d_in` tokens and the latent.
    pub fn generate_image(&self, class: usize, rng: &mut Rng) -> Result<(Tensor, Vec<f64>)> {
        self.check_class(class)?;
        let c = &self.cfg;
        let lat: Vec<f64> = self
            .prototypes
            .row(class)
            .iter()
            .map(|p| p + c.intra_class_noise * rng.normal())
            .collect();
        let t = Tensor::new(vec![c.tokens, c.d_in], self.tokens_of(&lat))?;
        Ok((t, lat))
    }
}

pub fn class_label(k: usize) -> String {
    format!("class_{k}")
}

/// Category embeddings (labels `class_k`) and per-class description groups.
pub fn export_label_embeddings(
    world: &SynthWorld,
) -> Result<(EmbeddingSet, Vec<(String, Vec<Vec<f64>>)>)> {
    let n = world.cfg.num_classes;
    let labels: Vec<String> = (0..n).map(class_label).collect();
    let cats = EmbeddingSet::new(
        labels.clone(),
        world.prototypes.clone(),
        SourceTag::Synthetic,
    )?;
    let groups = labels
        .into_iter()
        .enumerate()
        .map(|(k, l)| {
            let d = &world.descriptions[k];
            (l, (0..d.rows()).map(|i| d.row(i).to_vec()).collect())
        })
        .collect();
    Ok((cats, groups))
}

/// Description embeddings flattened into one set with `<class>::<i>` labels.
pub fn export_description_embeddings(world: &SynthWorld) -> Result<EmbeddingSet> {
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for (k, d) in world.descriptions.iter().enumerate() {
        for i in 0..d.rows() {
            labels.push(description_label(&class_label(k), i));
            rows.push(d.row(i).to_vec());
        }
    }
    EmbeddingSet::from_rows(labels, &rows, SourceTag::Synthetic)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn code(self) -> u32 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub split: Split,
    pub videos: Vec<Video>,
}

/// `per_class` videos of every class, classes interleaved. The first
/// `round(mixed_fraction * per_class)` videos of each class are mixed with a
/// random other class.
pub fn generate_dataset(
    world: &SynthWorld,
    split: Split,
    per_class: usize,
    mixed_fraction: f64,
) -> Result<SynthDataset> {
    if !(0.0..=1.0).contains(&mixed_fraction) {
        return invalid(format!("mixed fraction {mixed_fraction} outside [0, 1]"));
    }
    let c = &world.cfg;
    let n_mixed = (mixed_fraction * per_class as f64).round() as usize;
    if n_mixed > 0 && c.num_classes < 2 {
        return invalid("mixed videos need at least two classes");
    }
    let mut videos = Vec::with_capacity(per_class * c.num_classes);
    for i in 0..per_class {
        for k in 0..c.num_classes {
            let mut rng = Rng::derived(c.seed, &[1, split.code() as u64, k as u64, i as u64]);
            let v = if i < n_mixed {
                let other = (k + 1 + rng.below(c.num_classes - 1)) % c.num_classes;
                world.generate_mixed_video(k, other, c.frames_per_video, &mut rng)?
            } else {
                world.generate_video(k, c.frames_per_video, &mut rng)?
            };
            videos.push(v);
        }
    }
    Ok(SynthDataset { split, videos })
}

const DATA_MAGIC: &[u8; 8] = b"LSSDATA1";

impl SynthDataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(DATA_MAGIC);
        let (s, d_in) = self
            .videos
            .first()
            .map(|v| (v.frames.shape()[1], v.frames.shape()[2]))
            .unwrap_or((0, 0));
        w.u32(self.split.code());
        w.u32(self.videos.len() as u32);
        w.u32(s as u32);
        w.u32(d_in as u32);
        for v in &self.videos {
            w.u32(v.class as u32);
            w.u32(v.len() as u32);
            w.f64s(v.frames.data());
        }
        w.buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data, DATA_MAGIC, "dataset")?;
        let split = match r.u32()? {
            0 => Split::Train,
            1 => Split::Test,
            x => return Err(LssError::Format(format!("unknown split code {x}"))),
        };
        let n = r.u32()? as usize;
        let s = r.u32()? as usize;
        let d_in = r.u32()? as usize;
        let mut videos = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let class = r.u32()? as usize;
            let len = r.u32()? as usize;
            let data = r.f64s(len * s * d_in)?;
            videos.push(Video {
                class,
                frames: Tensor::new(vec![len, s, d_in], data)?,
            });
        }
        if r.remaining() != 0 {
            return Err(LssError::Format(format!(
                "{} trailing bytes after the last video",
                r.remaining()
            )));
        }
        Ok(SynthDataset { split, videos })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        SynthDataset::from_bytes(&fs::read(path)?)
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut c = vec![0; num_classes];
        for v in &self.videos {
            if v.class < num_classes {
                c[v.class] += 1;
            }
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept_space::{build_category_space, build_description_space, DescriptionPooling};

    fn small(seed: u64) -> WorldConfig {
        WorldConfig {
            num_classes: 10,
            seed,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_world(&small(3)).unwrap();
        let b = generate_world(&small(3)).unwrap();
        assert_eq!(a.prototypes(), b.prototypes());
        assert_eq!(a.mixing(), b.mixing());
        let c = generate_world(&small(4)).unwrap();
        assert_ne!(a.prototypes(), c.prototypes());
    }

    #[test]
    fn prototypes_are_separated_unit_vectors() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        let p = w.prototypes();
        for i in 0..p.rows() {
            assert!((dot(p.row(i), p.row(i)) - 1.0).abs() < 1e-12);
            for j in 0..i {
                assert!(dot(p.row(i), p.row(j)) < PROTOTYPE_SEPARATION);
            }
        }
        let two = generate_world(&WorldConfig {
            num_classes: 2,
            ..WorldConfig::default()
        })
        .unwrap();
        assert!(dot(two.prototypes().row(0), two.prototypes().row(1)) < 0.5);
    }

    #[test]
    fn infeasible_packing_fails() {
        let cfg = WorldConfig {
            num_classes: 100,
            d: 2,
            ..WorldConfig::default()
        };
        match generate_world(&cfg) {
            Err(LssError::GenerationFailure(m)) => assert!(m.contains("cosine")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn noiseless_videos_are_class_constant() {
        let cfg = WorldConfig {
            intra_class_noise: 0.0,
            temporal_drift: 0.0,
            ..small(1)
        };
        let w = generate_world(&cfg).unwrap();
        let (v, lat) = w
            .generate_video_with_latents(2, 12, &mut Rng::new(0))
            .unwrap();
        let u = w.generate_video(2, 12, &mut Rng::new(99)).unwrap();
        assert_eq!(v, u);
        for l in &lat {
            for j in 0..cfg.d {
                assert_eq!(l[j], w.prototypes().row(2)[j] + w.domain_offset()[j]);
            }
        }
    }

    #[test]
    fn noiseless_latents_classify_perfectly() {
        let cfg = WorldConfig {
            intra_class_noise: 0.0,
            temporal_drift: 0.0,
            domain_shift: 0.0,
            ..WorldConfig::default()
        };
        let w = generate_world(&cfg).unwrap();
        let mut rng = Rng::new(5);
        for k in 0..cfg.num_classes {
            let (_, lat) = w.generate_video_with_latents(k, 8, &mut rng).unwrap();
            let mut mean = vec![0.0; cfg.d];
            for l in &lat {
                for (m, v) in mean.iter_mut().zip(l) {
                    *m += v / lat.len() as f64;
                }
            }
            assert_eq!(w.nearest_class(&mean).unwrap(), k);
        }
    }

    #[test]
    fn frame_latents_average_to_prototype() {
        let cfg = WorldConfig {
            temporal_drift: 0.0,
            domain_shift: 0.0,
            ..small(2)
        };
        let w = generate_world(&cfg).unwrap();
        let n = 4000;
        let (_, lat) = w
            .generate_video_with_latents(1, n, &mut Rng::new(8))
            .unwrap();
        let bound = 3.0 * cfg.intra_class_noise / (n as f64).sqrt();
        for j in 0..cfg.d {
            let m: f64 = lat.iter().map(|l| l[j]).sum::<f64>() / n as f64;
            assert!((m - w.prototypes().row(1)[j]).abs() < bound * 1.5);
        }
    }

    #[test]
    fn same_rng_same_video_and_unknown_class() {
        let w = generate_world(&small(0)).unwrap();
        let a = w.generate_video(3, 20, &mut Rng::new(4)).unwrap();
        let b = w.generate_video(3, 20, &mut Rng::new(4)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            w.generate_video(10, 20, &mut Rng::new(4)),
            Err(LssError::InvalidArgument(_))
        ));
    }

    #[test]
    fn exported_embeddings_feed_concept_spaces() {
        let w = generate_world(&small(6)).unwrap();
        let (cats, groups) = export_label_embeddings(&w).unwrap();
        assert_eq!((cats.len(), cats.dim()), (10, 16));
        assert!(groups.iter().all(|(_, g)| g.len() == 4));
        let c = build_category_space(&cats).unwrap();
        let d = build_description_space(&groups, DescriptionPooling::NormalizedMean).unwrap();
        for k in 0..10 {
            let own = dot(c.basis().row(k), d.basis().row(k));
            for j in (0..10).filter(|j| *j != k) {
                assert!(own > dot(c.basis().row(k), d.basis().row(j)));
            }
        }
        let flat = export_description_embeddings(&w).unwrap();
        assert_eq!(flat.len(), 40);
        assert_eq!(flat.labels()[5], "class_1::1");
    }

    #[test]
    fn datasets_are_balanced_and_round_trip() {
        let w = generate_world(&WorldConfig {
            num_classes: 3,
            frames_per_video: 10,
            ..WorldConfig::default()
        })
        .unwrap();
        let ds = generate_dataset(&w, Split::Train, 5, 0.2).unwrap();
        assert_eq!(ds.class_counts(3), vec![5, 5, 5]);
        let te = generate_dataset(&w, Split::Test, 5, 0.0).unwrap();
        assert!(ds.videos.iter().all(|v| !te.videos.contains(v)));
        let back = SynthDataset::from_bytes(&ds.to_bytes()).unwrap();
        assert_eq!(back, ds);
        let bytes = ds.to_bytes();
        assert!(matches!(
            SynthDataset::from_bytes(&bytes[..bytes.len() - 3]),
            Err(LssError::Parse(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            SynthDataset::from_bytes(&bad),
            Err(LssError::Format(_))
        ));
    }
}
