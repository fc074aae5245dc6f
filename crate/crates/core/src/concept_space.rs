//! Frozen language-derived concept spaces (the "text classifier").
//!
//! A concept space is an `n x d` matrix of unit-norm basis rows, each tied to a
//! label. Projecting a visual feature onto it is a bias-free linear map applied
//! to the normalized feature, so every score is a cosine similarity.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{invalid, LssError, Result};
use crate::numerics::{cosine, l2_norm, l2_normalize, Tensor};

const MAGIC: &str = "LSS-EMB";
const VERSION: &str = "1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceTag {
    File,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpaceKind {
    Category,
    Description,
}

impl SpaceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SpaceKind::Category => "category",
            SpaceKind::Description => "description",
        }
    }
}

/// Raw label embeddings as produced by a text encoder (not normalized).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    labels: Vec<String>,
    vectors: Tensor,
    source: SourceTag,
}

impl EmbeddingSet {
    pub fn new(labels: Vec<String>, vectors: Tensor, source: SourceTag) -> Result<Self> {
        if labels.is_empty() {
            return invalid("embedding set must contain at least one label");
        }
        if vectors.rank() != 2 || vectors.rows() != labels.len() {
            return invalid(format!(
                "{} labels but vector matrix has shape {:?}",
                labels.len(),
                vectors.shape()
            ));
        }
        let mut seen = HashSet::new();
        for (i, l) in labels.iter().enumerate() {
            if !seen.insert(l.as_str()) {
                return invalid(format!("duplicate label '{l}'"));
            }
            if l.contains('\t') || l.contains('\n') {
                return invalid(format!("label '{l}' contains a tab or newline"));
            }
            let row = vectors.row(i);
            if row.iter().any(|v| !v.is_finite()) {
                return invalid(format!("embedding of '{l}' is not finite"));
            }
            if l2_norm(row) == 0.0 {
                return Err(LssError::DegenerateInput(format!(
                    "embedding of '{l}' is zero"
                )));
            }
        }
        Ok(EmbeddingSet {
            labels,
            vectors,
            source,
        })
    }

    pub fn from_rows(labels: Vec<String>, rows: &[Vec<f64>], source: SourceTag) -> Result<Self> {
        EmbeddingSet::new(labels, Tensor::from_rows(rows)?, source)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn source(&self) -> SourceTag {
        self.source
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    fn subset(&self, keep: &[usize]) -> Result<Self> {
        let labels = keep.iter().map(|&i| self.labels[i].clone()).collect();
        let rows: Vec<&[f64]> = keep.iter().map(|&i| self.vectors.row(i)).collect();
        EmbeddingSet::new(labels, Tensor::from_rows(&rows)?, self.source)
    }
}

/// How description embeddings are pooled into one basis row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DescriptionPooling {
    /// normalize each description, average, re-normalize
    #[default]
    NormalizedMean,
    /// average raw embeddings, then normalize
    RawMean,
}

/// Unit-norm basis rows with labels. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptSpace {
    labels: Vec<String>,
    basis: Tensor,
    kind: SpaceKind,
}

/// Cosine scores of one feature against every basis row of a space.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreDistribution {
    pub raw: Vec<f64>,
    pub kind: SpaceKind,
}

impl ConceptSpace {
    fn from_unit_rows(labels: Vec<String>, basis: Tensor, kind: SpaceKind) -> Result<Self> {
        for i in 0..basis.rows() {
            let n = l2_norm(basis.row(i));
            if (n - 1.0).abs() > 1e-10 {
                return Err(LssError::Format(format!(
                    "basis row {i} ('{}') has norm {n}, expected 1",
                    labels[i]
                )));
            }
        }
        Ok(ConceptSpace {
            labels,
            basis,
            kind,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// `n x d` basis matrix.
    pub fn basis(&self) -> &Tensor {
        &self.basis
    }

    pub fn kind(&self) -> SpaceKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.basis.cols()
    }

    /// SHA-256 over kind, labels and the exact bits of every basis value.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.kind.as_str().as_bytes());
        for l in &self.labels {
            h.update((l.len() as u64).to_le_bytes());
            h.update(l.as_bytes());
        }
        for v in self.basis.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().into()
    }

    /// Scores `b . (f / ||f||)` of a single feature.
    pub fn project(&self, f: &[f64]) -> Result<ScoreDistribution> {
        if f.len() != self.dim() {
            return invalid(format!(
                "feature has dimension {}, space has {}",
                f.len(),
                self.dim()
            ));
        }
        let unit = l2_normalize(f)?;
        let raw = (0..self.len())
            .map(|i| {
                self.basis
                    .row(i)
                    .iter()
                    .zip(&unit)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .collect();
        Ok(ScoreDistribution {
            raw,
            kind: self.kind,
        })
    }

    /// Projects each row of a `B x d` feature matrix; returns `B x n` scores.
    pub fn project_rows(&self, features: &Tensor) -> Result<Tensor> {
        if features.cols() != self.dim() {
            return invalid(format!(
                "features have dimension {}, space has {}",
                features.cols(),
                self.dim()
            ));
        }
        let mut out = Vec::with_capacity(features.rows() * self.len());
        for r in 0..features.rows() {
            out.extend(self.project(features.row(r))?.raw);
        }
        Tensor::matrix(features.rows(), self.len(), out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, render(self.kind.as_str(), &self.labels, &self.basis))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        ConceptSpace::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let parsed = parse_emb(text)?;
        let kind = match parsed.kind.as_str() {
            "category" => SpaceKind::Category,
            "description" => SpaceKind::Description,
            other => {
                return Err(LssError::Format(format!(
                    "file kind '{other}' is not a concept space"
                )))
            }
        };
        ConceptSpace::from_unit_rows(parsed.labels, parsed.vectors, kind)
    }
}

/// Category space: each basis row is the normalized label embedding.
pub fn build_category_space(emb: &EmbeddingSet) -> Result<ConceptSpace> {
    let mut rows = Vec::with_capacity(emb.len());
    for (i, label) in emb.labels().iter().enumerate() {
        rows.push(l2_normalize(emb.vectors().row(i)).map_err(|e| match e {
            LssError::DegenerateInput(_) => {
                LssError::DegenerateInput(format!("embedding of '{label}' is zero"))
            }
            other => other,
        })?);
    }
    ConceptSpace::from_unit_rows(
        emb.labels().to_vec(),
        Tensor::from_rows(&rows)?,
        SpaceKind::Category,
    )
}

/// Description space: one basis row per label, pooled from that label's
/// description embeddings. Group order must match the paired category space.
pub fn build_description_space(
    groups: &[(String, Vec<Vec<f64>>)],
    pooling: DescriptionPooling,
) -> Result<ConceptSpace> {
    if groups.is_empty() {
        return invalid("no description groups");
    }
    let d =
        groups[0].1.first().map(|v| v.len()).ok_or_else(|| {
            LssError::InvalidArgument(format!("group '{}' is empty", groups[0].0))
        })?;
    let mut rows = Vec::with_capacity(groups.len());
    let mut labels = Vec::with_capacity(groups.len());
    for (label, vecs) in groups {
        if vecs.is_empty() {
            return invalid(format!("group '{label}' is empty"));
        }
        let mut mean = vec![0.0; d];
        for v in vecs {
            if v.len() != d {
                return invalid(format!(
                    "description of '{label}' has dimension {}, expected {d}",
                    v.len()
                ));
            }
            let pooled = match pooling {
                DescriptionPooling::NormalizedMean => l2_normalize(v).map_err(|_| {
                    LssError::DegenerateInput(format!("zero description embedding for '{label}'"))
                })?,
                DescriptionPooling::RawMean => v.clone(),
            };
            for (m, x) in mean.iter_mut().zip(&pooled) {
                *m += x;
            }
        }
        for m in mean.iter_mut() {
            *m /= vecs.len() as f64;
        }
        let row = l2_normalize(&mean).map_err(|_| {
            LssError::DegenerateInput(format!("description mean of '{label}' is zero"))
        })?;
        rows.push(row);
        labels.push(label.clone());
    }
    ConceptSpace::from_unit_rows(labels, Tensor::from_rows(&rows)?, SpaceKind::Description)
}

/// Greedy near-duplicate removal in input order: a row is kept iff its cosine
/// to every already-kept row is below `sim_threshold`.
pub fn dedup_embeddings(emb: &EmbeddingSet, sim_threshold: f64) -> Result<EmbeddingSet> {
    if !(sim_threshold > 0.0 && sim_threshold < 1.0) {
        return invalid(format!(
            "similarity threshold {sim_threshold} outside (0, 1)"
        ));
    }
    let units: Vec<Vec<f64>> = (0..emb.len())
        .map(|i| l2_normalize(emb.vectors().row(i)))
        .collect::<Result<_>>()?;
    let mut kept: Vec<usize> = Vec::new();
    for (i, u) in units.iter().enumerate() {
        let duplicate = kept.iter().any(|&k| {
            let c: f64 = u.iter().zip(&units[k]).map(|(a, b)| a * b).sum();
            c >= sim_threshold
        });
        if !duplicate {
            kept.push(i);
        }
    }
    emb.subset(&kept)
}

/// Concatenates label sets, dropping labels that repeat an earlier one after
/// trimming whitespace and ignoring case.
pub fn merge_label_sets(sets: &[EmbeddingSet]) -> Result<EmbeddingSet> {
    let first = sets
        .first()
        .ok_or_else(|| LssError::InvalidArgument("no label sets to merge".into()))?;
    let d = first.dim();
    let mut seen = HashSet::new();
    let mut labels = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for set in sets {
        if set.dim() != d {
            return invalid(format!("label set dimension {} != {d}", set.dim()));
        }
        for (i, l) in set.labels().iter().enumerate() {
            if seen.insert(l.trim().to_lowercase()) {
                labels.push(l.trim().to_string());
                rows.push(set.vectors().row(i).to_vec());
            }
        }
    }
    EmbeddingSet::from_rows(labels, &rows, first.source())
}

/// Max pairwise cosine among the rows of `emb` (0 for a single row).
pub fn max_pairwise_cosine(emb: &EmbeddingSet) -> Result<f64> {
    let mut worst = f64::NEG_INFINITY;
    for i in 0..emb.len() {
        for j in (i + 1)..emb.len() {
            worst = worst.max(cosine(emb.vectors().row(i), emb.vectors().row(j))?);
        }
    }
    Ok(if emb.len() < 2 { 0.0 } else { worst })
}

pub fn save_embeddings(emb: &EmbeddingSet, path: &Path) -> Result<()> {
    fs::write(path, render("embeddings", &emb.labels, &emb.vectors))?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let parsed = parse_emb(&fs::read_to_string(path)?)?;
    EmbeddingSet::new(parsed.labels, parsed.vectors, SourceTag::File)
}

/// Description embeddings are stored as an embedding file whose labels are
/// `<category>::<index>`; this regroups them in first-appearance order.
pub fn group_descriptions(emb: &EmbeddingSet) -> Result<Vec<(String, Vec<Vec<f64>>)>> {
    let mut groups: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for (i, l) in emb.labels().iter().enumerate() {
        let key = l.rsplit_once("::").map(|(k, _)| k).ok_or_else(|| {
            LssError::Format(format!("description label '{l}' lacks '::<index>'"))
        })?;
        let row = emb.vectors().row(i).to_vec();
        match groups.iter_mut().find(|(k, _)| k == key) {
            Some((_, v)) => v.push(row),
            None => groups.push((key.to_string(), vec![row])),
        }
    }
    Ok(groups)
}

pub fn description_label(category: &str, index: usize) -> String {
    format!("{category}::{index}")
}

fn render(kind: &str, labels: &[String], m: &Tensor) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC} {VERSION} {} {} {kind}", labels.len(), m.cols());
    for (i, l) in labels.iter().enumerate() {
        s.push_str(l);
        s.push('\t');
        for (j, v) in m.row(i).iter().enumerate() {
            if j > 0 {
                s.push(' ');
            }
            // Debug formatting is the shortest representation that round-trips
            let _ = write!(s, "{v:?}");
        }
        s.push('\n');
    }
    s
}

struct ParsedEmb {
    kind: String,
    labels: Vec<String>,
    vectors: Tensor,
}

fn parse_emb(text: &str) -> Result<ParsedEmb> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| LssError::Parse("line 1: empty file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 || fields[0] != MAGIC {
        return Err(LssError::Parse(format!(
            "line 1: expected '{MAGIC} {VERSION} <n> <d> <kind>', got '{header}'"
        )));
    }
    if fields[1] != VERSION {
        return Err(LssError::Format(format!(
            "unsupported version '{}'",
            fields[1]
        )));
    }
    let n: usize = fields[2]
        .parse()
        .map_err(|_| LssError::Parse(format!("line 1: bad count '{}'", fields[2])))?;
    let d: usize = fields[3]
        .parse()
        .map_err(|_| LssError::Parse(format!("line 1: bad dimension '{}'", fields[3])))?;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let lineno = i + 2;
        let line = lines.next().ok_or_else(|| {
            LssError::Parse(format!("line {lineno}: file truncated, expected {n} rows"))
        })?;
        let (label, values) = line
            .split_once('\t')
            .ok_or_else(|| LssError::Parse(format!("line {lineno}: missing tab after label")))?;
        let before = data.len();
        for tok in values.split(' ') {
            let v: f64 = tok
                .parse()
                .map_err(|_| LssError::Parse(format!("line {lineno}: bad number '{tok}'")))?;
            data.push(v);
        }
        if data.len() - before != d {
            return Err(LssError::Format(format!(
                "line {lineno}: {} values, header says {d}",
                data.len() - before
            )));
        }
        labels.push(label.to_string());
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(LssError::Format(format!("more than {n} rows present")));
    }
    Ok(ParsedEmb {
        kind: fields[4].to_string(),
        labels,
        vectors: Tensor::new(vec![n, d], data)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn set(labels: &[&str], rows: &[Vec<f64>]) -> EmbeddingSet {
        EmbeddingSet::from_rows(
            labels.iter().map(|s| s.to_string()).collect(),
            rows,
            SourceTag::Synthetic,
        )
        .unwrap()
    }

    #[test]
    fn category_space_normalizes_rows() {
        let s = build_category_space(&set(&["a", "b"], &[vec![3., 4.], vec![0., 2.]])).unwrap();
        assert_eq!(s.basis().data(), &[0.6, 0.8, 0.0, 1.0]);
        assert_eq!(s.kind(), SpaceKind::Category);
        assert_eq!(s.labels(), &["a", "b"]);
        let one = build_category_space(&set(&["x"], &[vec![1., 0.]])).unwrap();
        assert_eq!(one.basis().data(), &[1.0, 0.0]);
    }

    #[test]
    fn zero_embedding_is_rejected_with_label() {
        let e = EmbeddingSet::from_rows(
            vec!["ok".into(), "bad".into()],
            &[vec![1.0, 0.0], vec![0.0, 0.0]],
            SourceTag::File,
        )
        .unwrap_err();
        assert!(matches!(e, LssError::DegenerateInput(ref m) if m.contains("bad")));
    }

    #[test]
    fn large_category_space() {
        let mut rng = Rng::new(3);
        let labels: Vec<String> = (0..530).map(|i| format!("action {i}")).collect();
        let rows: Vec<Vec<f64>> = (0..530)
            .map(|_| (0..8).map(|_| rng.normal()).collect())
            .collect();
        let emb = EmbeddingSet::from_rows(labels, &rows, SourceTag::File).unwrap();
        assert_eq!(build_category_space(&emb).unwrap().len(), 530);
    }

    #[test]
    fn description_space_examples() {
        let s = build_description_space(
            &[("a".into(), vec![vec![1., 0.], vec![0., 1.]])],
            DescriptionPooling::NormalizedMean,
        )
        .unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(s.basis().data()[0], h, epsilon = 1e-15);
        assert_abs_diff_eq!(s.basis().data()[1], h, epsilon = 1e-15);

        let same = build_description_space(
            &[("a".into(), vec![vec![0., 2.], vec![0., 2.]])],
            DescriptionPooling::NormalizedMean,
        )
        .unwrap();
        assert_eq!(same.basis().data(), &[0.0, 1.0]);

        // four descriptions plus one characteristics embedding pool into one row
        let five: Vec<Vec<f64>> = (0..5).map(|i| vec![1.0, i as f64]).collect();
        let s5 = build_description_space(&[("a".into(), five)], DescriptionPooling::NormalizedMean)
            .unwrap();
        assert_eq!(s5.len(), 1);
    }

    #[test]
    fn description_pooling_variants_differ() {
        let g = vec![("a".to_string(), vec![vec![10., 0.], vec![0., 1.]])];
        let norm = build_description_space(&g, DescriptionPooling::NormalizedMean).unwrap();
        let raw = build_description_space(&g, DescriptionPooling::RawMean).unwrap();
        assert_abs_diff_eq!(
            norm.basis().data()[0],
            norm.basis().data()[1],
            epsilon = 1e-15
        );
        assert!(raw.basis().data()[0] > 0.99);
    }

    #[test]
    fn description_space_errors() {
        let empty = build_description_space(&[("a".into(), vec![])], DescriptionPooling::default());
        assert!(matches!(empty, Err(LssError::InvalidArgument(_))));
        let cancel = build_description_space(
            &[("a".into(), vec![vec![1., 0.], vec![-1., 0.]])],
            DescriptionPooling::default(),
        );
        assert!(matches!(cancel, Err(LssError::DegenerateInput(_))));
    }

    #[test]
    fn projection_examples() {
        let s = build_category_space(&set(&["x", "y"], &[vec![1., 0.], vec![0., 1.]])).unwrap();
        assert_eq!(s.project(&[3., 4.]).unwrap().raw, vec![0.6, 0.8]);
        let t = build_category_space(&set(&["a", "b"], &[vec![3., 4.], vec![1., 1.]])).unwrap();
        let b1 = t.basis().row(0).to_vec();
        let p = t.project(&b1).unwrap().raw;
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-15);
        let expected: f64 = t.basis().row(1).iter().zip(&b1).map(|(a, b)| a * b).sum();
        assert_abs_diff_eq!(p[1], expected, epsilon = 1e-15);
        assert!(matches!(
            s.project(&[0., 0.]),
            Err(LssError::DegenerateInput(_))
        ));
        assert!(matches!(
            s.project(&[1., 0., 0.]),
            Err(LssError::InvalidArgument(_))
        ));
    }

    #[test]
    fn dedup_examples() {
        let e = set(
            &["a", "b", "c"],
            &[vec![1., 0.], vec![1., 0.], vec![0.8, 0.6]],
        );
        let d = dedup_embeddings(&e, 0.9).unwrap();
        assert_eq!(d.labels(), &["a", "c"]);
        assert!(dedup_embeddings(&e, 0.0).is_err());
        assert!(dedup_embeddings(&e, 1.0).is_err());

        let spread = set(
            &["a", "b", "c"],
            &[vec![1., 0.], vec![0., 1.], vec![-1., 0.2]],
        );
        assert_eq!(dedup_embeddings(&spread, 0.999).unwrap(), spread);
    }

    #[test]
    fn planted_duplicates_reduce_to_prototypes() {
        let mut rng = Rng::new(11);
        let d = 64;
        let protos: Vec<Vec<f64>> = (0..100)
            .map(|_| l2_normalize(&(0..d).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap())
            .collect();
        let mut labels = Vec::new();
        let mut rows = Vec::new();
        for (k, p) in protos.iter().enumerate() {
            labels.push(format!("label {k}"));
            rows.push(p.clone());
        }
        for (k, p) in protos.iter().enumerate() {
            labels.push(format!("paraphrase {k}"));
            let noisy: Vec<f64> = p.iter().map(|v| v + 0.01 * rng.normal()).collect();
            rows.push(noisy);
        }
        let emb = EmbeddingSet::from_rows(labels, &rows, SourceTag::Synthetic).unwrap();
        assert!(
            max_pairwise_cosine(
                &EmbeddingSet::from_rows(
                    (0..100).map(|i| i.to_string()).collect(),
                    &protos,
                    SourceTag::Synthetic
                )
                .unwrap()
            )
            .unwrap()
                < 0.9
        );
        let kept = dedup_embeddings(&emb, 0.9).unwrap();
        assert_eq!(kept.len(), 100);
        assert!(kept.labels().iter().all(|l| l.starts_with("label ")));
    }

    #[test]
    fn merge_ignores_case_and_whitespace_overlaps() {
        let a = set(&["Run", "swim"], &[vec![1., 0.], vec![0., 1.]]);
        let b = set(&[" run ", "walk"], &[vec![1., 1.], vec![1., -1.]]);
        let m = merge_label_sets(&[a, b]).unwrap();
        assert_eq!(m.labels(), &["Run", "swim", "walk"]);
    }

    #[test]
    fn space_file_round_trip_is_bit_exact() {
        let mut rng = Rng::new(1);
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.normal()).collect())
            .collect();
        let s = build_category_space(&set(&["a b", "c", "d"], &rows)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.emb");
        s.save(&p).unwrap();
        let back = ConceptSpace::load(&p).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.content_hash(), s.content_hash());
        for (a, b) in back.basis().data().iter().zip(s.basis().data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_and_inconsistent_files_fail() {
        let s = build_category_space(&set(&["a", "b"], &[vec![1., 0.], vec![0., 1.]])).unwrap();
        let text = render("category", s.labels(), s.basis());
        let cut = &text[..text.len() - 6];
        assert!(matches!(
            ConceptSpace::parse(cut),
            Err(LssError::Parse(_)) | Err(LssError::Format(_))
        ));
        let only_header = text.lines().next().unwrap();
        assert!(matches!(
            ConceptSpace::parse(only_header),
            Err(LssError::Parse(_))
        ));
        let bad_dim = text.replacen("LSS-EMB 1 2 2", "LSS-EMB 1 2 3", 1);
        assert!(matches!(
            ConceptSpace::parse(&bad_dim),
            Err(LssError::Format(_))
        ));
        assert!(matches!(
            ConceptSpace::parse("nonsense"),
            Err(LssError::Parse(_))
        ));
    }

    #[test]
    fn embedding_file_with_descriptions_regroups() {
        let labels = vec![
            description_label("run", 0),
            description_label("run", 1),
            description_label("swim", 0),
        ];
        let emb = EmbeddingSet::from_rows(
            labels,
            &[vec![1., 0.], vec![1., 1.], vec![0., 1.]],
            SourceTag::Synthetic,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.emb");
        save_embeddings(&emb, &p).unwrap();
        let g = group_descriptions(&load_embeddings(&p).unwrap()).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].0, "run");
        assert_eq!(g[0].1.len(), 2);
    }

    proptest! {
        #[test]
        fn projection_is_scale_invariant_and_bounded(
            f in proptest::collection::vec(-5.0f64..5.0, 6),
            alpha in 0.01f64..100.0,
            seed in 0u64..1000,
        ) {
            prop_assume!(l2_norm(&f) > 1e-3);
            let mut rng = Rng::new(seed);
            let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..6).map(|_| rng.normal()).collect()).collect();
            let s = build_category_space(&EmbeddingSet::from_rows(
                (0..5).map(|i| i.to_string()).collect(), &rows, SourceTag::Synthetic).unwrap()).unwrap();
            let a = s.project(&f).unwrap().raw;
            let scaled: Vec<f64> = f.iter().map(|x| x * alpha).collect();
            let b = s.project(&scaled).unwrap().raw;
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(*x >= -1.0 - 1e-12 && *x <= 1.0 + 1e-12);
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
