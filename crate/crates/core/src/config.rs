//! Run configuration: flat `section.key = value` files, command-line
//! overrides and per-key provenance.
//!
//! Values are integers, decimals, `true`/`false`, or double-quoted strings.
//! `#` starts a comment outside of quotes. Precedence is flag > file >
//! default; unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::concept_space::DescriptionPooling;
use crate::encoder::EncoderConfig;
use crate::error::{LssError, Result};
use crate::eval::ProbeConfig;
use crate::objectives::UdpSource;
use crate::pretrain::PretrainConfig;
use crate::synth_world::WorldConfig;
use crate::trainer::{EmaConvention, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            // Debug formatting is the shortest string that round-trips
            Value::Float(v) => write!(f, "{v:?}"),
            Value::Bool(v) => write!(f, "{v}"),
            Value::Str(s) => write!(f, "\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\"")),
        }
    }
}

/// Where a resolved value came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    Default,
    File { path: PathBuf, line: usize },
    Flag,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Default => write!(f, "default"),
            Origin::File { path, line } => write!(f, "file {}:{line}", path.display()),
            Origin::Flag => write!(f, "flag"),
        }
    }
}

impl Origin {
    pub fn tag(&self) -> &'static str {
        match self {
            Origin::Default => "default",
            Origin::File { .. } => "file",
            Origin::Flag => "flag",
        }
    }
}

/// Dataset sizes for generated splits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// fraction of training videos drawn between two classes
    pub mixed_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_per_class: 100,
            test_per_class: 40,
            mixed_fraction: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpaceConfig {
    pub pooling: DescriptionPooling,
    /// near-duplicate cosine threshold; 0 disables deduplication
    pub dedup_threshold: f64,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        SpaceConfig {
            pooling: DescriptionPooling::NormalizedMean,
            dedup_threshold: 0.0,
        }
    }
}

/// Every tunable of the pipeline, fully resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub data: DataConfig,
    pub space: SpaceConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    /// temporal crops per video for zero-shot evaluation
    pub zero_shot_crops: usize,
    provenance: BTreeMap<&'static str, Origin>,
}

type Setter = fn(&mut RunConfig, &Value) -> std::result::Result<(), String>;
type Getter = fn(&RunConfig) -> Value;

struct Key {
    name: &'static str,
    get: Getter,
    set: Setter,
}

fn as_count(v: &Value, min: i64) -> std::result::Result<i64, String> {
    match v {
        Value::Int(i) if *i >= min => Ok(*i),
        Value::Int(i) => Err(format!("must be at least {min}, got {i}")),
        other => Err(format!("expected an integer, got {other}")),
    }
}

fn as_float(v: &Value) -> std::result::Result<f64, String> {
    match v {
        Value::Int(i) => Ok(*i as f64),
        Value::Float(f) => Ok(*f),
        other => Err(format!("expected a number, got {other}")),
    }
}

fn non_negative(v: &Value) -> std::result::Result<f64, String> {
    let f = as_float(v)?;
    if f >= 0.0 && f.is_finite() {
        Ok(f)
    } else {
        Err(format!("must be a non-negative finite number, got {f}"))
    }
}

fn positive(v: &Value) -> std::result::Result<f64, String> {
    let f = as_float(v)?;
    if f > 0.0 && f.is_finite() {
        Ok(f)
    } else {
        Err(format!("must be positive and finite, got {f}"))
    }
}

fn unit_open(v: &Value) -> std::result::Result<f64, String> {
    let f = as_float(v)?;
    if f > 0.0 && f < 1.0 {
        Ok(f)
    } else {
        Err(format!("must lie in (0, 1), got {f}"))
    }
}

fn as_bool(v: &Value) -> std::result::Result<bool, String> {
    match v {
        Value::Bool(b) => Ok(*b),
        other => Err(format!("expected true or false, got {other}")),
    }
}

fn as_str(v: &Value) -> std::result::Result<&str, String> {
    match v {
        Value::Str(s) => Ok(s),
        other => Err(format!("expected a quoted string, got {other}")),
    }
}

macro_rules! key {
    ($name:literal, count($min:expr), $($f:ident).+) => {
        Key {
            name: $name,
            get: |c| Value::Int(c.$($f).+ as i64),
            set: |c, v| {
                c.$($f).+ = as_count(v, $min)? as _;
                Ok(())
            },
        }
    };
    ($name:literal, flag, $($f:ident).+) => {
        Key {
            name: $name,
            get: |c| Value::Bool(c.$($f).+),
            set: |c, v| {
                c.$($f).+ = as_bool(v)?;
                Ok(())
            },
        }
    };
    ($name:literal, $check:ident, $($f:ident).+) => {
        Key {
            name: $name,
            get: |c| Value::Float(c.$($f).+),
            set: |c, v| {
                c.$($f).+ = $check(v)?;
                Ok(())
            },
        }
    };
}

fn keys() -> Vec<Key> {
    vec![
        key!("world.num_classes", count(1), world.num_classes),
        key!("world.d", count(1), world.d),
        key!("world.d_in", count(1), world.d_in),
        key!(
            "world.descriptions_per_class",
            count(1),
            world.descriptions_per_class
        ),
        key!("world.frames_per_video", count(1), world.frames_per_video),
        key!("world.tokens", count(1), world.tokens),
        key!(
            "world.intra_class_noise",
            non_negative,
            world.intra_class_noise
        ),
        key!(
            "world.description_noise",
            non_negative,
            world.description_noise
        ),
        key!("world.temporal_drift", non_negative, world.temporal_drift),
        key!("world.domain_shift", non_negative, world.domain_shift),
        key!("world.seed", count(0), world.seed),
        key!("data.train_per_class", count(1), data.train_per_class),
        key!("data.test_per_class", count(1), data.test_per_class),
        Key {
            name: "data.mixed_fraction",
            get: |c| Value::Float(c.data.mixed_fraction),
            set: |c, v| {
                let f = as_float(v)?;
                if !(0.0..=1.0).contains(&f) {
                    return Err(format!("must lie in [0, 1], got {f}"));
                }
                c.data.mixed_fraction = f;
                Ok(())
            },
        },
        Key {
            name: "space.pooling",
            get: |c| {
                Value::Str(
                    match c.space.pooling {
                        DescriptionPooling::NormalizedMean => "normalized",
                        DescriptionPooling::RawMean => "raw",
                    }
                    .into(),
                )
            },
            set: |c, v| {
                c.space.pooling = match as_str(v)? {
                    "normalized" => DescriptionPooling::NormalizedMean,
                    "raw" => DescriptionPooling::RawMean,
                    s => return Err(format!("expected \"normalized\" or \"raw\", got \"{s}\"")),
                };
                Ok(())
            },
        },
        Key {
            name: "space.dedup_threshold",
            get: |c| Value::Float(c.space.dedup_threshold),
            set: |c, v| {
                let f = as_float(v)?;
                if !(0.0..1.0).contains(&f) {
                    return Err(format!("must lie in [0, 1), got {f}"));
                }
                c.space.dedup_threshold = f;
                Ok(())
            },
        },
        key!("encoder.frames", count(1), encoder.frames),
        key!("encoder.tokens", count(1), encoder.tokens),
        key!("encoder.d_in", count(1), encoder.d_in),
        key!("encoder.d_embed", count(1), encoder.d_embed),
        key!("encoder.d_out", count(1), encoder.d_out),
        key!("encoder.blocks", count(1), encoder.blocks),
        key!("encoder.heads", count(1), encoder.heads),
        key!("encoder.mlp_hidden", count(1), encoder.mlp_hidden),
        key!("pretrain.steps", count(0), pretrain.steps),
        key!("pretrain.batch_size", count(1), pretrain.batch_size),
        key!("pretrain.lr", non_negative, pretrain.lr),
        key!("pretrain.seed", count(0), pretrain.seed),
        key!(
            "objective.lambda_teacher",
            positive,
            train.objective.lambda_teacher
        ),
        key!(
            "objective.lambda_student",
            positive,
            train.objective.lambda_student
        ),
        key!("objective.tau", unit_open_closed, train.objective.tau),
        key!(
            "objective.use_significance_weight",
            flag,
            train.objective.use_significance_weight
        ),
        key!("objective.use_udp", flag, train.objective.use_udp),
        key!(
            "objective.use_description_space",
            flag,
            train.objective.use_description_space
        ),
        key!(
            "objective.use_alignment",
            flag,
            train.objective.use_alignment
        ),
        key!(
            "objective.udp_weight",
            non_negative,
            train.objective.udp_weight
        ),
        Key {
            name: "objective.udp_source",
            get: |c| Value::Str(c.train.objective.udp_source.as_str().into()),
            set: |c, v| {
                let s = as_str(v)?;
                c.train.objective.udp_source = UdpSource::parse(s)
                    .ok_or_else(|| format!("expected \"student\" or \"teacher\", got \"{s}\""))?;
                Ok(())
            },
        },
        key!("train.epochs", count(0), train.epochs),
        key!("train.batch_size", count(1), train.batch_size),
        key!("train.lr_init", non_negative, train.lr_init),
        key!("train.weight_decay", non_negative, train.weight_decay),
        key!("train.ema_rho", unit_open, train.ema_rho),
        Key {
            name: "train.ema_convention",
            get: |c| Value::Str(c.train.ema_convention.as_str().into()),
            set: |c, v| {
                let s = as_str(v)?;
                c.train.ema_convention = EmaConvention::parse(s).ok_or_else(|| {
                    format!("expected \"pull-rate\" or \"momentum\", got \"{s}\"")
                })?;
                Ok(())
            },
        },
        key!("train.seed", count(0), train.seed),
        key!(
            "train.checkpoint_interval",
            count(0),
            train.checkpoint_interval
        ),
        key!("train.symmetric", flag, train.symmetric),
        key!("train.max_steps", count(0), train.max_steps),
        key!("views.aug_noise", non_negative, train.views.aug_noise),
        key!("views.scale_jitter", flag, train.views.scale_jitter),
        key!(
            "views.force_equal_intervals",
            flag,
            train.views.force_equal_intervals
        ),
        key!("probe.epochs", count(0), probe.epochs),
        key!("probe.lr", non_negative, probe.lr),
        key!("probe.batch_size", count(0), probe.batch_size),
        key!("probe.weight_decay", non_negative, probe.weight_decay),
        key!("probe.n_crops", count(1), probe.n_crops),
        key!("probe.seed", count(0), probe.seed),
        key!("eval.zero_shot_crops", count(1), zero_shot_crops),
    ]
}

fn unit_open_closed(v: &Value) -> std::result::Result<f64, String> {
    let f = as_float(v)?;
    if f > 0.0 && f <= 1.0 {
        Ok(f)
    } else {
        Err(format!("must lie in (0, 1], got {f}"))
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            world: WorldConfig::default(),
            data: DataConfig::default(),
            space: SpaceConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            zero_shot_crops: 3,
            provenance: BTreeMap::new(),
        };
        for k in keys() {
            c.provenance.insert(k.name, Origin::Default);
        }
        c
    }
}

/// Splits `line` at the first `#` that is not inside a quoted string.
fn strip_comment(line: &str) -> &str {
    let mut in_str = false;
    let mut escaped = false;
    for (i, ch) in line.char_indices() {
        match ch {
            '\\' if in_str && !escaped => {
                escaped = true;
                continue;
            }
            '"' if !escaped => in_str = !in_str,
            '#' if !in_str => return &line[..i],
            _ => {}
        }
        escaped = false;
    }
    line
}

/// Parses a literal value: quoted string, boolean, integer or decimal.
pub fn parse_value(text: &str) -> std::result::Result<Value, String> {
    let t = text.trim();
    if t.is_empty() {
        return Err("missing value".into());
    }
    if let Some(rest) = t.strip_prefix('"') {
        let body = rest
            .strip_suffix('"')
            .ok_or_else(|| format!("unterminated string {t}"))?;
        let mut out = String::new();
        let mut chars = body.chars();
        while let Some(c) = chars.next() {
            match c {
                '\\' => match chars.next() {
                    Some(e @ ('\\' | '"')) => out.push(e),
                    _ => return Err(format!("bad escape in {t}")),
                },
                '"' => return Err(format!("stray quote in {t}")),
                c => out.push(c),
            }
        }
        return Ok(Value::Str(out));
    }
    match t {
        "true" => return Ok(Value::Bool(true)),
        "false" => return Ok(Value::Bool(false)),
        _ => {}
    }
    if let Ok(i) = t.parse::<i64>() {
        return Ok(Value::Int(i));
    }
    match t.parse::<f64>() {
        Ok(f) if f.is_finite() => Ok(Value::Float(f)),
        _ => Err(format!("cannot parse value '{t}'")),
    }
}

fn config_error(key: &str, origin: &Origin, msg: &str) -> LssError {
    LssError::Config(format!("{key} ({origin}): {msg}"))
}

impl RunConfig {
    pub fn origin(&self, key: &str) -> Option<&Origin> {
        self.provenance.get(key)
    }

    pub fn key_names() -> Vec<&'static str> {
        keys().into_iter().map(|k| k.name).collect()
    }

    pub fn get(&self, key: &str) -> Option<Value> {
        keys()
            .into_iter()
            .find(|k| k.name == key)
            .map(|k| (k.get)(self))
    }

    /// Sets one key, recording where the value came from.
    pub fn set(&mut self, key: &str, value: &Value, origin: Origin) -> Result<()> {
        let k = keys()
            .into_iter()
            .find(|k| k.name == key)
            .ok_or_else(|| config_error(key, &origin, "unknown key"))?;
        (k.set)(self, value).map_err(|m| config_error(key, &origin, &m))?;
        self.provenance.insert(k.name, origin);
        Ok(())
    }

    /// Applies the `key = value` lines of a config file.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let origin = Origin::File {
                path: path.to_path_buf(),
                line: i + 1,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_error(line, &origin, "expected 'section.key = value'"))?;
            let key = key.trim();
            let value = parse_value(value).map_err(|m| config_error(key, &origin, &m))?;
            self.set(key, &value, origin)?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then `overrides` as `(key, text)`.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        if let Some(p) = file {
            let text = fs::read_to_string(p).map_err(|e| {
                LssError::Config(format!("cannot read config file {}: {e}", p.display()))
            })?;
            c.apply_text(&text, p)?;
        }
        for (k, v) in overrides {
            // bare words on the command line are taken as strings
            let value = parse_value(v).or_else(|e| {
                if v.trim().is_empty() || v.contains('"') {
                    Err(config_error(k, &Origin::Flag, &e))
                } else {
                    Ok(Value::Str(v.trim().to_string()))
                }
            })?;
            c.set(k, &value, Origin::Flag)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Cross-key consistency checks.
    pub fn validate(&self) -> Result<()> {
        let sec = |s: &str, e: LssError| LssError::Config(format!("{s}: {e}"));
        self.world.validate().map_err(|e| sec("world", e))?;
        self.encoder.validate().map_err(|e| sec("encoder", e))?;
        self.train.validate().map_err(|e| sec("train", e))?;
        for (ek, ev, wk, wv) in [
            (
                "encoder.tokens",
                self.encoder.tokens,
                "world.tokens",
                self.world.tokens,
            ),
            (
                "encoder.d_in",
                self.encoder.d_in,
                "world.d_in",
                self.world.d_in,
            ),
            ("encoder.d_out", self.encoder.d_out, "world.d", self.world.d),
        ] {
            if ev != wv {
                return Err(LssError::Config(format!(
                    "{ek} = {ev} ({}) does not match {wk} = {wv} ({})",
                    self.provenance[ek], self.provenance[wk]
                )));
            }
        }
        if self.encoder.frames > self.world.frames_per_video {
            return Err(LssError::Config(format!(
                "encoder.frames = {} exceeds world.frames_per_video = {}",
                self.encoder.frames, self.world.frames_per_video
            )));
        }
        Ok(())
    }

    /// The resolved configuration in file syntax; every line carries its
    /// provenance as a trailing comment. Feeding it back reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for k in keys() {
            let s = k.name.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = s;
            }
            let origin = &self.provenance[k.name];
            out.push_str(&format!("{} = {}  # {}\n", k.name, (k.get)(self), origin));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Equality of all values, ignoring provenance.
    pub fn same_values(&self, other: &RunConfig) -> bool {
        keys().iter().all(|k| (k.get)(self) == (k.get)(other))
    }
}
