//! Experiment configuration.
//!
//! The on-disk form is flat text, one `dotted.key = value` per line, `#`
//! starts a comment. Every field is reachable by its dotted key, both from
//! files and from `--set` overrides, and the canonical rendering (all keys,
//! declaration order) defines the config hash.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{PandError, Result};

/// Values that can appear on the right-hand side of `key = value`.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_value!(f64, usize, u64, bool);

impl ConfigValue for String {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for Vec<f64> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
            .collect()
    }
    fn render(&self) -> String {
        self.iter()
            .map(f64::to_string)
            .collect::<Vec<_>>()
            .join(",")
    }
}

macro_rules! enum_value {
    ($t:ident { $($variant:ident => $text:literal),* $(,)? }) => {
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($t::$variant),)*
                    other => Err(format!(
                        "expected one of [{}], got {other:?}",
                        [$($text),*].join(", ")
                    )),
                }
            }
            fn render(&self) -> String {
                match self {
                    $($t::$variant => $text.to_string(),)*
                }
            }
        }

        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.render())
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    /// Generated Gaussian clusters.
    Toy,
    /// Class-per-directory tree plus split files.
    Folder,
    /// Dataset files previously written by `gen-toy`.
    Export,
}
enum_value!(DataSource { Toy => "toy", Folder => "folder", Export => "export" });

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorSource {
    /// Anchors from Stage-PSC.
    Learned,
    /// Anchors from the fixed hand-crafted template.
    Template,
}
enum_value!(AnchorSource { Learned => "learned", Template => "template" });

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSchedule {
    Fixed,
    /// Linear interpolation from `nsd.weights.*` to `nsd.weights_end.*`.
    Linear,
}
enum_value!(WeightSchedule { Fixed => "fixed", Linear => "linear" });

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportSource {
    Student,
    Teacher,
}
enum_value!(ExportSource { Student => "student", Teacher => "teacher" });

#[derive(Debug, Clone, PartialEq)]
pub struct PscConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau_psc: f64,
    pub n_ctx: usize,
    pub seed: u64,
    /// Average in the text→image direction as well.
    pub symmetric: bool,
    /// Global-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for PscConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 200,
            batch_size: 128,
            tau_psc: 0.07,
            n_ctx: 16,
            seed: 0,
            symmetric: false,
            grad_clip: 5.0,
        }
    }
}

/// Coefficients of the base and structural losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_vis: f64,
    pub lambda_txt: f64,
    pub lambda_nsd: f64,
    /// Temperature of the text-alignment logits.
    pub tau: f64,
    /// Neighborhood size.
    pub k: usize,
    /// Divides the margins before the relation softmax; 1 leaves them raw.
    pub nsd_temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 0.01,
            lambda_vis: 0.495,
            lambda_txt: 0.495,
            lambda_nsd: 0.5,
            tau: 2.0,
            k: 3,
            nsd_temperature: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cls", self.lambda_cls),
            ("lambda_vis", self.lambda_vis),
            ("lambda_txt", self.lambda_txt),
            ("lambda_nsd", self.lambda_nsd),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(PandError::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(PandError::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.nsd_temperature > 0.0) || !self.nsd_temperature.is_finite() {
            return Err(PandError::Config(format!(
                "nsd_temperature must be positive, got {}",
                self.nsd_temperature
            )));
        }
        if self.k == 0 {
            return Err(PandError::Config("k must be at least 1".into()));
        }
        Ok(())
    }

    /// `k ≤ C − 1`.
    pub fn validate_for_classes(&self, classes: usize) -> Result<()> {
        self.validate()?;
        if self.k + 1 > classes {
            return Err(PandError::Config(format!(
                "k exceeds C-1 (k={}, C={classes})",
                self.k
            )));
        }
        Ok(())
    }

    /// Weights at `epoch` of `epochs` under a linear schedule towards `end`.
    pub fn interpolate(&self, end: &LossWeights, epoch: usize, epochs: usize) -> LossWeights {
        let span = epochs.saturating_sub(1).max(1) as f64;
        let t = (epoch as f64 / span).min(1.0);
        let lerp = |a: f64, b: f64| a + (b - a) * t;
        LossWeights {
            lambda_cls: lerp(self.lambda_cls, end.lambda_cls),
            lambda_vis: lerp(self.lambda_vis, end.lambda_vis),
            lambda_txt: lerp(self.lambda_txt, end.lambda_txt),
            lambda_nsd: lerp(self.lambda_nsd, end.lambda_nsd),
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NsdConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub min_lr: f64,
    pub weights: LossWeights,
    pub schedule: WeightSchedule,
    pub weights_end: LossWeights,
    pub seed: u64,
    pub grad_clip: f64,
    /// When false the structural loss code path is never entered.
    pub structural: bool,
    pub anchor_source: AnchorSource,
    /// Write a student checkpoint every this many epochs (0 = end only).
    pub checkpoint_every: usize,
}

impl Default for NsdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            epochs: 300,
            batch_size: 128,
            min_lr: 1e-5,
            weights: LossWeights::default(),
            schedule: WeightSchedule::Fixed,
            weights_end: LossWeights::default(),
            seed: 0,
            grad_clip: 5.0,
            structural: true,
            anchor_source: AnchorSource::Learned,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub classes: usize,
    pub n_per_class: usize,
    pub dim: usize,
    /// Minimum angle between class means, radians.
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
    /// Dataset root for `folder`; falls back to `PAND_DATA_ROOT`.
    pub root: String,
    pub train_split: String,
    pub test_split: String,
    pub train_file: String,
    pub test_file: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Toy,
            classes: 10,
            n_per_class: 50,
            dim: 16,
            separation: std::f64::consts::FRAC_PI_2,
            noise: 0.15,
            seed: 0,
            root: String::new(),
            train_split: "train.txt".into(),
            test_split: "test.txt".into(),
            train_file: String::new(),
            test_file: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherConfig {
    pub embed_dim: usize,
    pub token_dim: usize,
    pub hidden: usize,
    /// Norm of the shared text-side offset the context has to cancel.
    pub gap: f64,
    /// Perturbation of the class concepts the text encoder knows.
    pub knowledge_noise: f64,
    pub seed: u64,
    pub template: String,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            token_dim: 32,
            hidden: 8,
            gap: 1.5,
            knowledge_noise: 0.3,
            seed: 0,
            template: crate::anchors::DEFAULT_TEMPLATE.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentConfig {
    pub hidden: usize,
    pub feat_dim: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            hidden: 12,
            feat_dim: 12,
            init_std: 0.02,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathsConfig {
    pub anchors: String,
    pub checkpoints: String,
    pub metrics: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            anchors: "anchors.bin".into(),
            checkpoints: "checkpoints".into(),
            metrics: "metrics.jsonl".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub sweep_grid: Vec<f64>,
    /// Seeds per table cell; more than one reports mean ± std.
    pub seeds: usize,
    pub export: ExportSource,
    /// Include wall-clock time in metrics files (breaks byte-identical reruns).
    pub wall_clock: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sweep_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            seeds: 1,
            export: ExportSource::Student,
            wall_clock: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainConfig {
    pub psc: PscConfig,
    pub nsd: NsdConfig,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub paths: PathsConfig,
    pub eval: EvalConfig,
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+;)*) => {
        impl TrainConfig {
            /// Every dotted key, in canonical order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(ConfigValue::render(&self.$($field).+)),)*
                    _ => None,
                }
            }

            /// Type-checked assignment of one dotted key.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $($key => {
                        self.$($field).+ = ConfigValue::parse_value(value).map_err(|e| {
                            PandError::Config(format!("bad value for {key}: {e}"))
                        })?;
                    })*
                    _ => return Err(PandError::Config(format!("unknown config key {key:?}"))),
                }
                Ok(())
            }
        }
    };
}

config_keys! {
    "psc.lr" => psc.lr;
    "psc.momentum" => psc.momentum;
    "psc.weight_decay" => psc.weight_decay;
    "psc.epochs" => psc.epochs;
    "psc.batch_size" => psc.batch_size;
    "psc.tau_psc" => psc.tau_psc;
    "psc.n_ctx" => psc.n_ctx;
    "psc.seed" => psc.seed;
    "psc.symmetric" => psc.symmetric;
    "psc.grad_clip" => psc.grad_clip;
    "nsd.lr" => nsd.lr;
    "nsd.weight_decay" => nsd.weight_decay;
    "nsd.epochs" => nsd.epochs;
    "nsd.batch_size" => nsd.batch_size;
    "nsd.min_lr" => nsd.min_lr;
    "nsd.weights.lambda_cls" => nsd.weights.lambda_cls;
    "nsd.weights.lambda_vis" => nsd.weights.lambda_vis;
    "nsd.weights.lambda_txt" => nsd.weights.lambda_txt;
    "nsd.weights.lambda_nsd" => nsd.weights.lambda_nsd;
    "nsd.weights.tau" => nsd.weights.tau;
    "nsd.weights.k" => nsd.weights.k;
    "nsd.weights.nsd_temperature" => nsd.weights.nsd_temperature;
    "nsd.schedule" => nsd.schedule;
    "nsd.weights_end.lambda_cls" => nsd.weights_end.lambda_cls;
    "nsd.weights_end.lambda_vis" => nsd.weights_end.lambda_vis;
    "nsd.weights_end.lambda_txt" => nsd.weights_end.lambda_txt;
    "nsd.weights_end.lambda_nsd" => nsd.weights_end.lambda_nsd;
    "nsd.seed" => nsd.seed;
    "nsd.grad_clip" => nsd.grad_clip;
    "nsd.structural" => nsd.structural;
    "nsd.anchor_source" => nsd.anchor_source;
    "nsd.checkpoint_every" => nsd.checkpoint_every;
    "data.source" => data.source;
    "data.classes" => data.classes;
    "data.n_per_class" => data.n_per_class;
    "data.dim" => data.dim;
    "data.separation" => data.separation;
    "data.noise" => data.noise;
    "data.seed" => data.seed;
    "data.root" => data.root;
    "data.train_split" => data.train_split;
    "data.test_split" => data.test_split;
    "data.train_file" => data.train_file;
    "data.test_file" => data.test_file;
    "teacher.embed_dim" => teacher.embed_dim;
    "teacher.token_dim" => teacher.token_dim;
    "teacher.hidden" => teacher.hidden;
    "teacher.gap" => teacher.gap;
    "teacher.knowledge_noise" => teacher.knowledge_noise;
    "teacher.seed" => teacher.seed;
    "teacher.template" => teacher.template;
    "student.hidden" => student.hidden;
    "student.feat_dim" => student.feat_dim;
    "student.init_std" => student.init_std;
    "student.seed" => student.seed;
    "paths.anchors" => paths.anchors;
    "paths.checkpoints" => paths.checkpoints;
    "paths.metrics" => paths.metrics;
    "eval.sweep_grid" => eval.sweep_grid;
    "eval.seeds" => eval.seeds;
    "eval.export" => eval.export;
    "eval.wall_clock" => eval.wall_clock;
}

impl TrainConfig {
    /// Parse flat `key = value` text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                PandError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.set(key.trim(), value)
                .map_err(|e| PandError::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PandError::io(path, e))?;
        Self::parse(&text)
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            PandError::Config(format!("override {assignment:?} is not key=value"))
        })?;
        self.set(key.trim(), value)
    }

    /// Canonical text: every key in declaration order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let v = self.get(key).expect("declared key");
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }

    /// Range checks that do not depend on the dataset.
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(PandError::Config(format!(
                    "{name} must be positive, got {v}"
                )))
            }
        };
        let non_negative = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(PandError::Config(format!(
                    "{name} must be non-negative, got {v}"
                )))
            }
        };
        positive("psc.lr", self.psc.lr)?;
        non_negative("psc.momentum", self.psc.momentum)?;
        non_negative("psc.weight_decay", self.psc.weight_decay)?;
        positive("psc.tau_psc", self.psc.tau_psc)?;
        non_negative("psc.grad_clip", self.psc.grad_clip)?;
        positive("nsd.lr", self.nsd.lr)?;
        non_negative("nsd.weight_decay", self.nsd.weight_decay)?;
        positive("nsd.min_lr", self.nsd.min_lr)?;
        non_negative("nsd.grad_clip", self.nsd.grad_clip)?;
        if self.nsd.min_lr > self.nsd.lr {
            return Err(PandError::Config(format!(
                "nsd.min_lr ({}) exceeds nsd.lr ({})",
                self.nsd.min_lr, self.nsd.lr
            )));
        }
        if self.psc.batch_size == 0 || self.nsd.batch_size == 0 {
            return Err(PandError::Config("batch sizes must be at least 1".into()));
        }
        if self.psc.n_ctx == 0 {
            return Err(PandError::Config("psc.n_ctx must be at least 1".into()));
        }
        self.nsd.weights.validate()?;
        if self.nsd.schedule == WeightSchedule::Linear {
            self.nsd.weights_end.validate()?;
        }
        if self.eval.sweep_grid.is_empty() {
            return Err(PandError::Config(
                "eval.sweep_grid must not be empty".into(),
            ));
        }
        for &l in &self.eval.sweep_grid {
            non_negative("eval.sweep_grid entry", l)?;
        }
        if self.eval.seeds == 0 {
            return Err(PandError::Config("eval.seeds must be at least 1".into()));
        }
        if self.student.hidden == 0 || self.student.feat_dim == 0 {
            return Err(PandError::Config(
                "student dimensions must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Checks that need the class count.
    pub fn validate_for_classes(&self, classes: usize) -> Result<()> {
        self.validate()?;
        self.nsd.weights.validate_for_classes(classes)
    }
}

impl FromStr for TrainConfig {
    type Err = PandError;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}
