//! Key-value run configuration validated against the checked-in schema.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::AugConfig;
use crate::error::{Error, Result};
use crate::eval::Metric;
use crate::exec::Exec;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::tensor::CeVariant;
use crate::trainer::{OptimConfig, OptimKind};

pub const SCHEMA: &str = include_str!("../config/schema.conf");

pub const RESOLVED_FILE: &str = "resolved.conf";

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Int,
    Uint,
    Float,
    Bool,
    Str,
    Path,
    Ints,
    Enum(Vec<String>),
}

#[derive(Debug, Clone)]
struct Entry {
    default: String,
    kind: Kind,
}

fn split_line(line: &str) -> Option<(&str, &str, &str)> {
    let (body, comment) = line.split_once('#').unwrap_or((line, ""));
    let (k, v) = body.split_once('=')?;
    Some((k.trim(), v.trim(), comment.trim()))
}

fn schema() -> BTreeMap<String, Entry> {
    let mut out = BTreeMap::new();
    for line in SCHEMA.lines() {
        if line.trim_start().starts_with('#') {
            continue;
        }
        let Some((key, default, comment)) = split_line(line) else {
            continue;
        };
        let ty = comment.split_whitespace().next().unwrap_or("str");
        let kind = match ty {
            "int" => Kind::Int,
            "uint" => Kind::Uint,
            "float" => Kind::Float,
            "bool" => Kind::Bool,
            "path" => Kind::Path,
            "ints" => Kind::Ints,
            t if t.starts_with("enum:") => Kind::Enum(t[5..].split('|').map(String::from).collect()),
            _ => Kind::Str,
        };
        out.insert(
            key.to_string(),
            Entry {
                default: default.to_string(),
                kind,
            },
        );
    }
    out
}

fn check_value(key: &str, value: &str, kind: &Kind) -> Result<()> {
    if value.is_empty() {
        return Ok(());
    }
    let ok = match kind {
        Kind::Int => value.parse::<i64>().is_ok_and(|v| v > 0),
        Kind::Uint => value.parse::<u64>().is_ok(),
        Kind::Float => value.parse::<f64>().is_ok_and(f64::is_finite),
        Kind::Bool => matches!(value, "true" | "false"),
        Kind::Str | Kind::Path => true,
        Kind::Ints => value.split(',').all(|v| v.trim().parse::<usize>().is_ok_and(|v| v > 0)),
        Kind::Enum(opts) => opts.iter().any(|o| o == value),
    };
    if ok {
        Ok(())
    } else {
        let expected = match kind {
            Kind::Int => "a positive integer".to_string(),
            Kind::Uint => "a non-negative integer".to_string(),
            Kind::Float => "a finite number".to_string(),
            Kind::Bool => "true or false".to_string(),
            Kind::Ints => "a comma-separated list of positive integers".to_string(),
            Kind::Enum(o) => format!("one of {}", o.join(", ")),
            Kind::Str | Kind::Path => unreachable!(),
        };
        Err(Error::config(key, format!("`{value}` is not {expected}")))
    }
}

/// Fully resolved configuration: every schema key with its effective value.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: schema().into_iter().map(|(k, e)| (k, e.default)).collect(),
        }
    }
}

impl RunConfig {
    /// Parses `key = value` lines over the schema defaults. Unknown or
    /// duplicated keys and ill-typed values are configuration errors.
    pub fn parse(text: &str) -> Result<Self> {
        let schema = schema();
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for line in text.lines() {
            let stripped = line.split('#').next().unwrap().trim();
            if stripped.is_empty() {
                continue;
            }
            let Some((key, value, _)) = split_line(line) else {
                return Err(Error::config(stripped, "expected key = value"));
            };
            let entry = schema
                .get(key)
                .ok_or_else(|| Error::config(key, "unknown configuration key"))?;
            if seen.insert(key.to_string(), ()).is_some() {
                return Err(Error::config(key, "key given more than once"));
            }
            check_value(key, value, &entry.kind)?;
            cfg.values.insert(key.to_string(), value.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Overrides one key, with the same checks as [`RunConfig::parse`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let schema = schema();
        let entry = schema
            .get(key)
            .ok_or_else(|| Error::config(key, "unknown configuration key"))?;
        check_value(key, value, &entry.kind)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("{key} is not a schema key"))
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str) -> T {
        self.get(key)
            .parse()
            .unwrap_or_else(|_| panic!("{key} was validated on load"))
    }

    fn uint(&self, key: &str) -> usize {
        self.parse_as(key)
    }

    fn float(&self, key: &str) -> f64 {
        self.parse_as(key)
    }

    fn flag(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    /// Checks every section builds; run after parsing.
    pub fn validate(&self) -> Result<()> {
        self.model_config(2)?.validate()?;
        self.loss_config()?.validate()?;
        self.optim_config()?.validate()?;
        let a = self.aug_config([0.0; 3]);
        if !(0.0..=1.0).contains(&a.flip_p) || !(0.0..=1.0).contains(&a.erase_p) {
            return Err(Error::config("aug.flip_p", "probabilities must lie in [0, 1]"));
        }
        if !(0.0 < a.erase_area.0 && a.erase_area.0 <= a.erase_area.1 && a.erase_area.1 < 1.0) {
            return Err(Error::config("aug.erase_area_min", "need 0 < min <= max < 1"));
        }
        if !(0.0 < a.erase_aspect.0 && a.erase_aspect.0 <= a.erase_aspect.1) {
            return Err(Error::config("aug.erase_aspect_min", "need 0 < min <= max"));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.parse_as("seed")
    }

    pub fn threads(&self) -> usize {
        self.uint("threads")
    }

    pub fn exec(&self) -> Exec {
        if self.flag("parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    pub fn data_root(&self) -> Result<PathBuf> {
        self.path("data.root")
            .ok_or_else(|| Error::config("data.root", "no dataset directory configured"))
    }

    pub fn expected_counts(&self) -> Option<PathBuf> {
        self.path("data.expected_counts")
    }

    pub fn output_dir(&self) -> Result<PathBuf> {
        self.path("output.dir")
            .ok_or_else(|| Error::config("output.dir", "no output directory configured"))
    }

    pub fn model_config(&self, num_classes: usize) -> Result<ModelConfig> {
        let sc: Vec<usize> = self
            .get("model.stage_channels")
            .split(',')
            .map(|v| v.trim().parse().unwrap_or(0))
            .collect();
        let stage_channels: [usize; 4] = sc
            .try_into()
            .map_err(|_| Error::config("model.stage_channels", "expected exactly four widths"))?;
        Ok(ModelConfig {
            input_channels: 3,
            input_h: self.uint("model.input_h"),
            input_w: self.uint("model.input_w"),
            stage_channels,
            num_classes,
            embed_dim: self.uint("model.embed_dim"),
            grid_channels: self.uint("model.grid_channels"),
            ibn_enabled: self.flag("model.ibn"),
            affine_enabled: self.flag("model.affine"),
        })
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        Ok(LossConfig {
            epsilon: self.float("loss.epsilon"),
            margin: self.float("loss.margin"),
            lambda_triplet: self.float("loss.lambda_triplet"),
            label_smooth_enabled: self.flag("loss.label_smooth"),
            ce_variant: match self.get("loss.ce_variant") {
                "log_shift" => CeVariant::LogShift,
                _ => CeVariant::SmoothedTargets,
            },
            squared_distances: self.flag("loss.squared_distances"),
        })
    }

    pub fn optim_config(&self) -> Result<OptimConfig> {
        let kind: OptimKind = self.get("optim.kind").parse()?;
        let learning_rate = match self.get("optim.learning_rate") {
            "auto" => OptimConfig::default_lr(kind),
            v => v
                .parse::<f64>()
                .map_err(|_| Error::config("optim.learning_rate", "expected a number or auto"))?,
        };
        Ok(OptimConfig {
            kind,
            learning_rate,
            momentum: self.float("optim.momentum"),
            betas: (self.float("optim.beta1"), self.float("optim.beta2")),
            eps: self.float("optim.eps"),
            rms_decay: self.float("optim.rms_decay"),
            step_size: self.uint("optim.step_size"),
            gamma: self.float("optim.gamma"),
            weight_decay: self.float("optim.weight_decay"),
            epochs: self.uint("optim.epochs"),
            p: self.uint("optim.p"),
            k: self.uint("optim.k"),
            seed: self.seed(),
            grid_lr_mult: self.float("optim.grid_lr_mult"),
        })
    }

    /// `fill` is the per-channel erasing value, normally the training-set mean.
    pub fn aug_config(&self, fill: [f64; 3]) -> AugConfig {
        if !self.flag("aug.enabled") {
            return AugConfig {
                erase_fill: fill,
                ..AugConfig::disabled()
            };
        }
        AugConfig {
            flip_p: self.float("aug.flip_p"),
            crop_pad: self.uint("aug.crop_pad"),
            erase_p: self.float("aug.erase_p"),
            erase_area: (self.float("aug.erase_area_min"), self.float("aug.erase_area_max")),
            erase_aspect: (self.float("aug.erase_aspect_min"), self.float("aug.erase_aspect_max")),
            erase_fill: fill,
        }
    }

    pub fn checkpoint_every(&self) -> usize {
        self.uint("train.checkpoint_every")
    }

    pub fn record_wall_time(&self) -> bool {
        self.flag("train.record_wall_time")
    }

    pub fn metric(&self) -> Metric {
        self.parse_as("eval.metric")
    }

    pub fn max_rank(&self) -> usize {
        self.uint("eval.max_rank")
    }

    pub fn eval_batch(&self) -> usize {
        self.uint("eval.batch")
    }

    pub fn raw_pixel_embedding(&self) -> bool {
        self.get("eval.embedding") == "raw_pixels"
    }

    /// Every key with its effective value, one per line, sorted.
    pub fn resolved_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let p = dir.join(RESOLVED_FILE);
        std::fs::write(&p, self.resolved_text()).map_err(|e| Error::io(&p, e))
    }
}
