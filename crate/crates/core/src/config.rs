//! Run configuration: a line-based `key = value` format with `[section]`
//! headers or dotted keys, `#` comments, and command-line overrides.
//!
//! ```text
//! [model]
//! dim = 64
//! inversion.v = 4
//! ```
//!
//! A key given under a section header is prefixed by that section unless it
//! already contains a dot. Unknown keys, malformed values and constraint
//! violations are reported with their line number.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::{DatasetConfig, DistillConfig, SHAPES};
use crate::inversion::{Criterion, InversionConfig, Method};
use crate::vit::{TrainConfig, ViTConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ViTConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub inversion: InversionConfig,
    pub distill: DistillConfig,
    /// Synthetic images per distilled student.
    pub images: usize,
    /// Independent seeds per comparison experiment.
    pub seeds: usize,
    /// Target class of one-class distillation.
    pub target: usize,
    pub criteria: Vec<Criterion>,
    pub methods: Vec<Method>,
    /// Base seed of the command's stochastic choices.
    pub seed: u64,
    pub threads: usize,
    pub out: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ViTConfig::default(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            inversion: InversionConfig::default(),
            distill: DistillConfig::default(),
            images: 64,
            seeds: 3,
            target: 0,
            criteria: Criterion::ALL.to_vec(),
            methods: vec![Method::Dmi, Method::Smi, Method::Pri],
            seed: 0,
            threads: 1,
            out: "out".into(),
        }
    }
}

fn parse_num<T: FromStr>(value: &str, line: usize, key: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        line,
        message: format!("{key}: cannot parse {value:?} as {}", std::any::type_name::<T>()),
    })
}

fn parse_list<T>(value: &str, line: usize, key: &str, f: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| f(s).ok_or_else(|| Error::Config { line, message: format!("{key}: unknown entry {s:?}") }))
        .collect()
}

fn parse_schedule(value: &str, line: usize) -> Result<Vec<(usize, f64)>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (it, ratio) = item.split_once(':').ok_or_else(|| Error::Config {
                line,
                message: format!("inversion.schedule: expected iteration:ratio, got {item:?}"),
            })?;
            Ok((parse_num(it.trim(), line, "inversion.schedule")?, parse_num(ratio.trim(), line, "inversion.schedule")?))
        })
        .collect()
}

impl RunConfig {
    /// Every accepted key, in the order [`RunConfig::to_text`] writes them.
    pub const KEYS: &'static [&'static str] = &[
        "model.height",
        "model.width",
        "model.channels",
        "model.patch",
        "model.dim",
        "model.layers",
        "model.heads",
        "model.classes",
        "model.importance_layer",
        "dataset.train_per_class",
        "dataset.val_per_class",
        "dataset.noise",
        "dataset.seed",
        "train.epochs",
        "train.batch_size",
        "train.lr",
        "inversion.iterations",
        "inversion.tv_weight",
        "inversion.lr",
        "inversion.beta1",
        "inversion.beta2",
        "inversion.eps",
        "inversion.method",
        "inversion.v",
        "inversion.schedule",
        "inversion.criterion",
        "inversion.select_at",
        "inversion.sparsity",
        "distill.temperature",
        "distill.lr",
        "distill.momentum",
        "distill.weight_decay",
        "distill.batch_size",
        "distill.epochs",
        "distill.max_batches",
        "distill.seed",
        "experiment.images",
        "experiment.seeds",
        "experiment.target",
        "experiment.criteria",
        "experiment.methods",
        "run.seed",
        "run.threads",
        "run.out",
    ];

    /// Assign one key; `line` is used for error reporting only.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let v = value.trim();
        let n = |k: &str| parse_num::<usize>(v, line, k);
        let f = |k: &str| parse_num::<f64>(v, line, k);
        match key {
            "model.height" => self.model.image_height = n(key)?,
            "model.width" => self.model.image_width = n(key)?,
            "model.channels" => self.model.channels = n(key)?,
            "model.patch" => self.model.patch_size = n(key)?,
            "model.dim" => self.model.dim = n(key)?,
            "model.layers" => self.model.layers = n(key)?,
            "model.heads" => self.model.heads = n(key)?,
            "model.classes" => self.model.classes = n(key)?,
            "model.importance_layer" => {
                self.model.importance_layer = if v == "last" { None } else { Some(n(key)?) }
            }
            "dataset.train_per_class" => self.dataset.train_per_class = n(key)?,
            "dataset.val_per_class" => self.dataset.val_per_class = n(key)?,
            "dataset.noise" => self.dataset.noise = f(key)?,
            "dataset.seed" => self.dataset.seed = parse_num(v, line, key)?,
            "train.epochs" => self.train.epochs = n(key)?,
            "train.batch_size" => self.train.batch_size = n(key)?,
            "train.lr" => self.train.lr = f(key)?,
            "inversion.iterations" => self.inversion.iterations = n(key)?,
            "inversion.tv_weight" => self.inversion.tv_weight = f(key)?,
            "inversion.lr" => self.inversion.adam.lr = f(key)?,
            "inversion.beta1" => self.inversion.adam.beta1 = f(key)?,
            "inversion.beta2" => self.inversion.adam.beta2 = f(key)?,
            "inversion.eps" => self.inversion.adam.eps = f(key)?,
            "inversion.method" => {
                self.inversion.method = Method::parse(v)
                    .ok_or_else(|| Error::Config { line, message: format!("{key}: unknown method {v:?}") })?
            }
            "inversion.v" => self.inversion.v = n(key)?,
            "inversion.schedule" => self.inversion.schedule = parse_schedule(v, line)?,
            "inversion.criterion" => {
                self.inversion.criterion = Criterion::parse(v)
                    .ok_or_else(|| Error::Config { line, message: format!("{key}: unknown criterion {v:?}") })?
            }
            "inversion.select_at" => self.inversion.select_at = n(key)?,
            "inversion.sparsity" => self.inversion.sparsity = f(key)?,
            "distill.temperature" => self.distill.temperature = f(key)?,
            "distill.lr" => self.distill.sgd.lr = f(key)?,
            "distill.momentum" => self.distill.sgd.momentum = f(key)?,
            "distill.weight_decay" => self.distill.sgd.weight_decay = f(key)?,
            "distill.batch_size" => self.distill.batch_size = n(key)?,
            "distill.epochs" => self.distill.epochs = n(key)?,
            "distill.max_batches" => {
                self.distill.max_batches = if v == "none" { None } else { Some(n(key)?) }
            }
            "distill.seed" => self.distill.seed = parse_num(v, line, key)?,
            "experiment.images" => self.images = n(key)?,
            "experiment.seeds" => self.seeds = n(key)?,
            "experiment.target" => self.target = n(key)?,
            "experiment.criteria" => self.criteria = parse_list(v, line, key, Criterion::parse)?,
            "experiment.methods" => self.methods = parse_list(v, line, key, Method::parse)?,
            "run.seed" => self.seed = parse_num(v, line, key)?,
            "run.threads" => self.threads = n(key)?,
            "run.out" => self.out = v.to_string(),
            _ => return Err(Error::Config { line, message: format!("unknown key {key:?}") }),
        }
        Ok(())
    }

    /// Apply file text on top of `self`, without validating.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| Error::Config {
                    line,
                    message: format!("malformed section header {content:?}"),
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                message: format!("expected key = value, got {content:?}"),
            })?;
            let key = key.trim();
            let full = if section.is_empty() || key.contains('.') { key.to_string() } else { format!("{section}.{key}") };
            self.set(&full, value, line)?;
        }
        Ok(())
    }

    /// Parse and validate configuration text over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Apply `key=value` overrides; errors report line 0.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let (k, v) = item.split_once('=').ok_or_else(|| Error::Config {
                line: 0,
                message: format!("override {item:?} is not key=value"),
            })?;
            self.set(k.trim(), v, 0)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::Config { .. } => e,
            other => Error::Config { line: 0, message: other.to_string() },
        };
        self.model.validate().map_err(wrap)?;
        if self.model.classes > SHAPES.len() {
            return Err(Error::Config {
                line: 0,
                message: format!("toy dataset supports at most {} classes", SHAPES.len()),
            });
        }
        let mut inv = self.inversion.clone();
        if inv.method == Method::Pri || self.methods.contains(&Method::Pri) {
            inv.method = Method::Pri;
            inv.validate(self.model.num_patches()).map_err(wrap)?;
        }
        for m in [Method::Smi, Method::Dmi, Method::FixedSelection] {
            if self.inversion.method == m || self.methods.contains(&m) {
                inv.method = m;
                inv.validate(self.model.num_patches()).map_err(wrap)?;
            }
        }
        self.distill.validate().map_err(wrap)?;
        if self.target >= self.model.classes {
            return Err(Error::Config {
                line: 0,
                message: format!("experiment.target {} out of range for {} classes", self.target, self.model.classes),
            });
        }
        if self.threads == 0 {
            return Err(Error::Config { line: 0, message: "run.threads must be at least 1".into() });
        }
        Ok(())
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig { classes: self.model.classes, ..self.dataset.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    /// Text form that parses back to an identical configuration.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let inv = &self.inversion;
        let d = &self.distill;
        let list = |xs: Vec<&str>| xs.join(",");
        let mut out = String::new();
        let mut section = "";
        for &key in Self::KEYS {
            let (sec, name) = key.split_once('.').expect("dotted key");
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                section = sec;
            }
            let value = match key {
                "model.height" => m.image_height.to_string(),
                "model.width" => m.image_width.to_string(),
                "model.channels" => m.channels.to_string(),
                "model.patch" => m.patch_size.to_string(),
                "model.dim" => m.dim.to_string(),
                "model.layers" => m.layers.to_string(),
                "model.heads" => m.heads.to_string(),
                "model.classes" => m.classes.to_string(),
                "model.importance_layer" => m.importance_layer.map_or("last".into(), |l| l.to_string()),
                "dataset.train_per_class" => self.dataset.train_per_class.to_string(),
                "dataset.val_per_class" => self.dataset.val_per_class.to_string(),
                "dataset.noise" => format!("{:?}", self.dataset.noise),
                "dataset.seed" => self.dataset.seed.to_string(),
                "train.epochs" => self.train.epochs.to_string(),
                "train.batch_size" => self.train.batch_size.to_string(),
                "train.lr" => format!("{:?}", self.train.lr),
                "inversion.iterations" => inv.iterations.to_string(),
                "inversion.tv_weight" => format!("{:?}", inv.tv_weight),
                "inversion.lr" => format!("{:?}", inv.adam.lr),
                "inversion.beta1" => format!("{:?}", inv.adam.beta1),
                "inversion.beta2" => format!("{:?}", inv.adam.beta2),
                "inversion.eps" => format!("{:?}", inv.adam.eps),
                "inversion.method" => inv.method.name().into(),
                "inversion.v" => inv.v.to_string(),
                "inversion.schedule" => inv
                    .schedule
                    .iter()
                    .map(|(i, r)| format!("{i}:{r:?}"))
                    .collect::<Vec<_>>()
                    .join(","),
                "inversion.criterion" => inv.criterion.name().into(),
                "inversion.select_at" => inv.select_at.to_string(),
                "inversion.sparsity" => format!("{:?}", inv.sparsity),
                "distill.temperature" => format!("{:?}", d.temperature),
                "distill.lr" => format!("{:?}", d.sgd.lr),
                "distill.momentum" => format!("{:?}", d.sgd.momentum),
                "distill.weight_decay" => format!("{:?}", d.sgd.weight_decay),
                "distill.batch_size" => d.batch_size.to_string(),
                "distill.epochs" => d.epochs.to_string(),
                "distill.max_batches" => d.max_batches.map_or("none".into(), |b| b.to_string()),
                "distill.seed" => d.seed.to_string(),
                "experiment.images" => self.images.to_string(),
                "experiment.seeds" => self.seeds.to_string(),
                "experiment.target" => self.target.to_string(),
                "experiment.criteria" => list(self.criteria.iter().map(|c| c.name()).collect()),
                "experiment.methods" => list(self.methods.iter().map(|m| m.name()).collect()),
                "run.seed" => self.seed.to_string(),
                "run.threads" => self.threads.to_string(),
                "run.out" => self.out.clone(),
                _ => unreachable!("every key is rendered"),
            };
            let _ = writeln!(out, "{name} = {value}");
        }
        out
    }
}
