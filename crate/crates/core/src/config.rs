//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! one of [`KEYS`]; list values are comma separated. Overrides use the same
//! syntax and are applied after the file.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::datagen::{
    load_csv, make_synthetic, subset_target_classes, CsvSchema, Dataset, SynthConfig,
};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::textio::numbered_lines;
use crate::train::TrainConfig;

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "data",
    "source_csv",
    "target_csv",
    "target_classes",
    "num_source_classes",
    "num_target_classes",
    "samples_per_class_source",
    "samples_per_class_target",
    "feature_dim",
    "class_separation",
    "shift_angle",
    "shift_translation",
    "noise_std",
    "data_seed",
    "subset_k",
    "feature_dims",
    "discriminator_dims",
    "init_scale",
    "mode",
    "epochs",
    "batch_size",
    "eta0",
    "alpha",
    "decay",
    "momentum",
    "lambda_max",
    "lambda_ramp",
    "head_lr_multiplier",
    "freeze_class_weights",
    "class_weight_warmup",
    "seed",
    "out",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataKind,
    pub synth: SynthConfig,
    pub source_csv: Option<PathBuf>,
    pub target_csv: Option<PathBuf>,
    /// Declared target classes for unlabeled CSV targets.
    pub target_classes: Option<Vec<usize>>,
    /// Keep only the first `k` target classes after loading.
    pub subset_k: Option<usize>,
    pub feature_dims: Vec<usize>,
    pub discriminator_dims: Vec<usize>,
    pub init_scale: f64,
    /// `train.seed` also seeds parameter initialization.
    pub train: TrainConfig,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::new(2, 8);
        Self {
            data: DataKind::Synthetic,
            synth: SynthConfig::default(),
            source_csv: None,
            target_csv: None,
            target_classes: None,
            subset_k: None,
            feature_dims: model.feature_dims,
            discriminator_dims: model.discriminator_dims,
            init_scale: model.init_scale,
            train: TrainConfig::default(),
            out: PathBuf::from("out"),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{}`", value.trim())))
}

fn real(key: &str, value: &str) -> Result<f64> {
    let v: f64 = num(key, value)?;
    if !v.is_finite() {
        return Err(Error::config(key, "value must be finite"));
    }
    Ok(v)
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| num(key, v)).collect()
}

fn real_list(key: &str, value: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = list(key, value)?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::config(key, "values must be finite"));
    }
    Ok(v)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Defaults overlaid with the lines of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (line, content) in numbered_lines(text) {
            let content = content.trim();
            if content.starts_with('#') {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| {
                Error::parse(line, format!("expected key=value, got `{content}`"))
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config { key, msg } => Error::Config {
                    key,
                    msg: format!("{msg} (line {line})"),
                },
                other => other,
            })?;
        }
        Ok(cfg)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.synth;
        let t = &mut self.train;
        match key {
            "data" => {
                self.data = match value {
                    "synthetic" => DataKind::Synthetic,
                    "csv" => DataKind::Csv,
                    _ => return Err(Error::config(key, "expected `synthetic` or `csv`")),
                }
            }
            "source_csv" => self.source_csv = Some(PathBuf::from(value)),
            "target_csv" => self.target_csv = Some(PathBuf::from(value)),
            "target_classes" => {
                let v: Vec<usize> = list(key, value)?;
                self.target_classes = (!v.is_empty()).then_some(v);
            }
            "num_source_classes" => s.num_source_classes = num(key, value)?,
            "num_target_classes" => s.num_target_classes = num(key, value)?,
            "samples_per_class_source" => s.samples_per_class_source = num(key, value)?,
            "samples_per_class_target" => s.samples_per_class_target = num(key, value)?,
            "feature_dim" => s.feature_dim = num(key, value)?,
            "class_separation" => s.class_separation = real(key, value)?,
            "shift_angle" => s.shift.angle = real(key, value)?,
            "shift_translation" => s.shift.translation = real_list(key, value)?,
            "noise_std" => s.noise_std = real(key, value)?,
            "data_seed" => s.seed = num(key, value)?,
            "subset_k" => {
                let k: usize = num(key, value)?;
                self.subset_k = (k > 0).then_some(k);
            }
            "feature_dims" => self.feature_dims = list(key, value)?,
            "discriminator_dims" => self.discriminator_dims = list(key, value)?,
            "init_scale" => self.init_scale = real(key, value)?,
            "mode" => {
                t.mode = value
                    .parse()
                    .map_err(|e: Error| Error::config(key, e.to_string()))?
            }
            "epochs" => t.epochs = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "eta0" => t.eta0 = real(key, value)?,
            "alpha" => t.alpha = real(key, value)?,
            "decay" => t.decay = real(key, value)?,
            "momentum" => t.momentum = real(key, value)?,
            "lambda_max" => t.lambda_max = real(key, value)?,
            "lambda_ramp" => t.lambda_ramp = real(key, value)?,
            "head_lr_multiplier" => t.head_lr_multiplier = real(key, value)?,
            "freeze_class_weights" => t.freeze_class_weights = num(key, value)?,
            "class_weight_warmup" => t.class_weight_warmup = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "out" => self.out = PathBuf::from(value),
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Checks everything that can be checked without reading data files.
    pub fn validate(&self) -> Result<()> {
        fn wrap(key: &'static str) -> impl Fn(Error) -> Error {
            move |e| Error::config(key, e.to_string())
        }
        match self.data {
            DataKind::Synthetic => self.synth.validate().map_err(wrap("data"))?,
            DataKind::Csv => {
                if self.source_csv.is_none() {
                    return Err(Error::config("source_csv", "required when data=csv"));
                }
                if self.target_csv.is_none() {
                    return Err(Error::config("target_csv", "required when data=csv"));
                }
            }
        }
        self.train.validate()?;
        self.model_config(2, 2)
            .validate()
            .map_err(wrap("feature_dims"))?;
        Ok(())
    }

    /// Builds or loads the dataset and applies `subset_k`.
    pub fn load_dataset(&self) -> Result<Dataset> {
        self.validate()?;
        let ds = match self.data {
            DataKind::Synthetic => make_synthetic(&self.synth)?,
            DataKind::Csv => {
                let schema = CsvSchema {
                    target_classes: self.target_classes.clone(),
                };
                load_csv(
                    self.source_csv.as_ref().expect("validated"),
                    self.target_csv.as_ref().expect("validated"),
                    &schema,
                )?
            }
        };
        match self.subset_k {
            Some(k) => subset_target_classes(&ds, k),
            None => Ok(ds),
        }
    }

    pub fn model_config(&self, input_dim: usize, num_source_classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            feature_dims: self.feature_dims.clone(),
            num_source_classes,
            discriminator_dims: self.discriminator_dims.clone(),
            init_scale: self.init_scale,
            seed: self.train.seed,
        }
    }

    /// Writes every key; parsing the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let s = &self.synth;
        let t = &self.train;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k}={v}").unwrap();
        kv(
            "data",
            match self.data {
                DataKind::Synthetic => "synthetic".into(),
                DataKind::Csv => "csv".into(),
            },
        );
        if let Some(p) = &self.source_csv {
            kv("source_csv", p.display().to_string());
        }
        if let Some(p) = &self.target_csv {
            kv("target_csv", p.display().to_string());
        }
        if let Some(c) = &self.target_classes {
            kv("target_classes", join(c));
        }
        kv("num_source_classes", s.num_source_classes.to_string());
        kv("num_target_classes", s.num_target_classes.to_string());
        kv(
            "samples_per_class_source",
            s.samples_per_class_source.to_string(),
        );
        kv(
            "samples_per_class_target",
            s.samples_per_class_target.to_string(),
        );
        kv("feature_dim", s.feature_dim.to_string());
        kv("class_separation", s.class_separation.to_string());
        kv("shift_angle", s.shift.angle.to_string());
        kv("shift_translation", join(&s.shift.translation));
        kv("noise_std", s.noise_std.to_string());
        kv("data_seed", s.seed.to_string());
        kv("subset_k", self.subset_k.unwrap_or(0).to_string());
        kv("feature_dims", join(&self.feature_dims));
        kv("discriminator_dims", join(&self.discriminator_dims));
        kv("init_scale", self.init_scale.to_string());
        kv("mode", t.mode.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("eta0", t.eta0.to_string());
        kv("alpha", t.alpha.to_string());
        kv("decay", t.decay.to_string());
        kv("momentum", t.momentum.to_string());
        kv("lambda_max", t.lambda_max.to_string());
        kv("lambda_ramp", t.lambda_ramp.to_string());
        kv("head_lr_multiplier", t.head_lr_multiplier.to_string());
        kv("freeze_class_weights", t.freeze_class_weights.to_string());
        kv("class_weight_warmup", t.class_weight_warmup.to_string());
        kv("seed", t.seed.to_string());
        kv("out", self.out.display().to_string());
        out
    }
}
