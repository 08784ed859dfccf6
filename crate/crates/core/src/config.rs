//! Flat `key = value` configuration files.
//!
//! ```text
//! # model
//! stage_widths = 16,32,64,64,64
//! variant = +cam+msffm
//! lr_schedule = poly:0.9
//! ```
//!
//! Blank lines and `#` comments are ignored. Unknown and repeated keys are
//! errors. Keys not present keep their defaults. [`RunConfig::render`]
//! writes every key, and parsing the result gives back the same config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{ModelConfig, Variant};
use crate::train::{ClassWeighting, LrSchedule, TrainConfig};

/// Environment variable that overrides the training seed.
pub const SEED_ENV: &str = "PSEG_SEED";

pub const MODEL_KEYS: &[&str] = &[
    "in_channels",
    "num_classes",
    "stage_widths",
    "stage_blocks",
    "output_stride",
    "msffm_compression",
    "cam_reduction",
    "aspp_rates",
    "aspp_width",
    "attention_cap",
];

pub const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "lr",
    "momentum",
    "weight_decay",
    "lr_schedule",
    "class_weights",
    "seed",
    "eval_interval",
    "variant",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse_pairs(text: &str, allowed: &[&str]) -> Result<BTreeMap<String, (usize, String)>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !allowed.contains(&k) {
            return Err(Error::Config(format!("line {}: unknown key {k:?}; known keys: {}", i + 1, allowed.join(", "))));
        }
        if out.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
            return Err(Error::Config(format!("line {}: key {k:?} given twice", i + 1)));
        }
    }
    Ok(out)
}

fn value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("line {line}: cannot parse {key} = {v:?}")))
}

fn list<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| value(line, key, p.trim())).collect()
}

fn array5(line: usize, key: &str, v: &str) -> Result<[usize; 5]> {
    let xs: Vec<usize> = list(line, key, v)?;
    xs.try_into()
        .map_err(|xs: Vec<usize>| Error::Config(format!("line {line}: {key} needs 5 values, got {}", xs.len())))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn apply_model(m: &mut ModelConfig, key: &str, line: usize, v: &str) -> Result<bool> {
    match key {
        "in_channels" => m.in_channels = value(line, key, v)?,
        "num_classes" => m.num_classes = value(line, key, v)?,
        "stage_widths" => m.stage_widths = array5(line, key, v)?,
        "stage_blocks" => m.stage_blocks = array5(line, key, v)?,
        "output_stride" => m.output_stride = value(line, key, v)?,
        "msffm_compression" => m.msffm_compression = value(line, key, v)?,
        "cam_reduction" => m.cam_reduction = value(line, key, v)?,
        "aspp_rates" => m.aspp_rates = list(line, key, v)?,
        "aspp_width" => m.aspp_width = value(line, key, v)?,
        "attention_cap" => m.attention_cap = value(line, key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn render_model(out: &mut String, m: &ModelConfig) {
    let _ = writeln!(out, "in_channels = {}", m.in_channels);
    let _ = writeln!(out, "num_classes = {}", m.num_classes);
    let _ = writeln!(out, "stage_widths = {}", join(&m.stage_widths));
    let _ = writeln!(out, "stage_blocks = {}", join(&m.stage_blocks));
    let _ = writeln!(out, "output_stride = {}", m.output_stride);
    let _ = writeln!(out, "msffm_compression = {}", m.msffm_compression);
    let _ = writeln!(out, "cam_reduction = {}", m.cam_reduction);
    let _ = writeln!(out, "aspp_rates = {}", join(&m.aspp_rates));
    let _ = writeln!(out, "aspp_width = {}", m.aspp_width);
    let _ = writeln!(out, "attention_cap = {}", m.attention_cap);
}

impl FromStr for LrSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "constant" => Ok(LrSchedule::Constant),
            Some(("poly", p)) => p
                .trim()
                .parse()
                .map(LrSchedule::Poly)
                .map_err(|_| Error::Config(format!("bad poly power {p:?}"))),
            _ => Err(Error::Config(format!("lr_schedule must be `constant` or `poly:<power>`, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LrSchedule::Constant => f.write_str("constant"),
            LrSchedule::Poly(p) => write!(f, "poly:{p:?}"),
        }
    }
}

impl FromStr for ClassWeighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ClassWeighting::None),
            "inverse_frequency" => Ok(ClassWeighting::InverseFrequency),
            _ => s
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(ClassWeighting::Fixed)
                .map_err(|_| Error::Config(format!("class_weights must be none, inverse_frequency or a weight list, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for ClassWeighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClassWeighting::None => f.write_str("none"),
            ClassWeighting::InverseFrequency => f.write_str("inverse_frequency"),
            ClassWeighting::Fixed(w) => {
                let parts: Vec<String> = w.iter().map(|v| format!("{v:?}")).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let keys: Vec<&str> = MODEL_KEYS.iter().chain(TRAIN_KEYS).copied().collect();
        let mut cfg = RunConfig::default();
        for (key, (line, v)) in parse_pairs(text, &keys)? {
            if apply_model(&mut cfg.model, &key, line, &v)? {
                continue;
            }
            let t = &mut cfg.train;
            match key.as_str() {
                "epochs" => t.epochs = value(line, &key, &v)?,
                "lr" => t.lr = value(line, &key, &v)?,
                "momentum" => t.momentum = value(line, &key, &v)?,
                "weight_decay" => t.weight_decay = value(line, &key, &v)?,
                "lr_schedule" => t.schedule = v.parse()?,
                "class_weights" => t.class_weights = v.parse()?,
                "seed" => t.seed = value(line, &key, &v)?,
                "eval_interval" => t.eval_interval = value(line, &key, &v)?,
                "variant" => t.variant = v.parse()?,
                _ => unreachable!("key list and match arms agree"),
            }
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("# model\n");
        render_model(&mut out, &self.model);
        let t = &self.train;
        out.push_str("\n# training\n");
        let _ = writeln!(out, "epochs = {}", t.epochs);
        let _ = writeln!(out, "lr = {:?}", t.lr);
        let _ = writeln!(out, "momentum = {:?}", t.momentum);
        let _ = writeln!(out, "weight_decay = {:?}", t.weight_decay);
        let _ = writeln!(out, "lr_schedule = {}", t.schedule);
        let _ = writeln!(out, "class_weights = {}", t.class_weights);
        let _ = writeln!(out, "seed = {}", t.seed);
        let _ = writeln!(out, "eval_interval = {}", t.eval_interval);
        let _ = writeln!(out, "variant = {}", t.variant);
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `PSEG_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }
}

/// Model keys plus `variant`, as stored in checkpoints.
pub fn render_model_block(model: &ModelConfig, variant: Variant) -> String {
    let mut out = String::new();
    render_model(&mut out, model);
    let _ = writeln!(out, "variant = {variant}");
    out
}

pub fn parse_model_block(text: &str) -> Result<(ModelConfig, Variant)> {
    let keys: Vec<&str> = MODEL_KEYS.iter().copied().chain(["variant"]).collect();
    let pairs = parse_pairs(text, &keys)?;
    let mut model = ModelConfig::default();
    let mut variant = None;
    for (key, (line, v)) in pairs {
        if !apply_model(&mut model, &key, line, &v)? {
            variant = Some(v.parse()?);
        }
    }
    model.validate()?;
    Ok((model, variant.ok_or_else(|| Error::Config("missing variant".into()))?))
}
