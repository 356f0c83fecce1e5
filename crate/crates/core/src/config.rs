//! Run configuration: flat `section.key=value` lines.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; unknown or repeated keys are errors. [`RunConfig::to_text`]
//! writes the fully resolved configuration, which parses back to the same
//! value.

use std::fmt::Display;
use std::str::FromStr;

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::model::{BackboneSpec, ModelConfig, ModelKind, TapSpec};
use crate::saliency::SaliencyTarget;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: SyntheticConfig,
    pub kind: ModelKind,
    pub backbone: BackboneSpec,
    pub taps: TapSpec,
    /// `train.seed` is unused; each run takes its seed from `seeds`.
    pub train: TrainConfig,
    pub holdout: usize,
    /// Seed of the context split; each run's own seed when unset.
    pub split_seed: Option<u64>,
    pub seeds: Vec<u64>,
    pub saliency_target: SaliencyTarget,
    /// Number of test images `saliency` processes from a manifest.
    pub saliency_images: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: SyntheticConfig::default(),
            kind: ModelKind::Hypercolumn,
            backbone: BackboneSpec { width_multiplier: 0.125 },
            taps: TapSpec::desk_scale(),
            train: TrainConfig::default(),
            holdout: 3,
            split_seed: None,
            seeds: vec![0, 1, 2],
            saliency_target: SaliencyTarget::Logit,
            saliency_images: 50,
        }
    }
}

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| format!("invalid value `{value}`: {e}"))
}

fn parse_pair(value: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = value.split_once('x').ok_or_else(|| format!("expected HxW, got `{value}`"))?;
    Ok((parse(a.trim())?, parse(b.trim())?))
}

fn pair(p: (usize, usize)) -> String {
    format!("{}x{}", p.0, p.1)
}

fn list<T: Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every key, in output order.
    pub const KEYS: [&'static str; 25] = [
        "data.num_classes",
        "data.contexts_per_class",
        "data.images_per_context",
        "data.image_size",
        "data.seed",
        "model.kind",
        "model.width_multiplier",
        "taps.points",
        "taps.reduce_channels",
        "taps.upsample",
        "taps.pool_kernel",
        "taps.pool_stride",
        "taps.bias",
        "train.epochs",
        "train.batch_size",
        "train.lr0",
        "train.decay_factor",
        "train.decay_epoch",
        "train.momentum",
        "train.weight_decay",
        "split.holdout",
        "split.seed",
        "run.seeds",
        "saliency.target",
        "saliency.images",
    ];

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |key: &str, msg: String| Error::Config { line: i + 1, key: key.to_string(), msg };
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(line, "expected key=value".into()));
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) && Self::KEYS.contains(&key) {
                return Err(err(key, "key given more than once".into()));
            }
            cfg.set(key, value).map_err(|msg| err(key, msg))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "data.num_classes" => self.data.num_classes = parse(value)?,
            "data.contexts_per_class" => self.data.contexts_per_class = parse(value)?,
            "data.images_per_context" => self.data.images_per_context = parse(value)?,
            "data.image_size" => self.data.image_size = parse_pair(value)?,
            "data.seed" => self.data.seed = parse(value)?,
            "model.kind" => self.kind = parse(value)?,
            "model.width_multiplier" => self.backbone.width_multiplier = parse(value)?,
            "taps.points" => {
                self.taps.tap_points = value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
            }
            "taps.reduce_channels" => self.taps.reduce_channels = parse(value)?,
            "taps.upsample" => self.taps.upsample_to = if value == "input" { None } else { Some(parse_pair(value)?) },
            "taps.pool_kernel" => self.taps.pool_kernel = parse_pair(value)?,
            "taps.pool_stride" => self.taps.pool_stride = parse_pair(value)?,
            "taps.bias" => self.taps.bias = parse(value)?,
            "train.epochs" => self.train.epochs = parse(value)?,
            "train.batch_size" => self.train.batch_size = parse(value)?,
            "train.lr0" => self.train.lr0 = parse(value)?,
            "train.decay_factor" => self.train.decay_factor = parse(value)?,
            "train.decay_epoch" => self.train.decay_epoch = parse(value)?,
            "train.momentum" => self.train.momentum = parse(value)?,
            "train.weight_decay" => self.train.weight_decay = parse(value)?,
            "split.holdout" => self.holdout = parse(value)?,
            "split.seed" => self.split_seed = if value == "run" { None } else { Some(parse(value)?) },
            "run.seeds" => {
                self.seeds = value.split(',').map(|s| parse(s.trim())).collect::<std::result::Result<_, _>>()?;
                if self.seeds.is_empty() {
                    return Err("at least one seed is required".into());
                }
            }
            "saliency.target" => self.saliency_target = parse(value)?,
            "saliency.images" => self.saliency_images = parse(value)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "data.num_classes" => self.data.num_classes.to_string(),
            "data.contexts_per_class" => self.data.contexts_per_class.to_string(),
            "data.images_per_context" => self.data.images_per_context.to_string(),
            "data.image_size" => pair(self.data.image_size),
            "data.seed" => self.data.seed.to_string(),
            "model.kind" => self.kind.to_string(),
            "model.width_multiplier" => self.backbone.width_multiplier.to_string(),
            "taps.points" => self.taps.tap_points.join(","),
            "taps.reduce_channels" => self.taps.reduce_channels.to_string(),
            "taps.upsample" => self.taps.upsample_to.map_or_else(|| "input".into(), pair),
            "taps.pool_kernel" => pair(self.taps.pool_kernel),
            "taps.pool_stride" => pair(self.taps.pool_stride),
            "taps.bias" => self.taps.bias.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.lr0" => self.train.lr0.to_string(),
            "train.decay_factor" => self.train.decay_factor.to_string(),
            "train.decay_epoch" => self.train.decay_epoch.to_string(),
            "train.momentum" => self.train.momentum.to_string(),
            "train.weight_decay" => self.train.weight_decay.to_string(),
            "split.holdout" => self.holdout.to_string(),
            "split.seed" => self.split_seed.map_or_else(|| "run".into(), |s| s.to_string()),
            "run.seeds" => list(&self.seeds),
            "saliency.target" => self.saliency_target.to_string(),
            "saliency.images" => self.saliency_images.to_string(),
            _ => unreachable!("unlisted key {key}"),
        }
    }

    /// The resolved configuration, one `key=value` per line.
    pub fn to_text(&self) -> String {
        Self::KEYS.iter().map(|k| format!("{k}={}\n", self.get(k))).collect()
    }

    /// Configuration of a single run: one seed and an explicit split seed.
    pub fn for_seed(&self, seed: u64) -> Self {
        Self { seeds: vec![seed], split_seed: Some(self.split_seed.unwrap_or(seed)), ..self.clone() }
    }

    pub fn split_seed_for(&self, seed: u64) -> u64 {
        self.split_seed.unwrap_or(seed)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            kind: self.kind,
            backbone: self.backbone.clone(),
            taps: self.taps.clone(),
            num_classes: self.data.num_classes,
            input_size: self.data.image_size,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.model_config().validate()?;
        if self.holdout >= self.data.contexts_per_class {
            return Err(Error::invalid(
                "config",
                format!("split.holdout={} needs more than that many contexts per class", self.holdout),
            ));
        }
        Ok(())
    }
}
