//! Run configuration files: TOML with `[data]`, `[model]`, `[train]`,
//! `[parts]` and `[synthetic]` sections.
//!
//! Missing keys take the defaults of the selected preset, unknown keys are
//! rejected, and `section.key=value` overrides are applied last.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::attention::AttentionKind;
use crate::data::synthetic::SyntheticConfig;
use crate::error::{ReidError, Result};
use crate::fusion::FusionMode;
use crate::network::{Preset, Variant};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Manifest to train and evaluate on; the in-memory synthetic dataset otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Checkpoint to evaluate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    pub variant: Variant,
    pub attention: AttentionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionMode>,
    pub global_weight: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lambda: f64,
    pub lr: f64,
    pub lr_step: usize,
    pub lr_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartsSection {
    /// Region overlap as a fraction of the body height.
    pub beta_frac: f64,
    /// Joints below this confidence are filled from the canonical pose.
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub parts: PartsSection,
    pub synthetic: SyntheticConfig,
}

impl RunConfig {
    pub fn for_preset(preset: Preset) -> Self {
        Self::from_train(&TrainConfig::for_preset(preset), PathBuf::from("out"))
    }

    pub fn from_train(t: &TrainConfig, out_dir: PathBuf) -> Self {
        Self {
            data: DataSection {
                manifest: None,
                out_dir,
                checkpoint: None,
            },
            model: ModelSection {
                preset: t.preset,
                variant: t.variant,
                attention: t.attention,
                fusion: t.fusion,
                global_weight: t.global_weight,
            },
            train: TrainSection {
                lambda: t.lambda,
                lr: t.lr,
                lr_step: t.lr_step,
                lr_factor: t.lr_factor,
                epochs: t.epochs,
                batch_size: t.batch_size,
                dropout: t.dropout,
                momentum: t.momentum,
                weight_decay: t.weight_decay,
                seed: t.seed,
                checkpoint_every: t.checkpoint_every,
            },
            parts: PartsSection {
                beta_frac: t.beta_frac,
                tau: t.tau,
            },
            synthetic: SyntheticConfig::default(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            preset: self.model.preset,
            variant: self.model.variant,
            attention: self.model.attention,
            fusion: self.model.fusion,
            global_weight: self.model.global_weight,
            lambda: self.train.lambda,
            lr: self.train.lr,
            lr_step: self.train.lr_step,
            lr_factor: self.train.lr_factor,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            dropout: self.train.dropout,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            seed: self.train.seed,
            beta_frac: self.parts.beta_frac,
            tau: self.parts.tau,
            checkpoint_every: self.train.checkpoint_every,
        }
    }

    /// Resolves `text` (possibly empty) and `overrides` against the defaults of
    /// the preset they select.
    pub fn resolve(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let file: Table = toml::from_str(text).map_err(|e| ReidError::Config(e.to_string()))?;
        let mut layered = Table::new();
        merge(&mut layered, file);
        for (key, value) in overrides {
            set_path(&mut layered, key, parse_value(value))?;
        }
        let preset = match layered
            .get("model")
            .and_then(|m| m.get("preset"))
            .map(|v| v.as_str().ok_or(v))
        {
            Some(Ok(name)) => name.parse()?,
            Some(Err(v)) => return Err(ReidError::Config(format!("model.preset must be a string, got {v}"))),
            None => Preset::Desk,
        };
        let defaults = Table::try_from(Self::for_preset(preset)).map_err(|e| ReidError::Config(e.to_string()))?;
        let mut resolved = defaults;
        merge(&mut resolved, layered);
        let config: RunConfig = resolved
            .try_into()
            .map_err(|e: toml::de::Error| ReidError::Config(e.to_string()))?;
        config.train_config().validate()?;
        config.synthetic.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ReidError::io(path, e))?;
        Self::resolve(&text, overrides).map_err(|e| match e {
            ReidError::Config(m) => ReidError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes `resolved_config.toml` into the output directory.
    pub fn echo(&self) -> Result<PathBuf> {
        let dir = &self.data.out_dir;
        fs::create_dir_all(dir).map_err(|e| ReidError::io(dir, e))?;
        let path = dir.join("resolved_config.toml");
        fs::write(&path, self.to_toml()).map_err(|e| ReidError::io(&path, e))?;
        Ok(path)
    }
}

/// Overlays `top` onto `base`, recursing into tables.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// A TOML scalar when `raw` parses as one, a string otherwise.
fn parse_value(raw: &str) -> Value {
    let probe = format!("v = {raw}");
    match toml::from_str::<Table>(&probe) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let Some((section, field)) = key.split_once('.') else {
        return Err(ReidError::Config(format!(
            "override {key:?} must have the form section.key"
        )));
    };
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    match entry {
        Value::Table(t) => {
            t.insert(field.to_string(), value);
            Ok(())
        }
        _ => Err(ReidError::Config(format!("{section} is not a section"))),
    }
}
