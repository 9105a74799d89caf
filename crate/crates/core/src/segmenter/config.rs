//! Training configuration, named presets and TOML overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::VitConfig;
use crate::cam::Thresholds;
use crate::ctc::CropConfig;
use crate::error::{Error, Result};
use crate::ptc::PtcMode;
use crate::segmenter::losses::LossWeights;
use crate::segmenter::par::ParConfig;
use crate::segmenter::schedule::ScheduleConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train_samples: usize,
    pub eval_samples: usize,
    /// Seed of the synthetic dataset, independent of the training seed.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: VitConfig,
    pub classes: usize,
    pub decoder_hidden: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub thresholds: Thresholds,
    pub tau: f64,
    pub rho: f64,
    pub eps: f64,
    pub lambda: LossWeights,
    pub ptc_mode: PtcMode,
    pub crop: CropConfig,
    pub augment: bool,
    pub par: ParConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub data: DataConfig,
    /// Background threshold for scoring CAMs as label maps.
    pub eval_bg_threshold: f64,
    pub log_every: usize,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 64² synthetic shapes, depth-6 ViT, 3000 iterations.
    Desk,
    /// Reference-scale ViT-B/16 at 448² with the published constants.
    Paper,
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn desk() -> Self {
        Self {
            model: VitConfig::default(),
            classes: 3,
            decoder_hidden: 64,
            proj_hidden: 128,
            proj_dim: 64,
            thresholds: Thresholds { low: 0.25, high: 0.7 },
            tau: 0.5,
            rho: 0.9,
            eps: 1e-8,
            lambda: LossWeights {
                ptc: 0.2,
                ctc: 0.5,
                seg: 0.1,
            },
            ptc_mode: PtcMode::Abs,
            crop: CropConfig::default(),
            augment: true,
            par: ParConfig::default(),
            schedule: ScheduleConfig {
                lr_max: 5e-4,
                lr_floor: 1e-6,
                warmup_iters: 100,
                total_iters: 3000,
                poly_power: 0.9,
            },
            optimizer: OptimizerConfig {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.01,
            },
            batch_size: 8,
            seed: 0,
            data: DataConfig {
                train_samples: 2048,
                eval_samples: 128,
                seed: 1234,
            },
            eval_bg_threshold: 0.5,
            log_every: 10,
            checkpoint_every: 1000,
        }
    }

    pub fn paper() -> Self {
        Self {
            model: VitConfig {
                image_size: 448,
                patch_size: 16,
                depth: 12,
                dim: 768,
                heads: 12,
                mlp_ratio: 4.0,
                aux_block: 10,
                channels: 3,
            },
            classes: 20,
            decoder_hidden: 256,
            proj_hidden: 768,
            proj_dim: 256,
            crop: CropConfig {
                local_size: 96,
                ..CropConfig::default()
            },
            schedule: ScheduleConfig {
                lr_max: 6e-5,
                lr_floor: 1e-6,
                warmup_iters: 1500,
                total_iters: 20_000,
                poly_power: 0.9,
            },
            batch_size: 4,
            data: DataConfig {
                train_samples: 10_582,
                eval_samples: 1449,
                seed: 1234,
            },
            checkpoint_every: 5000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.thresholds.validate()?;
        if self.classes == 0 || self.classes >= 255 {
            return Err(Error::config(format!("class count {} out of range", self.classes)));
        }
        for (name, v) in [
            ("lambda.ptc", self.lambda.ptc),
            ("lambda.ctc", self.lambda.ctc),
            ("lambda.seg", self.lambda.seg),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(format!("{name} = {v} must be non-negative")));
            }
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("tau must be positive"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config("rho must lie in [0, 1]"));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::config("eps must be non-negative"));
        }
        let s = &self.schedule;
        if s.warmup_iters >= s.total_iters {
            return Err(Error::config(format!(
                "warmup_iters {} must be below total_iters {}",
                s.warmup_iters, s.total_iters
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        let side = self.crop.local_size;
        if side == 0 || !side.is_multiple_of(self.model.patch_size) || side > self.model.image_size {
            return Err(Error::config(format!(
                "local crop size {side} must be a positive multiple of the patch size within the image"
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Merges a (possibly partial) TOML table over this config. Unknown keys
    /// are rejected.
    pub fn merge_toml(&self, overrides: &toml::Table) -> Result<Self> {
        let mut base = toml::Table::try_from(self).map_err(|e| Error::config(e.to_string()))?;
        merge_tables(&mut base, overrides, "")?;
        let merged: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        merged.validate()?;
        Ok(merged)
    }

    /// Applies `dotted.key=value` assignments, with values parsed as TOML
    /// (bare words fall back to strings).
    pub fn with_assignments<S: AsRef<str>>(&self, assignments: &[S]) -> Result<Self> {
        let mut table = toml::Table::new();
        for a in assignments {
            let a = a.as_ref();
            let (key, raw) = a
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {a:?} is not key=value")))?;
            let value = parse_value(raw.trim());
            insert_dotted(&mut table, key.trim(), value);
        }
        self.merge_toml(&table)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn insert_dotted(table: &mut toml::Table, key: &str, value: toml::Value) {
    match key.split_once('.') {
        Some((head, rest)) => {
            let entry = table
                .entry(head.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            if let toml::Value::Table(t) = entry {
                insert_dotted(t, rest, value);
            }
        }
        None => {
            table.insert(key.to_string(), value);
        }
    }
}

fn merge_tables(base: &mut toml::Table, over: &toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in over {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o, &path)?,
            (Some(slot), v) => {
                // integers are accepted where floats are expected
                *slot = match (&*slot, v) {
                    (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(*i as f64),
                    _ => v.clone(),
                };
            }
            (None, _) => return Err(Error::config(format!("unknown configuration key {path}"))),
        }
    }
    Ok(())
}
