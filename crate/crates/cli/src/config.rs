//! Flat `key = value` run configuration.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file, each
//! `--set` in order, then `DPCNET_SEED` for `train.seed`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use dpcnet_core::attention::SaOrder;
use dpcnet_core::gradcheck::GradCheckConfig;
use dpcnet_core::net::{Fusion, ModelConfig};
use dpcnet_core::train::{Stage, TrainConfig};
use thiserror::Error;

pub const SEED_ENV: &str = "DPCNET_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{origin}: unknown configuration key `{key}`")]
    UnknownKey { key: String, origin: String },

    #[error("{origin}: invalid value `{value}` for `{key}`: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
        origin: String,
    },

    #[error("{origin}: expected `key = value`, got `{line}`")]
    Syntax { origin: String, line: String },

    #[error("cannot read config file {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Invalid(#[from] dpcnet_core::Error),
}

/// Every setting the command line understands.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    pub gradcheck: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig {
                model: ModelConfig::default(),
                ..TrainConfig::default()
            },
            data_root: PathBuf::from("data/synthetic/train"),
            out_dir: PathBuf::from("runs/latest"),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

/// All keys in echo order.
pub const KEYS: &[&str] = &[
    "model.base_channels",
    "model.blocks",
    "model.heads",
    "model.window",
    "model.ffn_expansion",
    "model.frequency_branch",
    "model.fusion",
    "model.spatial_sa",
    "model.channel_sa",
    "model.sa_order",
    "train.seed",
    "train.steps",
    "train.lr_max",
    "train.lr_min",
    "train.stages",
    "train.clip_norm",
    "train.eval_every",
    "train.checkpoint_every",
    "train.flip",
    "train.loss_l1",
    "train.loss_perceptual",
    "train.loss_fft",
    "data.root",
    "out.dir",
    "gradcheck.step",
    "gradcheck.tolerance",
    "gradcheck.samples",
    "gradcheck.trials",
    "gradcheck.seed",
];

fn parse_bool(v: &str) -> Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err("expected on/off".into()),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn parse_triple(v: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|s| parse_num::<usize>(s.trim()))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|p: Vec<usize>| format!("expected 3 comma-separated values, got {}", p.len()))
}

/// `start:patch:batch` entries separated by commas.
fn parse_stages(v: &str) -> Result<Vec<Stage>, String> {
    v.split(',')
        .map(|s| {
            let f: Vec<&str> = s.trim().split(':').collect();
            let [start, patch, batch] = f[..] else {
                return Err(format!("stage `{s}` is not start:patch:batch"));
            };
            Ok(Stage {
                start_step: parse_num(start)?,
                patch: parse_num(patch)?,
                batch: parse_num(batch)?,
            })
        })
        .collect()
}

fn on_off(b: bool) -> String {
    if b { "on" } else { "off" }.to_string()
}

fn join3(v: [usize; 3]) -> String {
    format!("{},{},{}", v[0], v[1], v[2])
}

impl RunConfig {
    /// Applies one setting; `origin` labels errors (file line or `--set`).
    pub fn set(&mut self, key: &str, value: &str, origin: &str) -> Result<(), ConfigError> {
        match self.assign(key, value) {
            Ok(true) => Ok(()),
            Ok(false) => Err(ConfigError::UnknownKey {
                key: key.to_string(),
                origin: origin.to_string(),
            }),
            Err(reason) => Err(ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                reason,
                origin: origin.to_string(),
            }),
        }
    }

    /// Returns `Ok(false)` for an unknown key.
    fn assign(&mut self, key: &str, value: &str) -> Result<bool, String> {
        let t = &mut self.train;
        let m = &mut t.model;
        match key {
            "model.base_channels" => m.base_channels = parse_num(value)?,
            "model.blocks" => m.blocks = parse_triple(value)?,
            "model.heads" => m.heads = parse_triple(value)?,
            "model.window" => m.window = parse_num(value)?,
            "model.ffn_expansion" => m.ffn_expansion = parse_num(value)?,
            "model.frequency_branch" => m.frequency_branch = parse_bool(value)?,
            "model.fusion" => {
                m.fusion = match value {
                    "afm" => Fusion::Afm,
                    "concat" => Fusion::Concat,
                    _ => return Err("expected afm or concat".into()),
                }
            }
            "model.spatial_sa" => m.spatial_sa = parse_bool(value)?,
            "model.channel_sa" => m.channel_sa = parse_bool(value)?,
            "model.sa_order" => {
                m.sa_order = match value {
                    "spatial_first" => SaOrder::SpatialFirst,
                    "channel_first" => SaOrder::ChannelFirst,
                    _ => return Err("expected spatial_first or channel_first".into()),
                }
            }
            "train.seed" => t.seed = parse_num(value)?,
            "train.steps" => t.schedule.total_steps = parse_num(value)?,
            "train.lr_max" => t.schedule.lr_max = parse_num(value)?,
            "train.lr_min" => t.schedule.lr_min = parse_num(value)?,
            "train.stages" => t.schedule.stages = parse_stages(value)?,
            "train.clip_norm" => {
                t.clip_norm = match value {
                    "off" | "none" => None,
                    v => Some(parse_num(v)?),
                }
            }
            "train.eval_every" => t.eval_every = parse_num(value)?,
            "train.checkpoint_every" => t.checkpoint_every = parse_num(value)?,
            "train.flip" => t.flip = parse_bool(value)?,
            "train.loss_l1" => t.weights.l1 = parse_num(value)?,
            "train.loss_perceptual" => t.weights.perceptual = parse_num(value)?,
            "train.loss_fft" => t.weights.fft = parse_num(value)?,
            "data.root" => self.data_root = PathBuf::from(value),
            "out.dir" => self.out_dir = PathBuf::from(value),
            "gradcheck.step" => self.gradcheck.step = parse_num(value)?,
            "gradcheck.tolerance" => self.gradcheck.tolerance = parse_num(value)?,
            "gradcheck.samples" => self.gradcheck.samples_per_tensor = parse_num(value)?,
            "gradcheck.trials" => self.gradcheck.trials = parse_num(value)?,
            "gradcheck.seed" => self.gradcheck.seed = parse_num(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.train.model;
        let t = &self.train;
        Some(match key {
            "model.base_channels" => m.base_channels.to_string(),
            "model.blocks" => join3(m.blocks),
            "model.heads" => join3(m.heads),
            "model.window" => m.window.to_string(),
            "model.ffn_expansion" => m.ffn_expansion.to_string(),
            "model.frequency_branch" => on_off(m.frequency_branch),
            "model.fusion" => match m.fusion {
                Fusion::Afm => "afm",
                Fusion::Concat => "concat",
            }
            .to_string(),
            "model.spatial_sa" => on_off(m.spatial_sa),
            "model.channel_sa" => on_off(m.channel_sa),
            "model.sa_order" => match m.sa_order {
                SaOrder::SpatialFirst => "spatial_first",
                SaOrder::ChannelFirst => "channel_first",
            }
            .to_string(),
            "train.seed" => t.seed.to_string(),
            "train.steps" => t.schedule.total_steps.to_string(),
            "train.lr_max" => t.schedule.lr_max.to_string(),
            "train.lr_min" => t.schedule.lr_min.to_string(),
            "train.stages" => t
                .schedule
                .stages
                .iter()
                .map(|s| format!("{}:{}:{}", s.start_step, s.patch, s.batch))
                .collect::<Vec<_>>()
                .join(","),
            "train.clip_norm" => t.clip_norm.map_or("off".to_string(), |c| c.to_string()),
            "train.eval_every" => t.eval_every.to_string(),
            "train.checkpoint_every" => t.checkpoint_every.to_string(),
            "train.flip" => on_off(t.flip),
            "train.loss_l1" => t.weights.l1.to_string(),
            "train.loss_perceptual" => t.weights.perceptual.to_string(),
            "train.loss_fft" => t.weights.fft.to_string(),
            "data.root" => self.data_root.display().to_string(),
            "out.dir" => self.out_dir.display().to_string(),
            "gradcheck.step" => self.gradcheck.step.to_string(),
            "gradcheck.tolerance" => self.gradcheck.tolerance.to_string(),
            "gradcheck.samples" => self.gradcheck.samples_per_tensor.to_string(),
            "gradcheck.trials" => self.gradcheck.trials.to_string(),
            "gradcheck.seed" => self.gradcheck.seed.to_string(),
            _ => return None,
        })
    }

    /// Applies a config file: one `key = value` per line, `#` comments.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let origin = format!("{source}:{}", i + 1);
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    origin,
                    line: line.to_string(),
                });
            };
            self.set(k.trim(), v.trim(), &origin)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies a `--set key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let origin = format!("--set {kv}");
        let Some((k, v)) = kv.split_once('=') else {
            return Err(ConfigError::Syntax {
                origin,
                line: kv.to_string(),
            });
        };
        self.set(k.trim(), v.trim(), &origin)
    }

    /// Resolves defaults, file, overrides and the seed variable, in that order.
    pub fn resolve(file: Option<&Path>, overrides: &[String], seed_env: Option<&str>) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        for kv in overrides {
            cfg.apply_override(kv)?;
        }
        if let Some(seed) = seed_env {
            cfg.set("train.seed", seed.trim(), SEED_ENV)?;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// The resolved configuration in config-file syntax.
    pub fn render(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("every listed key is readable")))
            .collect()
    }
}
