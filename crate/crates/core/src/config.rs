//! Training configuration and its flat `key = value` text form.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::models::{GeneratorVariant, ModelConfig};
use crate::optim::AdamConfig;

/// What the generator is trained to minimize.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Alternating critic/generator updates with the WGAN-GP critic and an
    /// L1 term on the generator.
    CwganGpL1,
    /// Generator alone, pixelwise MSE.
    MseOnly,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::CwganGpL1 => "cwgan_gp_l1",
            Objective::MseOnly => "mse_only",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().replace('-', "_").as_str() {
            "cwgan_gp_l1" => Ok(Objective::CwganGpL1),
            "mse_only" | "mse" => Ok(Objective::MseOnly),
            _ => Err(Error::Config(format!("unknown objective `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Critic updates per generator update.
    pub critic_steps: usize,
    pub seed: u64,
    pub objective: Objective,
    /// Optional cap on generator steps, applied on top of `epochs`.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            batch_size: 1,
            epochs: 50,
            critic_steps: 1,
            seed: 0,
            objective: Objective::CwganGpL1,
            max_steps: None,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in the order they are written.
pub const KEYS: &[&str] = &[
    "variant",
    "input_size",
    "in_channels",
    "base_channels",
    "max_channels",
    "disc_layers",
    "objective",
    "lambda_gp",
    "lambda_l1",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "batch_size",
    "epochs",
    "critic_steps",
    "seed",
    "max_steps",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.critic_steps == 0 {
            return Err(Error::Config("critic_steps must be at least 1".into()));
        }
        Ok(())
    }

    /// Sets one field from its text form. Dashes in `key` are treated as
    /// underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        let m = &mut self.model;
        match key.as_str() {
            "variant" => m.variant = v.parse()?,
            "input_size" => m.input_size = parse(&key, v)?,
            "in_channels" => m.in_channels = parse(&key, v)?,
            "base_channels" => m.base_channels = parse(&key, v)?,
            "max_channels" => m.max_channels = parse(&key, v)?,
            "disc_layers" => m.disc_layers = parse(&key, v)?,
            "objective" => self.objective = v.parse()?,
            "lambda_gp" => self.weights.lambda_gp = parse(&key, v)?,
            "lambda_l1" => self.weights.lambda_l1 = parse(&key, v)?,
            "lr" => self.adam.lr = parse(&key, v)?,
            "beta1" => self.adam.beta1 = parse(&key, v)?,
            "beta2" => self.adam.beta2 = parse(&key, v)?,
            "adam_eps" => self.adam.eps = parse(&key, v)?,
            "batch_size" => self.batch_size = parse(&key, v)?,
            "epochs" => self.epochs = parse(&key, v)?,
            "critic_steps" => self.critic_steps = parse(&key, v)?,
            "seed" => self.seed = parse(&key, v)?,
            "max_steps" => {
                self.max_steps = match v {
                    "" | "none" => None,
                    _ => Some(parse(&key, v)?),
                }
            }
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        Some(match key {
            "variant" => m.variant.key().to_string(),
            "input_size" => m.input_size.to_string(),
            "in_channels" => m.in_channels.to_string(),
            "base_channels" => m.base_channels.to_string(),
            "max_channels" => m.max_channels.to_string(),
            "disc_layers" => m.disc_layers.to_string(),
            "objective" => self.objective.to_string(),
            "lambda_gp" => self.weights.lambda_gp.to_string(),
            "lambda_l1" => self.weights.lambda_l1.to_string(),
            "lr" => self.adam.lr.to_string(),
            "beta1" => self.adam.beta1.to_string(),
            "beta2" => self.adam.beta2.to_string(),
            "adam_eps" => self.adam.eps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "critic_steps" => self.critic_steps.to_string(),
            "seed" => self.seed.to_string(),
            "max_steps" => self.max_steps.map_or_else(|| "none".to_string(), |s| s.to_string()),
            _ => return None,
        })
    }

    /// Every key as `key = value`, one per line.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        self.apply_text(&fs::read_to_string(path)?)
    }

    pub fn with_variant(&self, variant: GeneratorVariant) -> Self {
        let mut c = self.clone();
        c.model.variant = variant;
        c
    }
}
