//! Training configuration and its `key = value` file format.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored and
//! unknown keys are errors. Keys are the field names below; see
//! docs/formats.md for the full table.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::DatagenConfig;
use crate::egm::GroundingLossMode;
use crate::error::{CoeError, Result};
use crate::grpo::GrpoConfig;
use crate::numerics::OptimizerKind;
use crate::reward::RewardWeights;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    /// Weight of the reasoning loss against the grounding loss.
    pub lambda: f64,
    pub grounding_loss_mode: GroundingLossMode,
    pub batch_size: usize,
    pub sft_steps: usize,
    pub sft_lr: f64,
    pub rl_steps: usize,
    pub rl_batch_size: usize,
    pub rl_lr: f64,
    pub optimizer: OptimizerKind,

    pub num_queries: usize,
    pub num_layers: usize,
    pub d_embed: usize,
    pub d_pos: usize,
    pub hidden: usize,
    pub max_len: usize,
    pub egm_init_scale: f64,

    pub grpo: GrpoConfig,
    pub weights: RewardWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lambda: 1.0,
            grounding_loss_mode: GroundingLossMode::Literal,
            batch_size: 16,
            sft_steps: 2000,
            sft_lr: 1e-3,
            rl_steps: 300,
            rl_batch_size: 16,
            rl_lr: 1e-3,
            optimizer: OptimizerKind::default(),
            num_queries: 4,
            num_layers: 2,
            d_embed: 32,
            d_pos: 16,
            hidden: 64,
            max_len: 64,
            egm_init_scale: 0.1,
            grpo: GrpoConfig::default(),
            weights: RewardWeights::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CoeError::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CoeError::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoeError::Config(m.into()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and nonnegative");
        }
        if self.batch_size == 0 || self.rl_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        for lr in [self.sft_lr, self.rl_lr] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad("learning rates must be positive");
            }
        }
        self.grpo.validate()?;
        self.weights.validate()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse_num(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "grounding_loss_mode" => {
                self.grounding_loss_mode = match v {
                    "literal" => GroundingLossMode::Literal,
                    "logit" => GroundingLossMode::Logit,
                    _ => {
                        return Err(CoeError::Config(format!(
                            "grounding_loss_mode: expected literal or logit, got {v:?}"
                        )))
                    }
                }
            }
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "sft_steps" => self.sft_steps = parse_num(key, v)?,
            "sft_lr" => self.sft_lr = parse_num(key, v)?,
            "rl_steps" => self.rl_steps = parse_num(key, v)?,
            "rl_batch_size" => self.rl_batch_size = parse_num(key, v)?,
            "rl_lr" => self.rl_lr = parse_num(key, v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "adam" => OptimizerKind::default(),
                    "sgd" => OptimizerKind::SgdMomentum { momentum: 0.9 },
                    _ => {
                        return Err(CoeError::Config(format!(
                            "optimizer: expected adam or sgd, got {v:?}"
                        )))
                    }
                }
            }
            "momentum" => match &mut self.optimizer {
                OptimizerKind::SgdMomentum { momentum } => *momentum = parse_num(key, v)?,
                OptimizerKind::Adam { .. } => {
                    return Err(CoeError::Config("momentum needs optimizer = sgd first".into()))
                }
            },
            "num_queries" => self.num_queries = parse_num(key, v)?,
            "num_layers" => self.num_layers = parse_num(key, v)?,
            "d_embed" => self.d_embed = parse_num(key, v)?,
            "d_pos" => self.d_pos = parse_num(key, v)?,
            "hidden" => self.hidden = parse_num(key, v)?,
            "max_len" => self.max_len = parse_num(key, v)?,
            "egm_init_scale" => self.egm_init_scale = parse_num(key, v)?,
            "beta" => self.grpo.beta = parse_num(key, v)?,
            "tie_epsilon" => self.grpo.tie_epsilon = parse_num(key, v)?,
            "temperature" => self.grpo.temperature = parse_num(key, v)?,
            "update_egm" => self.grpo.update_egm = parse_bool(key, v)?,
            "w_g" => self.weights.w_g = parse_num(key, v)?,
            "w_p" => self.weights.w_p = parse_num(key, v)?,
            "w_a" => self.weights.w_a = parse_num(key, v)?,
            other => return Err(CoeError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for_each_setting(text, |k, v| cfg.set(k, v))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoeError::io(path, e))?;
        Self::parse(&text)
    }
}

fn for_each_setting(text: &str, mut apply: impl FnMut(&str, &str) -> Result<()>) -> Result<()> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CoeError::Config(format!("line {}: expected key = value, got {raw:?}", i + 1))
        })?;
        apply(k.trim(), v).map_err(|e| CoeError::Config(format!("line {}: {e}", i + 1)))?;
    }
    Ok(())
}

/// Dataset and training settings from one file. `seed` sets both; the
/// dataset keys are listed in [`DatagenConfig::KEYS`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Settings {
    pub datagen: DatagenConfig,
    pub train: TrainConfig,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for_each_setting(text, |k, v| {
            if k == "seed" {
                s.datagen.set(k, v)?;
                s.train.set(k, v)
            } else if DatagenConfig::KEYS.contains(&k) {
                s.datagen.set(k, v)
            } else {
                s.train.set(k, v)
            }
        })?;
        s.datagen.validate()?;
        s.train.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoeError::io(path, e))?;
        Self::parse(&text).map_err(|e| CoeError::Config(format!("{}: {e}", path.display())))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.datagen.seed = seed;
        self.train.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_settings_and_comments() {
        let cfg = TrainConfig::parse(
            "# demo\nseed = 7\nlambda=0.5  # half\n\ngrounding_loss_mode = logit\nw_p = 0\nupdate_egm = true\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.lambda, 0.5);
        assert_eq!(cfg.grounding_loss_mode, GroundingLossMode::Logit);
        assert_eq!(cfg.weights.w_p, 0.0);
        assert!(cfg.grpo.update_egm);
        assert_eq!(cfg.batch_size, 16);
    }

    #[test]
    fn settings_route_keys_to_both_configs() {
        let s = Settings::parse("seed = 3\nn_sft = 10\nnoise = 0.2\nhidden = 8\n").unwrap();
        assert_eq!((s.datagen.seed, s.train.seed), (3, 3));
        assert_eq!(s.datagen.n_sft, 10);
        assert_eq!(s.datagen.render.noise, 0.2);
        assert_eq!(s.train.hidden, 8);
        assert!(Settings::parse("n_frames = 0").is_err());
        assert!(Settings::parse("bogus = 1").is_err());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainConfig::parse("nonsense = 1").is_err());
        assert!(TrainConfig::parse("seed 1").is_err());
        assert!(TrainConfig::parse("lambda = -1").is_err());
        assert!(TrainConfig::parse("batch_size = x").is_err());
        assert!(TrainConfig::parse("momentum = 0.5").is_err());
        assert!(TrainConfig::parse("optimizer = sgd\nmomentum = 0.5").is_ok());
    }
}
