//! Configuration schema. Every field has a default; unknown keys are
//! rejected both in files and in `key=value` overrides.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Latent dimension `D`.
    pub latent_dim: usize,
    /// Number of codebook entries `K`.
    pub num_codes: usize,
    /// Number of sequences (contrasts) `N`.
    pub num_sequences: usize,
    pub base_channels: usize,
    pub downsample_stages: usize,
    pub mapping_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 3,
            num_codes: 256,
            num_sequences: 4,
            base_channels: 32,
            downsample_stages: 2,
            mapping_hidden: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 1 || self.num_codes < 2 {
            return Err(Error::Config(format!(
                "model: need latent_dim >= 1 and num_codes >= 2 (got {} / {})",
                self.latent_dim, self.num_codes
            )));
        }
        if self.num_sequences < 1 || self.base_channels < 1 || self.mapping_hidden < 1 {
            return Err(Error::Config(
                "model: num_sequences, base_channels and mapping_hidden must be positive".into(),
            ));
        }
        if self.downsample_stages < 1 {
            return Err(Error::Config("model: downsample_stages must be >= 1".into()));
        }
        Ok(())
    }
}

/// Scale applied to the noise when sampling the common latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// `mu + eps * var`.
    #[default]
    Variance,
    /// `mu + eps * sqrt(var)`.
    Std,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_l1: f64,
    pub lambda_ssim: f64,
    pub lambda_per: f64,
    pub lambda_con: f64,
    pub lambda_vq: f64,
    pub tau: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_l1: 10.0,
            lambda_ssim: 1.0,
            lambda_per: 0.1,
            lambda_con: 10.0,
            lambda_vq: 10.0,
            tau: 0.07,
            beta: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_l1,
            self.lambda_ssim,
            self.lambda_per,
            self.lambda_con,
            self.lambda_vq,
            self.beta,
        ];
        if all.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Config("weights: all weights must be >= 0".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("weights: tau must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub gamma_range: [f64; 2],
    pub noise_sigma_range: [f64; 2],
    pub bias_scale: f64,
    pub bias_alpha_range: [f64; 2],
    pub replace_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            gamma_range: [0.95, 1.05],
            noise_sigma_range: [0.0, 0.1],
            bias_scale: 0.2,
            bias_alpha_range: [0.0, 2.0],
            replace_probability: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1];
        if !ordered(self.gamma_range)
            || !ordered(self.noise_sigma_range)
            || !ordered(self.bias_alpha_range)
        {
            return Err(Error::Config("augment: ranges must be [lo, hi] with lo <= hi".into()));
        }
        if !(self.gamma_range[0] > 0.0) || self.noise_sigma_range[0] < 0.0 {
            return Err(Error::Config("augment: gamma must be > 0 and sigma >= 0".into()));
        }
        if self.bias_alpha_range[0] < 0.0 || self.bias_scale < 0.0 {
            return Err(Error::Config("augment: bias alpha and scale must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.replace_probability) {
            return Err(Error::Config("augment: replace_probability must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    Fast32,
    Check64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub adam_betas: [f64; 2],
    pub weights: LossWeights,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub precision: Precision,
    pub scale_mode: ScaleMode,
    /// Treat the common-latent statistics as constants in the sampled
    /// reconstruction term.
    pub detach_stats: bool,
    /// Cap on contrastive anchors per sequence pair.
    pub max_anchors: usize,
    /// `[start, end]` in completed steps: the consistency weight is zero
    /// before `start` and rises linearly to `lambda_con` at `end`.
    pub consistency_ramp: [u64; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 1,
            total_steps: 5000,
            weight_decay: 0.01,
            adam_betas: [0.9, 0.999],
            weights: LossWeights::default(),
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            seed: 1,
            checkpoint_every: 1000,
            log_every: 250,
            precision: Precision::Fast32,
            scale_mode: ScaleMode::Variance,
            detach_stats: false,
            max_anchors: 256,
            consistency_ramp: [0, 0],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps < 1 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.consistency_ramp[0] > self.consistency_ramp[1] {
            return Err(Error::Config("consistency_ramp must be [start, end] with start <= end".into()));
        }
        if self.max_anchors < 2 {
            return Err(Error::Config("max_anchors must be >= 2".into()));
        }
        self.weights.validate()?;
        self.augment.validate()?;
        self.model.validate()
    }

    /// Factor applied to `lambda_con` after `step` completed steps.
    pub fn consistency_scale(&self, step: u64) -> f64 {
        let [start, end] = self.consistency_ramp;
        if step >= end {
            1.0
        } else if step < start {
            0.0
        } else {
            (step - start) as f64 / (end - start) as f64
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Apply `dotted.key=value` overrides. Values are parsed as JSON when
    /// possible and taken as strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = serde_json::to_value(self).expect("config serializes");
        for ov in overrides {
            let ov = ov.as_ref();
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {ov:?} is not key=value")))?;
            let value: Value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut root;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|o| o.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
            }
            *slot = value;
        }
        let cfg: Self =
            serde_json::from_value(root).map_err(|e| Error::Config(format!("override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = TrainConfig::default();
        let back = TrainConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(back.model.latent_dim, 3);
        assert_eq!(back.model.num_codes, 256);
        assert_eq!(back.learning_rate, 1e-4);
        assert_eq!(back.weights.lambda_l1, 10.0);
        assert_eq!(back.weights.lambda_per, 0.1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(TrainConfig::from_json(r#"{"learning_rat": 0.1}"#).is_err());
        let cfg = TrainConfig::default();
        assert!(cfg.with_overrides(&["model.nope=3"]).is_err());
        assert!(cfg.with_overrides(&["model"]).is_err());
    }

    #[test]
    fn overrides_apply_nested_values() {
        let cfg = TrainConfig::default()
            .with_overrides(&["model.num_codes=16", "augment.replace_probability=0", "scale_mode=std"])
            .unwrap();
        assert_eq!(cfg.model.num_codes, 16);
        assert_eq!(cfg.augment.replace_probability, 0.0);
        assert_eq!(cfg.scale_mode, ScaleMode::Std);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let cfg = TrainConfig::default();
        assert!(cfg.with_overrides(&["learning_rate=0"]).is_err());
        assert!(cfg.with_overrides(&["weights.tau=0"]).is_err());
        assert!(cfg.with_overrides(&["augment.gamma_range=[1.1,0.9]"]).is_err());
        assert!(cfg.with_overrides(&["consistency_ramp=[10,5]"]).is_err());
    }

    #[test]
    fn consistency_ramp_is_linear() {
        let mut cfg = TrainConfig::default();
        assert_eq!(cfg.consistency_scale(0), 1.0);
        cfg.consistency_ramp = [100, 300];
        assert_eq!(cfg.consistency_scale(0), 0.0);
        assert_eq!(cfg.consistency_scale(99), 0.0);
        assert_eq!(cfg.consistency_scale(100), 0.0);
        assert_eq!(cfg.consistency_scale(200), 0.5);
        assert_eq!(cfg.consistency_scale(300), 1.0);
        assert_eq!(cfg.consistency_scale(5000), 1.0);
    }
}
