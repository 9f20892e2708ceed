use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::AdamConfig;
use crate::error::{io_err, Error, Result};
use crate::net::NetConfig;
use crate::objectives::{AdvForm, HistogramSpec, LossWeights, MakeupNorm};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UvPipelineConfig {
    pub resolution: usize,
    pub image_size: usize,
    pub z_eps: f64,
    pub background: f64,
    pub basis_seed: u64,
}

impl Default for UvPipelineConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            image_size: 192,
            z_eps: 1e-3,
            background: 0.0,
            basis_seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectivesConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda_a: f64,
    pub lambda_m: f64,
    pub lambda_c: f64,
    pub lambda_p: f64,
    pub bins: usize,
    pub adv_form: AdvForm,
    pub makeup_norm: MakeupNorm,
    pub extractor_seed: u64,
}

impl Default for ObjectivesConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            lambda_a: w.lambda_a,
            lambda_m: w.lambda_m,
            lambda_c: w.lambda_c,
            lambda_p: w.lambda_p,
            bins: HistogramSpec::default().bins,
            adv_form: AdvForm::default(),
            makeup_norm: MakeupNorm::default(),
            extractor_seed: 0x5eed,
        }
    }
}

impl ObjectivesConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            lambda_a: self.lambda_a,
            lambda_m: self.lambda_m,
            lambda_c: self.lambda_c,
            lambda_p: self.lambda_p,
        }
    }

    pub fn histogram(&self) -> HistogramSpec {
        HistogramSpec { bins: self.bins }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub steps: u64,
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub checkpoint_every: u64,
    pub keep_checkpoints: usize,
    pub grad_accum: usize,
    pub d_steps_per_g: usize,
    pub fam_off: bool,
    pub mtm_off: bool,
    /// Checkpoints, the loss log and failure dumps go here; nothing is
    /// written when unset.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            steps: 2000,
            seed: 0,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            checkpoint_every: 500,
            keep_checkpoints: 3,
            grad_accum: 1,
            d_steps_per_g: 1,
            fam_off: false,
            mtm_off: false,
            out_dir: None,
        }
    }
}

impl TrainerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_makeup: usize,
    pub n_plain: usize,
    pub seed: u64,
    pub contamination_rate: f64,
    pub max_yaw: f64,
    pub max_pitch: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_makeup: 32,
            n_plain: 32,
            seed: 1,
            contamination_rate: 0.3,
            max_yaw: 40.0,
            max_pitch: 10.0,
        }
    }
}

/// Full configuration, one section per module.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub uv_pipeline: UvPipelineConfig,
    pub transfer_net: NetConfig,
    pub objectives: ObjectivesConfig,
    pub trainer: TrainerConfig,
    pub data: DataConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let uv = &self.uv_pipeline;
        if uv.resolution < 16 || uv.resolution % 4 != 0 {
            return bad(format!(
                "uv_pipeline.resolution must be a multiple of 4 and at least 16, got {}",
                uv.resolution
            ));
        }
        if uv.image_size < 16 || uv.image_size % 4 != 0 {
            return bad(format!(
                "uv_pipeline.image_size must be a multiple of 4 and at least 16, got {}",
                uv.image_size
            ));
        }
        if !(uv.z_eps >= 0.0) {
            return bad(format!(
                "uv_pipeline.z_eps must be nonnegative, got {}",
                uv.z_eps
            ));
        }
        self.transfer_net
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.objectives
            .weights()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.objectives
            .histogram()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let t = &self.trainer;
        t.adam()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if t.grad_accum == 0 || t.d_steps_per_g == 0 {
            return bad("trainer.grad_accum and trainer.d_steps_per_g must be at least 1".into());
        }
        if t.checkpoint_every == 0 || t.keep_checkpoints == 0 {
            return bad(
                "trainer.checkpoint_every and trainer.keep_checkpoints must be at least 1".into(),
            );
        }
        let d = &self.data;
        if d.n_makeup == 0 || d.n_plain == 0 {
            return bad("data.n_makeup and data.n_plain must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&d.contamination_rate) {
            return bad(format!(
                "data.contamination_rate must lie in [0, 1], got {}",
                d.contamination_rate
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_published_settings() {
        let c = Config::default();
        assert_eq!(c.trainer.lr, 2e-4);
        assert_eq!(c.trainer.beta1, 0.0);
        assert_eq!(c.trainer.beta2, 0.9);
        assert_eq!(c.objectives.weights(), LossWeights::default());
        assert_eq!(c.trainer.checkpoint_every, 500);
        assert_eq!(c.trainer.keep_checkpoints, 3);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_override() {
        let c = Config::default();
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
        let c = Config::from_toml(
            "[trainer]\nsteps = 5\nfam_off = true\n[objectives]\nlambda_c = 3.0\n",
        )
        .unwrap();
        assert_eq!(c.trainer.steps, 5);
        assert!(c.trainer.fam_off);
        assert_eq!(c.objectives.lambda_c, 3.0);
        assert_eq!(c.objectives.lambda1, 1.0);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = Config::from_toml("[trainer]\nstepz = 5\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("stepz"), "{err}");
        let err = Config::from_toml("[nonsense]\n").unwrap_err().to_string();
        assert!(err.contains("nonsense"), "{err}");
        assert!(Config::from_toml("[uv_pipeline]\nresolution = 30\n").is_err());
    }
}
