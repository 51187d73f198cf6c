use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annopf::{AugLossConfig, BaselineOptions, OpfEnv, SampleNoise};
use crate::approximators::ApproxConfig;
use crate::error::{Error, Result};
use crate::neural::TrainConfig;
use crate::ppf::UncertaintySpec;

/// Operating limits. Voltage bounds override the per-bus bounds of the grid
/// when set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Limits {
    pub vmin: Option<f64>,
    pub vmax: Option<f64>,
    pub lp_max: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            vmin: None,
            vmax: None,
            lp_max: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub n_req_per_step: usize,
    pub noise: SampleNoise,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n_req_per_step: 10,
            noise: SampleNoise::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub learning_rate: f64,
    /// Smaller step for fine-tuning the stage-1 agent, so the first large
    /// soft-constraint gradients do not saturate the tanh outputs.
    pub stage2_learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 100,
            stage2_epochs: 50,
            learning_rate: 1e-3,
            stage2_learning_rate: 1e-4,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnOpfConfig {
    pub hidden: Vec<usize>,
}

impl Default for AnnOpfConfig {
    fn default() -> Self {
        Self { hidden: vec![500] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    pub n: usize,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self { n: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyConfig {
    pub w_v: f64,
    pub w_lp: f64,
    pub prob_threshold: f64,
    pub robust_margin_v: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        let d = AugLossConfig::default();
        Self {
            w_v: d.w_v,
            w_lp: d.w_lp,
            prob_threshold: d.prob_threshold,
            robust_margin_v: d.robust_margin_v,
        }
    }
}

/// Everything a run depends on besides the grid and the seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub limits: Limits,
    pub uncertainty: UncertaintySpec,
    pub samples: SampleConfig,
    pub training: TrainingConfig,
    pub approximators: ApproxConfig,
    pub annopf: AnnOpfConfig,
    pub estimation: EstimationConfig,
    pub penalties: PenaltyConfig,
    pub baseline: BaselineOptions,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let l = &self.limits;
        if !(l.lp_max > 0.0) {
            return bad("limits.lp_max must be positive");
        }
        match (l.vmin, l.vmax) {
            (Some(lo), Some(hi)) if !(0.0 < lo && lo < hi) => return bad("limits need 0 < vmin < vmax"),
            (Some(x), None) | (None, Some(x)) if !(x > 0.0) => return bad("voltage limits must be positive"),
            _ => {}
        }
        self.uncertainty.validate()?;
        if self.samples.n_req_per_step == 0 {
            return bad("samples.n_req_per_step must be at least 1");
        }
        let n = &self.samples.noise;
        if !(n.common >= 0.0 && n.device >= 0.0) {
            return bad("samples.noise must be non-negative");
        }
        self.stage1_train().validate()?;
        self.stage2_train().validate()?;
        self.approximators.train.validate()?;
        if self.approximators.hidden == 0 || !(0.0 < self.approximators.train_frac && self.approximators.train_frac < 1.0) {
            return bad("approximators need hidden > 0 and 0 < train_frac < 1");
        }
        if self.annopf.hidden.is_empty() || self.annopf.hidden.contains(&0) {
            return bad("annopf.hidden must list positive layer widths");
        }
        if self.estimation.n < 2 {
            return bad("estimation.n must be at least 2");
        }
        self.loss_config().validate()?;
        if !(self.baseline.learning_rate > 0.0) {
            return bad("baseline.learning_rate must be positive");
        }
        Ok(())
    }

    pub fn loss_config(&self) -> AugLossConfig {
        let p = &self.penalties;
        AugLossConfig {
            w_v: p.w_v,
            w_lp: p.w_lp,
            lp_max: self.limits.lp_max,
            robust_margin_v: p.robust_margin_v,
            prob_threshold: p.prob_threshold,
        }
    }

    pub fn stage1_train(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.stage1_epochs,
            seed: t.seed,
            ..Default::default()
        }
    }

    pub fn stage2_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.training.stage2_epochs,
            learning_rate: self.training.stage2_learning_rate,
            ..self.stage1_train()
        }
    }

    /// Replaces every seed of the run.
    pub fn reseed(&mut self, seed: u64) {
        self.training.seed = seed;
        self.uncertainty.seed = seed;
        self.approximators.train.seed = seed;
    }

    /// Applies the voltage-limit overrides to an environment.
    pub fn apply_limits(&self, env: &mut OpfEnv) {
        if let Some(lo) = self.limits.vmin {
            env.vmin.iter_mut().for_each(|v| *v = lo);
        }
        if let Some(hi) = self.limits.vmax {
            env.vmax.iter_mut().for_each(|v| *v = hi);
        }
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
