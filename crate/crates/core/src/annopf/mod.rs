//! The ANN-OPF agent: maps a grid status and a normalized PQ requirement at
//! the TSO-DSO interface to setpoints of the controllable DERs, trained
//! self-supervised through batched power flows.

mod baseline;
pub(crate) mod env;
mod gradient;
mod loss;
mod samples;
mod train;

pub use baseline::{baseline_optimize, BaselineMode, BaselineOptions, BaselineResult};
pub use env::{scale_actions, DerSetpoints, GridStatus, OpfEnv, ACTION_CLAMP};
pub use gradient::{action_gradients, ActionGradient, FD_STEP};
pub use loss::{
    augmented_loss, objective_normalized, penalties, AugLossConfig, BusMark, LineMark,
    LossBreakdown, SoftMarks,
};
pub use samples::{generate_samples, Sample, SampleNoise, SampleSet};
pub use train::{
    mark_soft_constraints, new_opf_model, train_stage1, train_stage2, write_telemetry,
    EpochStats, N1Screen, NoScreen, PpfScreen,
};

use serde::{Deserialize, Serialize};

/// Interface PQ requirement, normalized to the per-sample flexibility
/// bounds and resolved to MW/Mvar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PqRequirement {
    pub r_p: f64,
    pub r_q: f64,
    pub p_sp_mw: f64,
    pub q_sp_mvar: f64,
}

impl PqRequirement {
    pub fn resolve(r_p: f64, r_q: f64, bounds: &FlexBounds) -> Self {
        Self {
            r_p,
            r_q,
            p_sp_mw: bounds.p_t_min + r_p * (bounds.p_t_max - bounds.p_t_min),
            q_sp_mvar: bounds.q_t_min + r_q * (bounds.q_t_max - bounds.q_t_min),
        }
    }
}

/// Theoretical interface PQ extremes of one grid status.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlexBounds {
    pub p_t_min: f64,
    pub p_t_max: f64,
    pub q_t_min: f64,
    pub q_t_max: f64,
}

impl FlexBounds {
    pub fn p_range(&self) -> f64 {
        self.p_t_max - self.p_t_min
    }

    pub fn q_range(&self) -> f64 {
        self.q_t_max - self.q_t_min
    }
}
