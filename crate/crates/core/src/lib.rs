//! N-1 secure and uncertainty-robust PQ flexibility estimation at TSO-DSO
//! interfaces with a self-supervised ANN-OPF agent.
//!
//! The pipeline: [`powerflow`] solves AC flows, [`contingency`] and [`ppf`]
//! provide exact N-1 and Monte-Carlo oracles, [`approximators`] learn them,
//! [`annopf`] trains the setpoint agent and [`estimation`] sweeps the
//! requirement grid into a classified PQ area.

pub mod annopf;
pub mod approximators;
pub mod contingency;
pub mod error;
pub mod estimation;
pub mod grid;
pub mod io;
pub mod neural;
pub mod powerflow;
pub mod ppf;
pub mod sparse;
pub mod synth;

pub use annopf::{
    baseline_optimize, generate_samples, train_stage1, train_stage2, AugLossConfig, FlexBounds,
    GridStatus, OpfEnv, PqRequirement,
};
pub use approximators::{build_datasets, train_n1, train_ppf, N1Approximator, PpfApproximator};
pub use contingency::{enumerate_cases, n1_analysis, N1Report};
pub use error::{Error, Result};
pub use estimation::{predict_area, verify_area, PointClass, PqArea};
pub use grid::Network;
pub use io::{load_grid, save_grid, GridBundle, RunConfig};
pub use neural::Mlp;
pub use powerflow::{batch_solve, solve, PfResult, Scenario};
pub use ppf::{run_mcs, PpfReport, UncertaintySpec};
