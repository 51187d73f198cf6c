use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::env::OpfEnv;
use super::gradient::action_gradients;
use super::loss::{AugLossConfig, BusMark, LineMark, SoftMarks};
use super::samples::Sample;
use crate::error::{Error, NumericError, Result};
use crate::grid::C64;
use crate::neural::{backprop_action_grads, Activation, Adam, Mlp, Standardizer, TrainConfig};
use crate::powerflow::{solve, PfResult, Scenario};

/// Predicts the N-1 loading of lines from a base-case flow.
pub trait N1Screen: Sync {
    /// `(branch, predicted lp_n1)` pairs.
    fn predict_n1(&self, scenario: &Scenario, result: &PfResult) -> Result<Vec<(usize, f64)>>;
}

/// Predicts per-bus voltage-violation probabilities from a base-case flow.
pub trait PpfScreen: Sync {
    fn predict_prob(&self, scenario: &Scenario, result: &PfResult) -> Result<Vec<f64>>;
}

/// A screen that never flags anything.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoScreen;

impl N1Screen for NoScreen {
    fn predict_n1(&self, _: &Scenario, _: &PfResult) -> Result<Vec<(usize, f64)>> {
        Ok(Vec::new())
    }
}

impl PpfScreen for NoScreen {
    fn predict_prob(&self, _: &Scenario, _: &PfResult) -> Result<Vec<f64>> {
        Ok(Vec::new())
    }
}

/// Marks lines whose predicted N-1 loading exceeds `lp_max` and non-slack
/// buses whose predicted violation probability exceeds the threshold.
pub fn mark_soft_constraints(
    env: &OpfEnv,
    cfg: &AugLossConfig,
    scenario: &Scenario,
    result: &PfResult,
    n1: &dyn N1Screen,
    ppf: &dyn PpfScreen,
) -> Result<SoftMarks> {
    let lines = n1
        .predict_n1(scenario, result)?
        .into_iter()
        .filter(|&(_, pred)| pred > cfg.lp_max)
        .map(|(branch, pred)| LineMark {
            branch,
            target_lp: result.lp[branch] - (pred - cfg.lp_max),
        })
        .collect();
    let slack = env.network.slack_bus();
    let buses = ppf
        .predict_prob(scenario, result)?
        .into_iter()
        .enumerate()
        .filter(|&(bus, p)| bus != slack && p > cfg.prob_threshold)
        .map(|(bus, _)| BusMark {
            bus,
            upper: result.v[bus].norm() >= 0.5 * (env.vmin[bus] + env.vmax[bus]),
        })
        .collect();
    Ok(SoftMarks { lines, buses })
}

/// An untrained agent: ReLU hidden layers, tanh output with two actions per
/// controllable DER, input standardizer fitted on `samples`.
pub fn new_opf_model(env: &OpfEnv, samples: &[Sample], hidden: &[usize], seed: u64) -> Result<Mlp> {
    let mut sizes = vec![env.n_features()];
    sizes.extend_from_slice(hidden);
    sizes.push(env.n_actions());
    let mut model = Mlp::new(&sizes, Activation::Relu, Activation::Tanh, seed)?;
    let xs: Vec<Vec<f64>> = samples.iter().map(Sample::features).collect();
    model.standardizer = Standardizer::fit(&xs)?;
    Ok(model)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Means over converged samples.
    pub mean_objective: f64,
    pub mean_l_v: f64,
    pub mean_l_lp: f64,
    /// Marks summed over all samples of the epoch.
    pub marked_lines: usize,
    pub marked_buses: usize,
    pub nonconverged: usize,
}

/// Self-supervised training against the hard-constraint augmented loss.
pub fn train_stage1(
    model: &mut Mlp,
    env: &OpfEnv,
    samples: &[Sample],
    cfg: &AugLossConfig,
    train: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    train_loop(model, env, samples, cfg, train, None)
}

/// Continues training with soft-constraint marks from the approximators,
/// recomputed at the start of every batch.
pub fn train_stage2(
    model: &mut Mlp,
    env: &OpfEnv,
    samples: &[Sample],
    n1: &dyn N1Screen,
    ppf: &dyn PpfScreen,
    cfg: &AugLossConfig,
    train: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    train_loop(model, env, samples, cfg, train, Some((n1, ppf)))
}

struct SampleStep {
    grad: Vec<f64>,
    converged: bool,
    v: Vec<C64>,
    total: f64,
    objective: f64,
    l_v: f64,
    l_lp: f64,
    lines: usize,
    buses: usize,
}

fn train_loop(
    model: &mut Mlp,
    env: &OpfEnv,
    samples: &[Sample],
    cfg: &AugLossConfig,
    train: &TrainConfig,
    screens: Option<(&dyn N1Screen, &dyn PpfScreen)>,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    train.validate()?;
    if samples.is_empty() {
        return Err(NumericError::Empty("training samples").into());
    }
    let xs: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| model.standardizer.transform(&s.features()))
        .collect();
    let mut adam = Adam::new(model, train);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut warm: Vec<Option<Vec<C64>>> = vec![None; samples.len()];
    let mut history = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut stats = EpochStats {
            epoch,
            ..Default::default()
        };
        let mut converged = 0usize;
        for (b, batch) in order.chunks(train.batch_size).enumerate() {
            let snapshot = &*model;
            let steps: Vec<SampleStep> = batch
                .par_iter()
                .map(|&i| -> Result<SampleStep> {
                    let s = &samples[i];
                    let init = warm[i].as_deref();
                    let a = snapshot.forward(&xs[i])?;
                    let marks = match screens {
                        Some((n1, ppf)) => {
                            let sc = env.scenario(&s.status, &env.scale_actions(&a, &s.status)?)?;
                            let r = solve(&sc, init)?;
                            if r.converged {
                                mark_soft_constraints(env, cfg, &sc, &r, n1, ppf)?
                            } else {
                                SoftMarks::default()
                            }
                        }
                        None => SoftMarks::default(),
                    };
                    let g = action_gradients(
                        env,
                        &s.status,
                        &s.req,
                        &s.bounds,
                        cfg,
                        &a,
                        Some(&marks),
                        init,
                    )?;
                    Ok(SampleStep {
                        converged: g.loss.converged,
                        v: g.base.v,
                        total: g.loss.total,
                        objective: g.loss.objective,
                        l_v: g.loss.l_v,
                        l_lp: g.loss.l_lp,
                        lines: marks.lines.len(),
                        buses: marks.buses.len(),
                        grad: g.grad,
                    })
                })
                .collect::<Result<_>>()?;
            let mut dl_da = Vec::with_capacity(batch.len());
            let mut bx = Vec::with_capacity(batch.len());
            for (&i, st) in batch.iter().zip(steps) {
                if !st.total.is_finite() || st.grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Numeric(NumericError::NonFiniteLoss { epoch, batch: b }));
                }
                stats.mean_loss += st.total;
                if st.converged {
                    converged += 1;
                    stats.mean_objective += st.objective;
                    stats.mean_l_v += st.l_v;
                    stats.mean_l_lp += st.l_lp;
                    warm[i] = Some(st.v);
                } else {
                    stats.nonconverged += 1;
                    warm[i] = None;
                }
                stats.marked_lines += st.lines;
                stats.marked_buses += st.buses;
                bx.push(xs[i].clone());
                dl_da.push(st.grad);
            }
            backprop_action_grads(model, &mut adam, &bx, &dl_da)?;
        }
        stats.mean_loss /= samples.len() as f64;
        let c = converged.max(1) as f64;
        stats.mean_objective /= c;
        stats.mean_l_v /= c;
        stats.mean_l_lp /= c;
        log::debug!(
            "epoch {epoch}: loss {:.4} objective {:.4} l_v {:.4} l_lp {:.3}",
            stats.mean_loss,
            stats.mean_objective,
            stats.mean_l_v,
            stats.mean_l_lp
        );
        history.push(stats);
    }
    Ok(history)
}

pub const TELEMETRY_COLUMNS: &[&str] = &[
    "epoch",
    "mean_objective",
    "mean_l_v",
    "mean_l_lp",
    "marked_lines",
    "marked_buses",
    "mean_loss",
    "nonconverged",
];

/// Appends epoch rows to a CSV log, writing the header for a new file.
pub fn write_telemetry(path: &Path, stats: &[EpochStats]) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.display().to_string(),
        source,
    };
    let fresh = !path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err)?;
    let mut w = std::io::BufWriter::new(file);
    if fresh {
        writeln!(w, "{}", TELEMETRY_COLUMNS.join(",")).map_err(io_err)?;
    }
    for s in stats {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            s.epoch,
            s.mean_objective,
            s.mean_l_v,
            s.mean_l_lp,
            s.marked_lines,
            s.marked_buses,
            s.mean_loss,
            s.nonconverged
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}
