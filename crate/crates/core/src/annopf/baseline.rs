use serde::{Deserialize, Serialize};

use super::env::{DerSetpoints, GridStatus, OpfEnv, ACTION_CLAMP};
use super::gradient::{gradient_of, FD_STEP};
use super::loss::{augmented_loss, penalties, AugLossConfig, LossBreakdown};
use super::{FlexBounds, PqRequirement};
use crate::error::Result;
use crate::grid::C64;
use crate::powerflow::PfResult;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMode {
    /// Minimize the hard-constraint augmented loss for a requirement.
    Requirement(PqRequirement),
    MaxP,
    MaxQ,
    MinQ,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineOptions {
    pub iterations: usize,
    /// Initial step size; decays as `1/sqrt(1 + k/20)`.
    pub learning_rate: f64,
    /// Starting raw actions; all zero (mid-range) when absent.
    pub init: Option<Vec<f64>>,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        Self {
            iterations: 200,
            learning_rate: 0.05,
            init: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub actions: Vec<f64>,
    pub setpoints: DerSetpoints,
    pub loss: LossBreakdown,
    pub interface_p_mw: f64,
    pub interface_q_mvar: f64,
    /// Converged with no voltage or loading violation. When false, the
    /// iterate with the lowest loss is returned for diagnostics.
    pub feasible: bool,
    pub iterations: usize,
}

/// Mode objective plus the weighted hard-constraint penalties.
fn mode_loss(
    env: &OpfEnv,
    r: &PfResult,
    bounds: &FlexBounds,
    mode: &BaselineMode,
    cfg: &AugLossConfig,
) -> LossBreakdown {
    if let BaselineMode::Requirement(req) = mode {
        return augmented_loss(r, req, bounds, &env.vmin, &env.vmax, cfg, None);
    }
    if !r.converged {
        return LossBreakdown {
            converged: false,
            total: cfg.nonconvergence_penalty(),
            ..Default::default()
        };
    }
    let norm = |x: f64, lo: f64, range: f64| if range > 0.0 { (x - lo) / range } else { 0.0 };
    let objective = match mode {
        BaselineMode::MaxP => -norm(r.interface_p_mw, bounds.p_t_min, bounds.p_range()),
        BaselineMode::MaxQ => -norm(r.interface_q_mvar, bounds.q_t_min, bounds.q_range()),
        BaselineMode::MinQ => norm(r.interface_q_mvar, bounds.q_t_min, bounds.q_range()),
        BaselineMode::Requirement(_) => unreachable!(),
    };
    let (l_v, l_lp) = penalties(r, &env.vmin, &env.vmax, cfg.lp_max);
    LossBreakdown {
        converged: true,
        objective,
        l_v,
        l_lp,
        total: objective + cfg.w_v * l_v + cfg.w_lp * l_lp,
        ..Default::default()
    }
}

/// Projected first-order descent directly on raw DER actions, using the
/// same numerical action gradients as agent training. Steps are Adam-scaled
/// and projected onto the action box; the best feasible iterate is kept.
pub fn baseline_optimize(
    env: &OpfEnv,
    status: &GridStatus,
    bounds: &FlexBounds,
    mode: BaselineMode,
    cfg: &AugLossConfig,
    opts: &BaselineOptions,
) -> Result<BaselineResult> {
    cfg.validate()?;
    let n = env.n_actions();
    let mut a = opts.init.clone().unwrap_or_else(|| vec![0.0; n]);
    if a.len() != n {
        return Err(crate::error::NumericError::Dimension {
            expected: n,
            got: a.len(),
        }
        .into());
    }
    let loss = |r: &PfResult| mode_loss(env, r, bounds, &mode, cfg);
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut warm: Option<Vec<C64>> = None;
    let mut best_feasible: Option<(f64, Vec<f64>, PfResult, LossBreakdown)> = None;
    let mut best_any: Option<(f64, Vec<f64>, PfResult, LossBreakdown)> = None;
    for k in 0..=opts.iterations {
        let g = gradient_of(
            env,
            status,
            &a,
            FD_STEP,
            warm.as_deref(),
            &loss,
            cfg.nonconvergence_penalty(),
        )?;
        let l = g.loss;
        let feasible = l.converged && l.l_v == 0.0 && l.l_lp == 0.0;
        if feasible && best_feasible.as_ref().is_none_or(|b| l.total < b.0) {
            best_feasible = Some((l.total, a.clone(), g.base.clone(), l));
        }
        if best_any.as_ref().is_none_or(|b| l.total < b.0) {
            best_any = Some((l.total, a.clone(), g.base.clone(), l));
        }
        if g.base.converged {
            warm = Some(g.base.v);
        }
        if k == opts.iterations {
            break;
        }
        let t = (k + 1) as i32;
        let lr = opts.learning_rate / (1.0 + k as f64 / 20.0).sqrt();
        for i in 0..n {
            m[i] = b1 * m[i] + (1.0 - b1) * g.grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g.grad[i] * g.grad[i];
            let step = (m[i] / (1.0 - b1.powi(t))) / ((v[i] / (1.0 - b2.powi(t))).sqrt() + eps);
            a[i] = (a[i] - lr * step).clamp(-ACTION_CLAMP, ACTION_CLAMP);
        }
    }
    let feasible = best_feasible.is_some();
    let (_, actions, r, l) = best_feasible.or(best_any).expect("at least one iterate");
    if !feasible {
        log::warn!(
            "baseline found no feasible iterate; best loss {:.4} (l_v {:.4}, l_lp {:.3}, converged {})",
            l.total,
            l.l_v,
            l.l_lp,
            l.converged
        );
    }
    Ok(BaselineResult {
        setpoints: env.scale_actions(&actions, status)?,
        actions,
        loss: l,
        interface_p_mw: r.interface_p_mw,
        interface_q_mvar: r.interface_q_mvar,
        feasible,
        iterations: opts.iterations,
    })
}
