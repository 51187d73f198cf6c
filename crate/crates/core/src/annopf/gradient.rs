use rayon::prelude::*;

use super::env::{GridStatus, OpfEnv, ACTION_CLAMP};
use super::loss::{augmented_loss, AugLossConfig, LossBreakdown, SoftMarks};
use super::{FlexBounds, PqRequirement};
use crate::error::NumericError;
use crate::grid::C64;
use crate::powerflow::{solve, PfResult};

/// Central-difference step in raw action space.
pub const FD_STEP: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct ActionGradient {
    pub base: PfResult,
    pub loss: LossBreakdown,
    /// `dL/da`; all zero when the unperturbed flow does not converge.
    pub grad: Vec<f64>,
    /// Coordinates that fell back to a one-sided difference.
    pub one_sided: usize,
}

/// Numerical gradient of the augmented loss with respect to the raw actions.
#[allow(clippy::too_many_arguments)]
pub fn action_gradients(
    env: &OpfEnv,
    status: &GridStatus,
    req: &PqRequirement,
    bounds: &FlexBounds,
    cfg: &AugLossConfig,
    actions: &[f64],
    marks: Option<&SoftMarks>,
    init: Option<&[C64]>,
) -> Result<ActionGradient, NumericError> {
    let loss = |r: &PfResult| augmented_loss(r, req, bounds, &env.vmin, &env.vmax, cfg, marks);
    gradient_of(env, status, actions, FD_STEP, init, &loss, cfg.nonconvergence_penalty())
}

/// Central differences of an arbitrary loss of the power-flow result.
///
/// Each perturbed flow is warm-started from the unperturbed solution.
/// Perturbations are clipped to the action box, so coordinates at a bound
/// use the shortened interval; a non-converged side falls back to the
/// one-sided difference against the unperturbed point.
pub(crate) fn gradient_of(
    env: &OpfEnv,
    status: &GridStatus,
    actions: &[f64],
    h: f64,
    init: Option<&[C64]>,
    loss: &(dyn Fn(&PfResult) -> LossBreakdown + Sync),
    nonconvergence_penalty: f64,
) -> Result<ActionGradient, NumericError> {
    let a: Vec<f64> = actions
        .iter()
        .map(|x| x.clamp(-ACTION_CLAMP, ACTION_CLAMP))
        .collect();
    let n = a.len();
    let base = env.evaluate(status, &env.scale_actions(&a, status)?, init)?;
    if !base.converged {
        return Ok(ActionGradient {
            base,
            loss: LossBreakdown {
                converged: false,
                total: nonconvergence_penalty,
                ..Default::default()
            },
            grad: vec![0.0; n],
            one_sided: 0,
        });
    }
    let l0 = loss(&base);
    let probes: Vec<(f64, Option<f64>)> = (0..2 * n)
        .into_par_iter()
        .map(|j| -> Result<(f64, Option<f64>), NumericError> {
            let i = j / 2;
            let mut pa = a.clone();
            pa[i] = if j % 2 == 0 {
                (a[i] + h).min(ACTION_CLAMP)
            } else {
                (a[i] - h).max(-ACTION_CLAMP)
            };
            let r = solve(&env.scenario(status, &env.scale_actions(&pa, status)?)?, Some(&base.v))?;
            Ok((pa[i], r.converged.then(|| loss(&r).total)))
        })
        .collect::<Result<_, _>>()?;
    let mut one_sided = 0;
    let grad = (0..n)
        .map(|i| {
            let (ap, lp) = probes[2 * i];
            let (am, lm) = probes[2 * i + 1];
            match (lp, lm) {
                (Some(lp), Some(lm)) if ap > am => (lp - lm) / (ap - am),
                (Some(lp), None) if ap > a[i] => {
                    one_sided += 1;
                    (lp - l0.total) / (ap - a[i])
                }
                (None, Some(lm)) if a[i] > am => {
                    one_sided += 1;
                    (l0.total - lm) / (a[i] - am)
                }
                _ => 0.0,
            }
        })
        .collect();
    Ok(ActionGradient {
        base,
        loss: l0,
        grad,
        one_sided,
    })
}
