use serde::{Deserialize, Serialize};

use super::{FlexBounds, PqRequirement};
use crate::error::NumericError;
use crate::powerflow::PfResult;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugLossConfig {
    pub w_v: f64,
    pub w_lp: f64,
    pub lp_max: f64,
    /// Inward tightening of the violated bound at buses marked by the
    /// probabilistic screen (pu).
    pub robust_margin_v: f64,
    pub prob_threshold: f64,
}

impl Default for AugLossConfig {
    fn default() -> Self {
        Self {
            w_v: 100.0,
            w_lp: 1.0,
            lp_max: 100.0,
            robust_margin_v: 0.01,
            prob_threshold: 0.10,
        }
    }
}

impl AugLossConfig {
    /// Objective only. Used as the untrained-penalty reference agent.
    pub fn unpenalized() -> Self {
        Self {
            w_v: 0.0,
            w_lp: 0.0,
            ..Self::default()
        }
    }

    /// Constant loss of a scenario whose power flow does not converge.
    pub fn nonconvergence_penalty(&self) -> f64 {
        10.0 * self.w_v.max(1.0)
    }

    pub fn validate(&self) -> Result<(), NumericError> {
        if !(self.w_v >= 0.0 && self.w_lp >= 0.0) {
            return Err(NumericError::InvalidParameter("penalty weights must be non-negative".into()));
        }
        if !(self.lp_max > 0.0) {
            return Err(NumericError::InvalidParameter("lp_max must be positive".into()));
        }
        if !(self.robust_margin_v >= 0.0) || !(0.0..=1.0).contains(&self.prob_threshold) {
            return Err(NumericError::InvalidParameter(
                "robust margin must be non-negative and the probability threshold in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// A line flagged by the N-1 screen: its N-0 loading must fall below
/// `target_lp`, the loading at marking time reduced by the predicted
/// contingency overload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineMark {
    pub branch: usize,
    pub target_lp: f64,
}

/// A bus flagged by the probabilistic screen, pushed away from the upper or
/// lower voltage bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BusMark {
    pub bus: usize,
    pub upper: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SoftMarks {
    pub lines: Vec<LineMark>,
    pub buses: Vec<BusMark>,
}

impl SoftMarks {
    pub fn is_empty(&self) -> bool {
        self.lines.is_empty() && self.buses.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub converged: bool,
    pub objective: f64,
    pub l_v: f64,
    pub l_lp: f64,
    pub l_soft_lines: f64,
    pub l_soft_buses: f64,
    pub total: f64,
}

/// Interface deviation from the requirement, each axis normalized by its
/// flexibility range. A degenerate axis contributes nothing.
pub fn objective_normalized(result: &PfResult, req: &PqRequirement, bounds: &FlexBounds) -> f64 {
    let axis = |achieved: f64, target: f64, range: f64, name: &str| {
        if range > 0.0 {
            (achieved - target).abs() / range
        } else {
            log::warn!("degenerate {name} flexibility range; axis ignored in the objective");
            0.0
        }
    };
    axis(result.interface_p_mw, req.p_sp_mw, bounds.p_range(), "P")
        + axis(result.interface_q_mvar, req.q_sp_mvar, bounds.q_range(), "Q")
}

/// Voltage-band violation sum (pu) and loading excess sum (percent).
pub fn penalties(result: &PfResult, vmin: &[f64], vmax: &[f64], lp_max: f64) -> (f64, f64) {
    let l_v = result
        .v
        .iter()
        .zip(vmin.iter().zip(vmax))
        .map(|(v, (lo, hi))| {
            let m = v.norm();
            (lo - m).max(m - hi).max(0.0)
        })
        .sum();
    let l_lp = result.lp.iter().map(|&lp| (lp - lp_max).max(0.0)).sum();
    (l_v, l_lp)
}

/// `objective + w_v·l_v + w_lp·l_lp`, plus the soft-constraint terms of
/// any marks.
pub fn augmented_loss(
    result: &PfResult,
    req: &PqRequirement,
    bounds: &FlexBounds,
    vmin: &[f64],
    vmax: &[f64],
    cfg: &AugLossConfig,
    marks: Option<&SoftMarks>,
) -> LossBreakdown {
    if !result.converged {
        return LossBreakdown {
            converged: false,
            total: cfg.nonconvergence_penalty(),
            ..Default::default()
        };
    }
    let objective = objective_normalized(result, req, bounds);
    let (l_v, l_lp) = penalties(result, vmin, vmax, cfg.lp_max);
    let mut l_soft_lines = 0.0;
    let mut l_soft_buses = 0.0;
    if let Some(m) = marks {
        for line in &m.lines {
            l_soft_lines += (result.lp[line.branch] - line.target_lp).max(0.0);
        }
        for b in &m.buses {
            let vm = result.v[b.bus].norm();
            l_soft_buses += if b.upper {
                (vm - (vmax[b.bus] - cfg.robust_margin_v)).max(0.0)
            } else {
                (vmin[b.bus] + cfg.robust_margin_v - vm).max(0.0)
            };
        }
    }
    let total = objective
        + cfg.w_v * l_v
        + cfg.w_lp * l_lp
        + cfg.w_lp * l_soft_lines
        + cfg.w_v * l_soft_buses;
    LossBreakdown {
        converged: true,
        objective,
        l_v,
        l_lp,
        l_soft_lines,
        l_soft_buses,
        total,
    }
}
