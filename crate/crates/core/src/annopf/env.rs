use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::FlexBounds;
use crate::error::{NumericError, Result};
use crate::grid::{build_admittances, der_q_limits, AdmittanceSet, Network, C64};
use crate::io::ProfileStep;
use crate::powerflow::{solve, PfResult, Scenario};

/// Raw actions are clamped to `±ACTION_CLAMP` before scaling.
pub const ACTION_CLAMP: f64 = 1.0 - 1e-9;

/// Observable operating state: everything the agent sees except the
/// requirement. Vectors align with the network's loads and DERs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridStatus {
    pub load_p_mw: Vec<f64>,
    pub load_q_mvar: Vec<f64>,
    pub der_p_avail_mw: Vec<f64>,
    pub ext_v_pu: f64,
    pub taps: Vec<i32>,
}

impl GridStatus {
    pub fn from_network(net: &Network) -> Self {
        Self {
            load_p_mw: net.loads.iter().map(|l| l.p_mw).collect(),
            load_q_mvar: net.loads.iter().map(|l| l.q_mvar).collect(),
            der_p_avail_mw: net.ders.iter().map(|d| d.p_avail_mw).collect(),
            ext_v_pu: net.ext_grid.v_pu,
            taps: net.trafos.iter().map(|t| t.tap_pos).collect(),
        }
    }

    /// Loads scaled from the network's values, DER availability as a fraction
    /// of installed capacity.
    pub fn from_profile(net: &Network, step: &ProfileStep) -> Self {
        Self {
            load_p_mw: net.loads.iter().map(|l| l.p_mw * step.load_p_scale).collect(),
            load_q_mvar: net.loads.iter().map(|l| l.q_mvar * step.load_q_scale).collect(),
            der_p_avail_mw: net
                .ders
                .iter()
                .map(|d| d.p_inst_mw * step.der_avail_scale)
                .collect(),
            ext_v_pu: net.ext_grid.v_pu,
            taps: net.trafos.iter().map(|t| t.tap_pos).collect(),
        }
    }

    /// Agent input: load P, load Q, DER availability, external-grid voltage,
    /// then the normalized requirement.
    pub fn features(&self, r_p: f64, r_q: f64) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.load_p_mw.len() * 2 + self.der_p_avail_mw.len() + 3);
        x.extend_from_slice(&self.load_p_mw);
        x.extend_from_slice(&self.load_q_mvar);
        x.extend_from_slice(&self.der_p_avail_mw);
        x.push(self.ext_v_pu);
        x.push(r_p);
        x.push(r_q);
        x
    }
}

/// Setpoints of the controllable DERs, in [`OpfEnv::controllable`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerSetpoints {
    pub p_mw: Vec<f64>,
    pub q_mvar: Vec<f64>,
}

/// Curtailment scaler and capability-curve converter. Actions are laid out
/// `[p_raw_0, q_raw_0, p_raw_1, q_raw_1, ...]`.
pub fn scale_actions(
    net: &Network,
    controllable: &[usize],
    actions: &[f64],
    status: &GridStatus,
) -> Result<DerSetpoints, NumericError> {
    if actions.len() != 2 * controllable.len() {
        return Err(NumericError::Dimension {
            expected: 2 * controllable.len(),
            got: actions.len(),
        });
    }
    let mut p_mw = Vec::with_capacity(controllable.len());
    let mut q_mvar = Vec::with_capacity(controllable.len());
    for (k, &i) in controllable.iter().enumerate() {
        let d = &net.ders[i];
        let p_raw = actions[2 * k].clamp(-ACTION_CLAMP, ACTION_CLAMP);
        let q_raw = actions[2 * k + 1].clamp(-ACTION_CLAMP, ACTION_CLAMP);
        let p_cap = status.der_p_avail_mw[i].min(d.p_inst_mw).max(0.0);
        let p = (p_raw + 1.0) / 2.0 * p_cap;
        let (lo, hi) = der_q_limits(d, p).map_err(|e| NumericError::InvalidParameter(e.to_string()))?;
        p_mw.push(p);
        q_mvar.push(lo + (q_raw + 1.0) / 2.0 * (hi - lo));
    }
    Ok(DerSetpoints { p_mw, q_mvar })
}

/// A network prepared for repeated evaluation of DER setpoints.
#[derive(Debug, Clone)]
pub struct OpfEnv {
    pub network: Network,
    pub admittances: Arc<AdmittanceSet>,
    pub controllable: Vec<usize>,
    pub vmin: Vec<f64>,
    pub vmax: Vec<f64>,
}

impl OpfEnv {
    pub fn new(network: Network) -> Result<Self> {
        network.validate()?;
        network.require_interface()?;
        let admittances = Arc::new(build_admittances(&network, None)?);
        Ok(Self {
            controllable: network.controllable_ders(),
            vmin: network.vmin(),
            vmax: network.vmax(),
            admittances,
            network,
        })
    }

    pub fn n_actions(&self) -> usize {
        2 * self.controllable.len()
    }

    pub fn n_features(&self) -> usize {
        2 * self.network.loads.len() + self.network.ders.len() + 3
    }

    pub fn scale_actions(
        &self,
        actions: &[f64],
        status: &GridStatus,
    ) -> Result<DerSetpoints, NumericError> {
        scale_actions(&self.network, &self.controllable, actions, status)
    }

    /// Controllable DERs at natural availability with zero reactive power.
    pub fn natural_setpoints(&self, status: &GridStatus) -> DerSetpoints {
        DerSetpoints {
            p_mw: self
                .controllable
                .iter()
                .map(|&i| status.der_p_avail_mw[i].min(self.network.ders[i].p_inst_mw).max(0.0))
                .collect(),
            q_mvar: vec![0.0; self.controllable.len()],
        }
    }

    fn check_status(&self, status: &GridStatus) -> Result<(), NumericError> {
        let net = &self.network;
        for (expected, got) in [
            (net.loads.len(), status.load_p_mw.len()),
            (net.loads.len(), status.load_q_mvar.len()),
            (net.ders.len(), status.der_p_avail_mw.len()),
            (net.trafos.len(), status.taps.len()),
        ] {
            if expected != got {
                return Err(NumericError::Dimension { expected, got });
            }
        }
        if net.trafos.iter().zip(&status.taps).any(|(t, &tap)| t.tap_pos != tap) {
            return Err(NumericError::InvalidParameter(
                "status tap positions differ from the environment's network".into(),
            ));
        }
        Ok(())
    }

    /// Power-flow scenario for a status and controllable setpoints.
    /// Uncontrollable DERs inject their availability.
    pub fn scenario(
        &self,
        status: &GridStatus,
        setpoints: &DerSetpoints,
    ) -> Result<Scenario, NumericError> {
        self.check_status(status)?;
        if setpoints.p_mw.len() != self.controllable.len()
            || setpoints.q_mvar.len() != self.controllable.len()
        {
            return Err(NumericError::Dimension {
                expected: self.controllable.len(),
                got: setpoints.p_mw.len(),
            });
        }
        let net = &self.network;
        let n = net.n_bus();
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        for g in &net.gens {
            p[g.bus] += g.p_mw;
            q[g.bus] += g.q_mvar;
        }
        for (k, l) in net.loads.iter().enumerate() {
            p[l.bus] -= status.load_p_mw[k];
            q[l.bus] -= status.load_q_mvar[k];
        }
        let mut ctrl = self.controllable.iter().enumerate().peekable();
        for (i, d) in net.ders.iter().enumerate() {
            if let Some((k, _)) = ctrl.next_if(|&(_, &c)| c == i) {
                p[d.bus] += setpoints.p_mw[k];
                q[d.bus] += setpoints.q_mvar[k];
            } else {
                p[d.bus] += status.der_p_avail_mw[i].clamp(0.0, d.p_inst_mw);
                q[d.bus] += d.q_set_mvar;
            }
        }
        let base = net.base_mva;
        p.iter_mut().for_each(|x| *x /= base);
        q.iter_mut().for_each(|x| *x /= base);
        Ok(Scenario {
            p_inj: p,
            q_inj: q,
            slack_v_pu: status.ext_v_pu,
            admittances: Arc::clone(&self.admittances),
        })
    }

    pub fn evaluate(
        &self,
        status: &GridStatus,
        setpoints: &DerSetpoints,
        init: Option<&[C64]>,
    ) -> Result<PfResult, NumericError> {
        solve(&self.scenario(status, setpoints)?, init)
    }

    /// Copy of the network carrying `status` and `setpoints`, for the exact
    /// N-1 and probabilistic oracles.
    pub fn materialize(&self, status: &GridStatus, setpoints: &DerSetpoints) -> Network {
        let mut net = self.network.clone();
        for (k, l) in net.loads.iter_mut().enumerate() {
            l.p_mw = status.load_p_mw[k];
            l.q_mvar = status.load_q_mvar[k];
        }
        for (i, d) in net.ders.iter_mut().enumerate() {
            d.p_avail_mw = status.der_p_avail_mw[i].clamp(0.0, d.p_inst_mw);
            if !d.controllable {
                d.p_set_mw = d.p_avail_mw;
            }
        }
        for (k, &i) in self.controllable.iter().enumerate() {
            net.ders[i].p_set_mw = setpoints.p_mw[k];
            net.ders[i].q_set_mvar = setpoints.q_mvar[k];
        }
        net.ext_grid.v_pu = status.ext_v_pu;
        net
    }

    /// Interface extremes from four probe flows: all controllable DERs at
    /// zero and at full availability with `Q = 0`, and at full availability
    /// with `Q` at the upper and lower capability limit.
    pub fn flex_bounds(&self, status: &GridStatus) -> Result<FlexBounds, NumericError> {
        let full = self.natural_setpoints(status);
        let off = DerSetpoints {
            p_mw: vec![0.0; self.controllable.len()],
            q_mvar: vec![0.0; self.controllable.len()],
        };
        let q_at = |upper: bool| -> Result<DerSetpoints, NumericError> {
            let q = self
                .controllable
                .iter()
                .zip(&full.p_mw)
                .map(|(&i, &p)| {
                    der_q_limits(&self.network.ders[i], p)
                        .map(|(lo, hi)| if upper { hi } else { lo })
                        .map_err(|e| NumericError::InvalidParameter(e.to_string()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(DerSetpoints {
                p_mw: full.p_mw.clone(),
                q_mvar: q,
            })
        };
        let probes = [full.clone(), off, q_at(true)?, q_at(false)?];
        let mut flows = Vec::with_capacity(4);
        for (k, sp) in probes.iter().enumerate() {
            let r = self.evaluate(status, sp, None)?;
            if !r.converged {
                return Err(NumericError::NonConvergence(format!(
                    "flexibility probe {k}: {}",
                    r.diagnostic.unwrap_or_default()
                )));
            }
            flows.push((r.interface_p_mw, r.interface_q_mvar));
        }
        Ok(FlexBounds {
            p_t_min: flows[0].0.min(flows[1].0),
            p_t_max: flows[0].0.max(flows[1].0),
            q_t_min: flows[2].1.min(flows[3].1),
            q_t_max: flows[2].1.max(flows[3].1),
        })
    }
}
