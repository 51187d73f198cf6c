//! Monte-Carlo probabilistic power flow: Gaussian forecast errors on loads,
//! DER output and the external-grid voltage, and the resulting per-bus
//! voltage-band violation probabilities.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{NumericError, Result};
use crate::grid::{build_admittances, der_q_limits, AdmittanceSet, Network};
use crate::powerflow::{batch_solve_warm, solve, PfResult, Scenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintySpec {
    /// Relative standard deviation of load and uncontrollable-DER P and Q.
    pub sigma_pq_frac: f64,
    /// Relative standard deviation of the external-grid voltage.
    pub sigma_v_frac: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// Also perturb the availability of controllable DERs; their fixed
    /// setpoints are clipped to the sampled availability.
    pub perturb_controllable: bool,
}

impl Default for UncertaintySpec {
    fn default() -> Self {
        Self {
            sigma_pq_frac: 0.10,
            sigma_v_frac: 0.01,
            n_samples: 1000,
            seed: 0,
            perturb_controllable: true,
        }
    }
}

impl UncertaintySpec {
    pub fn validate(&self) -> Result<(), NumericError> {
        if !(self.sigma_pq_frac >= 0.0 && self.sigma_v_frac >= 0.0) {
            return Err(NumericError::InvalidParameter(
                "uncertainty fractions must be non-negative".into(),
            ));
        }
        if self.n_samples == 0 {
            return Err(NumericError::InvalidParameter("n_samples must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpfReport {
    pub viol_prob: Vec<f64>,
    pub aggregate_prob: f64,
    pub mean_v: Vec<f64>,
    pub std_v: Vec<f64>,
    pub n_samples: usize,
    pub n_nonconverged: usize,
}

fn perturb(rng: &mut ChaCha8Rng, value: f64, frac: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    value + frac * value.abs() * z
}

/// Draws `spec.n_samples` perturbed operating points of `net`.
///
/// Every load P and Q, every uncontrollable DER setpoint (which follows its
/// availability) and the slack voltage receive independent relative Gaussian
/// errors. Sampled DER power is clipped to `[0, p_inst]`; loads may change
/// sign.
pub fn sample_states(
    net: &Network,
    admittances: &Arc<AdmittanceSet>,
    spec: &UncertaintySpec,
) -> Vec<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = net.n_bus();
    let base = net.base_mva;
    let s = spec.sigma_pq_frac;
    (0..spec.n_samples)
        .map(|_| {
            let mut p = vec![0.0; n];
            let mut q = vec![0.0; n];
            for g in &net.gens {
                p[g.bus] += g.p_mw;
                q[g.bus] += g.q_mvar;
            }
            for l in &net.loads {
                p[l.bus] -= perturb(&mut rng, l.p_mw, s);
                q[l.bus] -= perturb(&mut rng, l.q_mvar, s);
            }
            for d in &net.ders {
                let z_p = perturb(&mut rng, d.p_avail_mw, s);
                let z_q = perturb(&mut rng, d.q_set_mvar, s);
                if d.controllable {
                    if spec.perturb_controllable {
                        let avail = z_p.clamp(0.0, d.p_inst_mw);
                        let p_set = d.p_set_mw.min(avail);
                        let (lo, hi) = der_q_limits(d, p_set.clamp(0.0, d.p_inst_mw))
                            .unwrap_or((0.0, 0.0));
                        p[d.bus] += p_set;
                        q[d.bus] += d.q_set_mvar.clamp(lo, hi);
                    } else {
                        p[d.bus] += d.p_set_mw;
                        q[d.bus] += d.q_set_mvar;
                    }
                } else {
                    let shift = z_p - d.p_avail_mw;
                    p[d.bus] += (d.p_set_mw + shift).clamp(0.0, d.p_inst_mw);
                    q[d.bus] += z_q;
                }
            }
            let slack_v = perturb(&mut rng, net.ext_grid.v_pu, spec.sigma_v_frac);
            p.iter_mut().for_each(|x| *x /= base);
            q.iter_mut().for_each(|x| *x /= base);
            Scenario {
                p_inj: p,
                q_inj: q,
                slack_v_pu: slack_v,
                admittances: Arc::clone(admittances),
            }
        })
        .collect()
}

/// Violation statistics over solved samples. Non-converged samples count as
/// violating at every bus.
pub fn summarize(results: &[PfResult], vmin: &[f64], vmax: &[f64]) -> PpfReport {
    let n = vmin.len();
    let total = results.len().max(1) as f64;
    let mut viol = vec![0usize; n];
    let mut any = 0usize;
    let mut sum = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    let mut converged = 0usize;
    for r in results {
        if !r.converged {
            viol.iter_mut().for_each(|c| *c += 1);
            any += 1;
            continue;
        }
        converged += 1;
        let mut hit = false;
        for b in 0..n {
            let vm = r.v[b].norm();
            sum[b] += vm;
            sum_sq[b] += vm * vm;
            if vm < vmin[b] || vm > vmax[b] {
                viol[b] += 1;
                hit = true;
            }
        }
        any += hit as usize;
    }
    let c = converged.max(1) as f64;
    let mean_v: Vec<f64> = sum.iter().map(|s| s / c).collect();
    let std_v = sum_sq
        .iter()
        .zip(&mean_v)
        .map(|(sq, m)| (sq / c - m * m).max(0.0).sqrt())
        .collect();
    PpfReport {
        viol_prob: viol.iter().map(|&k| k as f64 / total).collect(),
        aggregate_prob: any as f64 / total,
        mean_v,
        std_v,
        n_samples: results.len(),
        n_nonconverged: results.len() - converged,
    }
}

/// Runs the sampling and the power flows, warm-started from `base_v`.
pub fn run_mcs_with(
    net: &Network,
    admittances: &Arc<AdmittanceSet>,
    spec: &UncertaintySpec,
    base_v: &[crate::grid::C64],
) -> Result<PpfReport> {
    spec.validate()?;
    let samples = sample_states(net, admittances, spec);
    let results = batch_solve_warm(&samples, base_v)?;
    Ok(summarize(&results, &net.vmin(), &net.vmax()))
}

pub fn run_mcs(net: &Network, spec: &UncertaintySpec) -> Result<PpfReport> {
    let adm = Arc::new(build_admittances(net, None)?);
    let (p, q) = crate::grid::aggregate_injections(net);
    let base = solve(
        &Scenario {
            p_inj: p,
            q_inj: q,
            slack_v_pu: net.ext_grid.v_pu,
            admittances: Arc::clone(&adm),
        },
        None,
    )?;
    if !base.converged {
        return Err(NumericError::NonConvergence("PPF base case".into()).into());
    }
    run_mcs_with(net, &adm, spec, &base.v)
}
