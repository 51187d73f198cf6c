use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::env::{GridStatus, OpfEnv};
use super::{FlexBounds, PqRequirement};
use crate::error::{NumericError, Result};
use crate::io::ProfileStep;

/// Relative noise applied to profile time steps. `common` scales a step's
/// load and availability factors as a whole, which keeps devices
/// correlated; `device` adds small independent per-device noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleNoise {
    pub common: f64,
    pub device: f64,
}

impl Default for SampleNoise {
    fn default() -> Self {
        Self {
            common: 0.05,
            device: 0.01,
        }
    }
}

impl SampleNoise {
    pub const NONE: SampleNoise = SampleNoise {
        common: 0.0,
        device: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub step: usize,
    pub status: GridStatus,
    pub req: PqRequirement,
    pub bounds: FlexBounds,
}

impl Sample {
    pub fn features(&self) -> Vec<f64> {
        self.status.features(self.req.r_p, self.req.r_q)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
    /// Draws discarded because a flexibility probe did not converge.
    pub dropped: usize,
    pub seed: u64,
}

/// Draws `n_req_per_step` samples per profile step, each a noised grid
/// status paired with a uniform normalized requirement.
pub fn generate_samples(
    env: &OpfEnv,
    profiles: &[ProfileStep],
    n_req_per_step: usize,
    noise: SampleNoise,
    seed: u64,
) -> Result<SampleSet> {
    if profiles.is_empty() {
        return Err(NumericError::Empty("profile time series").into());
    }
    if !(noise.common >= 0.0 && noise.device >= 0.0) {
        return Err(NumericError::InvalidParameter("sample noise must be non-negative".into()).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(profiles.len() * n_req_per_step);
    for (step, prof) in profiles.iter().enumerate() {
        for _ in 0..n_req_per_step {
            let mut gauss = |scale: f64| -> f64 {
                let z: f64 = StandardNormal.sample(&mut rng);
                1.0 + scale * z
            };
            let load_factor = gauss(noise.common);
            let der_factor = gauss(noise.common);
            let step_scaled = ProfileStep {
                load_p_scale: prof.load_p_scale * load_factor,
                load_q_scale: prof.load_q_scale * load_factor,
                der_avail_scale: prof.der_avail_scale * der_factor,
            };
            let mut status = GridStatus::from_profile(&env.network, &step_scaled);
            for (p, q) in status.load_p_mw.iter_mut().zip(status.load_q_mvar.iter_mut()) {
                let f = gauss(noise.device);
                *p *= f;
                *q *= f;
            }
            for (a, d) in status.der_p_avail_mw.iter_mut().zip(&env.network.ders) {
                *a = (*a * gauss(noise.device)).clamp(0.0, d.p_inst_mw);
            }
            let r_p: f64 = rng.random();
            let r_q: f64 = rng.random();
            draws.push((step, status, r_p, r_q));
        }
    }
    let bounds: Vec<_> = {
        use rayon::prelude::*;
        draws
            .par_iter()
            .map(|(_, status, _, _)| env.flex_bounds(status))
            .collect()
    };
    let mut samples = Vec::with_capacity(draws.len());
    let mut dropped = 0;
    for ((step, status, r_p, r_q), b) in draws.into_iter().zip(bounds) {
        match b {
            Ok(b) if b.p_range() > 0.0 && b.q_range() > 0.0 => samples.push(Sample {
                step,
                req: PqRequirement::resolve(r_p, r_q, &b),
                status,
                bounds: b,
            }),
            Ok(_) | Err(NumericError::NonConvergence(_)) => dropped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    if dropped > 0 {
        log::warn!("{dropped} samples dropped: flexibility probes did not converge");
    }
    Ok(SampleSet {
        samples,
        dropped,
        seed,
    })
}
