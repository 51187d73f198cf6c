//! PQ-area estimation: sweep the requirement grid through a trained agent,
//! verify hard constraints by power flow and screen soft constraints with
//! the approximators.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annopf::{
    penalties, AugLossConfig, DerSetpoints, FlexBounds, GridStatus, N1Screen, OpfEnv, PpfScreen,
    PqRequirement,
};
use crate::approximators::label_sample;
use crate::contingency::ContingencySet;
use crate::error::{Error, NumericError, Result};
use crate::neural::Mlp;
use crate::powerflow::{batch_solve, PfResult, Scenario};
use crate::ppf::UncertaintySpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointClass {
    Feasible,
    HardViolation,
    SoftViolation,
    NonConvergent,
}

impl PointClass {
    pub fn as_str(self) -> &'static str {
        match self {
            PointClass::Feasible => "feasible",
            PointClass::HardViolation => "hard_violation",
            PointClass::SoftViolation => "soft_violation",
            PointClass::NonConvergent => "non_convergent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaPoint {
    pub req: PqRequirement,
    pub setpoints: DerSetpoints,
    pub achieved_p_mw: f64,
    pub achieved_q_mvar: f64,
    pub class: PointClass,
    /// Violated quantities, e.g. `v:bus3`, `lp:branch7`, `n1:branch2`, `ppf:bus5`.
    pub detail: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PqArea {
    pub resolution: usize,
    pub bounds: FlexBounds,
    pub points: Vec<AreaPoint>,
    /// Convex hull of the feasible achieved points, counter-clockwise.
    pub hull: Vec<(f64, f64)>,
    pub prediction_ms: f64,
    pub postprocessing_ms: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub feasible: usize,
    pub hard_violation: usize,
    pub soft_violation: usize,
    pub non_convergent: usize,
}

impl PqArea {
    pub fn counts(&self) -> ClassCounts {
        let mut c = ClassCounts::default();
        for p in &self.points {
            match p.class {
                PointClass::Feasible => c.feasible += 1,
                PointClass::HardViolation => c.hard_violation += 1,
                PointClass::SoftViolation => c.soft_violation += 1,
                PointClass::NonConvergent => c.non_convergent += 1,
            }
        }
        c
    }
}

/// Normalized requirements `(r_p, r_q)` on an `n × n` grid over `[0,1]²`,
/// row-major with `r_p` as the outer axis.
pub fn requirement_grid(n: usize) -> Result<Vec<(f64, f64)>> {
    if n < 2 {
        return Err(NumericError::InvalidParameter(format!("grid resolution must be at least 2, got {n}")).into());
    }
    let axis: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    Ok(axis
        .iter()
        .flat_map(|&p| axis.iter().map(move |&q| (p, q)))
        .collect())
}

/// Classifies solved points: non-convergence first, then N-0 voltage and
/// loading limits, then the approximator screens.
pub fn postprocess(
    env: &OpfEnv,
    scenarios: &[Scenario],
    results: &[PfResult],
    n1: &dyn N1Screen,
    ppf: &dyn PpfScreen,
    cfg: &AugLossConfig,
) -> Result<Vec<(PointClass, Vec<String>)>> {
    if scenarios.len() != results.len() {
        return Err(NumericError::Dimension {
            expected: scenarios.len(),
            got: results.len(),
        }
        .into());
    }
    scenarios
        .par_iter()
        .zip(results)
        .map(|(sc, r)| classify(env, sc, r, n1, ppf, cfg))
        .collect()
}

fn classify(
    env: &OpfEnv,
    sc: &Scenario,
    r: &PfResult,
    n1: &dyn N1Screen,
    ppf: &dyn PpfScreen,
    cfg: &AugLossConfig,
) -> Result<(PointClass, Vec<String>)> {
    if !r.converged {
        return Ok((PointClass::NonConvergent, Vec::new()));
    }
    let (l_v, l_lp) = penalties(r, &env.vmin, &env.vmax, cfg.lp_max);
    if l_v > 0.0 || l_lp > 0.0 {
        let mut detail: Vec<String> = r
            .v
            .iter()
            .enumerate()
            .filter(|(i, v)| {
                let m = v.norm();
                m < env.vmin[*i] || m > env.vmax[*i]
            })
            .map(|(i, _)| format!("v:bus{i}"))
            .collect();
        detail.extend(
            r.lp.iter()
                .enumerate()
                .filter(|(_, &lp)| lp > cfg.lp_max)
                .map(|(j, _)| format!("lp:branch{j}")),
        );
        return Ok((PointClass::HardViolation, detail));
    }
    let mut detail: Vec<String> = n1
        .predict_n1(sc, r)?
        .into_iter()
        .filter(|&(_, pred)| !(pred <= cfg.lp_max))
        .map(|(j, _)| format!("n1:branch{j}"))
        .collect();
    detail.extend(
        ppf.predict_prob(sc, r)?
            .into_iter()
            .enumerate()
            .filter(|&(_, p)| p > cfg.prob_threshold)
            .map(|(i, _)| format!("ppf:bus{i}")),
    );
    let class = if detail.is_empty() {
        PointClass::Feasible
    } else {
        PointClass::SoftViolation
    };
    Ok((class, detail))
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Predicts setpoints for every grid requirement, solves the resulting
/// flows and classifies each point.
pub fn predict_area(
    env: &OpfEnv,
    status: &GridStatus,
    model: &Mlp,
    n: usize,
    n1: &dyn N1Screen,
    ppf: &dyn PpfScreen,
    cfg: &AugLossConfig,
) -> Result<PqArea> {
    cfg.validate()?;
    let grid = requirement_grid(n)?;
    let bounds = env.flex_bounds(status)?;

    let t0 = Instant::now();
    let setpoints: Vec<(PqRequirement, DerSetpoints)> = grid
        .par_iter()
        .map(|&(r_p, r_q)| {
            let a = model.predict(&status.features(r_p, r_q))?;
            Ok((PqRequirement::resolve(r_p, r_q, &bounds), env.scale_actions(&a, status)?))
        })
        .collect::<Result<_>>()?;
    let prediction_ms = ms(t0);

    let t1 = Instant::now();
    let scenarios: Vec<Scenario> = setpoints
        .iter()
        .map(|(_, sp)| env.scenario(status, sp))
        .collect::<std::result::Result<_, _>>()?;
    let results = batch_solve(&scenarios)?;
    let classes = postprocess(env, &scenarios, &results, n1, ppf, cfg)?;
    let points: Vec<AreaPoint> = setpoints
        .into_iter()
        .zip(results)
        .zip(classes)
        .map(|(((req, sp), r), (class, detail))| AreaPoint {
            req,
            setpoints: sp,
            achieved_p_mw: r.interface_p_mw,
            achieved_q_mvar: r.interface_q_mvar,
            class,
            detail,
        })
        .collect();
    let hull = convex_hull(
        points
            .iter()
            .filter(|p| p.class == PointClass::Feasible)
            .map(|p| (p.achieved_p_mw, p.achieved_q_mvar))
            .collect(),
    );
    let postprocessing_ms = ms(t1);
    Ok(PqArea {
        resolution: n,
        bounds,
        points,
        hull,
        prediction_ms,
        postprocessing_ms,
    })
}

/// Andrew's monotone chain; returns the hull counter-clockwise without
/// repeating the first vertex. Collinear points are dropped.
pub fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite coordinates"));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in [pts.clone(), pts.into_iter().rev().collect()] {
        let start = hull.len();
        for p in pass {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Exact-oracle audit of the soft screening.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    /// Points that passed the N-0 check (feasible or soft violation).
    pub n_hard_feasible: usize,
    /// Hard-feasible points the exact oracles flag.
    pub n_true_soft: usize,
    pub n_feasible: usize,
    /// Feasible-classified points with an exact soft violation.
    pub false_feasible: usize,
    pub false_feasible_rate: f64,
    pub n_soft: usize,
    /// Soft-classified points the exact oracles find clean.
    pub false_infeasible: usize,
    pub false_infeasible_rate: f64,
    pub true_soft_fraction: f64,
    /// Exact soft-violation flag per point; `None` for points not checked.
    pub exact_soft: Vec<Option<bool>>,
}

/// Re-checks every hard-feasible point with the exact N-1 analysis and
/// Monte-Carlo PPF. Point `k` samples with seed `spec.seed + k`.
pub fn verify_area(
    env: &OpfEnv,
    status: &GridStatus,
    area: &PqArea,
    spec: &UncertaintySpec,
    cfg: &AugLossConfig,
) -> Result<VerifyReport> {
    let cases = ContingencySet::new(&env.network)?;
    let exact_soft: Vec<Option<bool>> = area
        .points
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            if !matches!(p.class, PointClass::Feasible | PointClass::SoftViolation) {
                return Ok(None);
            }
            let labels = label_sample(env, &cases, status, &p.setpoints, spec, cfg.lp_max, k)?;
            let (_, _, n1, prob) = labels.ok_or_else(|| {
                NumericError::NonConvergence(format!("area point {k} no longer converges"))
            })?;
            let n1_flag = n1.is_none_or(|l| l.iter().any(|&x| x > cfg.lp_max));
            let ppf_flag = prob.iter().any(|&x| x > cfg.prob_threshold);
            Ok(Some(n1_flag || ppf_flag))
        })
        .collect::<Result<_>>()?;
    let mut r = VerifyReport {
        n_hard_feasible: 0,
        n_true_soft: 0,
        n_feasible: 0,
        false_feasible: 0,
        false_feasible_rate: 0.0,
        n_soft: 0,
        false_infeasible: 0,
        false_infeasible_rate: 0.0,
        true_soft_fraction: 0.0,
        exact_soft: Vec::new(),
    };
    for (p, flag) in area.points.iter().zip(&exact_soft) {
        let Some(flag) = *flag else { continue };
        r.n_hard_feasible += 1;
        r.n_true_soft += flag as usize;
        if p.class == PointClass::Feasible {
            r.n_feasible += 1;
            r.false_feasible += flag as usize;
        } else {
            r.n_soft += 1;
            r.false_infeasible += !flag as usize;
        }
    }
    let rate = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    r.false_feasible_rate = rate(r.false_feasible, r.n_feasible);
    r.false_infeasible_rate = rate(r.false_infeasible, r.n_soft);
    r.true_soft_fraction = rate(r.n_true_soft, r.n_hard_feasible);
    r.exact_soft = exact_soft;
    Ok(r)
}

pub const AREA_COLUMNS: [&str; 8] = [
    "r_p",
    "r_q",
    "p_sp_mw",
    "q_sp_mvar",
    "achieved_p_mw",
    "achieved_q_mvar",
    "class",
    "detail",
];

/// Area CSV: one row per grid point, `detail` entries joined by `;`.
pub fn write_area_csv(path: &Path, area: &PqArea) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Config(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(AREA_COLUMNS).map_err(csv_err)?;
    for p in &area.points {
        w.write_record([
            p.req.r_p.to_string(),
            p.req.r_q.to_string(),
            p.req.p_sp_mw.to_string(),
            p.req.q_sp_mvar.to_string(),
            p.achieved_p_mw.to_string(),
            p.achieved_q_mvar.to_string(),
            p.class.as_str().to_string(),
            p.detail.join(";"),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaSummary {
    pub resolution: usize,
    pub n_points: usize,
    pub counts: ClassCounts,
    pub prediction_ms: f64,
    pub postprocessing_ms: f64,
    pub total_ms: f64,
    pub bounds: FlexBounds,
    pub hull: Vec<(f64, f64)>,
    pub seed: Option<u64>,
    /// File name to sha256 of each model used.
    pub model_hashes: std::collections::BTreeMap<String, String>,
}

impl AreaSummary {
    pub fn new(area: &PqArea) -> Self {
        Self {
            resolution: area.resolution,
            n_points: area.points.len(),
            counts: area.counts(),
            prediction_ms: area.prediction_ms,
            postprocessing_ms: area.postprocessing_ms,
            total_ms: area.prediction_ms + area.postprocessing_ms,
            bounds: area.bounds,
            hull: area.hull.clone(),
            seed: None,
            model_hashes: Default::default(),
        }
    }
}
