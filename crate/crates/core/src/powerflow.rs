//! Newton-Raphson AC power flow in polar coordinates with a sparse Jacobian,
//! plus batched evaluation of many scenarios.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::NumericError;
use crate::grid::{AdmittanceSet, C64};
use crate::sparse::{minimum_degree_order, CscMatrix, CsrMatrix, SparseLu};

pub const MISMATCH_TOL: f64 = 1e-8;
pub const MAX_ITERATIONS: usize = 30;

/// One power-flow problem: bus injections on a given topology.
#[derive(Debug, Clone)]
pub struct Scenario {
    /// Net active injection per bus (pu). The slack entry is ignored.
    pub p_inj: Vec<f64>,
    pub q_inj: Vec<f64>,
    pub slack_v_pu: f64,
    pub admittances: Arc<AdmittanceSet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfResult {
    pub v: Vec<C64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_mismatch: f64,
    pub diagnostic: Option<String>,
    /// Branch current magnitudes (pu) at the from and to sides.
    pub i_f: Vec<f64>,
    pub i_t: Vec<f64>,
    /// Loading percent per branch.
    pub lp: Vec<f64>,
    /// Aggregated interface flow, HV side, positive toward the external grid.
    pub interface_p_mw: f64,
    pub interface_q_mvar: f64,
    /// Power delivered by the external grid.
    pub slack_p_mw: f64,
    pub slack_q_mvar: f64,
}

impl PfResult {
    pub fn vm(&self) -> Vec<f64> {
        self.v.iter().map(|v| v.norm()).collect()
    }
}

/// Sparsity pattern of the reduced Jacobian, fixed per topology.
///
/// Unknowns of non-slack bus with elimination position `o` are `θ` at column
/// `2o` and `|V|` at `2o + 1`; the P and Q balance equations use rows `2o`
/// and `2o + 1`. Positions follow a minimum-degree order of the bus graph.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct JacobianPlan {
    pos: Vec<Option<usize>>,
    dim: usize,
    colptr: Vec<usize>,
    rowidx: Vec<usize>,
    entries: Vec<JacEntry>,
}

#[derive(Debug, Clone, PartialEq)]
struct JacEntry {
    row_bus: usize,
    col_bus: usize,
    /// Index into `ybus.data()`, `None` for a structurally empty diagonal.
    ydata: Option<usize>,
    /// Value slots for dP/dθ, dP/dV, dQ/dθ, dQ/dV.
    slots: [usize; 4],
}

impl JacobianPlan {
    pub(crate) fn new(ybus: &CsrMatrix<C64>, slack: usize) -> Self {
        let n = ybus.nrows();
        let others: Vec<usize> = (0..n).filter(|&b| b != slack).collect();
        let mut local = vec![usize::MAX; n];
        for (k, &b) in others.iter().enumerate() {
            local[b] = k;
        }
        let adjacency: Vec<Vec<usize>> = others
            .iter()
            .map(|&b| {
                ybus.row(b)
                    .filter(|&(c, _)| c != slack && c != b)
                    .map(|(c, _)| local[c])
                    .collect()
            })
            .collect();
        let order = minimum_degree_order(&adjacency);
        let mut pos = vec![None; n];
        for (o, &k) in order.iter().enumerate() {
            pos[others[k]] = Some(o);
        }
        let dim = 2 * others.len();

        let mut raw: Vec<(usize, usize, Option<usize>)> = Vec::new();
        for &i in &others {
            let mut has_diag = false;
            let start = ybus.indptr()[i];
            for (off, (k, _)) in ybus.row(i).enumerate() {
                if k == slack {
                    continue;
                }
                has_diag |= k == i;
                raw.push((i, k, Some(start + off)));
            }
            if !has_diag {
                raw.push((i, i, None));
            }
        }
        // (row, col, entry, slot) for every scalar position
        let mut cells = Vec::with_capacity(4 * raw.len());
        for (e, &(i, k, _)) in raw.iter().enumerate() {
            let (ri, ck) = (2 * pos[i].unwrap(), 2 * pos[k].unwrap());
            cells.push((ri, ck, e, 0));
            cells.push((ri, ck + 1, e, 1));
            cells.push((ri + 1, ck, e, 2));
            cells.push((ri + 1, ck + 1, e, 3));
        }
        cells.sort_by_key(|&(r, c, _, _)| (c, r));
        let mut colptr = vec![0usize; dim + 1];
        let mut rowidx = Vec::with_capacity(cells.len());
        let mut entries: Vec<JacEntry> = raw
            .iter()
            .map(|&(i, k, y)| JacEntry {
                row_bus: i,
                col_bus: k,
                ydata: y,
                slots: [0; 4],
            })
            .collect();
        for (slot, &(r, c, e, which)) in cells.iter().enumerate() {
            colptr[c + 1] += 1;
            rowidx.push(r);
            entries[e].slots[which] = slot;
        }
        for c in 0..dim {
            colptr[c + 1] += colptr[c];
        }
        Self {
            pos,
            dim,
            colptr,
            rowidx,
            entries,
        }
    }

    fn assemble(&self, ybus: &CsrMatrix<C64>, v: &[C64], ibus: &[C64]) -> CscMatrix {
        let mut values = vec![0.0; self.rowidx.len()];
        let j = C64::new(0.0, 1.0);
        for e in &self.entries {
            let (i, k) = (e.row_bus, e.col_bus);
            let y = e.ydata.map_or(C64::new(0.0, 0.0), |d| ybus.data()[d]);
            let vn_k = v[k] / v[k].norm();
            let mut d_va = -j * v[i] * (y * v[k]).conj();
            let mut d_vm = v[i] * (y * vn_k).conj();
            if i == k {
                d_va += j * v[i] * ibus[i].conj();
                d_vm += ibus[i].conj() * vn_k;
            }
            values[e.slots[0]] = d_va.re;
            values[e.slots[1]] = d_vm.re;
            values[e.slots[2]] = d_va.im;
            values[e.slots[3]] = d_vm.im;
        }
        CscMatrix {
            n: self.dim,
            colptr: self.colptr.clone(),
            rowidx: self.rowidx.clone(),
            values,
        }
    }
}

fn mismatch(
    adm: &AdmittanceSet,
    v: &[C64],
    p: &[f64],
    q: &[f64],
    f: &mut [f64],
) -> (Vec<C64>, f64) {
    let ibus = adm.ybus.mul_vec(v);
    let mut worst = 0.0f64;
    for (b, pos) in adm.plan.pos.iter().enumerate() {
        if let Some(o) = pos {
            let s = v[b] * ibus[b].conj();
            let dp = s.re - p[b];
            let dq = s.im - q[b];
            f[2 * o] = dp;
            f[2 * o + 1] = dq;
            worst = worst.max(dp.abs()).max(dq.abs());
        }
    }
    if f.iter().any(|x| !x.is_finite()) {
        worst = f64::INFINITY;
    }
    (ibus, worst)
}

/// Solves one scenario. `init` seeds the iteration (warm start); otherwise
/// a flat start at the slack voltage magnitude is used.
pub fn solve(scenario: &Scenario, init: Option<&[C64]>) -> Result<PfResult, NumericError> {
    let adm = &*scenario.admittances;
    let n = adm.n_bus();
    for len in [scenario.p_inj.len(), scenario.q_inj.len()] {
        if len != n {
            return Err(NumericError::Dimension {
                expected: n,
                got: len,
            });
        }
    }
    let mut v: Vec<C64> = match init {
        Some(v0) if v0.len() != n => {
            return Err(NumericError::Dimension {
                expected: n,
                got: v0.len(),
            })
        }
        Some(v0) => v0.to_vec(),
        None => vec![C64::new(scenario.slack_v_pu, 0.0); n],
    };
    v[adm.slack] = C64::new(scenario.slack_v_pu, 0.0);
    let mut vm: Vec<f64> = v.iter().map(|x| x.norm()).collect();
    let mut va: Vec<f64> = v.iter().map(|x| x.arg()).collect();

    let plan = &adm.plan;
    let mut f = vec![0.0; plan.dim];
    let (mut ibus, mut worst) = mismatch(adm, &v, &scenario.p_inj, &scenario.q_inj, &mut f);
    let mut iterations = 0;
    let mut diagnostic = None;
    while worst >= MISMATCH_TOL && iterations < MAX_ITERATIONS {
        if !worst.is_finite() {
            diagnostic = Some("diverged (non-finite mismatch)".to_string());
            break;
        }
        let jac = plan.assemble(&adm.ybus, &v, &ibus);
        let lu = match SparseLu::factor(&jac) {
            Ok(lu) => lu,
            Err(e) => {
                diagnostic = Some(format!("singular Jacobian: {e}"));
                break;
            }
        };
        let mut dx = f.clone();
        lu.solve_in_place(&mut dx);
        for (b, pos) in plan.pos.iter().enumerate() {
            if let Some(o) = pos {
                va[b] -= dx[2 * o];
                vm[b] -= dx[2 * o + 1];
            }
        }
        for b in 0..n {
            v[b] = C64::from_polar(vm[b], va[b]);
        }
        iterations += 1;
        (ibus, worst) = mismatch(adm, &v, &scenario.p_inj, &scenario.q_inj, &mut f);
    }
    let converged = worst < MISMATCH_TOL;
    if !converged && diagnostic.is_none() {
        diagnostic = Some(format!(
            "no convergence after {iterations} iterations (mismatch {worst:.3e})"
        ));
    }
    Ok(finish(adm, v, converged, iterations, worst, diagnostic))
}

fn finish(
    adm: &AdmittanceSet,
    v: Vec<C64>,
    converged: bool,
    iterations: usize,
    worst: f64,
    diagnostic: Option<String>,
) -> PfResult {
    let (i_f, i_t) = branch_currents(&v, adm);
    let lp = loading_percent(&i_f, &i_t, adm);
    let cf = adm.yf.mul_vec(&v);
    let mut s_iface = C64::new(0.0, 0.0);
    for &br in &adm.interface_branches {
        let hv = adm.branch_from[br];
        s_iface -= v[hv] * cf[br].conj();
    }
    let ibus_slack: C64 = adm
        .ybus
        .row(adm.slack)
        .map(|(k, y)| y * v[k])
        .sum();
    let s_slack = v[adm.slack] * ibus_slack.conj();
    let base = adm.base_mva;
    PfResult {
        v,
        converged,
        iterations,
        max_mismatch: worst,
        diagnostic,
        i_f,
        i_t,
        lp,
        interface_p_mw: s_iface.re * base,
        interface_q_mvar: s_iface.im * base,
        slack_p_mw: s_slack.re * base,
        slack_q_mvar: s_slack.im * base,
    }
}

/// Branch current magnitudes at both sides, per-unit.
pub fn branch_currents(v: &[C64], adm: &AdmittanceSet) -> (Vec<f64>, Vec<f64>) {
    let cf = adm.yf.mul_vec(v);
    let ct = adm.yt.mul_vec(v);
    let mag = |c: Vec<C64>| -> Vec<f64> { c.into_iter().map(|x| x.norm()).collect() };
    (mag(cf), mag(ct))
}

/// `max(I_f, I_t) / I_max · 100`, zero for branches out of service.
pub fn loading_percent(i_f: &[f64], i_t: &[f64], adm: &AdmittanceSet) -> Vec<f64> {
    (0..adm.n_branch())
        .map(|b| {
            if adm.branch_in_service[b] {
                i_f[b].max(i_t[b]) / adm.branch_imax_pu[b] * 100.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Solves every scenario from a flat start, in parallel, preserving order.
pub fn batch_solve(scenarios: &[Scenario]) -> Result<Vec<PfResult>, NumericError> {
    scenarios.par_iter().map(|s| solve(s, None)).collect()
}

/// Like [`batch_solve`] with a shared warm start.
pub fn batch_solve_warm(
    scenarios: &[Scenario],
    init: &[C64],
) -> Result<Vec<PfResult>, NumericError> {
    scenarios.par_iter().map(|s| solve(s, Some(init))).collect()
}

/// Runs `f` on a dedicated pool of `threads` workers. `0` uses the global pool.
pub fn with_parallelism<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    if threads == 0 {
        return f();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
        .install(f)
}
