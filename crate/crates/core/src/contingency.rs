//! N-1 line-outage cases and exhaustive N-1 loading analysis.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GridError, NumericError, Result};
use crate::grid::{build_admittances, unreachable_buses, AdmittanceSet, Network, C64};
use crate::powerflow::{solve, PfResult, Scenario};

/// Result of an N-1 sweep. Vectors are aligned with `line_ids`, the
/// in-service lines of the base network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct N1Report {
    pub cases: Vec<usize>,
    pub line_ids: Vec<usize>,
    /// Maximum loading percent over all cases; `+∞` if any case diverged.
    pub lp_n1: Vec<f64>,
    /// Contingency attaining the maximum, if any case loads the line.
    pub worst_case: Vec<Option<usize>>,
    /// Base-case loading, reported separately from the contingency maximum.
    pub lp_n0: Vec<f64>,
    pub any_violation: bool,
    pub nonconverged_cases: Vec<usize>,
}

/// Lines whose outage keeps every bus connected, in ascending order.
///
/// Bridges are found with a single low-link depth-first search over the
/// multigraph of in-service lines and transformers; parallel lines are
/// never bridges.
pub fn enumerate_cases(net: &Network) -> Result<Vec<usize>, GridError> {
    let mut in_service = net.clone();
    in_service.lines.retain(|l| l.in_service);
    if let Some(&bus) = unreachable_buses(&in_service, None).first() {
        return Err(GridError::Disconnected(bus));
    }
    let n = net.n_bus();
    let n_lines = net.lines.len();
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (i, l) in net.lines.iter().enumerate().filter(|(_, l)| l.in_service) {
        adj[l.from_bus].push((l.to_bus, i));
        adj[l.to_bus].push((l.from_bus, i));
    }
    for (k, t) in net.trafos.iter().enumerate() {
        adj[t.hv_bus].push((t.lv_bus, n_lines + k));
        adj[t.lv_bus].push((t.hv_bus, n_lines + k));
    }
    let mut is_bridge = vec![false; n_lines + net.trafos.len()];
    for e in find_bridges(&adj) {
        is_bridge[e] = true;
    }
    Ok((0..n_lines)
        .filter(|&i| net.lines[i].in_service && !is_bridge[i])
        .collect())
}

/// Edge ids of all bridges. `adj[v]` lists `(neighbour, edge id)`.
fn find_bridges(adj: &[Vec<(usize, usize)>]) -> Vec<usize> {
    let n = adj.len();
    let mut order = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut bridges = Vec::new();
    let mut time = 0;
    for root in 0..n {
        if order[root] != usize::MAX {
            continue;
        }
        // (vertex, edge used to enter it, next adjacency position)
        let mut stack = vec![(root, usize::MAX, 0usize)];
        order[root] = time;
        low[root] = time;
        time += 1;
        while let Some(&mut (v, via, ref mut next)) = stack.last_mut() {
            if *next < adj[v].len() {
                let (w, e) = adj[v][*next];
                *next += 1;
                if e == via {
                    continue;
                }
                if order[w] == usize::MAX {
                    order[w] = time;
                    low[w] = time;
                    time += 1;
                    stack.push((w, e, 0));
                } else {
                    low[v] = low[v].min(order[w]);
                }
            } else {
                stack.pop();
                if let Some(&(parent, _, _)) = stack.last() {
                    low[parent] = low[parent].min(low[v]);
                    if low[v] > order[parent] {
                        bridges.push(via);
                    }
                }
            }
        }
    }
    bridges.sort_unstable();
    bridges
}

/// Outage admittances for every N-1 case of a topology, built once and
/// reused across operating points.
#[derive(Debug, Clone)]
pub struct ContingencySet {
    pub cases: Vec<usize>,
    pub line_ids: Vec<usize>,
    pub admittances: Vec<Arc<AdmittanceSet>>,
}

impl ContingencySet {
    pub fn new(net: &Network) -> Result<Self> {
        let cases = enumerate_cases(net)?;
        let admittances = cases
            .iter()
            .map(|&c| build_admittances(net, Some(c)).map(Arc::new))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            cases,
            line_ids: net.in_service_lines(),
            admittances,
        })
    }

    /// Solves every case for the injections of `base_scenario`, warm-started
    /// from the converged base-case voltages.
    pub fn case_results(
        &self,
        base_scenario: &Scenario,
        base_v: &[C64],
    ) -> Result<Vec<PfResult>, NumericError> {
        self.admittances
            .par_iter()
            .map(|adm| {
                let s = Scenario {
                    p_inj: base_scenario.p_inj.clone(),
                    q_inj: base_scenario.q_inj.clone(),
                    slack_v_pu: base_scenario.slack_v_pu,
                    admittances: Arc::clone(adm),
                };
                solve(&s, Some(base_v))
            })
            .collect()
    }

    /// Assembles the report from a solved base case and per-case results
    /// aligned with `self.cases`.
    pub fn report(&self, base: &PfResult, case_results: &[PfResult], lp_max: f64) -> N1Report {
        let nl = self.line_ids.len();
        let mut lp_n1 = vec![0.0f64; nl];
        let mut worst = vec![None; nl];
        let mut nonconverged = Vec::new();
        for (&case, res) in self.cases.iter().zip(case_results) {
            if !res.converged {
                nonconverged.push(case);
                lp_n1.iter_mut().for_each(|x| *x = f64::INFINITY);
                continue;
            }
            for (k, &line) in self.line_ids.iter().enumerate() {
                if line == case || lp_n1[k].is_infinite() {
                    continue;
                }
                if res.lp[line] > lp_n1[k] || worst[k].is_none() && res.lp[line] >= lp_n1[k] {
                    lp_n1[k] = res.lp[line];
                    worst[k] = Some(case);
                }
            }
        }
        let any_violation = !nonconverged.is_empty() || lp_n1.iter().any(|&x| x > lp_max);
        N1Report {
            cases: self.cases.clone(),
            line_ids: self.line_ids.clone(),
            lp_n1,
            worst_case: worst,
            lp_n0: self.line_ids.iter().map(|&l| base.lp[l]).collect(),
            any_violation,
            nonconverged_cases: nonconverged,
        }
    }

    pub fn analyze(&self, base_scenario: &Scenario, lp_max: f64) -> Result<N1Report> {
        let base = solve(base_scenario, None)?;
        if !base.converged {
            return Err(NumericError::NonConvergence(format!(
                "N-1 base case: {}",
                base.diagnostic.clone().unwrap_or_default()
            ))
            .into());
        }
        let results = self.case_results(base_scenario, &base.v)?;
        Ok(self.report(&base, &results, lp_max))
    }
}

/// Full N-1 sweep for one operating point.
pub fn n1_analysis(net: &Network, scenario: &Scenario, lp_max: f64) -> Result<N1Report> {
    ContingencySet::new(net)?.analyze(scenario, lp_max)
}
