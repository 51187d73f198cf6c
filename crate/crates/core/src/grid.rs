//! Static grid model, admittance assembly, bus injections and the P-dependent
//! reactive-power capability of DERs.

use std::collections::VecDeque;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::GridError;
use crate::powerflow::JacobianPlan;
use crate::sparse::CsrMatrix;

pub type C64 = Complex64;

/// Fraction of installed capacity below which the Q range ramps down to zero.
pub const Q_RAMP_KNEE: f64 = 0.2;
/// Default `q_frac`: |Q| ≈ 0.33 P_inst corresponds to cos φ ≈ 0.95 at rated output.
pub const DEFAULT_Q_FRAC: f64 = 0.33;
pub const DEFAULT_BASE_MVA: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Pq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub vn_kv: f64,
    pub vmin_pu: f64,
    pub vmax_pu: f64,
    pub kind: BusKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub id: usize,
    pub from_bus: usize,
    pub to_bus: usize,
    pub r_ohm: f64,
    pub x_ohm: f64,
    /// Total shunt susceptance in µS, split evenly to both ends.
    pub b_total_us: f64,
    pub i_max_ka: f64,
    pub in_service: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transformer {
    pub id: usize,
    pub hv_bus: usize,
    pub lv_bus: usize,
    pub sn_mva: f64,
    pub vk_percent: f64,
    pub vkr_percent: f64,
    pub tap_pos: i32,
    pub tap_min: i32,
    pub tap_max: i32,
    pub tap_step_percent: f64,
    pub is_interface: bool,
}

impl Transformer {
    /// Off-nominal ratio on the HV side.
    pub fn ratio(&self) -> f64 {
        1.0 + self.tap_pos as f64 * self.tap_step_percent / 100.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Load {
    pub bus: usize,
    pub p_mw: f64,
    pub q_mvar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Der {
    pub bus: usize,
    pub p_inst_mw: f64,
    pub p_avail_mw: f64,
    pub controllable: bool,
    pub q_frac: f64,
    pub p_set_mw: f64,
    pub q_set_mvar: f64,
}

impl Der {
    /// Upper bound for the active power setpoint.
    pub fn p_max(&self) -> f64 {
        self.p_avail_mw.min(self.p_inst_mw)
    }
}

/// Conventional generator with fixed output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticGen {
    pub bus: usize,
    pub p_mw: f64,
    pub q_mvar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtGrid {
    pub bus: usize,
    pub v_pu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub trafos: Vec<Transformer>,
    pub loads: Vec<Load>,
    pub ders: Vec<Der>,
    pub gens: Vec<StaticGen>,
    pub ext_grid: ExtGrid,
}

/// Identifies a branch of the combined branch list (lines first, then
/// transformers).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BranchRef {
    Line(usize),
    Trafo(usize),
}

impl std::fmt::Display for BranchRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BranchRef::Line(i) => write!(f, "line:{i}"),
            BranchRef::Trafo(i) => write!(f, "trafo:{i}"),
        }
    }
}

impl Network {
    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branch(&self) -> usize {
        self.lines.len() + self.trafos.len()
    }

    pub fn slack_bus(&self) -> usize {
        self.ext_grid.bus
    }

    pub fn branch_ref(&self, branch: usize) -> BranchRef {
        if branch < self.lines.len() {
            BranchRef::Line(branch)
        } else {
            BranchRef::Trafo(branch - self.lines.len())
        }
    }

    pub fn controllable_ders(&self) -> Vec<usize> {
        (0..self.ders.len())
            .filter(|&i| self.ders[i].controllable)
            .collect()
    }

    pub fn in_service_lines(&self) -> Vec<usize> {
        (0..self.lines.len())
            .filter(|&i| self.lines[i].in_service)
            .collect()
    }

    pub fn vmin(&self) -> Vec<f64> {
        self.buses.iter().map(|b| b.vmin_pu).collect()
    }

    pub fn vmax(&self) -> Vec<f64> {
        self.buses.iter().map(|b| b.vmax_pu).collect()
    }

    /// Checks every structural invariant except the presence of an interface
    /// transformer (see [`Network::require_interface`]).
    pub fn validate(&self) -> Result<(), GridError> {
        let n = self.buses.len();
        let invalid = |element, index, reason: String| GridError::Invalid {
            element,
            index,
            reason,
        };
        for (i, b) in self.buses.iter().enumerate() {
            if b.id != i {
                return Err(invalid("bus", i, format!("id {} is not dense", b.id)));
            }
            if !(b.vmin_pu < b.vmax_pu) {
                return Err(invalid("bus", i, "vmin_pu must be below vmax_pu".into()));
            }
            if !(b.vn_kv > 0.0) {
                return Err(invalid("bus", i, "vn_kv must be positive".into()));
            }
        }
        let slacks: Vec<usize> = (0..n)
            .filter(|&i| self.buses[i].kind == BusKind::Slack)
            .collect();
        if slacks.len() != 1 {
            return Err(GridError::SlackCount(slacks.len()));
        }
        if self.ext_grid.bus != slacks[0] {
            return Err(invalid(
                "ext_grid",
                0,
                format!("attached to bus {}, slack is {}", self.ext_grid.bus, slacks[0]),
            ));
        }
        let check_bus = |element, index, bus: usize| {
            if bus < n {
                Ok(())
            } else {
                Err(GridError::UnknownBus {
                    element,
                    index,
                    bus,
                })
            }
        };
        for (i, l) in self.lines.iter().enumerate() {
            check_bus("line", i, l.from_bus)?;
            check_bus("line", i, l.to_bus)?;
            if l.from_bus == l.to_bus {
                return Err(GridError::SelfLoop(i, l.from_bus));
            }
            if l.r_ohm == 0.0 && l.x_ohm == 0.0 {
                return Err(GridError::ZeroImpedance(i));
            }
            if !(l.i_max_ka > 0.0) {
                return Err(invalid("line", i, "i_max_ka must be positive".into()));
            }
        }
        for (i, t) in self.trafos.iter().enumerate() {
            check_bus("trafo", i, t.hv_bus)?;
            check_bus("trafo", i, t.lv_bus)?;
            if t.hv_bus == t.lv_bus {
                return Err(invalid("trafo", i, "hv_bus equals lv_bus".into()));
            }
            if !(t.tap_min <= t.tap_pos && t.tap_pos <= t.tap_max) {
                return Err(invalid("trafo", i, "tap_pos outside [tap_min, tap_max]".into()));
            }
            if t.vkr_percent > t.vk_percent || t.vkr_percent < 0.0 {
                return Err(invalid("trafo", i, "vkr_percent must lie in [0, vk_percent]".into()));
            }
            if t.vk_percent <= 0.0 {
                return Err(GridError::ZeroTransformerImpedance(i));
            }
            if !(t.sn_mva > 0.0) {
                return Err(invalid("trafo", i, "sn_mva must be positive".into()));
            }
        }
        for (i, l) in self.loads.iter().enumerate() {
            check_bus("load", i, l.bus)?;
        }
        for (i, g) in self.gens.iter().enumerate() {
            check_bus("gen", i, g.bus)?;
        }
        const TOL: f64 = 1e-9;
        for (i, d) in self.ders.iter().enumerate() {
            check_bus("der", i, d.bus)?;
            if !(0.0 <= d.p_avail_mw && d.p_avail_mw <= d.p_inst_mw + TOL) {
                return Err(invalid("der", i, "p_avail_mw outside [0, p_inst_mw]".into()));
            }
            if !(-TOL <= d.p_set_mw && d.p_set_mw <= d.p_max() + TOL) {
                return Err(invalid("der", i, "p_set_mw outside [0, min(p_avail, p_inst)]".into()));
            }
            if d.q_frac < 0.0 {
                return Err(invalid("der", i, "q_frac must be non-negative".into()));
            }
            let (lo, hi) = der_q_limits(d, d.p_set_mw.clamp(0.0, d.p_inst_mw))?;
            if d.q_set_mvar < lo - TOL || d.q_set_mvar > hi + TOL {
                return Err(invalid("der", i, "q_set_mvar outside capability curve".into()));
            }
        }
        check_bus("ext_grid", 0, self.ext_grid.bus)?;
        let unreachable = unreachable_buses(self, None);
        if let Some(&bus) = unreachable.first() {
            return Err(GridError::Disconnected(bus));
        }
        Ok(())
    }

    pub fn require_interface(&self) -> Result<(), GridError> {
        if self.trafos.iter().any(|t| t.is_interface) {
            Ok(())
        } else {
            Err(GridError::NoInterface)
        }
    }
}

/// Buses not reachable from the slack when every line and transformer is in
/// service, except `removed` (a line index).
pub(crate) fn unreachable_buses(net: &Network, removed: Option<usize>) -> Vec<usize> {
    let n = net.n_bus();
    let mut adj = vec![Vec::new(); n];
    for (i, l) in net.lines.iter().enumerate() {
        if Some(i) == removed {
            continue;
        }
        if l.from_bus < n && l.to_bus < n {
            adj[l.from_bus].push(l.to_bus);
            adj[l.to_bus].push(l.from_bus);
        }
    }
    for t in &net.trafos {
        if t.hv_bus < n && t.lv_bus < n {
            adj[t.hv_bus].push(t.lv_bus);
            adj[t.lv_bus].push(t.hv_bus);
        }
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::new();
    if net.ext_grid.bus < n {
        seen[net.ext_grid.bus] = true;
        queue.push_back(net.ext_grid.bus);
    }
    while let Some(b) = queue.pop_front() {
        for &c in &adj[b] {
            if !seen[c] {
                seen[c] = true;
                queue.push_back(c);
            }
        }
    }
    (0..n).filter(|&b| !seen[b]).collect()
}

/// Reactive power limits `(q_min, q_max)` of a DER operating at `p_mw`.
///
/// Full range `±q_frac·p_inst` at or above 20 % of installed capacity, with a
/// linear ramp to zero below it.
pub fn der_q_limits(der: &Der, p_mw: f64) -> Result<(f64, f64), GridError> {
    const TOL: f64 = 1e-9;
    if !(p_mw >= -TOL && p_mw <= der.p_inst_mw + TOL) {
        return Err(GridError::PowerOutOfRange {
            p: p_mw,
            p_inst: der.p_inst_mw,
        });
    }
    let p = p_mw.clamp(0.0, der.p_inst_mw);
    let q_full = der.q_frac * der.p_inst_mw;
    let knee = Q_RAMP_KNEE * der.p_inst_mw;
    let q_max = if p >= knee || knee <= 0.0 {
        q_full
    } else {
        p / knee * q_full
    };
    Ok((-q_max, q_max))
}

/// Complex admittance matrices of one topology, in per-unit, plus the branch
/// metadata the power flow needs to derive currents and loadings.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceSet {
    pub base_mva: f64,
    pub slack: usize,
    pub ybus: CsrMatrix<C64>,
    /// Branch-side matrices, one row per branch (lines, then transformers).
    pub yf: CsrMatrix<C64>,
    pub yt: CsrMatrix<C64>,
    pub branch_from: Vec<usize>,
    pub branch_to: Vec<usize>,
    /// Current limit per branch in per-unit.
    pub branch_imax_pu: Vec<f64>,
    pub branch_in_service: Vec<bool>,
    /// Branch indices of interface transformers; their from side is the HV side.
    pub interface_branches: Vec<usize>,
    pub outage: Option<usize>,
    pub(crate) plan: JacobianPlan,
}

impl AdmittanceSet {
    pub fn n_bus(&self) -> usize {
        self.ybus.nrows()
    }

    pub fn n_branch(&self) -> usize {
        self.branch_from.len()
    }
}

/// Per-unit base current (kA) at a voltage level.
pub fn base_current_ka(base_mva: f64, vn_kv: f64) -> f64 {
    base_mva / (3f64.sqrt() * vn_kv)
}

/// Assembles `Ybus`, `Yf`, `Yt` for the network, optionally with one line
/// removed.
pub fn build_admittances(
    net: &Network,
    outage: Option<usize>,
) -> Result<AdmittanceSet, GridError> {
    let n = net.n_bus();
    let nbr = net.n_branch();
    if let Some(k) = outage {
        if k >= net.lines.len() || !net.lines[k].in_service {
            return Err(GridError::BadOutage(k));
        }
    }
    let base = net.base_mva;
    let mut ybus = Vec::new();
    let mut yf = Vec::new();
    let mut yt = Vec::new();
    let mut from = Vec::with_capacity(nbr);
    let mut to = Vec::with_capacity(nbr);
    let mut imax = Vec::with_capacity(nbr);
    let mut in_service = Vec::with_capacity(nbr);

    let bus_kv = |element: &'static str, index: usize, bus: usize| {
        net.buses
            .get(bus)
            .map(|b| b.vn_kv)
            .ok_or(GridError::UnknownBus {
                element,
                index,
                bus,
            })
    };

    let mut stamp = |br: usize, f: usize, t: usize, yff: C64, yft: C64, ytf: C64, ytt: C64| {
        ybus.push((f, f, yff));
        ybus.push((f, t, yft));
        ybus.push((t, f, ytf));
        ybus.push((t, t, ytt));
        yf.push((br, f, yff));
        yf.push((br, t, yft));
        yt.push((br, f, ytf));
        yt.push((br, t, ytt));
    };

    for (i, l) in net.lines.iter().enumerate() {
        let vn = bus_kv("line", i, l.from_bus)?;
        bus_kv("line", i, l.to_bus)?;
        if l.r_ohm == 0.0 && l.x_ohm == 0.0 {
            return Err(GridError::ZeroImpedance(i));
        }
        from.push(l.from_bus);
        to.push(l.to_bus);
        imax.push(l.i_max_ka / base_current_ka(base, vn));
        let active = l.in_service && outage != Some(i);
        in_service.push(active);
        if !active {
            continue;
        }
        let z_base = vn * vn / base;
        let ys = C64::new(1.0, 0.0) / C64::new(l.r_ohm / z_base, l.x_ohm / z_base);
        let bsh = C64::new(0.0, l.b_total_us * 1e-6 * z_base / 2.0);
        stamp(i, l.from_bus, l.to_bus, ys + bsh, -ys, -ys, ys + bsh);
    }
    let mut interface = Vec::new();
    for (k, t) in net.trafos.iter().enumerate() {
        let br = net.lines.len() + k;
        bus_kv("trafo", k, t.hv_bus)?;
        bus_kv("trafo", k, t.lv_bus)?;
        if t.vk_percent <= 0.0 {
            return Err(GridError::ZeroTransformerImpedance(k));
        }
        from.push(t.hv_bus);
        to.push(t.lv_bus);
        imax.push(t.sn_mva / base);
        in_service.push(true);
        if t.is_interface {
            interface.push(br);
        }
        let scale = base / t.sn_mva;
        let zk = t.vk_percent / 100.0;
        let rk = t.vkr_percent / 100.0;
        let xk = (zk * zk - rk * rk).max(0.0).sqrt();
        let ys = C64::new(1.0, 0.0) / C64::new(rk * scale, xk * scale);
        let ratio = t.ratio();
        stamp(br, t.hv_bus, t.lv_bus, ys / (ratio * ratio), -ys / ratio, -ys / ratio, ys);
    }

    let ybus = CsrMatrix::from_triplets(n, n, &ybus);
    let plan = JacobianPlan::new(&ybus, net.ext_grid.bus);
    Ok(AdmittanceSet {
        base_mva: base,
        slack: net.ext_grid.bus,
        yf: CsrMatrix::from_triplets(nbr, n, &yf),
        yt: CsrMatrix::from_triplets(nbr, n, &yt),
        ybus,
        branch_from: from,
        branch_to: to,
        branch_imax_pu: imax,
        branch_in_service: in_service,
        interface_branches: interface,
        outage,
        plan,
    })
}

/// Net bus injections `generation + DER − load` in per-unit on `base_mva`.
pub fn aggregate_injections(net: &Network) -> (Vec<f64>, Vec<f64>) {
    let n = net.n_bus();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for g in &net.gens {
        p[g.bus] += g.p_mw;
        q[g.bus] += g.q_mvar;
    }
    for d in &net.ders {
        p[d.bus] += d.p_set_mw;
        q[d.bus] += d.q_set_mvar;
    }
    for l in &net.loads {
        p[l.bus] -= l.p_mw;
        q[l.bus] -= l.q_mvar;
    }
    for v in p.iter_mut().chain(q.iter_mut()) {
        *v /= net.base_mva;
    }
    (p, q)
}
