//! Deterministic synthetic meshed HV grids with wind parks, used for the
//! bundled fixtures and for scaling experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{
    Bus, BusKind, Der, ExtGrid, Line, Load, Network, Transformer, DEFAULT_BASE_MVA,
    DEFAULT_Q_FRAC,
};
use crate::io::ProfileStep;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Total bus count including the EHV slack bus.
    pub n_buses: usize,
    pub n_interface_trafos: usize,
    /// Buses attached radially to the meshed core.
    pub n_spurs: usize,
    /// Extra meshing edges beyond closing every leaf of the spanning tree.
    pub extra_edges: usize,
    /// Weight of the path length to the substation when growing the tree;
    /// 0 gives a minimum spanning tree, 1 a shortest-path tree.
    pub path_weight: f64,
    pub n_wind: usize,
    pub n_mv_der: usize,
    pub radius_km: f64,
    pub wind_p_inst_mw: (f64, f64),
    pub mv_der_p_inst_mw: (f64, f64),
    pub load_p_mw: (f64, f64),
    pub i_max_ka: f64,
    pub vmin_pu: f64,
    pub vmax_pu: f64,
    pub ext_v_pu: f64,
    pub tap_pos: i32,
    pub n_profile_steps: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn hv30() -> Self {
        Self {
            n_buses: 30,
            n_interface_trafos: 2,
            n_spurs: 3,
            extra_edges: 4,
            path_weight: 0.6,
            n_wind: 6,
            n_mv_der: 10,
            radius_km: 30.0,
            wind_p_inst_mw: (90.0, 160.0),
            mv_der_p_inst_mw: (5.0, 20.0),
            load_p_mw: (5.0, 20.0),
            i_max_ka: 0.645,
            vmin_pu: 0.95,
            vmax_pu: 1.05,
            ext_v_pu: 1.035,
            tap_pos: 0,
            n_profile_steps: 48,
            seed: 30,
        }
    }

    pub fn hv100() -> Self {
        Self {
            n_buses: 100,
            n_interface_trafos: 3,
            n_spurs: 8,
            extra_edges: 14,
            path_weight: 0.6,
            n_wind: 22,
            n_mv_der: 40,
            radius_km: 55.0,
            wind_p_inst_mw: (20.0, 50.0),
            mv_der_p_inst_mw: (3.0, 12.0),
            load_p_mw: (2.0, 9.0),
            i_max_ka: 0.645,
            vmin_pu: 0.95,
            vmax_pu: 1.05,
            ext_v_pu: 1.035,
            tap_pos: 0,
            n_profile_steps: 48,
            seed: 100,
        }
    }
}

const OHM_PER_KM: (f64, f64) = (0.109, 0.4);
const US_PER_KM: f64 = 2.98;
const ROUTE_FACTOR: f64 = 1.2;

/// Builds the grid and a daily profile.
pub fn synthetic_grid(spec: &SynthSpec) -> (Network, Vec<ProfileStep>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_buses;
    assert!(n >= 4, "need at least four buses");
    let hv = |id| Bus {
        id,
        vn_kv: 110.0,
        vmin_pu: spec.vmin_pu,
        vmax_pu: spec.vmax_pu,
        kind: BusKind::Pq,
    };
    let mut buses = vec![Bus {
        id: 0,
        vn_kv: 380.0,
        vmin_pu: 0.9,
        vmax_pu: 1.1,
        kind: BusKind::Slack,
    }];
    buses.extend((1..n).map(hv));

    // bus 1 is the substation at the origin
    let mut xy = vec![(0.0, 0.0); n];
    for p in xy.iter_mut().skip(2) {
        let r = spec.radius_km * rng.random::<f64>().sqrt().max(0.15);
        let phi = rng.random::<f64>() * std::f64::consts::TAU;
        *p = (r * phi.cos(), r * phi.sin());
    }
    let dist = |a: usize, b: usize| {
        let (dx, dy) = (xy[a].0 - xy[b].0, xy[a].1 - xy[b].1);
        (dx * dx + dy * dy).sqrt()
    };

    let n_core_end = n - spec.n_spurs;
    let core: Vec<usize> = (1..n_core_end).collect();
    let mut edges: Vec<(usize, usize)> = Vec::new();
    // spanning tree trading edge length against path length to the
    // substation, which keeps feeders short
    let mut in_tree = vec![false; n];
    let mut path_km = vec![0.0; n];
    in_tree[1] = true;
    for _ in 1..core.len() {
        let mut best = (f64::INFINITY, 0, 0);
        for &a in core.iter().filter(|&&a| in_tree[a]) {
            for &b in core.iter().filter(|&&b| !in_tree[b]) {
                let d = dist(a, b) + spec.path_weight * path_km[a];
                if d < best.0 {
                    best = (d, a, b);
                }
            }
        }
        in_tree[best.2] = true;
        path_km[best.2] = path_km[best.1] + dist(best.1, best.2);
        edges.push((best.1, best.2));
    }
    let connected = |edges: &[(usize, usize)], a: usize, b: usize| {
        edges
            .iter()
            .any(|&(u, v)| (u, v) == (a, b) || (u, v) == (b, a))
    };
    let degree = |edges: &[(usize, usize)], a: usize| {
        edges.iter().filter(|&&(u, v)| u == a || v == a).count()
    };
    // close every leaf of the tree into a loop
    for &a in &core {
        if degree(&edges, a) == 1 {
            let nearest = core
                .iter()
                .copied()
                .filter(|&b| b != a && !connected(&edges, a, b))
                .min_by(|&b, &c| dist(a, b).partial_cmp(&dist(a, c)).unwrap());
            if let Some(b) = nearest {
                edges.push((a, b));
            }
        }
    }
    let mut candidates: Vec<(usize, usize)> = core
        .iter()
        .flat_map(|&a| core.iter().map(move |&b| (a, b)))
        .filter(|&(a, b)| a < b)
        .collect();
    candidates.sort_by(|&(a, b), &(c, d)| dist(a, b).partial_cmp(&dist(c, d)).unwrap());
    let mut added = 0;
    for (a, b) in candidates {
        if added == spec.extra_edges {
            break;
        }
        if !connected(&edges, a, b) {
            edges.push((a, b));
            added += 1;
        }
    }
    for s in n_core_end..n {
        let b = core
            .iter()
            .copied()
            .min_by(|&b, &c| dist(s, b).partial_cmp(&dist(s, c)).unwrap())
            .unwrap();
        edges.push((b, s));
    }

    let lines: Vec<Line> = edges
        .iter()
        .enumerate()
        .map(|(id, &(a, b))| {
            let km = (dist(a, b) * ROUTE_FACTOR).max(3.0);
            Line {
                id,
                from_bus: a,
                to_bus: b,
                r_ohm: round4(OHM_PER_KM.0 * km),
                x_ohm: round4(OHM_PER_KM.1 * km),
                b_total_us: round4(US_PER_KM * km),
                i_max_ka: spec.i_max_ka,
                in_service: true,
            }
        })
        .collect();

    let trafos = (0..spec.n_interface_trafos)
        .map(|id| Transformer {
            id,
            hv_bus: 0,
            lv_bus: 1,
            sn_mva: 300.0,
            vk_percent: 12.0,
            vkr_percent: 0.3,
            tap_pos: spec.tap_pos,
            tap_min: -16,
            tap_max: 16,
            tap_step_percent: 1.0,
            is_interface: true,
        })
        .collect();

    let loads = (2..n)
        .map(|bus| {
            let p = round4(rng.random_range(spec.load_p_mw.0..spec.load_p_mw.1));
            let q = round4(p * rng.random_range(0.2..0.35));
            Load {
                bus,
                p_mw: p,
                q_mvar: q,
            }
        })
        .collect();

    // wind parks on the buses farthest from the substation
    let mut by_distance: Vec<usize> = (2..n).collect();
    by_distance.sort_by(|&a, &b| dist(b, 1).partial_cmp(&dist(a, 1)).unwrap());
    let mut ders = Vec::new();
    for &bus in by_distance.iter().take(spec.n_wind) {
        let p_inst = round4(rng.random_range(spec.wind_p_inst_mw.0..spec.wind_p_inst_mw.1));
        ders.push(Der {
            bus,
            p_inst_mw: p_inst,
            p_avail_mw: round4(0.5 * p_inst),
            controllable: true,
            q_frac: DEFAULT_Q_FRAC,
            p_set_mw: round4(0.5 * p_inst),
            q_set_mvar: 0.0,
        });
    }
    for _ in 0..spec.n_mv_der {
        let bus = rng.random_range(2..n);
        let p_inst = round4(rng.random_range(spec.mv_der_p_inst_mw.0..spec.mv_der_p_inst_mw.1));
        ders.push(Der {
            bus,
            p_inst_mw: p_inst,
            p_avail_mw: round4(0.5 * p_inst),
            controllable: false,
            q_frac: DEFAULT_Q_FRAC,
            p_set_mw: round4(0.5 * p_inst),
            q_set_mvar: 0.0,
        });
    }

    let net = Network {
        base_mva: DEFAULT_BASE_MVA,
        buses,
        lines,
        trafos,
        loads,
        ders,
        gens: vec![],
        ext_grid: ExtGrid {
            bus: 0,
            v_pu: spec.ext_v_pu,
        },
    };

    let profile = daily_profile(spec.n_profile_steps, &mut rng);
    (net, profile)
}

fn daily_profile(steps: usize, rng: &mut ChaCha8Rng) -> Vec<ProfileStep> {
    let mut wind: f64 = 0.5;
    (0..steps)
        .map(|k| {
            let phase = k as f64 / steps.max(1) as f64 * std::f64::consts::TAU;
            let load = 0.7 - 0.2 * phase.cos() + rng.random_range(-0.05..0.05);
            wind = (wind + rng.random_range(-0.15..0.15)).clamp(0.05, 1.0);
            ProfileStep {
                load_p_scale: round4(load),
                load_q_scale: round4(load),
                der_avail_scale: round4(wind),
            }
        })
        .collect()
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}
