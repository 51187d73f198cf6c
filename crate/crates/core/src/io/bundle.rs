//! CSV grid bundles: one directory holding `bus.csv`, `line.csv`,
//! `trafo.csv`, `load.csv`, `der.csv`, `extgrid.csv`, and optionally
//! `gen.csv` and `profiles.csv`.
//!
//! Rows are indexed in file order. Bus references are resolved through the
//! `id` column of `bus.csv`, which must be unique.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Bus, BusKind, Der, ExtGrid, Line, Load, Network, StaticGen, Transformer};

pub const BUS_COLUMNS: &[&str] = &["id", "vn_kv", "vmin_pu", "vmax_pu", "kind"];
pub const LINE_COLUMNS: &[&str] = &[
    "id",
    "from_bus",
    "to_bus",
    "r_ohm",
    "x_ohm",
    "b_total_us",
    "i_max_ka",
    "in_service",
];
pub const TRAFO_COLUMNS: &[&str] = &[
    "id",
    "hv_bus",
    "lv_bus",
    "sn_mva",
    "vk_percent",
    "vkr_percent",
    "tap_pos",
    "tap_min",
    "tap_max",
    "tap_step_percent",
    "is_interface",
];
pub const LOAD_COLUMNS: &[&str] = &["bus", "p_mw", "q_mvar"];
pub const DER_COLUMNS: &[&str] = &[
    "bus",
    "p_inst_mw",
    "p_avail_mw",
    "controllable",
    "q_frac",
    "p_set_mw",
    "q_set_mvar",
];
pub const EXTGRID_COLUMNS: &[&str] = &["bus", "v_pu"];
pub const GEN_COLUMNS: &[&str] = &["bus", "p_mw", "q_mvar"];
pub const PROFILE_COLUMNS: &[&str] = &["step", "load_p_scale", "load_q_scale", "der_avail_scale"];

/// One time step of a profile: multiplicative load scaling and DER
/// availability as a fraction of installed capacity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileStep {
    pub load_p_scale: f64,
    pub load_q_scale: f64,
    pub der_avail_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridBundle {
    pub network: Network,
    pub profiles: Option<Vec<ProfileStep>>,
}

struct Table {
    path: PathBuf,
    rows: Vec<(usize, Vec<String>)>,
}

impl Table {
    fn read(path: &Path, columns: &[&str]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.display().to_string(),
            line,
            message,
        };
        let header = reader
            .headers()
            .map_err(|e| parse_err(1, e.to_string()))?
            .clone();
        let got: Vec<&str> = header.iter().collect();
        if let Some(unknown) = got.iter().find(|h| !columns.contains(h)) {
            return Err(parse_err(1, format!("unknown column '{unknown}'")));
        }
        if got != columns {
            return Err(parse_err(
                1,
                format!("expected columns {}, found {}", columns.join(","), got.join(",")),
            ));
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                parse_err(line, e.to_string())
            })?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            rows.push((line, record.iter().map(str::to_string).collect()));
        }
        Ok(Self {
            path: path.to_path_buf(),
            rows,
        })
    }

    fn err(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.display().to_string(),
            line,
            message: message.into(),
        }
    }

    fn field<T: FromStr>(&self, row: usize, columns: &[&str], name: &str) -> Result<T> {
        let col = columns.iter().position(|c| *c == name).unwrap();
        let (line, values) = &self.rows[row];
        values[col]
            .parse()
            .map_err(|_| self.err(*line, format!("column '{name}': cannot parse '{}'", values[col])))
    }

    fn flag(&self, row: usize, columns: &[&str], name: &str) -> Result<bool> {
        let col = columns.iter().position(|c| *c == name).unwrap();
        let (line, values) = &self.rows[row];
        match values[col].to_ascii_lowercase().as_str() {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            other => Err(self.err(*line, format!("column '{name}': not a boolean '{other}'"))),
        }
    }

    fn line(&self, row: usize) -> usize {
        self.rows[row].0
    }
}

struct BusMap {
    ids: HashMap<i64, usize>,
}

impl BusMap {
    fn resolve(&self, table: &Table, row: usize, columns: &[&str], name: &str) -> Result<usize> {
        let id: i64 = table.field(row, columns, name)?;
        self.ids.get(&id).copied().ok_or_else(|| {
            table.err(
                table.line(row),
                format!("column '{name}': bus {id} does not exist"),
            )
        })
    }
}

/// Loads and validates a grid bundle directory.
pub fn load_grid(dir: impl AsRef<Path>) -> Result<GridBundle> {
    let dir = dir.as_ref();
    let t = Table::read(&dir.join("bus.csv"), BUS_COLUMNS)?;
    let mut ids = HashMap::new();
    let mut buses = Vec::with_capacity(t.rows.len());
    for r in 0..t.rows.len() {
        let id: i64 = t.field(r, BUS_COLUMNS, "id")?;
        if ids.insert(id, r).is_some() {
            return Err(t.err(t.line(r), format!("duplicate bus id {id}")));
        }
        let kind_text: String = t.field(r, BUS_COLUMNS, "kind")?;
        let kind = match kind_text.to_ascii_lowercase().as_str() {
            "slack" => BusKind::Slack,
            "pq" => BusKind::Pq,
            other => return Err(t.err(t.line(r), format!("unknown bus kind '{other}'"))),
        };
        buses.push(Bus {
            id: r,
            vn_kv: t.field(r, BUS_COLUMNS, "vn_kv")?,
            vmin_pu: t.field(r, BUS_COLUMNS, "vmin_pu")?,
            vmax_pu: t.field(r, BUS_COLUMNS, "vmax_pu")?,
            kind,
        });
    }
    let bus_map = BusMap { ids };

    let t = Table::read(&dir.join("line.csv"), LINE_COLUMNS)?;
    let mut lines = Vec::with_capacity(t.rows.len());
    check_unique_ids(&t, LINE_COLUMNS)?;
    for r in 0..t.rows.len() {
        lines.push(Line {
            id: r,
            from_bus: bus_map.resolve(&t, r, LINE_COLUMNS, "from_bus")?,
            to_bus: bus_map.resolve(&t, r, LINE_COLUMNS, "to_bus")?,
            r_ohm: t.field(r, LINE_COLUMNS, "r_ohm")?,
            x_ohm: t.field(r, LINE_COLUMNS, "x_ohm")?,
            b_total_us: t.field(r, LINE_COLUMNS, "b_total_us")?,
            i_max_ka: t.field(r, LINE_COLUMNS, "i_max_ka")?,
            in_service: t.flag(r, LINE_COLUMNS, "in_service")?,
        });
    }

    let t = Table::read(&dir.join("trafo.csv"), TRAFO_COLUMNS)?;
    check_unique_ids(&t, TRAFO_COLUMNS)?;
    let mut trafos = Vec::with_capacity(t.rows.len());
    for r in 0..t.rows.len() {
        trafos.push(Transformer {
            id: r,
            hv_bus: bus_map.resolve(&t, r, TRAFO_COLUMNS, "hv_bus")?,
            lv_bus: bus_map.resolve(&t, r, TRAFO_COLUMNS, "lv_bus")?,
            sn_mva: t.field(r, TRAFO_COLUMNS, "sn_mva")?,
            vk_percent: t.field(r, TRAFO_COLUMNS, "vk_percent")?,
            vkr_percent: t.field(r, TRAFO_COLUMNS, "vkr_percent")?,
            tap_pos: t.field(r, TRAFO_COLUMNS, "tap_pos")?,
            tap_min: t.field(r, TRAFO_COLUMNS, "tap_min")?,
            tap_max: t.field(r, TRAFO_COLUMNS, "tap_max")?,
            tap_step_percent: t.field(r, TRAFO_COLUMNS, "tap_step_percent")?,
            is_interface: t.flag(r, TRAFO_COLUMNS, "is_interface")?,
        });
    }

    let t = Table::read(&dir.join("load.csv"), LOAD_COLUMNS)?;
    let mut loads = Vec::with_capacity(t.rows.len());
    for r in 0..t.rows.len() {
        loads.push(Load {
            bus: bus_map.resolve(&t, r, LOAD_COLUMNS, "bus")?,
            p_mw: t.field(r, LOAD_COLUMNS, "p_mw")?,
            q_mvar: t.field(r, LOAD_COLUMNS, "q_mvar")?,
        });
    }

    let t = Table::read(&dir.join("der.csv"), DER_COLUMNS)?;
    let mut ders = Vec::with_capacity(t.rows.len());
    for r in 0..t.rows.len() {
        ders.push(Der {
            bus: bus_map.resolve(&t, r, DER_COLUMNS, "bus")?,
            p_inst_mw: t.field(r, DER_COLUMNS, "p_inst_mw")?,
            p_avail_mw: t.field(r, DER_COLUMNS, "p_avail_mw")?,
            controllable: t.flag(r, DER_COLUMNS, "controllable")?,
            q_frac: t.field(r, DER_COLUMNS, "q_frac")?,
            p_set_mw: t.field(r, DER_COLUMNS, "p_set_mw")?,
            q_set_mvar: t.field(r, DER_COLUMNS, "q_set_mvar")?,
        });
    }

    let t = Table::read(&dir.join("extgrid.csv"), EXTGRID_COLUMNS)?;
    if t.rows.len() != 1 {
        return Err(t.err(1, format!("expected exactly one external grid, found {}", t.rows.len())));
    }
    let ext_grid = ExtGrid {
        bus: bus_map.resolve(&t, 0, EXTGRID_COLUMNS, "bus")?,
        v_pu: t.field(0, EXTGRID_COLUMNS, "v_pu")?,
    };

    let mut gens = Vec::new();
    let gen_path = dir.join("gen.csv");
    if gen_path.exists() {
        let t = Table::read(&gen_path, GEN_COLUMNS)?;
        for r in 0..t.rows.len() {
            gens.push(StaticGen {
                bus: bus_map.resolve(&t, r, GEN_COLUMNS, "bus")?,
                p_mw: t.field(r, GEN_COLUMNS, "p_mw")?,
                q_mvar: t.field(r, GEN_COLUMNS, "q_mvar")?,
            });
        }
    }

    let profile_path = dir.join("profiles.csv");
    let profiles = if profile_path.exists() {
        let t = Table::read(&profile_path, PROFILE_COLUMNS)?;
        let mut steps = Vec::with_capacity(t.rows.len());
        for r in 0..t.rows.len() {
            let step = ProfileStep {
                load_p_scale: t.field(r, PROFILE_COLUMNS, "load_p_scale")?,
                load_q_scale: t.field(r, PROFILE_COLUMNS, "load_q_scale")?,
                der_avail_scale: t.field(r, PROFILE_COLUMNS, "der_avail_scale")?,
            };
            if !(0.0..=1.0).contains(&step.der_avail_scale) {
                return Err(t.err(t.line(r), "der_avail_scale must lie in [0, 1]"));
            }
            steps.push(step);
        }
        Some(steps)
    } else {
        None
    };

    let network = Network {
        base_mva: crate::grid::DEFAULT_BASE_MVA,
        buses,
        lines,
        trafos,
        loads,
        ders,
        gens,
        ext_grid,
    };
    network.validate()?;
    Ok(GridBundle { network, profiles })
}

fn check_unique_ids(t: &Table, columns: &[&str]) -> Result<()> {
    let mut seen = HashMap::new();
    for r in 0..t.rows.len() {
        let id: i64 = t.field(r, columns, "id")?;
        if seen.insert(id, r).is_some() {
            return Err(t.err(t.line(r), format!("duplicate id {id}")));
        }
    }
    Ok(())
}

fn write_table(path: &Path, columns: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let io_err = |e: csv::Error| Error::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    };
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    w.write_record(columns).map_err(io_err)?;
    for row in rows {
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes a bundle directory that [`load_grid`] reads back unchanged.
pub fn save_grid(dir: impl AsRef<Path>, bundle: &GridBundle) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let net = &bundle.network;
    // `{}` on f64 prints the shortest representation that parses back exactly
    let f = |x: f64| format!("{x}");
    write_table(
        &dir.join("bus.csv"),
        BUS_COLUMNS,
        net.buses
            .iter()
            .map(|b| {
                let kind = match b.kind {
                    BusKind::Slack => "slack",
                    BusKind::Pq => "pq",
                };
                vec![b.id.to_string(), f(b.vn_kv), f(b.vmin_pu), f(b.vmax_pu), kind.into()]
            })
            .collect(),
    )?;
    write_table(
        &dir.join("line.csv"),
        LINE_COLUMNS,
        net.lines
            .iter()
            .map(|l| {
                vec![
                    l.id.to_string(),
                    l.from_bus.to_string(),
                    l.to_bus.to_string(),
                    f(l.r_ohm),
                    f(l.x_ohm),
                    f(l.b_total_us),
                    f(l.i_max_ka),
                    l.in_service.to_string(),
                ]
            })
            .collect(),
    )?;
    write_table(
        &dir.join("trafo.csv"),
        TRAFO_COLUMNS,
        net.trafos
            .iter()
            .map(|t| {
                vec![
                    t.id.to_string(),
                    t.hv_bus.to_string(),
                    t.lv_bus.to_string(),
                    f(t.sn_mva),
                    f(t.vk_percent),
                    f(t.vkr_percent),
                    t.tap_pos.to_string(),
                    t.tap_min.to_string(),
                    t.tap_max.to_string(),
                    f(t.tap_step_percent),
                    t.is_interface.to_string(),
                ]
            })
            .collect(),
    )?;
    write_table(
        &dir.join("load.csv"),
        LOAD_COLUMNS,
        net.loads
            .iter()
            .map(|l| vec![l.bus.to_string(), f(l.p_mw), f(l.q_mvar)])
            .collect(),
    )?;
    write_table(
        &dir.join("der.csv"),
        DER_COLUMNS,
        net.ders
            .iter()
            .map(|d| {
                vec![
                    d.bus.to_string(),
                    f(d.p_inst_mw),
                    f(d.p_avail_mw),
                    d.controllable.to_string(),
                    f(d.q_frac),
                    f(d.p_set_mw),
                    f(d.q_set_mvar),
                ]
            })
            .collect(),
    )?;
    write_table(
        &dir.join("extgrid.csv"),
        EXTGRID_COLUMNS,
        vec![vec![net.ext_grid.bus.to_string(), f(net.ext_grid.v_pu)]],
    )?;
    if !net.gens.is_empty() {
        write_table(
            &dir.join("gen.csv"),
            GEN_COLUMNS,
            net.gens
                .iter()
                .map(|g| vec![g.bus.to_string(), f(g.p_mw), f(g.q_mvar)])
                .collect(),
        )?;
    }
    if let Some(steps) = &bundle.profiles {
        write_table(
            &dir.join("profiles.csv"),
            PROFILE_COLUMNS,
            steps
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    vec![
                        i.to_string(),
                        f(s.load_p_scale),
                        f(s.load_q_scale),
                        f(s.der_avail_scale),
                    ]
                })
                .collect(),
        )?;
    }
    Ok(())
}
