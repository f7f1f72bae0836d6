//! Radial distribution network: case-file ingestion, per-unit helpers and
//! structural validation.
//!
//! Buses are addressed by the id used in the case file. Internally every
//! bus also has a dense index (its position in [`NetworkTopology::buses`]),
//! and every line `l` is stored so that `lines[l].to_bus` is the child end.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type BusId = usize;
pub type LineId = usize;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("unknown bus id {0}")]
    UnknownBus(BusId),
    #[error("per-unit base must be positive, got {0}")]
    NonPositiveBase(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BusSpec {
    pub id: BusId,
    /// Squared voltage lower bound (p.u.²).
    pub v_min: f64,
    /// Squared voltage upper bound (p.u.²).
    pub v_max: f64,
    /// Active load (kW).
    pub p_load_base: f64,
    /// Reactive load (kVAr).
    pub q_load_base: f64,
    /// Bound on the magnitude of the accepted P2P injection (kW).
    pub p2p_cap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LineSpec {
    pub id: LineId,
    pub from_bus: BusId,
    pub to_bus: BusId,
    /// Resistance (p.u.).
    pub r: f64,
    /// Reactance (p.u.).
    pub x: f64,
    /// Squared-current limit (p.u.²).
    pub c_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeneratorSpec {
    pub bus: BusId,
    /// Active power limits (MW).
    pub p_min: f64,
    pub p_max: f64,
    /// Reactive power limits (MVAr).
    pub q_min: f64,
    pub q_max: f64,
}

/// Immutable, validated radial network in per-unit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkTopology {
    pub name: String,
    pub buses: Vec<BusSpec>,
    pub lines: Vec<LineSpec>,
    pub generators: Vec<GeneratorSpec>,
    pub slack_bus: BusId,
    /// Power base (MVA).
    pub s_base: f64,
    /// Voltage base (kV).
    pub v_base: f64,
    #[serde(skip)]
    index: Index,
}

#[derive(Debug, Clone, Default)]
struct Index {
    bus_pos: HashMap<BusId, usize>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    /// Bus positions in breadth-first order from the slack bus.
    order: Vec<usize>,
}

impl NetworkTopology {
    /// Builds and validates a topology. Lines whose `from_bus` is farther from
    /// the slack than `to_bus` are re-oriented so every line points downstream.
    pub fn new(
        name: impl Into<String>,
        buses: Vec<BusSpec>,
        lines: Vec<LineSpec>,
        generators: Vec<GeneratorSpec>,
        slack_bus: BusId,
        s_base: f64,
        v_base: f64,
    ) -> Result<Self, NetworkError> {
        if !(s_base > 0.0) {
            return Err(NetworkError::NonPositiveBase(s_base));
        }
        if !(v_base > 0.0) {
            return Err(NetworkError::NonPositiveBase(v_base));
        }
        let mut topo = NetworkTopology {
            name: name.into(),
            buses,
            lines,
            generators,
            slack_bus,
            s_base,
            v_base,
            index: Index::default(),
        };
        topo.validate_items()?;
        topo.build_index()?;
        Ok(topo)
    }

    fn validate_items(&self) -> Result<(), NetworkError> {
        let v = |m: String| Err(NetworkError::Validation(m));
        if self.buses.is_empty() {
            return v("network has no buses".into());
        }
        let mut seen = HashMap::new();
        for b in &self.buses {
            if seen.insert(b.id, ()).is_some() {
                return v(format!("duplicate bus id {}", b.id));
            }
            if !(b.v_min > 0.0 && b.v_min < b.v_max) {
                return v(format!("bus {}: need 0 < v_min < v_max", b.id));
            }
            if !(b.p2p_cap >= 0.0) {
                return v(format!("bus {}: p2p_cap must be non-negative", b.id));
            }
            if !(b.p_load_base >= 0.0 && b.q_load_base >= 0.0) {
                return v(format!("bus {}: loads must be non-negative", b.id));
            }
        }
        for l in &self.lines {
            if l.from_bus == l.to_bus {
                return v(format!("line {}: from_bus equals to_bus", l.id));
            }
            if !(l.r >= 0.0 && l.x >= 0.0 && l.c_max > 0.0) {
                return v(format!("line {}: need r >= 0, x >= 0, c_max > 0", l.id));
            }
            for end in [l.from_bus, l.to_bus] {
                if !seen.contains_key(&end) {
                    return v(format!("line {} references unknown bus {}", l.id, end));
                }
            }
        }
        for g in &self.generators {
            if !seen.contains_key(&g.bus) {
                return v(format!("generator references unknown bus {}", g.bus));
            }
            if g.p_min > g.p_max || g.q_min > g.q_max {
                return v(format!("generator at bus {}: inverted limits", g.bus));
            }
        }
        if !seen.contains_key(&self.slack_bus) {
            return v(format!("missing slack bus {}", self.slack_bus));
        }
        if !self.generators.iter().any(|g| g.bus == self.slack_bus) {
            return v(format!("slack bus {} hosts no generator", self.slack_bus));
        }
        Ok(())
    }

    fn build_index(&mut self) -> Result<(), NetworkError> {
        let n = self.buses.len();
        let bus_pos: HashMap<BusId, usize> =
            self.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
        let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (li, l) in self.lines.iter().enumerate() {
            adjacency[bus_pos[&l.from_bus]].push(li);
            adjacency[bus_pos[&l.to_bus]].push(li);
        }
        let root = bus_pos[&self.slack_bus];
        let mut visited = vec![false; n];
        let mut parent = vec![None; n];
        let mut children = vec![Vec::new(); n];
        let mut order = Vec::with_capacity(n);
        let mut queue = std::collections::VecDeque::from([root]);
        visited[root] = true;
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &li in &adjacency[u] {
                if parent[u] == Some(li) {
                    continue;
                }
                let line = &mut self.lines[li];
                let other = if bus_pos[&line.from_bus] == u {
                    bus_pos[&line.to_bus]
                } else {
                    // orient downstream
                    std::mem::swap(&mut line.from_bus, &mut line.to_bus);
                    bus_pos[&line.to_bus]
                };
                if visited[other] {
                    return Err(NetworkError::Validation(format!(
                        "cycle through line {}",
                        line.id
                    )));
                }
                visited[other] = true;
                parent[other] = Some(li);
                children[u].push(li);
                queue.push_back(other);
            }
        }
        if order.len() != n {
            let missing: Vec<BusId> = (0..n)
                .filter(|&i| !visited[i])
                .map(|i| self.buses[i].id)
                .collect();
            return Err(NetworkError::Validation(format!(
                "disconnected: buses {missing:?} unreachable from slack"
            )));
        }
        if self.lines.len() + 1 != n {
            return Err(NetworkError::Validation(format!(
                "network is not radial: {} lines for {} buses",
                self.lines.len(),
                n
            )));
        }
        self.index = Index {
            bus_pos,
            parent,
            children,
            order,
        };
        Ok(())
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    /// Dense position of a bus id.
    pub fn bus_index(&self, bus: BusId) -> Result<usize, NetworkError> {
        self.index
            .bus_pos
            .get(&bus)
            .copied()
            .ok_or(NetworkError::UnknownBus(bus))
    }

    pub fn bus(&self, bus: BusId) -> Result<&BusSpec, NetworkError> {
        Ok(&self.buses[self.bus_index(bus)?])
    }

    /// Line (by position in `lines`) feeding `bus`; `None` for the slack bus.
    pub fn parent_line(&self, bus: BusId) -> Result<Option<usize>, NetworkError> {
        Ok(self.index.parent[self.bus_index(bus)?])
    }

    /// Lines (positions in `lines`) leaving `bus` in the downstream direction.
    pub fn children_lines(&self, bus: BusId) -> Result<&[usize], NetworkError> {
        Ok(&self.index.children[self.bus_index(bus)?])
    }

    pub(crate) fn parent_of_pos(&self, pos: usize) -> Option<usize> {
        self.index.parent[pos]
    }

    pub(crate) fn children_of_pos(&self, pos: usize) -> &[usize] {
        &self.index.children[pos]
    }

    /// Bus positions in breadth-first order from the slack bus.
    pub fn bfs_order(&self) -> &[usize] {
        &self.index.order
    }

    /// Dense positions of the two ends of a line.
    pub fn line_ends(&self, line: usize) -> (usize, usize) {
        let l = &self.lines[line];
        (self.index.bus_pos[&l.from_bus], self.index.bus_pos[&l.to_bus])
    }

    pub fn slack_index(&self) -> usize {
        self.index.bus_pos[&self.slack_bus]
    }

    pub fn to_per_unit(&self, kw: f64) -> f64 {
        kw / (self.s_base * 1000.0)
    }

    pub fn from_per_unit(&self, pu: f64) -> f64 {
        pu * self.s_base * 1000.0
    }

    /// Returns a copy with `p2p_cap` replaced on the given buses.
    pub fn with_p2p_caps(&self, caps: &[(BusId, f64)]) -> Result<Self, NetworkError> {
        let mut out = self.clone();
        for &(bus, cap) in caps {
            if !(cap >= 0.0) {
                return Err(NetworkError::Validation(format!(
                    "bus {bus}: p2p_cap must be non-negative"
                )));
            }
            let pos = out.bus_index(bus)?;
            out.buses[pos].p2p_cap = cap;
        }
        Ok(out)
    }

    /// Copy without one line; used for fault-style what-if checks.
    pub fn without_line(&self, from: BusId, to: BusId) -> Result<Self, NetworkError> {
        let lines: Vec<LineSpec> = self
            .lines
            .iter()
            .filter(|l| !((l.from_bus == from && l.to_bus == to) || (l.from_bus == to && l.to_bus == from)))
            .cloned()
            .collect();
        NetworkTopology::new(
            self.name.clone(),
            self.buses.clone(),
            lines,
            self.generators.clone(),
            self.slack_bus,
            self.s_base,
            self.v_base,
        )
    }

    /// Key/value summary used by `export-network`.
    pub fn summary(&self) -> serde_json::Value {
        let total_p: f64 = self.buses.iter().map(|b| b.p_load_base).sum();
        let total_q: f64 = self.buses.iter().map(|b| b.q_load_base).sum();
        serde_json::json!({
            "name": self.name,
            "n_buses": self.n_buses(),
            "n_lines": self.n_lines(),
            "slack_bus": self.slack_bus,
            "s_base_mva": self.s_base,
            "v_base_kv": self.v_base,
            "total_load_kw": total_p,
            "total_load_kvar": total_q,
            "generators": self.generators,
            "buses": self.buses,
            "lines": self.lines,
        })
    }
}

/// Case-file dialects understood by [`load_network`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CaseFormat {
    /// Sectioned whitespace tables with a `columns` and a `units` row.
    #[default]
    Tabular,
}

pub fn load_network(path: impl AsRef<Path>, format: CaseFormat) -> Result<NetworkTopology, NetworkError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| NetworkError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_network(&text, format)
}

/// Parses case-file text already in memory.
pub fn parse_network(text: &str, format: CaseFormat) -> Result<NetworkTopology, NetworkError> {
    match format {
        CaseFormat::Tabular => parse_tabular(text),
    }
}

#[derive(Default)]
struct Table {
    columns: Vec<String>,
    units: Vec<String>,
    rows: Vec<(usize, Vec<String>)>,
}

impl Table {
    fn col(&self, name: &str, line: usize) -> Result<usize, NetworkError> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| NetworkError::Parse {
                line,
                msg: format!("missing column `{name}`"),
            })
    }
}

fn parse_tabular(text: &str) -> Result<NetworkTopology, NetworkError> {
    let mut meta: BTreeMap<String, (usize, String)> = BTreeMap::new();
    let mut tables: HashMap<String, Table> = HashMap::new();
    let mut section: Option<String> = None;

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') && line.ends_with(']') {
            let name = line[1..line.len() - 1].trim().to_string();
            if !matches!(name.as_str(), "meta" | "buses" | "lines" | "generators") {
                return Err(NetworkError::Parse {
                    line: lineno,
                    msg: format!("unknown section [{name}]"),
                });
            }
            section = Some(name);
            continue;
        }
        let fields: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        match section.as_deref() {
            None => {
                return Err(NetworkError::Parse {
                    line: lineno,
                    msg: "data outside of a section".into(),
                })
            }
            Some("meta") => {
                if fields.len() != 2 {
                    return Err(NetworkError::Parse {
                        line: lineno,
                        msg: "meta entries are `key value`".into(),
                    });
                }
                meta.insert(fields[0].clone(), (lineno, fields[1].clone()));
            }
            Some(name) => {
                let table = tables.entry(name.to_string()).or_default();
                match fields[0].as_str() {
                    "columns" => table.columns = fields[1..].to_vec(),
                    "units" => table.units = fields[1..].to_vec(),
                    _ => {
                        if table.columns.is_empty() || table.units.len() != table.columns.len() {
                            return Err(NetworkError::Parse {
                                line: lineno,
                                msg: format!("[{name}] needs `columns` and matching `units` rows before data"),
                            });
                        }
                        if fields.len() != table.columns.len() {
                            return Err(NetworkError::Parse {
                                line: lineno,
                                msg: format!(
                                    "expected {} fields, found {}",
                                    table.columns.len(),
                                    fields.len()
                                ),
                            });
                        }
                        table.rows.push((lineno, fields));
                    }
                }
            }
        }
    }

    let meta_get = |key: &str| -> Result<(usize, String), NetworkError> {
        meta.get(key).cloned().ok_or(NetworkError::Parse {
            line: 0,
            msg: format!("missing meta key `{key}`"),
        })
    };
    let num = |line: usize, s: &str| -> Result<f64, NetworkError> {
        s.parse::<f64>().map_err(|_| NetworkError::Parse {
            line,
            msg: format!("not a number: `{s}`"),
        })
    };
    let int = |line: usize, s: &str| -> Result<usize, NetworkError> {
        s.parse::<usize>().map_err(|_| NetworkError::Parse {
            line,
            msg: format!("not an integer id: `{s}`"),
        })
    };

    let name = meta.get("name").map(|(_, v)| v.clone()).unwrap_or_else(|| "network".into());
    let (l, s) = meta_get("s_base_mva")?;
    let s_base = num(l, &s)?;
    let (l, s) = meta_get("v_base_kv")?;
    let v_base = num(l, &s)?;
    let (l, s) = meta_get("slack_bus")?;
    let slack_bus = int(l, &s)?;
    if !(s_base > 0.0) {
        return Err(NetworkError::NonPositiveBase(s_base));
    }
    if !(v_base > 0.0) {
        return Err(NetworkError::NonPositiveBase(v_base));
    }
    let z_base = v_base * v_base / s_base;
    let i_base_ka = s_base / (3f64.sqrt() * v_base);

    let missing = |t: &str| NetworkError::Parse {
        line: 0,
        msg: format!("missing section [{t}]"),
    };

    // Unit converters return values in the solver's units.
    let power_kw = |unit: &str, v: f64, line: usize| -> Result<f64, NetworkError> {
        match unit {
            "kW" | "kVAr" => Ok(v),
            "MW" | "MVAr" => Ok(v * 1000.0),
            "pu" => Ok(v * s_base * 1000.0),
            u => Err(NetworkError::Parse { line, msg: format!("unsupported power unit `{u}`") }),
        }
    };
    let power_mw = |unit: &str, v: f64, line: usize| power_kw(unit, v, line).map(|kw| kw / 1000.0);
    let voltage_sq = |unit: &str, v: f64, line: usize| -> Result<f64, NetworkError> {
        match unit {
            "pu" => Ok(v * v),
            "pu2" => Ok(v),
            "kV" => Ok((v / v_base).powi(2)),
            u => Err(NetworkError::Parse { line, msg: format!("unsupported voltage unit `{u}`") }),
        }
    };
    let impedance = |unit: &str, v: f64, line: usize| -> Result<f64, NetworkError> {
        match unit {
            "pu" => Ok(v),
            "ohm" => Ok(v / z_base),
            u => Err(NetworkError::Parse { line, msg: format!("unsupported impedance unit `{u}`") }),
        }
    };
    let current_sq = |unit: &str, v: f64, line: usize| -> Result<f64, NetworkError> {
        match unit {
            "pu" => Ok(v * v),
            "pu2" => Ok(v),
            "A" => Ok((v / 1000.0 / i_base_ka).powi(2)),
            u => Err(NetworkError::Parse { line, msg: format!("unsupported current unit `{u}`") }),
        }
    };

    let bt = tables.get("buses").ok_or_else(|| missing("buses"))?;
    let (c_id, c_p, c_q, c_vmin, c_vmax) = (
        bt.col("id", 0)?,
        bt.col("p_load", 0)?,
        bt.col("q_load", 0)?,
        bt.col("v_min", 0)?,
        bt.col("v_max", 0)?,
    );
    let c_cap = bt.columns.iter().position(|c| c == "p2p_cap");
    let mut buses = Vec::with_capacity(bt.rows.len());
    for (line, f) in &bt.rows {
        let line = *line;
        buses.push(BusSpec {
            id: int(line, &f[c_id])?,
            p_load_base: power_kw(&bt.units[c_p], num(line, &f[c_p])?, line)?,
            q_load_base: power_kw(&bt.units[c_q], num(line, &f[c_q])?, line)?,
            v_min: voltage_sq(&bt.units[c_vmin], num(line, &f[c_vmin])?, line)?,
            v_max: voltage_sq(&bt.units[c_vmax], num(line, &f[c_vmax])?, line)?,
            p2p_cap: match c_cap {
                Some(c) => power_kw(&bt.units[c], num(line, &f[c])?, line)?,
                None => 0.0,
            },
        });
    }

    let lt = tables.get("lines").ok_or_else(|| missing("lines"))?;
    let (c_id, c_from, c_to, c_r, c_x, c_i) = (
        lt.col("id", 0)?,
        lt.col("from", 0)?,
        lt.col("to", 0)?,
        lt.col("r", 0)?,
        lt.col("x", 0)?,
        lt.col("i_max", 0)?,
    );
    let mut lines = Vec::with_capacity(lt.rows.len());
    for (line, f) in &lt.rows {
        let line = *line;
        lines.push(LineSpec {
            id: int(line, &f[c_id])?,
            from_bus: int(line, &f[c_from])?,
            to_bus: int(line, &f[c_to])?,
            r: impedance(&lt.units[c_r], num(line, &f[c_r])?, line)?,
            x: impedance(&lt.units[c_x], num(line, &f[c_x])?, line)?,
            c_max: current_sq(&lt.units[c_i], num(line, &f[c_i])?, line)?,
        });
    }

    let gt = tables.get("generators").ok_or_else(|| missing("generators"))?;
    let (c_bus, c_pmin, c_pmax, c_qmin, c_qmax) = (
        gt.col("bus", 0)?,
        gt.col("p_min", 0)?,
        gt.col("p_max", 0)?,
        gt.col("q_min", 0)?,
        gt.col("q_max", 0)?,
    );
    let mut generators = Vec::with_capacity(gt.rows.len());
    for (line, f) in &gt.rows {
        let line = *line;
        generators.push(GeneratorSpec {
            bus: int(line, &f[c_bus])?,
            p_min: power_mw(&gt.units[c_pmin], num(line, &f[c_pmin])?, line)?,
            p_max: power_mw(&gt.units[c_pmax], num(line, &f[c_pmax])?, line)?,
            q_min: power_mw(&gt.units[c_qmin], num(line, &f[c_qmin])?, line)?,
            q_max: power_mw(&gt.units[c_qmax], num(line, &f[c_qmax])?, line)?,
        });
    }

    NetworkTopology::new(name, buses, lines, generators, slack_bus, s_base, v_base)
}

impl fmt::Display for NetworkTopology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} buses, {} lines, {} generators, slack {}",
            self.name,
            self.n_buses(),
            self.n_lines(),
            self.generators.len(),
            self.slack_bus
        )
    }
}
