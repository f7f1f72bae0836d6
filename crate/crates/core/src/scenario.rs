//! Training data: sampled operating conditions pushed through the grid-unaware
//! market and the operator's OPF, one token per bus.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{scaled_loads, Setup};
use crate::dopf::{check_exactness, DopfParams, DopfStatus, InjectionRequest};
use crate::market::{clear_hour, ClearOptions, MarketError, Mode};
use crate::network::BusId;
use crate::surrogate::{Sample, N_FEATURES};

/// Residual above which a relaxed OPF solution is not trusted as a target.
pub const EXACTNESS_TOL: f64 = 1e-5;

pub const FEATURE_NAMES: [&str; N_FEATURES] = ["p_net", "p_load", "power_factor", "c_ls", "lambda_corr"];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid sampling ranges: {0}")]
    Ranges(String),
    #[error("scenario {id}: {source}")]
    Market {
        id: u64,
        #[source]
        source: MarketError,
    },
    #[error("{dropped} of {requested} scenarios had no usable OPF solution")]
    Systematic { dropped: usize, requested: usize },
    #[error("zero variance in feature(s): {}", .0.join(", "))]
    ZeroVariance(Vec<&'static str>),
    #[error("need at least two rows, got {0}")]
    TooFew(usize),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SamplingRanges {
    /// Loss cost (Rs/kW).
    pub c_ls: (f64, f64),
    /// Correction weight (Rs/kW²).
    pub lambda_corr: (f64, f64),
    pub load_scale: (f64, f64),
    pub power_factor: (f64, f64),
    /// Multiplicative PV perturbation in percent.
    pub solar_uncertainty_pct: (f64, f64),
    /// Hours of day the scenario hour is drawn from.
    pub hours: usize,
}

impl SamplingRanges {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let named = [
            ("c_ls", self.c_ls),
            ("lambda_corr", self.lambda_corr),
            ("load_scale", self.load_scale),
            ("power_factor", self.power_factor),
            ("solar_uncertainty_pct", self.solar_uncertainty_pct),
        ];
        for (name, (lo, hi)) in named {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(ScenarioError::Ranges(format!("{name}: [{lo}, {hi}]")));
            }
        }
        if self.c_ls.0 < 0.0 || self.lambda_corr.0 <= 0.0 || self.load_scale.0 < 0.0 {
            return Err(ScenarioError::Ranges("c_ls and load_scale must be >= 0, lambda_corr > 0".into()));
        }
        if self.power_factor.0 <= 0.0 || self.power_factor.1 > 1.0 {
            return Err(ScenarioError::Ranges("power_factor must lie in (0, 1]".into()));
        }
        if self.hours == 0 {
            return Err(ScenarioError::Ranges("hours must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SampledParams {
    pub c_ls: f64,
    pub lambda_corr: f64,
    pub load_scale: f64,
    pub power_factor: f64,
    pub solar_uncertainty_pct: f64,
    pub hour: usize,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    let u: f64 = rng.gen();
    if lo == hi {
        lo
    } else {
        lo + (hi - lo) * u
    }
}

pub fn sample_scenario(seed: u64, ranges: &SamplingRanges) -> SampledParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SampledParams {
        c_ls: uniform(&mut rng, ranges.c_ls),
        lambda_corr: uniform(&mut rng, ranges.lambda_corr),
        load_scale: uniform(&mut rng, ranges.load_scale),
        power_factor: uniform(&mut rng, ranges.power_factor),
        solar_uncertainty_pct: uniform(&mut rng, ranges.solar_uncertainty_pct),
        hour: rng.gen_range(0..ranges.hours.max(1)),
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of scenario `id` under a master seed.
pub fn scenario_seed(master: u64, id: u64) -> u64 {
    splitmix64(splitmix64(master) ^ id)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScenarioRecord {
    pub id: u64,
    pub seed: u64,
    pub params: SampledParams,
    pub buses: Vec<BusId>,
    /// Per-bus [p_net, p_load, power_factor, c_ls, lambda_corr].
    pub features: Vec<[f64; N_FEATURES]>,
    /// Accepted injection per bus (kW).
    pub target: Vec<f64>,
    pub market_iterations: usize,
    pub market_converged: bool,
    pub exact: bool,
}

impl ScenarioRecord {
    pub fn sample(&self) -> Sample {
        Sample {
            features: self.features.clone(),
            target: self.target.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dropped {
    Infeasible,
    Inexact,
    SolverFailure,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct DropStats {
    pub infeasible: usize,
    pub inexact: usize,
    pub solver_failure: usize,
    pub market_unconverged: usize,
}

impl DropStats {
    pub fn dropped(&self) -> usize {
        self.infeasible + self.inexact + self.solver_failure
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub master_seed: u64,
    pub requested: usize,
    pub ranges: SamplingRanges,
    pub records: Vec<ScenarioRecord>,
    pub drops: DropStats,
}

/// Runs one scenario; `Ok(Err(_))` means the scenario is dropped.
pub fn run_scenario(setup: &Setup, id: u64, seed: u64, params: SampledParams) -> Result<Result<ScenarioRecord, Dropped>, ScenarioError> {
    let factor = 1.0 + params.solar_uncertainty_pct / 100.0;
    let specs: Vec<_> = setup
        .specs()
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.pv_profile.iter_mut().for_each(|p| *p = (*p * factor).max(0.0));
            s
        })
        .collect();
    let soc: Vec<f64> = specs.iter().map(|s| s.bess.soc_init).collect();
    let cfg = &setup.config;
    let market = clear_hour(&specs, params.hour, &soc, &cfg.market, &Mode::GridUnaware, &ClearOptions::default())
        .map_err(|source| ScenarioError::Market { id, source })?;

    let p_net = setup.scatter(&market.p_net());
    let (p_load, q_load) = scaled_loads(&setup.topo, params.load_scale, params.power_factor);
    let dopf_params = DopfParams {
        c_ls: params.c_ls,
        lambda_corr: params.lambda_corr,
        ..cfg.dopf
    };
    let req = InjectionRequest {
        p_net: p_net.clone(),
        p_load: p_load.clone(),
        q_load,
    };
    let sol = match setup.dopf.solve(&req, &dopf_params) {
        Ok(s) => s,
        Err(e) => {
            log::warn!("scenario {id}: {e}");
            return Ok(Err(Dropped::SolverFailure));
        }
    };
    if sol.status == DopfStatus::Infeasible {
        return Ok(Err(Dropped::Infeasible));
    }
    if !check_exactness(&sol, EXACTNESS_TOL).exact {
        return Ok(Err(Dropped::Inexact));
    }
    let features = (0..setup.topo.n_buses())
        .map(|i| [p_net[i], p_load[i], params.power_factor, params.c_ls, params.lambda_corr])
        .collect();
    Ok(Ok(ScenarioRecord {
        id,
        seed,
        params,
        buses: setup.topo.buses.iter().map(|b| b.id).collect(),
        features,
        target: sol.p_acc,
        market_iterations: market.iterations_used,
        market_converged: market.converged,
        exact: true,
    }))
}

/// Generates `n` scenarios on `workers` threads. Output order and content
/// depend only on the master seed.
pub fn generate_dataset(
    setup: &Setup,
    n: usize,
    ranges: &SamplingRanges,
    master_seed: u64,
    workers: usize,
) -> Result<Dataset, ScenarioError> {
    if n == 0 {
        return Err(ScenarioError::Argument("scenario count must be at least 1".into()));
    }
    if workers == 0 {
        return Err(ScenarioError::Argument("worker count must be at least 1".into()));
    }
    ranges.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ScenarioError::Argument(e.to_string()))?;
    let outcomes: Vec<_> = pool.install(|| {
        (0..n as u64)
            .into_par_iter()
            .map(|id| {
                let seed = scenario_seed(master_seed, id);
                run_scenario(setup, id, seed, sample_scenario(seed, ranges))
            })
            .collect()
    });

    let mut records = Vec::with_capacity(n);
    let mut drops = DropStats::default();
    for outcome in outcomes {
        match outcome? {
            Ok(r) => {
                if !r.market_converged {
                    drops.market_unconverged += 1;
                }
                records.push(r);
            }
            Err(Dropped::Infeasible) => drops.infeasible += 1,
            Err(Dropped::Inexact) => drops.inexact += 1,
            Err(Dropped::SolverFailure) => drops.solver_failure += 1,
        }
    }
    if 2 * drops.dropped() > n {
        return Err(ScenarioError::Systematic {
            dropped: drops.dropped(),
            requested: n,
        });
    }
    if drops.dropped() > 0 {
        log::info!("dropped {} of {n} scenarios: {drops:?}", drops.dropped());
    }
    Ok(Dataset {
        master_seed,
        requested: n,
        ranges: *ranges,
        records,
        drops,
    })
}

/// Pearson correlations between the five features over all bus tokens.
pub fn pearson_matrix(records: &[ScenarioRecord]) -> Result<[[f64; N_FEATURES]; N_FEATURES], ScenarioError> {
    let rows: Vec<&[f64; N_FEATURES]> = records.iter().flat_map(|r| r.features.iter()).collect();
    pearson_rows(&rows)
}

pub fn pearson_rows(rows: &[&[f64; N_FEATURES]]) -> Result<[[f64; N_FEATURES]; N_FEATURES], ScenarioError> {
    let n = rows.len();
    if n < 2 {
        return Err(ScenarioError::TooFew(n));
    }
    let mut mean = [0.0; N_FEATURES];
    for r in rows {
        for j in 0..N_FEATURES {
            mean[j] += r[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = [[0.0; N_FEATURES]; N_FEATURES];
    for r in rows {
        for i in 0..N_FEATURES {
            for j in 0..N_FEATURES {
                cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    let zero: Vec<&'static str> = (0..N_FEATURES)
        .filter(|&i| !(cov[i][i] > 1e-12 * (1.0 + mean[i] * mean[i]) * n as f64))
        .map(|i| FEATURE_NAMES[i])
        .collect();
    if !zero.is_empty() {
        return Err(ScenarioError::ZeroVariance(zero));
    }
    let mut rho = [[0.0; N_FEATURES]; N_FEATURES];
    for i in 0..N_FEATURES {
        for j in 0..N_FEATURES {
            rho[i][j] = if i == j {
                1.0
            } else {
                (cov[i][j] / (cov[i][i] * cov[j][j]).sqrt()).clamp(-1.0, 1.0)
            };
        }
    }
    Ok(rho)
}

/// Seeded shuffle split; both halves keep the input order.
pub fn split<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), ScenarioError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(ScenarioError::Argument(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (items.len() as f64 * fraction).round() as usize;
    let mut in_train = vec![false; items.len()];
    idx[..n_train].iter().for_each(|&i| in_train[i] = true);
    let (mut train, mut test) = (Vec::with_capacity(n_train), Vec::new());
    for (item, t) in items.iter().zip(in_train) {
        if t {
            train.push(item.clone());
        } else {
            test.push(item.clone());
        }
    }
    Ok((train, test))
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    scenario_id: u64,
    seed: u64,
    hour: usize,
    load_scale: f64,
    solar_uncertainty_pct: f64,
    bus: BusId,
    p_net_kw: f64,
    p_load_kw: f64,
    power_factor: f64,
    c_ls: f64,
    lambda_corr: f64,
    target_kw: f64,
    market_iterations: usize,
    market_converged: bool,
    exact: bool,
}

pub const DATASET_FILE: &str = "dataset.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Sidecar describing how a dataset was produced.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub crate_version: String,
    pub master_seed: u64,
    pub requested: usize,
    pub retained: usize,
    pub drops: DropStats,
    pub ranges: SamplingRanges,
    /// The shipped range endpoints are read off a figure, not stated values.
    pub ranges_are_figure_estimates: bool,
    pub config: serde_json::Value,
}

pub fn write_dataset(dir: &Path, data: &Dataset, config: serde_json::Value) -> Result<DatasetManifest, ScenarioError> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(DATASET_FILE)).map_err(|e| ScenarioError::Format(e.to_string()))?;
    for r in &data.records {
        for (k, f) in r.features.iter().enumerate() {
            w.serialize(Row {
                scenario_id: r.id,
                seed: r.seed,
                hour: r.params.hour,
                load_scale: r.params.load_scale,
                solar_uncertainty_pct: r.params.solar_uncertainty_pct,
                bus: r.buses[k],
                p_net_kw: f[0],
                p_load_kw: f[1],
                power_factor: f[2],
                c_ls: f[3],
                lambda_corr: f[4],
                target_kw: r.target[k],
                market_iterations: r.market_iterations,
                market_converged: r.market_converged,
                exact: r.exact,
            })
            .map_err(|e| ScenarioError::Format(e.to_string()))?;
        }
    }
    w.flush()?;
    let manifest = DatasetManifest {
        format_version: 1,
        crate_version: env!("CARGO_PKG_VERSION").into(),
        master_seed: data.master_seed,
        requested: data.requested,
        retained: data.records.len(),
        drops: data.drops,
        ranges: data.ranges,
        ranges_are_figure_estimates: true,
        config,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| ScenarioError::Format(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(manifest)
}

/// Reads the records of a dataset file, grouped by scenario id.
pub fn read_dataset(path: &Path) -> Result<Vec<ScenarioRecord>, ScenarioError> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| ScenarioError::Format(format!("{}: {e}", path.display())))?;
    let mut records: Vec<ScenarioRecord> = Vec::new();
    for row in rd.deserialize() {
        let row: Row = row.map_err(|e| ScenarioError::Format(e.to_string()))?;
        let fresh = records.last().map_or(true, |r| r.id != row.scenario_id);
        if fresh {
            records.push(ScenarioRecord {
                id: row.scenario_id,
                seed: row.seed,
                params: SampledParams {
                    c_ls: row.c_ls,
                    lambda_corr: row.lambda_corr,
                    load_scale: row.load_scale,
                    power_factor: row.power_factor,
                    solar_uncertainty_pct: row.solar_uncertainty_pct,
                    hour: row.hour,
                },
                buses: Vec::new(),
                features: Vec::new(),
                target: Vec::new(),
                market_iterations: row.market_iterations,
                market_converged: row.market_converged,
                exact: row.exact,
            });
        }
        let r = records.last_mut().expect("record pushed above");
        r.buses.push(row.bus);
        r.features
            .push([row.p_net_kw, row.p_load_kw, row.power_factor, row.c_ls, row.lambda_corr]);
        r.target.push(row.target_kw);
    }
    if records.is_empty() {
        return Err(ScenarioError::Format(format!("{} holds no rows", path.display())));
    }
    let n = records[0].buses.len();
    if records.iter().any(|r| r.buses.len() != n) {
        return Err(ScenarioError::Format("scenarios have differing bus counts".into()));
    }
    Ok(records)
}
