//! Pooled-price P2P market cleared by iterative price adjustment.
//!
//! Each iteration every microgrid best-responds to the current price, supply
//! and demand are aggregated and the price moves by `ξ (demand − supply)`
//! until the mismatch falls below `ε`. In augmented mode every agent also
//! carries a penalty that pulls its proposal towards the operator response
//! predicted by an [`AcceptancePredictor`].

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::microgrid::{solve_local, AcceptanceResponse, LocalOptions, MgDecision, MgError, MicrogridSpec, Penalty};

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("invalid market configuration: {0}")]
    Config(String),
    #[error("microgrid {id}: {source}")]
    Agent {
        id: String,
        #[source]
        source: MgError,
    },
    #[error("acceptance predictor failed: {0}")]
    Predictor(String),
    #[error("expected {expected} entries, got {got}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MarketConfig {
    /// Price step per kW of excess demand (Rs/kWh per kW).
    pub xi: f64,
    /// Tolerance on |demand − supply| (kW).
    pub epsilon: f64,
    pub k_max: usize,
    pub pi_init: f64,
    /// Weight of the predicted-acceptance penalty in augmented mode.
    pub mu: f64,
    /// Proposal drift (kW) after which predicted values are refreshed. The
    /// hour's first linearization is kept when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refresh_kw: Option<f64>,
    /// Drift (kW) after which slopes are recomputed as well.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_refresh_kw: Option<f64>,
}

impl Default for MarketConfig {
    fn default() -> Self {
        Self {
            xi: 0.005,
            epsilon: 0.01,
            k_max: 2000,
            pi_init: 3.0,
            mu: 1.0,
            refresh_kw: None,
            slope_refresh_kw: None,
        }
    }
}

impl MarketConfig {
    pub fn validate(&self) -> Result<(), MarketError> {
        let bad = |m: &str| Err(MarketError::Config(m.into()));
        if !(self.xi >= 0.0) {
            return bad("xi must be non-negative");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.k_max == 0 {
            return bad("k_max must be at least 1");
        }
        if !(self.pi_init >= 0.0) {
            return bad("pi_init must be non-negative");
        }
        if !(self.mu >= 0.0) {
            return bad("mu must be non-negative");
        }
        if [self.refresh_kw, self.slope_refresh_kw].iter().flatten().any(|v| !(*v >= 0.0)) {
            return bad("refresh_kw and slope_refresh_kw must be non-negative");
        }
        Ok(())
    }
}

pub fn price_update(pi: f64, xi: f64, demand: f64, supply: f64) -> f64 {
    (pi + xi * (demand - supply)).max(0.0)
}

/// Total supply and demand (kW) of a set of decisions.
pub fn aggregate(decisions: &[MgDecision]) -> (f64, f64) {
    decisions
        .iter()
        .fold((0.0, 0.0), |(s, d), m| (s + m.p_sell, d + m.p_buy))
}

/// Supply and demand of signed net injections.
pub fn aggregate_net(p_net: &[f64]) -> (f64, f64) {
    p_net
        .iter()
        .fold((0.0, 0.0), |(s, d), p| (s + p.max(0.0), d + (-p).max(0.0)))
}

/// Operator response anticipated by the agents for one hour.
pub trait AcceptancePredictor {
    /// For proposals `p_net` (kW, one per microgrid in market order), the
    /// predicted accepted injection of each microgrid and its derivative
    /// with respect to that microgrid's own proposal.
    fn predict(&self, p_net: &[f64]) -> Result<Vec<(f64, f64)>, String>;

    /// Predicted accepted injections alone.
    fn values(&self, p_net: &[f64]) -> Result<Vec<f64>, String> {
        Ok(self.predict(p_net)?.into_iter().map(|(v, _)| v).collect())
    }
}

pub enum Mode<'a> {
    GridUnaware,
    Augmented(&'a dyn AcceptancePredictor),
}

#[derive(Default)]
pub struct ClearOptions<'a> {
    /// Per-microgrid closed interval imposed on p_net (kW).
    pub bounds: Option<&'a [(f64, f64)]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarketOutcome {
    /// Price used in each iteration.
    pub price_trajectory: Vec<f64>,
    pub final_price: f64,
    /// Decisions of the last iteration, in market order.
    pub decisions: Vec<MgDecision>,
    pub supply: Vec<f64>,
    pub demand: Vec<f64>,
    pub converged: bool,
    pub iterations_used: usize,
    /// Battery energy after the hour, per microgrid.
    pub soc_next: Vec<f64>,
    /// Predicted accepted injections at the final decisions (augmented mode).
    pub predicted_acc: Option<Vec<f64>>,
    /// Predictor queries, with and without slopes.
    pub predictor_calls: usize,
    pub slope_calls: usize,
}

impl MarketOutcome {
    pub fn p_net(&self) -> Vec<f64> {
        self.decisions.iter().map(|d| d.p_net).collect()
    }

    /// Delimited per-iteration log: iteration, price, supply, demand, mismatch.
    pub fn convergence_log(&self) -> String {
        let mut out = String::from("iteration,price,supply,demand,mismatch\n");
        for k in 0..self.price_trajectory.len() {
            let (s, d) = (self.supply[k], self.demand[k]);
            let _ = writeln!(out, "{},{},{},{},{}", k + 1, self.price_trajectory[k], s, d, d - s);
        }
        out
    }
}

/// Affine model of the predicted response around a proposal.
#[derive(Debug, Clone, Copy)]
struct Linearized {
    p0: f64,
    f0: f64,
    slope: f64,
}

impl Linearized {
    fn at(&self, p: f64) -> f64 {
        self.f0 + self.slope * (p - self.p0)
    }
}

impl AcceptanceResponse for Linearized {
    fn respond(&self, p_net_kw: f64) -> Result<(f64, f64), String> {
        Ok((self.at(p_net_kw), self.slope))
    }
}

fn solve_all(
    specs: &[MicrogridSpec],
    price: f64,
    hour: usize,
    soc: &[f64],
    bounds: Option<&[(f64, f64)]>,
    penalty: Option<(f64, &[Linearized])>,
) -> Result<Vec<MgDecision>, MarketError> {
    specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let opts = LocalOptions {
                penalty: penalty.map(|(mu, lin)| Penalty {
                    mu,
                    response: &lin[i] as &dyn AcceptanceResponse,
                }),
                p_net_bounds: bounds.map(|b| b[i]),
            };
            solve_local(spec, price, hour, soc[i], &opts).map_err(|source| MarketError::Agent {
                id: spec.id.clone(),
                source,
            })
        })
        .collect()
}

#[derive(Default)]
struct Calls {
    total: usize,
    slopes: usize,
}

fn check_len<T>(v: Vec<T>, n: usize) -> Result<Vec<T>, MarketError> {
    if v.len() != n {
        return Err(MarketError::Dimension { expected: n, got: v.len() });
    }
    Ok(v)
}

fn linearize(predictor: &dyn AcceptancePredictor, p: &[f64], calls: &mut Calls) -> Result<Vec<Linearized>, MarketError> {
    calls.total += 1;
    calls.slopes += 1;
    let resp = check_len(predictor.predict(p).map_err(MarketError::Predictor)?, p.len())?;
    Ok(p.iter()
        .zip(resp)
        .map(|(&p0, (f0, slope))| Linearized { p0, f0, slope })
        .collect())
}

fn values(predictor: &dyn AcceptancePredictor, p: &[f64], calls: &mut Calls) -> Result<Vec<f64>, MarketError> {
    calls.total += 1;
    check_len(predictor.values(p).map_err(MarketError::Predictor)?, p.len())
}

/// Clears one hour of the market.
pub fn clear_hour(
    specs: &[MicrogridSpec],
    hour: usize,
    soc: &[f64],
    config: &MarketConfig,
    mode: &Mode<'_>,
    options: &ClearOptions<'_>,
) -> Result<MarketOutcome, MarketError> {
    config.validate()?;
    if soc.len() != specs.len() {
        return Err(MarketError::Dimension {
            expected: specs.len(),
            got: soc.len(),
        });
    }
    if let Some(b) = options.bounds {
        if b.len() != specs.len() {
            return Err(MarketError::Dimension {
                expected: specs.len(),
                got: b.len(),
            });
        }
    }

    let mut price = config.pi_init;
    let mut trajectory = Vec::new();
    let (mut supply_log, mut demand_log) = (Vec::new(), Vec::new());
    let mut calls = Calls::default();
    let mut converged = false;

    // augmented mode linearizes the predictor at the unpenalized response;
    // values follow the proposals closely, slopes only on larger moves
    let mut slope_origin = Vec::new();
    let mut lin = match mode {
        Mode::GridUnaware => None,
        Mode::Augmented(pred) => {
            let first = solve_all(specs, price, hour, soc, options.bounds, None)?;
            let p: Vec<f64> = first.iter().map(|d| d.p_net).collect();
            slope_origin = p.clone();
            Some(linearize(*pred, &p, &mut calls)?)
        }
    };

    let mut decisions = Vec::new();
    for _ in 0..config.k_max {
        let penalty = lin.as_deref().map(|l| (config.mu, l));
        decisions = solve_all(specs, price, hour, soc, options.bounds, penalty)?;
        let p: Vec<f64> = decisions.iter().map(|d| d.p_net).collect();
        let (supply, demand) = match (mode, &mut lin) {
            (Mode::Augmented(pred), Some(l)) => {
                let moved = |limit: Option<f64>, from: &mut dyn Iterator<Item = f64>| {
                    limit.is_some_and(|lim| p.iter().zip(from).any(|(p, o)| (p - o).abs() > lim))
                };
                let far = moved(config.slope_refresh_kw, &mut slope_origin.iter().copied());
                let drift = moved(config.refresh_kw, &mut l.iter().map(|l| l.p0));
                if far {
                    *l = linearize(*pred, &p, &mut calls)?;
                    slope_origin = p.clone();
                } else if drift {
                    let f = values(*pred, &p, &mut calls)?;
                    for ((l, p), f) in l.iter_mut().zip(&p).zip(f) {
                        l.p0 = *p;
                        l.f0 = f;
                    }
                }
                let acc: Vec<f64> = p.iter().zip(l.iter()).map(|(p, l)| l.at(*p)).collect();
                aggregate_net(&acc)
            }
            _ => aggregate(&decisions),
        };
        trajectory.push(price);
        supply_log.push(supply);
        demand_log.push(demand);
        if (demand - supply).abs() < config.epsilon {
            converged = true;
            break;
        }
        let next = price_update(price, config.xi, demand, supply);
        if next == price && matches!(mode, Mode::GridUnaware) {
            // a fixed price repeats the same decisions forever
            break;
        }
        price = next;
    }

    let predicted_acc = match mode {
        Mode::GridUnaware => None,
        Mode::Augmented(_) => lin
            .as_ref()
            .map(|l| decisions.iter().zip(l).map(|(d, l)| l.at(d.p_net)).collect()),
    };

    Ok(MarketOutcome {
        final_price: price,
        soc_next: decisions.iter().map(|d| d.soc_next).collect(),
        iterations_used: trajectory.len(),
        price_trajectory: trajectory,
        decisions,
        supply: supply_log,
        demand: demand_log,
        converged,
        predicted_acc,
        predictor_calls: calls.total,
        slope_calls: calls.slopes,
    })
}
