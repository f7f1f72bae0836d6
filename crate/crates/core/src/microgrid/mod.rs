//! Microgrid agents: device models, payoff and the per-hour local dispatch.

pub mod sqp;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::BusId;
use sqp::{Feasible, Model, SqpError, SqpOptions};

/// Length of one market period in hours.
pub const DT_HOURS: f64 = 1.0;

/// Net injections within this many kW of zero count as neutral.
const ROLE_TOL_KW: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MgError {
    #[error("invalid microgrid parameters: {0}")]
    Invalid(String),
    #[error("{what} must be non-negative, got {value}")]
    Negative { what: &'static str, value: f64 },
    #[error("infeasible local problem: {0}")]
    Infeasible(String),
    #[error("local solver stopped after {iterations} iterations with residual {residual:e}")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("acceptance model failed: {0}")]
    Response(String),
    #[error("decision violates device limits: {0}")]
    BadDecision(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BessSpec {
    /// Charge and discharge power cap (kW).
    pub p_max: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub eta_c: f64,
    pub eta_d: f64,
    pub soc_init: f64,
}

impl BessSpec {
    pub fn validate(&self) -> Result<(), MgError> {
        let bad = |m: &str| Err(MgError::Invalid(format!("bess: {m}")));
        if !(self.eta_c > 0.0 && self.eta_c <= 1.0 && self.eta_d > 0.0 && self.eta_d <= 1.0) {
            return bad("efficiencies must lie in (0, 1]");
        }
        if !(self.soc_min < self.soc_max) {
            return bad("soc_min must be below soc_max");
        }
        if !(self.soc_min <= self.soc_init && self.soc_init <= self.soc_max) {
            return bad("soc_init outside [soc_min, soc_max]");
        }
        if !(self.p_max > 0.0) {
            return bad("p_max must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MicrogridSpec {
    pub id: String,
    pub bus: BusId,
    /// Marginal utility per hour (Rs/kWh); a single entry applies to all hours.
    pub alpha: Vec<f64>,
    /// Diminishing-return coefficient per hour (Rs/kWh²).
    pub beta: Vec<f64>,
    pub a: f64,
    pub b: f64,
    pub g_max: f64,
    pub load_min: f64,
    pub load_max: f64,
    /// Renewable availability per hour (kW).
    pub pv_profile: Vec<f64>,
    pub bess: BessSpec,
    pub lambda_d: f64,
}

fn hourly(values: &[f64], hour: usize) -> f64 {
    values[hour % values.len()]
}

impl MicrogridSpec {
    pub fn validate(&self) -> Result<(), MgError> {
        let bad = |m: String| Err(MgError::Invalid(format!("{}: {m}", self.id)));
        for (name, v) in [("alpha", &self.alpha), ("beta", &self.beta), ("pv_profile", &self.pv_profile)] {
            if v.is_empty() {
                return bad(format!("{name} is empty"));
            }
        }
        if self.alpha.iter().any(|v| !(*v > 0.0)) || self.beta.iter().any(|v| !(*v > 0.0)) {
            return bad("alpha and beta must be positive".into());
        }
        if !(self.a >= 0.0 && self.b >= 0.0) {
            return bad("generator cost coefficients must be non-negative".into());
        }
        if !(self.g_max >= 0.0) {
            return bad("g_max must be non-negative".into());
        }
        if !(self.load_min >= 0.0 && self.load_min <= self.load_max) {
            return bad(format!("load bounds [{}, {}] are inconsistent", self.load_min, self.load_max));
        }
        if self.pv_profile.iter().any(|v| !(*v >= 0.0)) {
            return bad("pv_profile entries must be non-negative".into());
        }
        if !(self.lambda_d >= 0.0) {
            return bad("lambda_d must be non-negative".into());
        }
        self.bess.validate().map_err(|e| MgError::Invalid(format!("{}: {e}", self.id)))
    }

    pub fn alpha_at(&self, hour: usize) -> f64 {
        hourly(&self.alpha, hour)
    }

    pub fn beta_at(&self, hour: usize) -> f64 {
        hourly(&self.beta, hour)
    }

    pub fn pv_at(&self, hour: usize) -> f64 {
        hourly(&self.pv_profile, hour)
    }

    /// Consumption level where utility saturates.
    pub fn knee(&self, hour: usize) -> f64 {
        self.alpha_at(hour) / (2.0 * self.beta_at(hour))
    }

    /// Largest conceivable |p_net| in either direction (kW).
    pub fn max_exchange(&self) -> f64 {
        let pv = self.pv_profile.iter().cloned().fold(0.0, f64::max);
        let export = self.g_max + pv + self.bess.p_max;
        let import = self.load_max + self.bess.p_max;
        export.max(import)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Seller,
    Buyer,
    Neutral,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MgDecision {
    pub load: f64,
    pub gen: f64,
    pub ren: f64,
    pub p_ch: f64,
    pub p_dch: f64,
    pub soc_next: f64,
    pub p_net: f64,
    pub role: Role,
    pub p_sell: f64,
    pub p_buy: f64,
}

impl MgDecision {
    fn from_devices(load: f64, gen: f64, ren: f64, p_ch: f64, p_dch: f64, soc_next: f64) -> Self {
        let p_net = gen + ren + p_dch - load - p_ch;
        let role = if p_net > ROLE_TOL_KW {
            Role::Seller
        } else if p_net < -ROLE_TOL_KW {
            Role::Buyer
        } else {
            Role::Neutral
        };
        Self {
            load,
            gen,
            ren,
            p_ch,
            p_dch,
            soc_next,
            p_net,
            role,
            p_sell: p_net.max(0.0),
            p_buy: (-p_net).max(0.0),
        }
    }

    /// An idle decision: nothing consumed, produced or stored.
    pub fn idle(soc: f64) -> Self {
        Self::from_devices(0.0, 0.0, 0.0, 0.0, 0.0, soc)
    }
}

pub fn utility(load: f64, alpha: f64, beta: f64) -> Result<f64, MgError> {
    if !(load >= 0.0) {
        return Err(MgError::Negative { what: "load", value: load });
    }
    if !(beta > 0.0) {
        return Err(MgError::Invalid(format!("beta must be positive, got {beta}")));
    }
    let knee = alpha / (2.0 * beta);
    Ok(if load <= knee {
        alpha * load - beta * load * load
    } else {
        alpha * alpha / (4.0 * beta)
    })
}

pub fn gen_cost(gen: f64, a: f64, b: f64) -> Result<f64, MgError> {
    if !(gen >= 0.0) {
        return Err(MgError::Negative { what: "generation", value: gen });
    }
    Ok(a * gen * gen + b * gen)
}

pub fn soc_step(soc: f64, p_ch: f64, p_dch: f64, bess: &BessSpec, dt: f64) -> f64 {
    soc + bess.eta_c * p_ch * dt - p_dch * dt / bess.eta_d
}

/// Payoff terms of one decision (Rs).
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq)]
pub struct PayoffTerms {
    pub utility: f64,
    pub gen_cost: f64,
    pub revenue: f64,
    pub degradation: f64,
    pub total: f64,
}

pub fn payoff_terms(d: &MgDecision, price: f64, spec: &MicrogridSpec, hour: usize) -> Result<PayoffTerms, MgError> {
    check_decision(d, spec, hour)?;
    let utility = utility(d.load, spec.alpha_at(hour), spec.beta_at(hour))?;
    let gen_cost = gen_cost(d.gen, spec.a, spec.b)?;
    let revenue = price * (d.p_sell - d.p_buy);
    let degradation = spec.lambda_d * (d.p_dch + d.p_ch);
    Ok(PayoffTerms {
        utility,
        gen_cost,
        revenue,
        degradation,
        total: utility + revenue - gen_cost - degradation,
    })
}

pub fn payoff(d: &MgDecision, price: f64, spec: &MicrogridSpec, hour: usize) -> Result<f64, MgError> {
    payoff_terms(d, price, spec, hour).map(|t| t.total)
}

fn check_decision(d: &MgDecision, spec: &MicrogridSpec, hour: usize) -> Result<(), MgError> {
    let tol = 1e-6;
    let bad = |m: String| Err(MgError::BadDecision(m));
    let within = |v: f64, lo: f64, hi: f64| v >= lo - tol && v <= hi + tol;
    let all_zero = d.load == 0.0 && d.gen == 0.0 && d.ren == 0.0 && d.p_ch == 0.0 && d.p_dch == 0.0;
    if !all_zero && !within(d.load, spec.load_min, spec.load_max) {
        return bad(format!("load {} outside [{}, {}]", d.load, spec.load_min, spec.load_max));
    }
    if !within(d.gen, 0.0, spec.g_max) {
        return bad(format!("generation {} outside [0, {}]", d.gen, spec.g_max));
    }
    if !within(d.ren, 0.0, spec.pv_at(hour)) {
        return bad(format!("renewable {} outside [0, {}]", d.ren, spec.pv_at(hour)));
    }
    if !within(d.p_ch, 0.0, spec.bess.p_max) || !within(d.p_dch, 0.0, spec.bess.p_max) {
        return bad("battery power outside [0, p_max]".into());
    }
    let net = d.gen + d.ren + d.p_dch - d.load - d.p_ch;
    if (net - d.p_net).abs() > tol * (1.0 + net.abs()) {
        return bad(format!("p_net {} inconsistent with devices ({net})", d.p_net));
    }
    if d.p_sell * d.p_buy != 0.0 || d.p_sell < 0.0 || d.p_buy < 0.0 {
        return bad("p_sell and p_buy must be non-negative and complementary".into());
    }
    if (d.p_sell - d.p_buy - d.p_net).abs() > tol * (1.0 + net.abs()) {
        return bad("p_sell - p_buy differs from p_net".into());
    }
    Ok(())
}

/// Anticipated operator response to an MG's own proposal.
pub trait AcceptanceResponse {
    /// Accepted injection (kW) and its derivative with respect to `p_net_kw`.
    fn respond(&self, p_net_kw: f64) -> Result<(f64, f64), String>;
}

/// Quadratic penalty `μ (f(p) − p)²` added to the local objective.
pub struct Penalty<'a> {
    pub mu: f64,
    pub response: &'a dyn AcceptanceResponse,
}

/// Optional restrictions on the local solve.
#[derive(Default)]
pub struct LocalOptions<'a> {
    pub penalty: Option<Penalty<'a>>,
    /// Closed interval imposed on p_net (kW).
    pub p_net_bounds: Option<(f64, f64)>,
}

// decision vector layout
const L: usize = 0;
const G: usize = 1;
const R: usize = 2;
const CH: usize = 3;
const DCH: usize = 4;
const NET_COEF: [f64; 5] = [-1.0, 1.0, 1.0, -1.0, 1.0];

/// Maximizes the hourly payoff (minus the optional penalty) of one microgrid.
pub fn solve_local(
    spec: &MicrogridSpec,
    price: f64,
    hour: usize,
    soc: f64,
    opts: &LocalOptions<'_>,
) -> Result<MgDecision, MgError> {
    spec.validate()?;
    if !(price >= 0.0) {
        return Err(MgError::Negative { what: "price", value: price });
    }
    let bess = &spec.bess;
    let slack = 1e-9 * (1.0 + bess.soc_max.abs());
    if soc < bess.soc_min - slack || soc > bess.soc_max + slack {
        return Err(MgError::Invalid(format!(
            "{}: soc {soc} outside [{}, {}]",
            spec.id, bess.soc_min, bess.soc_max
        )));
    }
    let soc = soc.clamp(bess.soc_min, bess.soc_max);

    let (alpha, beta) = (spec.alpha_at(hour), spec.beta_at(hour));
    let knee = alpha / (2.0 * beta);
    // state-of-charge limits become power caps once charge and discharge are exclusive
    let ch_cap = bess.p_max.min((bess.soc_max - soc) / (bess.eta_c * DT_HOURS)).max(0.0);
    let dch_cap = bess.p_max.min((soc - bess.soc_min) * bess.eta_d / DT_HOURS).max(0.0);
    let lo = [spec.load_min, 0.0, 0.0, 0.0, 0.0];
    let hi = [spec.load_max, spec.g_max, spec.pv_at(hour), ch_cap, dch_cap];
    let (s_lo, s_hi) = opts.p_net_bounds.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
    if s_lo > s_hi {
        return Err(MgError::Infeasible(format!("p_net bounds [{s_lo}, {s_hi}] are empty")));
    }
    let set = Feasible {
        lo: &lo,
        hi: &hi,
        a: &NET_COEF,
        s_lo,
        s_hi,
    };

    let lambda_d = spec.lambda_d;
    let penalty_err = std::cell::RefCell::new(None);
    let eval = |x: &[f64], _need_grad: bool| -> Model {
        let load = x[L];
        let (u, du, d2u) = if load <= knee {
            (alpha * load - beta * load * load, alpha - 2.0 * beta * load, -2.0 * beta)
        } else {
            (alpha * alpha / (4.0 * beta), 0.0, 0.0)
        };
        let net: f64 = x.iter().zip(&NET_COEF).map(|(v, c)| v * c).sum();
        // objective is the negated payoff
        let mut value = -u - price * net + spec.a * x[G] * x[G] + spec.b * x[G] + lambda_d * (x[CH] + x[DCH]);
        let mut grad = vec![
            -du + price,
            -price + 2.0 * spec.a * x[G] + spec.b,
            -price,
            price + lambda_d,
            -price + lambda_d,
        ];
        let hess_diag = vec![-d2u, 2.0 * spec.a, 0.0, 0.0, 0.0];
        let mut rank_one = 0.0;
        if let Some(pen) = &opts.penalty {
            match pen.response.respond(net) {
                Ok((f, df)) => {
                    let gap = f - net;
                    value += pen.mu * gap * gap;
                    let dpen = 2.0 * pen.mu * gap * (df - 1.0);
                    for (g, c) in grad.iter_mut().zip(&NET_COEF) {
                        *g += dpen * c;
                    }
                    rank_one = 2.0 * pen.mu * (df - 1.0) * (df - 1.0);
                }
                Err(e) => {
                    *penalty_err.borrow_mut() = Some(e);
                    value = f64::NAN;
                }
            }
        }
        Model {
            value,
            grad,
            hess_diag,
            rank_one,
        }
    };

    let x0 = [spec.load_min.max(knee.min(spec.load_max)), 0.0, 0.0, 0.0, 0.0];
    let outcome = sqp::minimize(&x0, &set, SqpOptions::default(), eval);
    if let Some(e) = penalty_err.into_inner() {
        return Err(MgError::Response(e));
    }
    let out = outcome.map_err(|e| match e {
        SqpError::EmptyFeasibleSet => MgError::Infeasible(format!(
            "{}: p_net bounds [{s_lo}, {s_hi}] unreachable within device limits",
            spec.id
        )),
        SqpError::NonFinite => MgError::NoConvergence {
            iterations: 0,
            residual: f64::NAN,
        },
    })?;
    if !out.converged {
        return Err(MgError::NoConvergence {
            iterations: out.iterations,
            residual: out.stationarity,
        });
    }

    let x: Vec<f64> = out.x.iter().zip(lo.iter().zip(&hi)).map(|(v, (l, h))| v.clamp(*l, *h)).collect();
    // net the battery: simultaneous charge and discharge only adds degradation
    let battery = x[DCH] - x[CH];
    let (p_ch, p_dch) = if battery >= 0.0 { (0.0, battery) } else { (-battery, 0.0) };
    let soc_next = soc_step(soc, p_ch, p_dch, bess, DT_HOURS).clamp(bess.soc_min, bess.soc_max);
    Ok(MgDecision::from_devices(x[L], x[G], x[R], p_ch, p_dch, soc_next))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_spec() -> MicrogridSpec {
        MicrogridSpec {
            id: "mg".into(),
            bus: 17,
            alpha: vec![0.8],
            beta: vec![0.004],
            a: 0.001,
            b: 0.2,
            g_max: 52.0,
            load_min: 15.0,
            load_max: 100.0,
            pv_profile: vec![10.0],
            bess: BessSpec {
                p_max: 10.0,
                soc_min: 4.0,
                soc_max: 20.0,
                eta_c: 0.95,
                eta_d: 0.95,
                soc_init: 10.0,
            },
            lambda_d: 0.01,
        }
    }

    #[test]
    fn utility_examples() {
        assert_eq!(utility(0.0, 0.8, 0.004).unwrap(), 0.0);
        let knee = 0.8 / (2.0 * 0.004);
        let top = 0.8 * 0.8 / (4.0 * 0.004);
        assert!((utility(knee, 0.8, 0.004).unwrap() - top).abs() < 1e-12);
        assert!((utility(knee + 1.0, 0.8, 0.004).unwrap() - top).abs() < 1e-12);
        assert!((utility(50.0, 0.8, 0.004).unwrap() - 30.0).abs() < 1e-12);
        assert!(utility(-1.0, 0.8, 0.004).is_err());
    }

    #[test]
    fn gen_cost_examples() {
        assert_eq!(gen_cost(0.0, 0.0001, 0.079).unwrap(), 0.0);
        assert!((gen_cost(52.0, 0.0001, 0.079).unwrap() - 4.3784).abs() < 1e-12);
        assert!((gen_cost(44.0, 0.009, 0.5).unwrap() - 39.424).abs() < 1e-12);
        assert!(gen_cost(-0.5, 0.0, 0.0).is_err());
    }

    #[test]
    fn soc_examples() {
        let bess = sample_spec().bess;
        assert_eq!(soc_step(10.0, 0.0, 0.0, &bess, 1.0), 10.0);
        assert!((soc_step(10.0, 10.0, 0.0, &bess, 1.0) - 19.5).abs() < 1e-12);
        assert!((soc_step(19.5, 0.0, 10.0, &bess, 1.0) - 8.973684210526315).abs() < 1e-12);
    }

    #[test]
    fn payoff_examples() {
        let mut spec = sample_spec();
        spec.load_min = 0.0;
        assert_eq!(payoff(&MgDecision::idle(10.0), 3.0, &spec, 0).unwrap(), 0.0);

        spec.a = 0.0;
        spec.b = 0.0;
        let seller = MgDecision::from_devices(0.0, 10.0, 0.0, 0.0, 0.0, 10.0);
        assert!((payoff(&seller, 3.0, &spec, 0).unwrap() - 30.0).abs() < 1e-12);

        spec.lambda_d = 0.1;
        let charging = MgDecision::from_devices(0.0, 10.0, 0.0, 10.0, 0.0, 19.5);
        let t = payoff_terms(&charging, 7.0, &spec, 0).unwrap();
        assert!((t.degradation - 1.0).abs() < 1e-12);
        assert!((t.total + 1.0).abs() < 1e-12);
    }

    #[test]
    fn payoff_rejects_inconsistent_decision() {
        let spec = sample_spec();
        let mut d = MgDecision::from_devices(20.0, 10.0, 0.0, 0.0, 0.0, 10.0);
        d.p_net += 1.0;
        assert!(matches!(payoff(&d, 1.0, &spec, 0), Err(MgError::BadDecision(_))));
    }

    #[test]
    fn infeasible_load_bounds() {
        let mut spec = sample_spec();
        spec.load_min = 120.0;
        assert!(matches!(
            solve_local(&spec, 1.0, 0, 10.0, &LocalOptions::default()),
            Err(MgError::Invalid(_))
        ));
    }

    #[test]
    fn unreachable_net_bounds() {
        let spec = sample_spec();
        let opts = LocalOptions {
            penalty: None,
            p_net_bounds: Some((500.0, 600.0)),
        };
        assert!(matches!(solve_local(&spec, 1.0, 0, 10.0, &opts), Err(MgError::Infeasible(_))));
    }

    #[test]
    fn decision_invariants_hold() {
        let spec = sample_spec();
        for price in [0.0, 0.1, 0.3, 0.6, 1.0, 3.0] {
            let d = solve_local(&spec, price, 0, 10.0, &LocalOptions::default()).unwrap();
            assert_eq!(d.p_sell * d.p_buy, 0.0);
            assert_eq!(d.p_ch * d.p_dch, 0.0);
            let net = d.gen + d.ren + d.p_dch - d.load - d.p_ch;
            assert!((net - d.p_net).abs() < 1e-9);
            assert!(payoff(&d, price, &spec, 0).is_ok());
        }
    }
}
