//! The three-case study over a multi-hour horizon.
//!
//! * Case 1: grid-unaware market; the operator keeps its no-trade dispatch and
//!   the trades are checked with an exact power flow only.
//! * Case 2: market and operator alternate; accepted values become bounds of
//!   the next market pass, for at most `case2.max_rounds` rounds per hour.
//! * Case 3: surrogate-augmented market, one audit OPF per hour afterwards.
//!
//! In Cases 2 and 3 every microgrid settles at the final price with its
//! exchange fixed to the accepted value.

use std::time::Instant;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{scaled_loads, Setup};
use crate::dopf::{DopfSolution, DopfStatus, InjectionRequest};
use crate::market::{aggregate_net, clear_hour, AcceptancePredictor, ClearOptions, MarketOutcome, Mode};
use crate::metrics::{CaseResult, HourRecord, Timing};
use crate::microgrid::{payoff_terms, solve_local, LocalOptions, MgDecision, PayoffTerms};
use crate::powerflow::sweep;
use crate::surrogate::{SurrogateModel, N_FEATURES, P_NET};

const SWEEP_TOL: f64 = 1e-12;
const SWEEP_MAX_ITER: usize = 200;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown case {0}; expected 1, 2 or 3")]
    UnknownCase(u8),
    #[error("case 3 needs a trained surrogate model")]
    MissingModel,
    #[error("case {case}, hour {hour}, round {round}: {message}")]
    Step {
        case: u8,
        hour: usize,
        round: usize,
        message: String,
    },
}

/// Surrogate queries for one hour: every bus token carries the hour's feeder
/// context and the microgrid tokens carry the candidate proposals.
pub struct SurrogatePredictor<'a> {
    model: &'a SurrogateModel,
    context: Vec<[f64; N_FEATURES]>,
    positions: Vec<usize>,
}

impl<'a> SurrogatePredictor<'a> {
    pub fn new(model: &'a SurrogateModel, context: Vec<[f64; N_FEATURES]>, positions: Vec<usize>) -> Self {
        Self {
            model,
            context,
            positions,
        }
    }

    fn with_proposals(&self, p_net: &[f64]) -> Result<Vec<[f64; N_FEATURES]>, String> {
        if p_net.len() != self.positions.len() {
            return Err(format!("{} proposals for {} microgrids", p_net.len(), self.positions.len()));
        }
        let mut x = self.context.clone();
        for (&pos, &p) in self.positions.iter().zip(p_net) {
            x[pos][P_NET] = p;
        }
        Ok(x)
    }

    /// Feeder context with zero proposals.
    pub fn context(p_load: &[f64], pf: f64, c_ls: f64, lambda_corr: f64) -> Vec<[f64; N_FEATURES]> {
        p_load.iter().map(|&p| [0.0, p, pf, c_ls, lambda_corr]).collect()
    }
}

impl AcceptancePredictor for SurrogatePredictor<'_> {
    fn predict(&self, p_net: &[f64]) -> Result<Vec<(f64, f64)>, String> {
        let x = self.with_proposals(p_net)?;
        let (pred, grad) = self
            .model
            .predict_with_gradients(&x, &self.positions)
            .map_err(|e| e.to_string())?;
        Ok(self.positions.iter().zip(grad).map(|(&pos, g)| (pred[pos], g)).collect())
    }

    fn values(&self, p_net: &[f64]) -> Result<Vec<f64>, String> {
        let pred = self.model.forward(&self.with_proposals(p_net)?).map_err(|e| e.to_string())?;
        Ok(self.positions.iter().map(|&pos| pred[pos]).collect())
    }
}

/// Digest of the configuration a result was produced from.
pub fn config_digest(setup: &Setup) -> String {
    let digest = Sha256::digest(setup.config.to_toml().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Exact power flow of `p_net` (per bus, kW) with the generator set-points and
/// slack voltage of an OPF solution.
pub fn dispatch_sweep(
    setup: &Setup,
    dispatch: &DopfSolution,
    p_net: &[f64],
    p_load: &[f64],
    q_load: &[f64],
) -> Result<Vec<f64>, String> {
    let topo = &setup.topo;
    let k = topo.s_base * 1000.0;
    let mut p: Vec<f64> = p_net.iter().zip(p_load).map(|(n, l)| (n - l) / k).collect();
    let mut q: Vec<f64> = q_load.iter().map(|l| -l / k).collect();
    let slack = topo.slack_index();
    for (g, gen) in topo.generators.iter().enumerate() {
        let pos = topo.bus_index(gen.bus).map_err(|e| e.to_string())?;
        if pos != slack {
            p[pos] += dispatch.gen[g].0 / topo.s_base;
            q[pos] += dispatch.gen[g].1 / topo.s_base;
        }
    }
    let pf = sweep(topo, dispatch.v[slack], &p, &q, SWEEP_TOL, SWEEP_MAX_ITER).map_err(|e| e.to_string())?;
    Ok(pf.magnitudes())
}

struct Settled {
    decisions: Vec<MgDecision>,
    payoff: Vec<PayoffTerms>,
}

struct Runner<'a> {
    setup: &'a Setup,
    case: u8,
    hour: usize,
}

impl Runner<'_> {
    fn err(&self, round: usize, e: impl std::fmt::Display) -> HarnessError {
        HarnessError::Step {
            case: self.case,
            hour: self.hour,
            round,
            message: e.to_string(),
        }
    }

    fn solve(&self, round: usize, req: &InjectionRequest) -> Result<DopfSolution, HarnessError> {
        let sol = self.setup.dopf.solve(req, &self.setup.config.dopf).map_err(|e| self.err(round, e))?;
        if sol.status != DopfStatus::Optimal {
            return Err(self.err(round, "operator OPF is infeasible"));
        }
        Ok(sol)
    }

    fn payoffs(&self, decisions: &[MgDecision], price: f64) -> Result<Vec<PayoffTerms>, HarnessError> {
        decisions
            .iter()
            .zip(self.setup.specs())
            .map(|(d, s)| payoff_terms(d, price, s, self.hour).map_err(|e| self.err(0, e)))
            .collect()
    }

    /// Re-dispatch with each exchange pinned to its accepted value.
    fn settle(&self, price: f64, soc: &[f64], accepted: &[f64]) -> Result<Settled, HarnessError> {
        let decisions = self
            .setup
            .specs()
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let opts = LocalOptions {
                    penalty: None,
                    p_net_bounds: Some((accepted[i], accepted[i])),
                };
                solve_local(spec, price, self.hour, soc[i], &opts).map_err(|e| self.err(0, format!("settlement of {}: {e}", spec.id)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let payoff = self.payoffs(&decisions, price)?;
        Ok(Settled { decisions, payoff })
    }
}

fn imbalance(p: &[f64]) -> f64 {
    let (s, d) = aggregate_net(p);
    s - d
}

/// Runs one case over the configured horizon.
pub fn run_case(setup: &Setup, case: u8, model: Option<&SurrogateModel>) -> Result<CaseResult, HarnessError> {
    if !(1..=3).contains(&case) {
        return Err(HarnessError::UnknownCase(case));
    }
    if case == 3 && model.is_none() {
        return Err(HarnessError::MissingModel);
    }
    let cfg = &setup.config;
    let specs = setup.specs();
    let started = Instant::now();
    let mut dopf_time = 0.0;
    let mut soc: Vec<f64> = specs.iter().map(|s| s.bess.soc_init).collect();
    let mut hours = Vec::with_capacity(cfg.horizon.hours);

    for hour in 0..cfg.horizon.hours {
        let run = Runner { setup, case, hour };
        let (p_load, q_load) = scaled_loads(&setup.topo, cfg.load_scale_at(hour), cfg.horizon.power_factor);
        let request = |p_net: Vec<f64>| InjectionRequest {
            p_net,
            p_load: p_load.clone(),
            q_load: q_load.clone(),
        };
        let clear = |mode: &Mode<'_>, bounds: Option<&[(f64, f64)]>, round: usize| -> Result<MarketOutcome, HarnessError> {
            clear_hour(specs, hour, &soc, &cfg.market, mode, &ClearOptions { bounds }).map_err(|e| run.err(round, e))
        };

        let record = match case {
            1 => {
                let out = clear(&Mode::GridUnaware, None, 1)?;
                let proposed = out.p_net();
                // the operator dispatches for the feeder alone and never sees the trades
                let base = run.solve(0, &request(vec![0.0; setup.topo.n_buses()]))?;
                dopf_time += base.solve_time_s;
                let voltages =
                    dispatch_sweep(setup, &base, &setup.scatter(&proposed), &p_load, &q_load).map_err(|e| run.err(1, e))?;
                let payoff = run.payoffs(&out.decisions, out.final_price)?;
                soc = out.soc_next.clone();
                HourRecord {
                    hour,
                    price: out.final_price,
                    imbalance_kw: imbalance(&proposed),
                    transacted_kw: proposed.clone(),
                    proposed_kw: proposed,
                    payoff,
                    voltages,
                    audit_voltages: None,
                    dopf_calls: 1,
                    dopf_calls_in_clearing: 0,
                    market_iterations: out.iterations_used,
                    market_converged: out.converged,
                    rounds: 1,
                    predictor_calls: 0,
                }
            }
            2 => {
                let mut bounds: Option<Vec<(f64, f64)>> = None;
                let mut iterations = 0;
                let mut converged = true;
                let mut last = None;
                let mut rounds = 0;
                for round in 1..=cfg.case2.max_rounds {
                    rounds = round;
                    let out = clear(&Mode::GridUnaware, bounds.as_deref(), round)?;
                    iterations += out.iterations_used;
                    converged &= out.converged;
                    let sol = run.solve(round, &request(setup.scatter(&out.p_net())))?;
                    dopf_time += sol.solve_time_s;
                    let accepted = setup.gather(&sol.p_acc);
                    let done = imbalance(&accepted).abs() < cfg.market.epsilon;
                    bounds = Some(accepted.iter().map(|&a| if a >= 0.0 { (0.0, a) } else { (a, 0.0) }).collect());
                    last = Some((out, sol, accepted));
                    if done {
                        break;
                    }
                }
                let (out, sol, accepted) = last.expect("at least one round");
                let settled = run.settle(out.final_price, &soc, &accepted)?;
                soc = settled.decisions.iter().map(|d| d.soc_next).collect();
                HourRecord {
                    hour,
                    price: out.final_price,
                    proposed_kw: out.p_net(),
                    imbalance_kw: imbalance(&accepted),
                    transacted_kw: accepted,
                    payoff: settled.payoff,
                    voltages: sol.voltage_magnitudes(),
                    audit_voltages: None,
                    dopf_calls: rounds,
                    dopf_calls_in_clearing: rounds,
                    market_iterations: iterations,
                    market_converged: converged,
                    rounds,
                    predictor_calls: 0,
                }
            }
            _ => {
                let model = model.expect("checked above");
                let context = SurrogatePredictor::context(&p_load, cfg.horizon.power_factor, cfg.dopf.c_ls, cfg.dopf.lambda_corr);
                let predictor = SurrogatePredictor::new(model, context, setup.mg_positions.clone());
                let before = setup.dopf.solve_count();
                let out = clear(&Mode::Augmented(&predictor), None, 1)?;
                let in_clearing = setup.dopf.solve_count() - before;
                let proposed = out.p_net();
                let p_bus = setup.scatter(&proposed);
                let audit = run.solve(1, &request(p_bus.clone()))?;
                dopf_time += audit.solve_time_s;
                let accepted = setup.gather(&audit.p_acc);
                let audit_voltages = dispatch_sweep(setup, &audit, &p_bus, &p_load, &q_load).map_err(|e| run.err(1, e))?;
                let settled = run.settle(out.final_price, &soc, &accepted)?;
                soc = settled.decisions.iter().map(|d| d.soc_next).collect();
                HourRecord {
                    hour,
                    price: out.final_price,
                    proposed_kw: proposed,
                    imbalance_kw: imbalance(&accepted),
                    transacted_kw: accepted,
                    payoff: settled.payoff,
                    voltages: audit.voltage_magnitudes(),
                    audit_voltages: Some(audit_voltages),
                    dopf_calls: 1,
                    dopf_calls_in_clearing: in_clearing,
                    market_iterations: out.iterations_used,
                    market_converged: out.converged,
                    rounds: 1,
                    predictor_calls: out.predictor_calls,
                }
            }
        };
        log::debug!(
            "case {case} hour {hour}: price {:.4}, traded {:.3} kW",
            record.price,
            record.transacted_kw.iter().map(|p| p.abs()).sum::<f64>()
        );
        hours.push(record);
    }

    Ok(CaseResult {
        case,
        config_digest: config_digest(setup),
        mg_ids: specs.iter().map(|s| s.id.clone()).collect(),
        bus_ids: setup.topo.buses.iter().map(|b| b.id).collect(),
        hours,
        timing: Timing {
            wall_time_s: started.elapsed().as_secs_f64(),
            dopf_time_s: dopf_time,
        },
    })
}
