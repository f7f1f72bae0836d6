//! Case-study metrics: traded power, payoff decomposition, acceptance ratio,
//! voltage violations and operator overhead.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::microgrid::PayoffTerms;
use crate::network::BusId;

pub const VOLTAGE_BAND: (f64, f64) = (0.95, 1.05);
pub const HOURS_PER_YEAR: f64 = 8760.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("series lengths differ: {0} vs {1}")]
    Misaligned(usize, usize),
    #[error("results come from different configurations ({0} vs {1})")]
    ConfigMismatch(String, String),
    #[error("nothing to compare: {0}")]
    Empty(String),
    #[error("payoff terms of {mg} in hour {hour} do not add up (residual {residual:e})")]
    Inconsistent { mg: String, hour: usize, residual: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HourRecord {
    pub hour: usize,
    pub price: f64,
    /// Final market proposals per microgrid (kW).
    pub proposed_kw: Vec<f64>,
    /// What was actually exchanged: accepted values, or proposals in the
    /// grid-unaware case.
    pub transacted_kw: Vec<f64>,
    pub payoff: Vec<PayoffTerms>,
    /// Voltage magnitude per bus (p.u.).
    pub voltages: Vec<f64>,
    /// Exact power flow of the proposals under the audited dispatch.
    pub audit_voltages: Option<Vec<f64>>,
    pub dopf_calls: usize,
    pub dopf_calls_in_clearing: usize,
    pub market_iterations: usize,
    pub market_converged: bool,
    pub rounds: usize,
    pub predictor_calls: usize,
    /// Transacted supply minus transacted demand (kW).
    pub imbalance_kw: f64,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq)]
pub struct Timing {
    pub wall_time_s: f64,
    pub dopf_time_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CaseResult {
    pub case: u8,
    pub config_digest: String,
    pub mg_ids: Vec<String>,
    pub bus_ids: Vec<BusId>,
    pub hours: Vec<HourRecord>,
    /// Kept out of the serialized bundle so identical runs give identical bytes.
    #[serde(skip)]
    pub timing: Timing,
}

impl CaseResult {
    /// Σ over microgrids of |transacted| per hour (kW).
    pub fn traded_per_hour(&self) -> Vec<f64> {
        self.hours
            .iter()
            .map(|h| h.transacted_kw.iter().map(|p| p.abs()).sum())
            .collect()
    }

    /// Σ over hours of |transacted| per microgrid (kW).
    pub fn traded_per_mg(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.mg_ids.len()];
        for h in &self.hours {
            for (o, p) in out.iter_mut().zip(&h.transacted_kw) {
                *o += p.abs();
            }
        }
        out
    }

    pub fn traded_total(&self) -> f64 {
        self.traded_per_mg().iter().sum()
    }

    pub fn payoff_per_mg(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.mg_ids.len()];
        for h in &self.hours {
            for (o, t) in out.iter_mut().zip(&h.payoff) {
                *o += t.total;
            }
        }
        out
    }

    pub fn payoff_total(&self) -> f64 {
        self.payoff_per_mg().iter().sum()
    }

    pub fn dopf_calls(&self) -> usize {
        self.hours.iter().map(|h| h.dopf_calls).sum()
    }

    pub fn dopf_calls_in_clearing(&self) -> usize {
        self.hours.iter().map(|h| h.dopf_calls_in_clearing).sum()
    }

    pub fn voltage_profiles(&self) -> Vec<Vec<f64>> {
        self.hours.iter().map(|h| h.voltages.clone()).collect()
    }

    /// Audit profiles where present, otherwise the recorded profiles.
    pub fn audit_profiles(&self) -> Vec<Vec<f64>> {
        self.hours
            .iter()
            .map(|h| h.audit_voltages.clone().unwrap_or_else(|| h.voltages.clone()))
            .collect()
    }

    /// Checks that every payoff decomposition adds up to its total.
    pub fn check_additivity(&self, tol: f64) -> Result<(), MetricsError> {
        for h in &self.hours {
            for (i, t) in h.payoff.iter().enumerate() {
                let residual = t.utility + t.revenue - t.gen_cost - t.degradation - t.total;
                if residual.abs() > tol {
                    return Err(MetricsError::Inconsistent {
                        mg: self.mg_ids[i].clone(),
                        hour: h.hour,
                        residual,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Elementwise ratio; hours where the reference is not positive are `None`.
pub fn acceptance_ratio(case: &[f64], case1: &[f64]) -> Result<Vec<Option<f64>>, MetricsError> {
    if case.len() != case1.len() {
        return Err(MetricsError::Misaligned(case.len(), case1.len()));
    }
    Ok(case
        .iter()
        .zip(case1)
        .map(|(c, r)| if *r > 0.0 { Some(c / r) } else { None })
        .collect())
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq)]
pub struct ViolationStats {
    /// Exceedance beyond the nearest band edge in percent of that edge;
    /// positive above the band, negative below, zero when compliant.
    pub max_deviation_pct: f64,
    pub violated_hours: usize,
}

pub fn voltage_violation(profiles: &[Vec<f64>], band: (f64, f64)) -> ViolationStats {
    let (lo, hi) = band;
    let mut worst: f64 = 0.0;
    let mut violated_hours = 0;
    for profile in profiles {
        let mut violated = false;
        for &v in profile {
            let dev = if v > hi {
                100.0 * (v - hi) / hi
            } else if v < lo {
                -100.0 * (lo - v) / lo
            } else {
                0.0
            };
            if dev != 0.0 {
                violated = true;
            }
            if dev.abs() > worst.abs() {
                worst = dev;
            }
        }
        violated_hours += violated as usize;
    }
    ViolationStats {
        max_deviation_pct: worst,
        violated_hours,
    }
}

/// One row of the average economic performance table.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PayoffRow {
    pub case: u8,
    pub mg: String,
    pub utility: f64,
    pub gen_cost: f64,
    pub traded_kw: f64,
    pub revenue: f64,
    pub degradation: f64,
    pub total: f64,
}

/// Per-case, per-microgrid averages over the horizon.
pub fn payoff_table(results: &[&CaseResult]) -> Vec<PayoffRow> {
    let mut rows = Vec::new();
    for r in results {
        let n = r.hours.len().max(1) as f64;
        for (i, mg) in r.mg_ids.iter().enumerate() {
            let mut row = PayoffRow {
                case: r.case,
                mg: mg.clone(),
                utility: 0.0,
                gen_cost: 0.0,
                traded_kw: 0.0,
                revenue: 0.0,
                degradation: 0.0,
                total: 0.0,
            };
            for h in &r.hours {
                let t = &h.payoff[i];
                row.utility += t.utility / n;
                row.gen_cost += t.gen_cost / n;
                row.revenue += t.revenue / n;
                row.degradation += t.degradation / n;
                row.total += t.total / n;
                row.traded_kw += h.transacted_kw[i].abs() / n;
            }
            rows.push(row);
        }
    }
    rows
}

pub fn payoff_table_csv(rows: &[PayoffRow]) -> String {
    let mut out = String::from("case,mg,utility_rs,gen_cost_rs,traded_kw,revenue_rs,degradation_rs,total_payoff_rs\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.case, r.mg, r.utility, r.gen_cost, r.traded_kw, r.revenue, r.degradation, r.total
        );
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ComparisonRow {
    pub case: u8,
    pub traded_kw: f64,
    pub payoff_rs: f64,
    pub max_voltage_deviation_pct: f64,
    pub violated_hours: usize,
    pub dopf_calls: usize,
    pub dopf_calls_in_clearing: usize,
    pub wall_time_s: f64,
    /// Traded power relative to the first result in the comparison.
    pub acceptance_vs_first: f64,
    pub annual_traded_kw: f64,
    pub annual_payoff_rs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// Annual figures scale the simulated horizon to 8760 hours.
    pub annualized_by_extrapolation: bool,
    pub per_mg_traded_kw: Vec<(u8, Vec<f64>)>,
    pub per_mg_payoff_rs: Vec<(u8, Vec<f64>)>,
    pub mg_ids: Vec<String>,
}

/// Side-by-side summary of results produced from one configuration. Voltage
/// statistics use the audit profiles where a case records them.
pub fn compare(results: &[&CaseResult]) -> Result<Comparison, MetricsError> {
    let first = results.first().ok_or_else(|| MetricsError::Empty("no results".into()))?;
    for r in results {
        if r.config_digest != first.config_digest {
            return Err(MetricsError::ConfigMismatch(first.config_digest.clone(), r.config_digest.clone()));
        }
        if r.hours.len() != first.hours.len() {
            return Err(MetricsError::Misaligned(r.hours.len(), first.hours.len()));
        }
    }
    let base = first.traded_total();
    let rows = results
        .iter()
        .map(|r| {
            let scale = HOURS_PER_YEAR / r.hours.len().max(1) as f64;
            let v = voltage_violation(&r.audit_profiles(), VOLTAGE_BAND);
            ComparisonRow {
                case: r.case,
                traded_kw: r.traded_total(),
                payoff_rs: r.payoff_total(),
                max_voltage_deviation_pct: v.max_deviation_pct,
                violated_hours: v.violated_hours,
                dopf_calls: r.dopf_calls(),
                dopf_calls_in_clearing: r.dopf_calls_in_clearing(),
                wall_time_s: r.timing.wall_time_s,
                acceptance_vs_first: if base > 0.0 { r.traded_total() / base } else { f64::NAN },
                annual_traded_kw: r.traded_total() * scale,
                annual_payoff_rs: r.payoff_total() * scale,
            }
        })
        .collect();
    Ok(Comparison {
        rows,
        annualized_by_extrapolation: first.hours.len() as f64 != HOURS_PER_YEAR,
        per_mg_traded_kw: results.iter().map(|r| (r.case, r.traded_per_mg())).collect(),
        per_mg_payoff_rs: results.iter().map(|r| (r.case, r.payoff_per_mg())).collect(),
        mg_ids: first.mg_ids.clone(),
    })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "case,total_p2p_traded_kw,acceptance_ratio,total_payoff_rs,max_voltage_deviation_pct,violated_hours,\
             dopf_calls,dopf_calls_in_clearing,wall_time_s,annual_traded_kw,annual_payoff_rs\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.4},{},{},{},{:.3},{:.3},{:.3}",
                r.case,
                r.traded_kw,
                r.acceptance_vs_first,
                r.payoff_rs,
                r.max_voltage_deviation_pct,
                r.violated_hours,
                r.dopf_calls,
                r.dopf_calls_in_clearing,
                r.wall_time_s,
                r.annual_traded_kw,
                r.annual_payoff_rs
            );
        }
        out
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<6}{:>14}{:>10}{:>16}{:>12}{:>10}{:>12}{:>12}\n",
            "case", "traded kW", "ratio", "payoff Rs", "max dV %", "viol. h", "OPF calls", "wall s"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<6}{:>14.3}{:>10.4}{:>16.3}{:>12.3}{:>10}{:>12}{:>12.3}",
                r.case,
                r.traded_kw,
                r.acceptance_vs_first,
                r.payoff_rs,
                r.max_voltage_deviation_pct,
                r.violated_hours,
                r.dopf_calls,
                r.wall_time_s
            );
        }
        if self.annualized_by_extrapolation {
            out.push_str("annual columns in the CSV are extrapolated from the simulated horizon\n");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acceptance_ratio_examples() {
        let a = [10.0, 20.0, 0.0];
        assert_eq!(acceptance_ratio(&a, &a).unwrap(), vec![Some(1.0), Some(1.0), None]);
        let half: Vec<f64> = a.iter().map(|v| v / 2.0).collect();
        assert_eq!(acceptance_ratio(&half, &a).unwrap()[..2], [Some(0.5), Some(0.5)]);
        let r = acceptance_ratio(&[392.49], &[700.89]).unwrap()[0].unwrap();
        assert!((r - 0.56).abs() < 0.005);
        assert!(acceptance_ratio(&[1.0], &[]).is_err());
    }

    #[test]
    fn violation_examples() {
        let nominal = vec![vec![1.0; 33]; 24];
        assert_eq!(voltage_violation(&nominal, VOLTAGE_BAND), ViolationStats::default());
        let one = vec![vec![1.1]];
        let s = voltage_violation(&one, VOLTAGE_BAND);
        assert!((s.max_deviation_pct - 100.0 * 0.05 / 1.05).abs() < 1e-12);
        assert!((s.max_deviation_pct - 4.76).abs() < 0.005);
        assert_eq!(s.violated_hours, 1);
        let low = voltage_violation(&[vec![0.94, 1.0], vec![1.0]], VOLTAGE_BAND);
        assert!(low.max_deviation_pct < 0.0 && low.violated_hours == 1);
    }

    #[test]
    fn widening_the_band_never_worsens() {
        let profiles = vec![vec![0.93, 1.0, 1.07], vec![1.051, 0.99], vec![1.0]];
        let mut prev = voltage_violation(&profiles, (0.95, 1.05));
        for w in 1..20 {
            let d = 0.005 * w as f64;
            let s = voltage_violation(&profiles, (0.95 - d, 1.05 + d));
            assert!(s.max_deviation_pct.abs() <= prev.max_deviation_pct.abs());
            assert!(s.violated_hours <= prev.violated_hours);
            prev = s;
        }
    }

    fn result(case: u8, traded: f64) -> CaseResult {
        let terms = PayoffTerms {
            utility: 5.0,
            gen_cost: 2.0,
            revenue: traded * 0.5,
            degradation: 0.1,
            total: 5.0 - 2.0 + traded * 0.5 - 0.1,
        };
        CaseResult {
            case,
            config_digest: "x".into(),
            mg_ids: vec!["MG1".into()],
            bus_ids: vec![1, 2],
            hours: (0..3)
                .map(|hour| HourRecord {
                    hour,
                    price: 0.5,
                    proposed_kw: vec![traded],
                    transacted_kw: vec![traded],
                    payoff: vec![terms],
                    voltages: vec![1.0, 1.0],
                    audit_voltages: None,
                    dopf_calls: case as usize,
                    dopf_calls_in_clearing: 0,
                    market_iterations: 3,
                    market_converged: true,
                    rounds: 1,
                    predictor_calls: 0,
                    imbalance_kw: 0.0,
                })
                .collect(),
            timing: Timing::default(),
        }
    }

    #[test]
    fn payoff_table_is_additive_and_zero_rows_are_zero() {
        let r = result(1, 10.0);
        r.check_additivity(1e-6).unwrap();
        let rows = payoff_table(&[&r]);
        let t = &rows[0];
        assert!((t.utility + t.revenue - t.gen_cost - t.degradation - t.total).abs() < 1e-9);
        assert_eq!(t.traded_kw, 10.0);

        let mut idle = result(2, 0.0);
        for h in &mut idle.hours {
            h.payoff = vec![PayoffTerms::default()];
        }
        let rows = payoff_table(&[&idle]);
        assert_eq!((rows[0].utility, rows[0].total, rows[0].traded_kw), (0.0, 0.0, 0.0));
    }

    #[test]
    fn identical_results_compare_equal() {
        let a = result(1, 10.0);
        let c = compare(&[&a, &a]).unwrap();
        assert_eq!(c.rows[0], c.rows[1]);
        assert_eq!(c.rows[1].acceptance_vs_first, 1.0);
        assert!(c.annualized_by_extrapolation);
        let mut b = result(2, 5.0);
        b.config_digest = "y".into();
        assert!(matches!(compare(&[&a, &b]), Err(MetricsError::ConfigMismatch(..))));
    }
}
