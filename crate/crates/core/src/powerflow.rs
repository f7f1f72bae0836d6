//! Exact branch-flow power flow on a radial feeder by forward/backward sweep.
//!
//! Works in per-unit with squared voltages `v` and squared currents `c`, the
//! same variables as the conic OPF, but enforces `c = (P² + Q²) / v_from`
//! with equality. It is the reference the relaxation is checked against.

use thiserror::Error;

use crate::network::NetworkTopology;

#[derive(Debug, Error)]
pub enum PowerFlowError {
    #[error("injection vectors have length {got}, network has {expected} buses")]
    Dimension { expected: usize, got: usize },
    #[error("voltage collapse at bus position {bus} in iteration {iteration}")]
    Collapse { bus: usize, iteration: usize },
    #[error("sweep did not converge in {0} iterations")]
    NoConvergence(usize),
}

#[derive(Debug, Clone)]
pub struct PowerFlowResult {
    /// Squared voltage per bus position (p.u.²).
    pub v: Vec<f64>,
    /// Sending-end active flow per line (p.u.).
    pub p_line: Vec<f64>,
    pub q_line: Vec<f64>,
    /// Squared current per line (p.u.²).
    pub c_line: Vec<f64>,
    /// Active power drawn from the slack bus (p.u.).
    pub slack_p: f64,
    pub slack_q: f64,
    /// Total active losses (p.u.).
    pub losses: f64,
    pub iterations: usize,
}

impl PowerFlowResult {
    /// Voltage magnitudes (p.u.).
    pub fn magnitudes(&self) -> Vec<f64> {
        self.v.iter().map(|v| v.sqrt()).collect()
    }
}

/// Solves the branch-flow equations for a fixed slack voltage.
///
/// `p_inj`/`q_inj` are net injections (generation minus load) per bus
/// position in p.u.; the slack entry is ignored since the slack balances.
pub fn sweep(
    topo: &NetworkTopology,
    v_slack: f64,
    p_inj: &[f64],
    q_inj: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<PowerFlowResult, PowerFlowError> {
    let nb = topo.n_buses();
    for len in [p_inj.len(), q_inj.len()] {
        if len != nb {
            return Err(PowerFlowError::Dimension { expected: nb, got: len });
        }
    }
    let nl = topo.n_lines();
    let order = topo.bfs_order();
    let root = topo.slack_index();

    let mut v = vec![v_slack; nb];
    let mut p_line = vec![0.0; nl];
    let mut q_line = vec![0.0; nl];
    let mut c_line = vec![0.0; nl];

    for iteration in 1..=max_iter {
        // backward: accumulate downstream demand plus losses
        for &bus in order.iter().rev() {
            let Some(line) = topo.parent_of_pos(bus) else { continue };
            let (mut p, mut q) = (-p_inj[bus], -q_inj[bus]);
            for &child in topo.children_of_pos(bus) {
                p += p_line[child];
                q += q_line[child];
            }
            let l = &topo.lines[line];
            p_line[line] = p + l.r * c_line[line];
            q_line[line] = q + l.x * c_line[line];
        }
        // forward: voltage drops and currents from updated flows
        let mut delta: f64 = 0.0;
        for &bus in order {
            let Some(line) = topo.parent_of_pos(bus) else { continue };
            let (from, _) = topo.line_ends(line);
            let l = &topo.lines[line];
            let vf = v[from];
            let c = (p_line[line].powi(2) + q_line[line].powi(2)) / vf;
            let vt = vf - 2.0 * (l.r * p_line[line] + l.x * q_line[line]) + (l.r * l.r + l.x * l.x) * c;
            if !(vt > 0.0) || !vt.is_finite() {
                return Err(PowerFlowError::Collapse { bus, iteration });
            }
            delta = delta.max((vt - v[bus]).abs()).max((c - c_line[line]).abs());
            v[bus] = vt;
            c_line[line] = c;
        }
        if delta < tol {
            let (mut slack_p, mut slack_q) = (-p_inj[root], -q_inj[root]);
            for &child in topo.children_of_pos(root) {
                slack_p += p_line[child];
                slack_q += q_line[child];
            }
            let losses = topo
                .lines
                .iter()
                .zip(&c_line)
                .map(|(l, c)| l.r * c)
                .sum();
            return Ok(PowerFlowResult {
                v,
                p_line,
                q_line,
                c_line,
                slack_p,
                slack_q,
                losses,
                iterations: iteration,
            });
        }
    }
    Err(PowerFlowError::NoConvergence(max_iter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{parse_network, CaseFormat};

    fn two_bus() -> NetworkTopology {
        parse_network(
            "[meta]\ns_base_mva 1\nv_base_kv 1\nslack_bus 1\n\
             [buses]\ncolumns id p_load q_load v_min v_max\nunits - kW kVAr pu pu\n1 0 0 0.9 1.1\n2 0 0 0.9 1.1\n\
             [lines]\ncolumns id from to r x i_max\nunits - - - pu pu pu\n1 1 2 0.01 0.02 10\n\
             [generators]\ncolumns bus p_min p_max q_min q_max\nunits - MW MW MVAr MVAr\n1 0 10 -10 10\n",
            CaseFormat::Tabular,
        )
        .unwrap()
    }

    #[test]
    fn unloaded_feeder_is_flat() {
        let t = two_bus();
        let r = sweep(&t, 1.0, &[0.0, 0.0], &[0.0, 0.0], 1e-12, 100).unwrap();
        assert_eq!(r.v, vec![1.0, 1.0]);
        assert_eq!(r.losses, 0.0);
    }

    #[test]
    fn two_bus_matches_closed_form() {
        // Receiving-end load S = P + jQ at bus 2, V1 = 1.
        let t = two_bus();
        let (p, q) = (0.5, 0.2);
        let r = sweep(&t, 1.0, &[0.0, -p], &[0.0, -q], 1e-14, 200).unwrap();
        let (rl, xl) = (0.01, 0.02);
        // Exact relations of the branch-flow model.
        let c = (r.p_line[0].powi(2) + r.q_line[0].powi(2)) / 1.0;
        assert!((r.p_line[0] - (p + rl * c)).abs() < 1e-12);
        assert!((r.q_line[0] - (q + xl * c)).abs() < 1e-12);
        let v2 = 1.0 - 2.0 * (rl * r.p_line[0] + xl * r.q_line[0]) + (rl * rl + xl * xl) * c;
        assert!((r.v[1] - v2).abs() < 1e-12);
        // Cross-check with the receiving-end quartic: V2^4 + (2(rP+xQ) - V1^2) V2^2 + |z|^2 |S|^2 = 0.
        let b = 2.0 * (rl * p + xl * q) - 1.0;
        let cc = (rl * rl + xl * xl) * (p * p + q * q);
        let v2sq = (-b + (b * b - 4.0 * cc).sqrt()) / 2.0;
        assert!((r.v[1] - v2sq).abs() < 1e-10, "{} vs {}", r.v[1], v2sq);
    }

    #[test]
    fn heavy_load_collapses() {
        let t = two_bus();
        let res = sweep(&t, 1.0, &[0.0, -40.0], &[0.0, -20.0], 1e-12, 500);
        assert!(res.is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let t = two_bus();
        assert!(matches!(
            sweep(&t, 1.0, &[0.0], &[0.0, 0.0], 1e-12, 10),
            Err(PowerFlowError::Dimension { .. })
        ));
    }
}
