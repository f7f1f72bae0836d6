//! Operator-side optimal power flow: second-order-cone branch-flow model that
//! trades line losses against corrections of proposed P2P injections.
//!
//! Decision vector layout (all per-unit):
//!
//! ```text
//! [ v (buses) | P (lines) | Q (lines) | c (lines) | Pg (gens) | Qg (gens) | acc (P2P buses) ]
//! ```
//!
//! The equality and cone structure depends only on the topology and is built
//! once in [`DopfModel::new`]. Each solve only refreshes the objective and the
//! right-hand side (loads, proposals, bounds).

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::NetworkTopology;

#[derive(Debug, Error)]
pub enum DopfError {
    #[error("request has {got} entries, network has {expected} buses")]
    Dimension { expected: usize, got: usize },
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("conic solver failed: {0}")]
    Solver(String),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct DopfParams {
    /// Cost per kW of line losses.
    pub c_ls: f64,
    /// Penalty per kW² of correction.
    pub lambda_corr: f64,
    /// Conic feasibility / gap tolerance.
    pub solver_tol: f64,
    /// Restrict each accepted value to lie between zero and the proposal, so
    /// the operator can curtail a trade but never enlarge or reverse it.
    #[serde(default = "default_true")]
    pub curtail_only: bool,
}

fn default_true() -> bool {
    true
}

impl Default for DopfParams {
    fn default() -> Self {
        Self {
            c_ls: 1.0,
            lambda_corr: 0.01,
            solver_tol: 1e-8,
            curtail_only: true,
        }
    }
}

impl DopfParams {
    pub fn validate(&self) -> Result<(), DopfError> {
        if !(self.c_ls >= 0.0) {
            return Err(DopfError::Params("c_ls must be >= 0".into()));
        }
        if !(self.lambda_corr > 0.0) {
            return Err(DopfError::Params("lambda_corr must be > 0".into()));
        }
        if !(self.solver_tol > 0.0) {
            return Err(DopfError::Params("solver_tol must be > 0".into()));
        }
        Ok(())
    }
}

/// Proposed injections and loads, per bus position, in kW / kVAr.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InjectionRequest {
    pub p_net: Vec<f64>,
    pub p_load: Vec<f64>,
    pub q_load: Vec<f64>,
}

impl InjectionRequest {
    /// Base-case loads of the topology and no proposals.
    pub fn base_case(topo: &NetworkTopology) -> Self {
        Self {
            p_net: vec![0.0; topo.n_buses()],
            p_load: topo.buses.iter().map(|b| b.p_load_base).collect(),
            q_load: topo.buses.iter().map(|b| b.q_load_base).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum DopfStatus {
    Optimal,
    Infeasible,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LineFlow {
    pub p: f64,
    pub q: f64,
    pub c: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DopfSolution {
    pub status: DopfStatus,
    /// Accepted injection per bus position (kW).
    pub p_acc: Vec<f64>,
    /// Squared voltage per bus position (p.u.²).
    pub v: Vec<f64>,
    /// Per-line sending-end flows (p.u.).
    pub flows: Vec<LineFlow>,
    /// Per-generator (P, Q) in MW / MVAr, in topology order.
    pub gen: Vec<(f64, f64)>,
    /// Σ r c in kW.
    pub losses_kw: f64,
    /// Objective value in Rs.
    pub objective: f64,
    /// Per-line c − (P² + Q²)/v_from.
    pub exactness_residuals: Vec<f64>,
    pub iterations: u32,
    pub solve_time_s: f64,
}

impl DopfSolution {
    pub fn voltage_magnitudes(&self) -> Vec<f64> {
        self.v.iter().map(|v| v.sqrt()).collect()
    }

    pub fn max_exactness_residual(&self) -> f64 {
        self.exactness_residuals.iter().fold(0.0, |m, r| m.max(r.abs()))
    }
}

// ---------------------------------------------------------------------------
// conic backend

/// Cone blocks in the order they appear in the constraint rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cone {
    Zero(usize),
    Nonnegative(usize),
    SecondOrder(usize),
}

/// `min ½ xᵀPx + qᵀx  s.t.  Ax + s = b,  s ∈ K`.
///
/// `p` holds upper-triangular triplets; `a` holds triplets.
#[derive(Debug, Clone)]
pub struct ConicProblem {
    pub n: usize,
    pub p: Vec<(usize, usize, f64)>,
    pub q: Vec<f64>,
    pub a: Vec<(usize, usize, f64)>,
    pub b: Vec<f64>,
    pub cones: Vec<Cone>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConicStatus {
    Solved,
    PrimalInfeasible,
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub status: ConicStatus,
    pub x: Vec<f64>,
    pub iterations: u32,
}

pub trait ConicBackend: Send + Sync {
    fn solve(&self, problem: &ConicProblem, tol: f64) -> Result<ConicSolution, DopfError>;
}

/// Interior-point backend built on Clarabel.
#[derive(Debug, Default, Clone, Copy)]
pub struct ClarabelBackend;

fn csc(m: usize, n: usize, trip: &[(usize, usize, f64)]) -> CscMatrix<f64> {
    let (mut i, mut j, mut v) = (Vec::new(), Vec::new(), Vec::new());
    for &(r, c, x) in trip {
        i.push(r);
        j.push(c);
        v.push(x);
    }
    CscMatrix::new_from_triplets(m, n, i, j, v)
}

impl ConicBackend for ClarabelBackend {
    fn solve(&self, pb: &ConicProblem, tol: f64) -> Result<ConicSolution, DopfError> {
        let m = pb.b.len();
        let p = csc(pb.n, pb.n, &pb.p);
        let a = csc(m, pb.n, &pb.a);
        let cones: Vec<SupportedConeT<f64>> = pb
            .cones
            .iter()
            .map(|c| match *c {
                Cone::Zero(k) => SupportedConeT::ZeroConeT(k),
                Cone::Nonnegative(k) => SupportedConeT::NonnegativeConeT(k),
                Cone::SecondOrder(k) => SupportedConeT::SecondOrderConeT(k),
            })
            .collect();
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(200)
            .tol_feas(tol)
            .tol_gap_abs(tol)
            .tol_gap_rel(tol)
            .build()
            .map_err(|e| DopfError::Solver(format!("settings: {e:?}")))?;
        let mut solver = DefaultSolver::new(&p, &pb.q, &a, &pb.b, &cones, settings)
            .map_err(|e| DopfError::Solver(format!("{e:?}")))?;
        solver.solve();
        let sol = &solver.solution;
        let status = match sol.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => ConicStatus::Solved,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                ConicStatus::PrimalInfeasible
            }
            other => return Err(DopfError::Solver(format!("{other:?}"))),
        };
        Ok(ConicSolution {
            status,
            x: sol.x.clone(),
            iterations: sol.iterations,
        })
    }
}

// ---------------------------------------------------------------------------
// model

/// Column offsets of each variable block.
#[derive(Debug, Clone)]
struct Layout {
    v: usize,
    p: usize,
    q: usize,
    c: usize,
    pg: usize,
    qg: usize,
    acc: usize,
    n: usize,
}

/// The D-OPF for one topology. Cheap to clone and shareable across threads.
#[derive(Clone)]
pub struct DopfModel<B: ConicBackend = ClarabelBackend> {
    topo: NetworkTopology,
    backend: B,
    layout: Layout,
    /// Bus positions that carry an accepted-injection variable.
    acc_buses: Vec<usize>,
    /// Constant rows: equalities then cones; bound rows are appended per call.
    eq_rows: Vec<(usize, usize, f64)>,
    n_eq: usize,
    soc_rows: Vec<(usize, usize, f64)>,
    n_soc: usize,
    /// Solve counter, shared between clones.
    solves: Arc<AtomicUsize>,
}

impl DopfModel<ClarabelBackend> {
    pub fn new(topo: &NetworkTopology) -> Self {
        Self::with_backend(topo, ClarabelBackend)
    }
}

impl<B: ConicBackend> DopfModel<B> {
    pub fn with_backend(topo: &NetworkTopology, backend: B) -> Self {
        let nb = topo.n_buses();
        let nl = topo.n_lines();
        let ng = topo.generators.len();
        let acc_buses: Vec<usize> = (0..nb).filter(|&i| topo.buses[i].p2p_cap > 0.0).collect();
        let na = acc_buses.len();
        let layout = Layout {
            v: 0,
            p: nb,
            q: nb + nl,
            c: nb + 2 * nl,
            pg: nb + 3 * nl,
            qg: nb + 3 * nl + ng,
            acc: nb + 3 * nl + 2 * ng,
            n: nb + 3 * nl + 2 * ng + na,
        };

        let mut eq = Vec::new();
        let mut row = 0;
        // nodal active and reactive balance
        for bus in 0..nb {
            let (rp, rq) = (row, row + 1);
            if let Some(pl) = topo.parent_of_pos(bus) {
                let l = &topo.lines[pl];
                eq.push((rp, layout.p + pl, 1.0));
                eq.push((rp, layout.c + pl, -l.r));
                eq.push((rq, layout.q + pl, 1.0));
                eq.push((rq, layout.c + pl, -l.x));
            }
            for &cl in topo.children_of_pos(bus) {
                eq.push((rp, layout.p + cl, -1.0));
                eq.push((rq, layout.q + cl, -1.0));
            }
            for (g, gen) in topo.generators.iter().enumerate() {
                if topo.bus_index(gen.bus).ok() == Some(bus) {
                    eq.push((rp, layout.pg + g, 1.0));
                    eq.push((rq, layout.qg + g, 1.0));
                }
            }
            if let Some(k) = acc_buses.iter().position(|&b| b == bus) {
                eq.push((rp, layout.acc + k, 1.0));
            }
            row += 2;
        }
        // voltage drop along each line
        for (li, l) in topo.lines.iter().enumerate() {
            let (from, to) = topo.line_ends(li);
            eq.push((row, layout.v + from, 1.0));
            eq.push((row, layout.v + to, -1.0));
            eq.push((row, layout.p + li, -2.0 * l.r));
            eq.push((row, layout.q + li, -2.0 * l.x));
            eq.push((row, layout.c + li, l.r * l.r + l.x * l.x));
            row += 1;
        }
        let n_eq = row;

        // ‖(2P, 2Q, v_from − c)‖ ≤ v_from + c, written as s = −A x ∈ SOC(4)
        let mut soc = Vec::new();
        for li in 0..nl {
            let (from, _) = topo.line_ends(li);
            let base = 4 * li;
            soc.push((base, layout.v + from, -1.0));
            soc.push((base, layout.c + li, -1.0));
            soc.push((base + 1, layout.p + li, -2.0));
            soc.push((base + 2, layout.q + li, -2.0));
            soc.push((base + 3, layout.v + from, -1.0));
            soc.push((base + 3, layout.c + li, 1.0));
        }

        Self {
            topo: topo.clone(),
            backend,
            layout,
            acc_buses,
            eq_rows: eq,
            n_eq,
            soc_rows: soc,
            n_soc: 4 * nl,
            solves: Arc::new(AtomicUsize::new(0)),
        }
    }

    /// Number of [`Self::solve`] calls made through this model or its clones.
    pub fn solve_count(&self) -> usize {
        self.solves.load(Ordering::Relaxed)
    }

    pub fn topology(&self) -> &NetworkTopology {
        &self.topo
    }

    /// Bus positions with a P2P variable (non-zero `p2p_cap`).
    pub fn p2p_buses(&self) -> &[usize] {
        &self.acc_buses
    }

    /// Accepted-injection bounds (kW) for one P2P bus.
    fn acc_bounds(&self, bus: usize, p_net_kw: f64, params: &DopfParams) -> (f64, f64) {
        let cap = self.topo.buses[bus].p2p_cap;
        if params.curtail_only {
            let (lo, hi) = if p_net_kw >= 0.0 { (0.0, p_net_kw) } else { (p_net_kw, 0.0) };
            (lo.max(-cap), hi.min(cap))
        } else {
            (-cap, cap)
        }
    }

    pub fn build_problem(
        &self,
        req: &InjectionRequest,
        params: &DopfParams,
    ) -> Result<ConicProblem, DopfError> {
        self.build(req, params, false)
    }

    /// With `pinned`, every accepted injection is fixed to its proposal (up to
    /// a solver_tol-wide slab) and enters the balance as a constant.
    fn build(&self, req: &InjectionRequest, params: &DopfParams, pinned: bool) -> Result<ConicProblem, DopfError> {
        params.validate()?;
        let t = &self.topo;
        let nb = t.n_buses();
        for len in [req.p_net.len(), req.p_load.len(), req.q_load.len()] {
            if len != nb {
                return Err(DopfError::Dimension { expected: nb, got: len });
            }
        }
        let k = t.s_base * 1000.0;
        let lay = &self.layout;
        let nl = t.n_lines();

        // Objective divided by λ K² for conditioning:
        //   Σ (acc − pn)² + (c_ls / (λ K)) Σ r c
        let mut p = Vec::new();
        let mut q = vec![0.0; lay.n];
        let loss_w = params.c_ls / (params.lambda_corr * k);
        for (li, l) in t.lines.iter().enumerate() {
            q[lay.c + li] = loss_w * l.r;
        }
        for (kk, &bus) in self.acc_buses.iter().enumerate() {
            let col = lay.acc + kk;
            p.push((col, col, 2.0));
            q[col] = -2.0 * req.p_net[bus] / k;
        }

        let mut a = self.eq_rows.clone();
        let mut b = vec![0.0; self.n_eq];
        for bus in 0..nb {
            b[2 * bus] = req.p_load[bus] / k;
            b[2 * bus + 1] = req.q_load[bus] / k;
        }
        if pinned {
            for &bus in &self.acc_buses {
                b[2 * bus] -= req.p_net[bus] / k;
            }
        }

        // bounds as x ≤ hi and −x ≤ −lo
        let mut bound_rows: Vec<(usize, f64, f64)> = Vec::new();
        for bus in 0..nb {
            let bs = &t.buses[bus];
            bound_rows.push((lay.v + bus, bs.v_min, bs.v_max));
        }
        for li in 0..nl {
            bound_rows.push((lay.c + li, 0.0, t.lines[li].c_max));
        }
        for (g, gen) in t.generators.iter().enumerate() {
            bound_rows.push((lay.pg + g, gen.p_min / t.s_base, gen.p_max / t.s_base));
            bound_rows.push((lay.qg + g, gen.q_min / t.s_base, gen.q_max / t.s_base));
        }
        for (kk, &bus) in self.acc_buses.iter().enumerate() {
            if pinned {
                bound_rows.push((lay.acc + kk, -params.solver_tol, params.solver_tol));
            } else {
                let (lo, hi) = self.acc_bounds(bus, req.p_net[bus], params);
                bound_rows.push((lay.acc + kk, lo / k, hi / k));
            }
        }
        let mut row = self.n_eq;
        for &(col, lo, hi) in &bound_rows {
            a.push((row, col, 1.0));
            b.push(hi);
            a.push((row + 1, col, -1.0));
            b.push(-lo);
            row += 2;
        }
        let n_bounds = 2 * bound_rows.len();
        for &(r, c, v) in &self.soc_rows {
            a.push((row + r, c, v));
        }
        b.extend(std::iter::repeat(0.0).take(self.n_soc));

        let mut cones = vec![Cone::Zero(self.n_eq), Cone::Nonnegative(n_bounds)];
        cones.extend(std::iter::repeat(Cone::SecondOrder(4)).take(nl));
        Ok(ConicProblem { n: lay.n, p, q, a, b, cones })
    }

    pub fn solve(&self, req: &InjectionRequest, params: &DopfParams) -> Result<DopfSolution, DopfError> {
        let problem = self.build_problem(req, params)?;
        self.solves.fetch_add(1, Ordering::Relaxed);
        let started = Instant::now();
        // without a loss price the map is a projection, so a proposal the
        // network can carry as is comes back unchanged
        let mut iterations = 0;
        if params.c_ls == 0.0 && self.within_caps(req) {
            let pinned = self.build(req, params, true)?;
            if let Ok(sol) = self.backend.solve(&pinned, params.solver_tol) {
                if sol.status == ConicStatus::Solved {
                    return Ok(self.extract(req, params, &sol.x, true, sol.iterations, started));
                }
                iterations = sol.iterations;
            }
        }
        let sol = self.backend.solve(&problem, params.solver_tol)?;
        let iterations = iterations + sol.iterations;
        if sol.status == ConicStatus::PrimalInfeasible {
            let nb = self.topo.n_buses();
            return Ok(DopfSolution {
                status: DopfStatus::Infeasible,
                p_acc: vec![0.0; nb],
                v: vec![f64::NAN; nb],
                flows: Vec::new(),
                gen: Vec::new(),
                losses_kw: f64::NAN,
                objective: f64::NAN,
                exactness_residuals: Vec::new(),
                iterations,
                solve_time_s: started.elapsed().as_secs_f64(),
            });
        }
        Ok(self.extract(req, params, &sol.x, false, iterations, started))
    }

    fn within_caps(&self, req: &InjectionRequest) -> bool {
        req.p_net.iter().enumerate().all(|(bus, &p)| {
            let cap = if self.acc_buses.contains(&bus) { self.topo.buses[bus].p2p_cap } else { 0.0 };
            p.abs() <= cap
        })
    }

    fn extract(
        &self,
        req: &InjectionRequest,
        params: &DopfParams,
        x: &[f64],
        pinned: bool,
        iterations: u32,
        started: Instant,
    ) -> DopfSolution {
        let t = &self.topo;
        let (nb, nl) = (t.n_buses(), t.n_lines());
        let lay = &self.layout;
        let k = t.s_base * 1000.0;

        let v: Vec<f64> = x[lay.v..lay.v + nb].to_vec();
        let flows: Vec<LineFlow> = (0..nl)
            .map(|li| LineFlow {
                p: x[lay.p + li],
                q: x[lay.q + li],
                c: x[lay.c + li],
            })
            .collect();
        let mut p_acc = vec![0.0; nb];
        for (kk, &bus) in self.acc_buses.iter().enumerate() {
            p_acc[bus] = if pinned { req.p_net[bus] } else { x[lay.acc + kk] * k };
        }
        let gen = (0..t.generators.len())
            .map(|g| (x[lay.pg + g] * t.s_base, x[lay.qg + g] * t.s_base))
            .collect();
        let losses_kw: f64 = t.lines.iter().zip(&flows).map(|(l, f)| l.r * f.c).sum::<f64>() * k;
        let correction: f64 = (0..nb).map(|i| (p_acc[i] - req.p_net[i]).powi(2)).sum();
        let exactness_residuals = (0..nl)
            .map(|li| {
                let (from, _) = t.line_ends(li);
                let f = &flows[li];
                f.c - (f.p * f.p + f.q * f.q) / v[from]
            })
            .collect();
        DopfSolution {
            status: DopfStatus::Optimal,
            p_acc,
            v,
            flows,
            gen,
            losses_kw,
            objective: params.c_ls * losses_kw + params.lambda_corr * correction,
            exactness_residuals,
            iterations,
            solve_time_s: started.elapsed().as_secs_f64(),
        }
    }

    /// Accepted injections for a proposal: the `p_acc` field of [`Self::solve`].
    pub fn project(
        &self,
        p_net: &[f64],
        p_load: &[f64],
        q_load: &[f64],
        params: &DopfParams,
    ) -> Result<Vec<f64>, DopfError> {
        let req = InjectionRequest {
            p_net: p_net.to_vec(),
            p_load: p_load.to_vec(),
            q_load: q_load.to_vec(),
        };
        let sol = self.solve(&req, params)?;
        match sol.status {
            DopfStatus::Optimal => Ok(sol.p_acc),
            DopfStatus::Infeasible => Err(DopfError::Solver("projection onto an empty feasible set".into())),
        }
    }
}

/// Per-line tightness of the cone relaxation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExactnessReport {
    pub exact: bool,
    pub max_residual: f64,
    /// Line positions whose residual exceeds the tolerance.
    pub flagged: Vec<usize>,
}

pub fn check_exactness(solution: &DopfSolution, tol: f64) -> ExactnessReport {
    let flagged: Vec<usize> = solution
        .exactness_residuals
        .iter()
        .enumerate()
        .filter(|(_, r)| **r > tol)
        .map(|(i, _)| i)
        .collect();
    ExactnessReport {
        exact: flagged.is_empty() && solution.status == DopfStatus::Optimal,
        max_residual: solution.max_exactness_residual(),
        flagged,
    }
}

/// Nodal balance residuals (p.u.) of a solution against its request.
pub fn balance_residuals(
    topo: &NetworkTopology,
    req: &InjectionRequest,
    sol: &DopfSolution,
) -> Vec<(f64, f64)> {
    let k = topo.s_base * 1000.0;
    (0..topo.n_buses())
        .map(|bus| {
            let (mut p, mut q) = (
                sol.p_acc[bus] / k - req.p_load[bus] / k,
                -req.q_load[bus] / k,
            );
            if let Some(pl) = topo.parent_of_pos(bus) {
                let (l, f) = (&topo.lines[pl], &sol.flows[pl]);
                p += f.p - l.r * f.c;
                q += f.q - l.x * f.c;
            }
            for &cl in topo.children_of_pos(bus) {
                p -= sol.flows[cl].p;
                q -= sol.flows[cl].q;
            }
            for (g, gen) in topo.generators.iter().enumerate() {
                if topo.bus_index(gen.bus).ok() == Some(bus) {
                    p += sol.gen[g].0 / topo.s_base;
                    q += sol.gen[g].1 / topo.s_base;
                }
            }
            (p, q)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{parse_network, CaseFormat};

    fn two_bus(load_kw: f64) -> NetworkTopology {
        let text = format!(
            "[meta]\ns_base_mva 1\nv_base_kv 12.66\nslack_bus 1\n\
             [buses]\ncolumns id p_load q_load v_min v_max p2p_cap\nunits - kW kVAr pu pu kW\n\
             1 0 0 0.95 1.05 0\n2 {load_kw} 0 0.95 1.05 20000\n\
             [lines]\ncolumns id from to r x i_max\nunits - - - pu pu pu\n1 1 2 0.01 0.01 100\n\
             [generators]\ncolumns bus p_min p_max q_min q_max\nunits - MW MW MVAr MVAr\n1 0 100 -100 100\n"
        );
        parse_network(&text, CaseFormat::Tabular).unwrap()
    }

    #[test]
    fn unloaded_feeder_is_trivial() {
        let t = two_bus(0.0);
        let m = DopfModel::new(&t);
        let req = InjectionRequest::base_case(&t);
        let sol = m.solve(&req, &DopfParams::default()).unwrap();
        assert_eq!(sol.status, DopfStatus::Optimal);
        assert!(sol.p_acc.iter().all(|p| p.abs() < 1e-6));
        assert!(sol.losses_kw.abs() < 1e-6);
        assert!(sol.objective.abs() < 1e-6);
        let rep = check_exactness(&sol, 1e-6);
        assert!(rep.exact);
    }

    #[test]
    fn perturbed_current_is_flagged() {
        let t = two_bus(500.0);
        let m = DopfModel::new(&t);
        let mut sol = m.solve(&InjectionRequest::base_case(&t), &DopfParams::default()).unwrap();
        assert!(check_exactness(&sol, 1e-6).exact);
        sol.exactness_residuals[0] += 0.01;
        let rep = check_exactness(&sol, 1e-6);
        assert!(!rep.exact);
        assert_eq!(rep.flagged, vec![0]);
    }

    #[test]
    fn rejects_bad_params_and_dimensions() {
        let t = two_bus(0.0);
        let m = DopfModel::new(&t);
        let mut req = InjectionRequest::base_case(&t);
        let bad = DopfParams { lambda_corr: 0.0, ..Default::default() };
        assert!(matches!(m.solve(&req, &bad), Err(DopfError::Params(_))));
        req.p_net.pop();
        assert!(matches!(
            m.solve(&req, &DopfParams::default()),
            Err(DopfError::Dimension { .. })
        ));
    }

    #[test]
    fn impossible_load_is_certified_infeasible() {
        // 200 MW cannot be carried within the voltage band.
        let t = two_bus(200_000.0);
        let m = DopfModel::new(&t);
        let sol = m.solve(&InjectionRequest::base_case(&t), &DopfParams::default()).unwrap();
        assert_eq!(sol.status, DopfStatus::Infeasible);
    }
}
