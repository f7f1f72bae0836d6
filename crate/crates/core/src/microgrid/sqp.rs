//! Sequential quadratic programming over a box intersected with one slab
//! `s_lo ≤ aᵀx ≤ s_hi`.
//!
//! Each subproblem uses a diagonal curvature plus a rank-one term along `a`,
//! `H = diag(h) + w aaᵀ`, which is exactly the structure of a microgrid's
//! dispatch problem: separable device costs coupled only through the net
//! injection. Such a subproblem is solved exactly by a monotone scalar search
//! on the multiplier of `s = aᵀd`.

/// Smooth objective to minimize, evaluated at a point.
pub struct Model {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Diagonal curvature (clamped below by the solver).
    pub hess_diag: Vec<f64>,
    /// Weight of the rank-one curvature term along `a`.
    pub rank_one: f64,
}

#[derive(Debug, Clone)]
pub struct Feasible<'a> {
    pub lo: &'a [f64],
    pub hi: &'a [f64],
    pub a: &'a [f64],
    pub s_lo: f64,
    pub s_hi: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SqpOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub min_curvature: f64,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 200,
            min_curvature: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SqpOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    /// ‖x − Proj(x − ∇f)‖∞ at the returned point.
    pub stationarity: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SqpError {
    EmptyFeasibleSet,
    NonFinite,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `argmin gᵀd + ½ Σ h_j d_j² + ½ w (aᵀd)²` over `x + d` feasible.
pub fn solve_subproblem(
    x: &[f64],
    g: &[f64],
    h: &[f64],
    w: f64,
    set: &Feasible<'_>,
) -> Result<Vec<f64>, SqpError> {
    let n = x.len();
    let dlo: Vec<f64> = (0..n).map(|j| set.lo[j] - x[j]).collect();
    let dhi: Vec<f64> = (0..n).map(|j| set.hi[j] - x[j]).collect();
    let ax = dot(set.a, x);
    let (sl, su) = (set.s_lo - ax, set.s_hi - ax);

    let d_of = |nu: f64| -> Vec<f64> {
        (0..n)
            .map(|j| (-(g[j] + nu * set.a[j]) / h[j]).clamp(dlo[j], dhi[j]))
            .collect()
    };
    let psi = |nu: f64| dot(set.a, &d_of(nu));

    // range of aᵀd over the box
    let (mut pmin, mut pmax) = (0.0, 0.0);
    for j in 0..n {
        let (u, v) = (set.a[j] * dlo[j], set.a[j] * dhi[j]);
        pmin += u.min(v);
        pmax += u.max(v);
    }
    let slack = 1e-9 * (1.0 + sl.abs().max(su.abs()));
    if pmax < sl - slack || pmin > su + slack || sl > su + slack {
        return Err(SqpError::EmptyFeasibleSet);
    }

    // ν large enough that every coordinate sits at its a-minimizing bound
    let mut big = 1.0 + w * (pmin.abs() + pmax.abs());
    for j in 0..n {
        if set.a[j] != 0.0 {
            let reach = g[j].abs() + h[j] * (dlo[j].abs() + dhi[j].abs());
            big = big.max(reach / set.a[j].abs());
        }
    }
    big *= 2.0;

    let bisect = |mut lo: f64, mut hi: f64, f: &dyn Fn(f64) -> f64| -> f64 {
        // f non-decreasing, f(lo) ≤ 0 ≤ f(hi)
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    };

    let nu0 = bisect(-big, big, &|nu| nu - w * psi(nu));
    let s0 = psi(nu0);
    let nu = if s0 > su {
        bisect(nu0, big, &|nu| su - psi(nu))
    } else if s0 < sl {
        bisect(-big, nu0, &|nu| sl - psi(nu))
    } else {
        nu0
    };
    let d = d_of(nu);
    if d.iter().any(|v| !v.is_finite()) {
        return Err(SqpError::NonFinite);
    }
    Ok(d)
}

/// Euclidean projection step `Proj(x − grad) − x`.
pub fn projected_step(x: &[f64], grad: &[f64], set: &Feasible<'_>) -> Result<Vec<f64>, SqpError> {
    let ones = vec![1.0; x.len()];
    solve_subproblem(x, grad, &ones, 0.0, set)
}

pub fn minimize<F>(x0: &[f64], set: &Feasible<'_>, opts: SqpOptions, mut eval: F) -> Result<SqpOutcome, SqpError>
where
    F: FnMut(&[f64], bool) -> Model,
{
    let n = x0.len();
    // feasible starting point
    let zero = vec![0.0; n];
    let shift = projected_step(x0, &zero, set)?;
    let mut x: Vec<f64> = x0.iter().zip(&shift).map(|(a, b)| a + b).collect();
    let mut m = eval(&x, true);

    for it in 0..opts.max_iter {
        if !m.value.is_finite() || m.grad.iter().any(|g| !g.is_finite()) {
            return Err(SqpError::NonFinite);
        }
        let proj = projected_step(&x, &m.grad, set)?;
        let stationarity = proj.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if stationarity <= opts.tol {
            return Ok(SqpOutcome {
                x,
                value: m.value,
                iterations: it,
                stationarity,
                converged: true,
            });
        }
        let h: Vec<f64> = m.hess_diag.iter().map(|v| v.max(opts.min_curvature)).collect();
        let mut d = solve_subproblem(&x, &m.grad, &h, m.rank_one.max(0.0), set)?;
        let mut slope = dot(&m.grad, &d);
        if slope >= 0.0 {
            // model lost descent; fall back to the projected-gradient step
            d = proj;
            slope = dot(&m.grad, &d);
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            let mt = eval(&trial, false);
            if mt.value.is_finite() && mt.value <= m.value + 1e-4 * t * slope {
                accepted = Some(trial);
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some(trial) => {
                x = trial;
                m = eval(&x, true);
            }
            None => {
                return Ok(SqpOutcome {
                    x,
                    value: m.value,
                    iterations: it,
                    stationarity,
                    converged: stationarity <= opts.tol,
                });
            }
        }
    }
    let proj = projected_step(&x, &m.grad, set)?;
    let stationarity = proj.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    Ok(SqpOutcome {
        x,
        value: m.value,
        iterations: opts.max_iter,
        stationarity,
        converged: stationarity <= opts.tol,
    })
}
