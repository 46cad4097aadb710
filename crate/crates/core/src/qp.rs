//! Dense strictly convex quadratic programming by a primal active-set
//! method.
//!
//! Solves `min 1/2 z' H z + g' z` subject to `A z <= b` with `H` positive
//! definite, starting from a feasible point. The working-set iteration
//! solves an equality-constrained subproblem through its KKT system,
//! steps to the nearest blocking constraint, and drops constraints whose
//! multipliers turn negative. Problem sizes here are small (tens of
//! variables, at most a few hundred rows), so dense LU factorizations per
//! iteration are the simplest reliable choice.

use nalgebra::{DMatrix, DVector};

use crate::errors::{Error, Result};

/// Feasibility slack accepted on the starting point and maintained at
/// blocking steps.
pub const QP_FEAS_TOL: f64 = 1e-9;
/// Multiplier threshold below which a working constraint is dropped.
pub const QP_MULT_TOL: f64 = 1e-9;

/// Problem data: `min 1/2 z' H z + g' z  s.t.  A z <= b`.
#[derive(Debug, Clone)]
pub struct QpProblem {
    /// Positive-definite Hessian.
    pub h: DMatrix<f64>,
    /// Linear cost term.
    pub g: DVector<f64>,
    /// Constraint rows (may be empty).
    pub a: DMatrix<f64>,
    /// Constraint right-hand sides.
    pub b: DVector<f64>,
}

/// Solution with active-set diagnostics.
#[derive(Debug, Clone)]
pub struct QpSolution {
    /// Optimizer.
    pub z: DVector<f64>,
    /// Lagrange multipliers, full length (zero on inactive rows).
    pub multipliers: DVector<f64>,
    /// Indices in the final working set.
    pub active: Vec<usize>,
    /// Working-set iterations performed.
    pub iterations: usize,
}

/// Solve the equality-constrained step `min 1/2 p'Hp + r'p, A_W p = 0`
/// together with its multipliers, through the dense KKT system.
fn kkt_step(
    h: &DMatrix<f64>,
    r: &DVector<f64>,
    a: &DMatrix<f64>,
    working: &[usize],
) -> Option<(DVector<f64>, DVector<f64>)> {
    let nv = h.nrows();
    let nw = working.len();
    let dim = nv + nw;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (nv, nv)).copy_from(h);
    for (wi, &ci) in working.iter().enumerate() {
        for j in 0..nv {
            kkt[(nv + wi, j)] = a[(ci, j)];
            kkt[(j, nv + wi)] = a[(ci, j)];
        }
    }
    let mut rhs = DVector::zeros(dim);
    for i in 0..nv {
        rhs[i] = -r[i];
    }
    let sol = kkt.lu().solve(&rhs)?;
    let p = sol.rows(0, nv).into_owned();
    let lam = sol.rows(nv, nw).into_owned();
    Some((p, lam))
}

/// Whether a candidate row is (numerically) linearly dependent on the
/// working rows; dependent rows would make the KKT system singular.
fn row_dependent(a: &DMatrix<f64>, working: &[usize], candidate: usize) -> bool {
    if working.is_empty() {
        return false;
    }
    let nv = a.ncols();
    let nw = working.len();
    let mut basis = DMatrix::zeros(nw, nv);
    for (wi, &ci) in working.iter().enumerate() {
        for j in 0..nv {
            basis[(wi, j)] = a[(ci, j)];
        }
    }
    let cand = a.row(candidate).transpose();
    // Least-squares residual of the candidate against the span of the
    // working rows.
    let gram = &basis * basis.transpose();
    let rhs = &basis * &cand;
    match gram.lu().solve(&rhs) {
        Some(coef) => {
            let residual = &cand - basis.transpose() * coef;
            residual.norm() <= 1e-10 * (1.0 + cand.norm())
        }
        None => true,
    }
}

/// Solve the QP from a feasible starting point.
pub fn solve_qp(p: &QpProblem, z0: &DVector<f64>) -> Result<QpSolution> {
    let nv = p.h.nrows();
    let nc = p.a.nrows();
    if p.g.len() != nv || p.b.len() != nc || (nc > 0 && p.a.ncols() != nv) {
        return Err(Error::NumericalFailure(
            "quadratic program dimensions disagree".to_string(),
        ));
    }
    let mut z = z0.clone();
    // Verify the start.
    for i in 0..nc {
        let v = p.a.row(i).transpose().dot(&z) - p.b[i];
        if v > QP_FEAS_TOL * (1.0 + p.b[i].abs()) {
            return Err(Error::Infeasible(format!(
                "quadratic program start violates row {i} by {v:.3e}"
            )));
        }
    }
    // Offsets may receive a one-time tiny deterministic perturbation to
    // break degenerate ties (see below), so work on a copy.
    let mut b_work = p.b.clone();
    // Start with the (independent) constraints active at z0 so degenerate
    // starts do not immediately step out of the feasible set.
    let mut working: Vec<usize> = Vec::new();
    for i in 0..nc {
        let v = p.a.row(i).transpose().dot(&z) - b_work[i];
        if v.abs() <= QP_FEAS_TOL * (1.0 + b_work[i].abs()) && !row_dependent(&p.a, &working, i) {
            working.push(i);
        }
    }
    let max_iters = 50 * (nv + nc + 1);
    // Degenerate vertices can create add/drop cycles that never move the
    // iterate. Once a streak of zero-length updates exceeds the number of
    // possible working-set changes, relax every offset by a distinct tiny
    // amount: the perturbed program has the same solution to well below
    // solver tolerance but its vertices are simple, which breaks the cycle.
    let max_zero_streak = 2 * (nv + nc) + 4;
    let mut zero_streak = 0;
    let mut perturbed = false;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        if zero_streak > max_zero_streak {
            if perturbed {
                return Err(Error::SolverStall {
                    kkt: f64::NAN,
                    iters: iterations,
                });
            }
            perturbed = true;
            zero_streak = 0;
            for i in 0..nc {
                let h = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 40;
                let frac = h as f64 / (1u64 << 24) as f64;
                b_work[i] += 2e-10 * (1.0 + b_work[i].abs()) * (0.5 + frac);
            }
            working.clear();
            for i in 0..nc {
                let v = p.a.row(i).transpose().dot(&z) - b_work[i];
                if v.abs() <= QP_FEAS_TOL * (1.0 + b_work[i].abs())
                    && !row_dependent(&p.a, &working, i)
                {
                    working.push(i);
                }
            }
        }
        let r = &p.h * &z + &p.g;
        let Some((step, lam)) = kkt_step(&p.h, &r, &p.a, &working) else {
            // Singular KKT despite the independence filter: drop the last
            // working constraint and retry.
            zero_streak += 1;
            if working.pop().is_none() {
                return Err(Error::NumericalFailure(
                    "unconstrained quadratic step failed on singular Hessian".to_string(),
                ));
            }
            continue;
        };
        if !step.amax().is_finite() || step.amax() > 1e10 * (1.0 + z.amax()) {
            // A wildly scaled step means the working set is numerically
            // rank-deficient even though the factorization went through.
            zero_streak += 1;
            if working.pop().is_none() {
                return Err(Error::NumericalFailure(
                    "unconstrained quadratic step is unbounded".to_string(),
                ));
            }
            continue;
        }
        // The computed step of an exact-arithmetic stationary point is pure
        // round-off of order eps * ||r|| / lambda_min(H); with badly scaled
        // gradients (e.g. large penalty entries) that noise reaches ~1e-10,
        // so the cutoff sits safely above it.
        if step.amax() <= 1e-9 * (1.0 + z.amax()) {
            // Stationary on the working set: check multiplier signs.
            let (worst_idx, worst_val) = lam
                .iter()
                .enumerate()
                .fold((usize::MAX, f64::INFINITY), |acc, (i, &v)| {
                    if v < acc.1 {
                        (i, v)
                    } else {
                        acc
                    }
                });
            if working.is_empty() || worst_val >= -QP_MULT_TOL {
                let mut multipliers = DVector::zeros(nc);
                for (wi, &ci) in working.iter().enumerate() {
                    multipliers[ci] = lam[wi];
                }
                return Ok(QpSolution {
                    z,
                    multipliers,
                    active: working,
                    iterations,
                });
            }
            working.remove(worst_idx);
            zero_streak += 1;
            continue;
        }
        // Step length to the nearest blocking constraint outside the
        // working set.
        let mut alpha = 1.0;
        let mut blocking = None;
        for i in 0..nc {
            if working.contains(&i) {
                continue;
            }
            let slope = p.a.row(i).transpose().dot(&step);
            if slope <= 1e-13 {
                continue;
            }
            let gap = b_work[i] - p.a.row(i).transpose().dot(&z);
            let a_i = (gap / slope).max(0.0);
            if a_i < alpha {
                alpha = a_i;
                blocking = Some(i);
            }
        }
        if alpha * step.amax() <= 1e-16 * (1.0 + z.amax()) {
            zero_streak += 1;
        } else {
            zero_streak = 0;
        }
        z += alpha * &step;
        if let Some(i) = blocking {
            if !row_dependent(&p.a, &working, i) {
                working.push(i);
            }
        }
    }
    Err(Error::SolverStall {
        kkt: f64::NAN,
        iters: iterations,
    })
}
