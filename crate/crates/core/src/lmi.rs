//! Linear-matrix-inequality programs over a conic interior-point solver.
//!
//! A program owns a set of structured matrix variables (symmetric, diagonal,
//! rectangular, scalar) that are scalarized into one global decision vector,
//! plus a set of semidefinite constraints given as matrix-valued callbacks.
//! Each callback must be **affine** in the decision scalars; the program
//! linearizes it by numeric probing (evaluate at the origin for the constant
//! term, then at each unit vector for the coefficient matrices) and verifies
//! affinity at a random point on every solve.
//!
//! Strict inequalities are encoded by the caller shifting the expression,
//! e.g. `expr - margin * I >= 0`. After every accepted solve the constraint
//! matrices are rebuilt at the solution and re-checked by a dense symmetric
//! eigendecomposition, independently of the conic solver's own certificate.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::{DMatrix, DVector};

use crate::errors::{Error, Result};

/// Absolute tolerance of the bisection in [`LmiProgram::maximize_scalar`].
pub const BISECTION_TOL: f64 = 1e-6;
/// Maximum allowed eigenvalue violation when re-verifying constraints at a
/// returned solution.
pub const EIGEN_VERIFY_TOL: f64 = 1e-7;
/// Agreement tolerance between the bisection value and the solver's direct
/// linear-objective value.
pub const CROSS_CHECK_TOL: f64 = 1e-5;

/// Handle to a declared matrix variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone, Copy)]
enum VarKind {
    /// Symmetric `dim x dim`, parameterized by its upper triangle.
    Symmetric(usize),
    /// Diagonal `dim x dim`, parameterized by its diagonal.
    Diagonal(usize),
    /// Dense `rows x cols`.
    Rectangular(usize, usize),
    /// Single scalar.
    Scalar,
}

impl VarKind {
    fn len(&self) -> usize {
        match *self {
            VarKind::Symmetric(d) => d * (d + 1) / 2,
            VarKind::Diagonal(d) => d,
            VarKind::Rectangular(r, c) => r * c,
            VarKind::Scalar => 1,
        }
    }
}

struct VarDecl {
    kind: VarKind,
    offset: usize,
    name: String,
}

type MatrixExpr = Box<dyn Fn(&Point<'_>) -> DMatrix<f64>>;

struct Constraint {
    name: String,
    expr: MatrixExpr,
}

/// A point in decision space; passed to constraint callbacks so they can
/// read variable values as matrices.
pub struct Point<'a> {
    vars: &'a [VarDecl],
    x: &'a DVector<f64>,
}

impl Point<'_> {
    fn decl(&self, id: VarId) -> &VarDecl {
        &self.vars[id.0]
    }

    /// Symmetric variable as a full matrix.
    pub fn sym(&self, id: VarId) -> DMatrix<f64> {
        let decl = self.decl(id);
        let VarKind::Symmetric(d) = decl.kind else {
            panic!("variable {} is not symmetric", decl.name);
        };
        let mut m = DMatrix::zeros(d, d);
        let mut k = decl.offset;
        for j in 0..d {
            for i in 0..=j {
                m[(i, j)] = self.x[k];
                m[(j, i)] = self.x[k];
                k += 1;
            }
        }
        m
    }

    /// Diagonal variable as a vector of diagonal entries.
    pub fn diag(&self, id: VarId) -> DVector<f64> {
        let decl = self.decl(id);
        let VarKind::Diagonal(d) = decl.kind else {
            panic!("variable {} is not diagonal", decl.name);
        };
        self.x.rows(decl.offset, d).into_owned()
    }

    /// Diagonal variable as a full matrix.
    pub fn diag_matrix(&self, id: VarId) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.diag(id))
    }

    /// Rectangular variable as a matrix (row-major scalar layout).
    pub fn rect(&self, id: VarId) -> DMatrix<f64> {
        let decl = self.decl(id);
        let VarKind::Rectangular(r, c) = decl.kind else {
            panic!("variable {} is not rectangular", decl.name);
        };
        DMatrix::from_fn(r, c, |i, j| self.x[decl.offset + i * c + j])
    }

    /// Scalar variable value.
    pub fn scalar(&self, id: VarId) -> f64 {
        let decl = self.decl(id);
        let VarKind::Scalar = decl.kind else {
            panic!("variable {} is not scalar", decl.name);
        };
        self.x[decl.offset]
    }
}

/// A solved program: the decision vector plus accessors mirroring [`Point`].
#[derive(Debug)]
pub struct LmiSolution {
    x: DVector<f64>,
    vars: Vec<(VarKind, usize, String)>,
    /// Smallest eigenvalue across all constraint matrices at this point.
    pub min_constraint_eig: f64,
}

impl LmiSolution {
    fn point_view<'a>(vars: &'a [VarDecl], x: &'a DVector<f64>) -> Point<'a> {
        Point { vars, x }
    }

    fn kind(&self, id: VarId) -> (VarKind, usize) {
        let (kind, offset, _) = self.vars[id.0];
        (kind, offset)
    }

    /// Symmetric variable at the solution.
    pub fn sym(&self, id: VarId) -> DMatrix<f64> {
        let (kind, offset) = self.kind(id);
        let VarKind::Symmetric(d) = kind else {
            panic!("variable is not symmetric");
        };
        let mut m = DMatrix::zeros(d, d);
        let mut k = offset;
        for j in 0..d {
            for i in 0..=j {
                m[(i, j)] = self.x[k];
                m[(j, i)] = self.x[k];
                k += 1;
            }
        }
        m
    }

    /// Diagonal variable at the solution, as a vector.
    pub fn diag(&self, id: VarId) -> DVector<f64> {
        let (kind, offset) = self.kind(id);
        let VarKind::Diagonal(d) = kind else {
            panic!("variable is not diagonal");
        };
        self.x.rows(offset, d).into_owned()
    }

    /// Diagonal variable at the solution, as a full matrix.
    pub fn diag_matrix(&self, id: VarId) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.diag(id))
    }

    /// Rectangular variable at the solution.
    pub fn rect(&self, id: VarId) -> DMatrix<f64> {
        let (kind, offset) = self.kind(id);
        let VarKind::Rectangular(r, c) = kind else {
            panic!("variable is not rectangular");
        };
        DMatrix::from_fn(r, c, |i, j| self.x[offset + i * c + j])
    }

    /// Scalar variable at the solution.
    pub fn scalar(&self, id: VarId) -> f64 {
        let (kind, offset) = self.kind(id);
        let VarKind::Scalar = kind else {
            panic!("variable is not scalar");
        };
        self.x[offset]
    }
}

/// Semidefinite program builder and solver front end.
#[derive(Default)]
pub struct LmiProgram {
    vars: Vec<VarDecl>,
    constraints: Vec<Constraint>,
    total: usize,
}

impl LmiProgram {
    /// Empty program.
    pub fn new() -> Self {
        Self::default()
    }

    fn declare(&mut self, name: &str, kind: VarKind) -> VarId {
        let id = VarId(self.vars.len());
        self.vars.push(VarDecl {
            kind,
            offset: self.total,
            name: name.to_string(),
        });
        self.total += kind.len();
        id
    }

    /// Declare a symmetric `dim x dim` variable.
    pub fn symmetric(&mut self, name: &str, dim: usize) -> VarId {
        self.declare(name, VarKind::Symmetric(dim))
    }

    /// Declare a diagonal `dim x dim` variable.
    pub fn diagonal(&mut self, name: &str, dim: usize) -> VarId {
        self.declare(name, VarKind::Diagonal(dim))
    }

    /// Declare a dense `rows x cols` variable.
    pub fn rectangular(&mut self, name: &str, rows: usize, cols: usize) -> VarId {
        self.declare(name, VarKind::Rectangular(rows, cols))
    }

    /// Declare a scalar variable.
    pub fn scalar(&mut self, name: &str) -> VarId {
        self.declare(name, VarKind::Scalar)
    }

    /// Require `expr(point) >= 0` (positive semidefinite). The expression
    /// must be affine in the decision scalars and return a symmetric matrix
    /// of fixed size. Encode strictness by subtracting a margin inside the
    /// expression.
    pub fn require_psd(
        &mut self,
        name: &str,
        expr: impl Fn(&Point<'_>) -> DMatrix<f64> + 'static,
    ) {
        self.constraints.push(Constraint {
            name: name.to_string(),
            expr: Box::new(expr),
        });
    }

    fn eval_constraint(&self, c: &Constraint, x: &DVector<f64>) -> DMatrix<f64> {
        let point = Point {
            vars: &self.vars,
            x,
        };
        (c.expr)(&point)
    }

    /// Linearize every constraint by probing: `C = F(0)`,
    /// `A_j = F(e_j) - C`, with a random-point affinity check.
    fn linearize(&self) -> Result<Vec<(usize, DMatrix<f64>, Vec<DMatrix<f64>>)>> {
        let nx = self.total;
        let origin = DVector::zeros(nx);
        let mut out = Vec::with_capacity(self.constraints.len());
        // Fixed, arbitrary probe point for the affinity check (deterministic).
        let probe = DVector::from_fn(nx, |i, _| 0.371 + 0.113 * ((i % 7) as f64) - 0.25);
        for c in &self.constraints {
            let base = self.eval_constraint(c, &origin);
            let dim = base.nrows();
            if base.ncols() != dim {
                return Err(Error::NumericalFailure(format!(
                    "constraint `{}` is not square",
                    c.name
                )));
            }
            if (&base - base.transpose()).amax() > 1e-9 * (1.0 + base.amax()) {
                return Err(Error::NumericalFailure(format!(
                    "constraint `{}` is not symmetric",
                    c.name
                )));
            }
            let mut coeffs = Vec::with_capacity(nx);
            for j in 0..nx {
                let mut e = DVector::zeros(nx);
                e[j] = 1.0;
                let m = self.eval_constraint(c, &e) - &base;
                coeffs.push(m);
            }
            // Affinity check: F(probe) must equal C + sum probe_j A_j.
            let mut predicted = base.clone();
            for (j, a) in coeffs.iter().enumerate() {
                predicted += a * probe[j];
            }
            let actual = self.eval_constraint(c, &probe);
            let scale = 1.0 + actual.amax();
            if (&actual - &predicted).amax() > 1e-6 * scale {
                return Err(Error::NumericalFailure(format!(
                    "constraint `{}` is not affine in the decision variables",
                    c.name
                )));
            }
            out.push((dim, base, coeffs));
        }
        Ok(out)
    }

    /// Solve with linear objective `minimize q'x`, optionally adding a scalar
    /// lower-bound constraint `x[extra.0] >= extra.1`. Returns `Ok(None)` on
    /// an infeasible/unsolved status.
    fn solve_raw(
        &self,
        q: &[f64],
        extra_lower: Option<(usize, f64)>,
        linearized: &[(usize, DMatrix<f64>, Vec<DMatrix<f64>>)],
    ) -> Result<Option<DVector<f64>>> {
        let nx = self.total;
        if nx == 0 {
            return Ok(Some(DVector::zeros(0)));
        }
        // Assemble b (svec of constant terms) and A (negated svec of
        // coefficient matrices) block by block.
        let mut b: Vec<f64> = Vec::new();
        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nx];
        let mut row_base = 0usize;
        for (dim, base, coeffs) in linearized {
            let rows = dim * (dim + 1) / 2;
            b.extend(svec(base));
            for (j, a) in coeffs.iter().enumerate() {
                if a.amax() == 0.0 {
                    continue;
                }
                for (k, v) in svec(a).into_iter().enumerate() {
                    if v != 0.0 {
                        cols[j].push((row_base + k, -v));
                    }
                }
            }
            cones.push(SupportedConeT::PSDTriangleConeT(*dim));
            row_base += rows;
        }
        if let Some((idx, lo)) = extra_lower {
            // x[idx] - lo >= 0 as a 1x1 semidefinite block.
            b.push(-lo);
            cols[idx].push((row_base, -1.0));
            cones.push(SupportedConeT::PSDTriangleConeT(1));
            row_base += 1;
        }
        let n_rows = row_base;
        let mut colptr = Vec::with_capacity(nx + 1);
        let mut rowval = Vec::new();
        let mut nzval = Vec::new();
        colptr.push(0);
        for col in &mut cols {
            col.sort_by_key(|&(r, _)| r);
            for &(r, v) in col.iter() {
                rowval.push(r);
                nzval.push(v);
            }
            colptr.push(rowval.len());
        }
        let a_mat = CscMatrix::new(n_rows, nx, colptr, rowval, nzval);
        let p_mat = CscMatrix::new(nx, nx, vec![0; nx + 1], vec![], vec![]);
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .tol_feas(1e-9)
            .tol_gap_abs(1e-9)
            .tol_gap_rel(1e-9)
            .build()
            .map_err(|e| Error::NumericalFailure(format!("solver settings: {e}")))?;
        // The interior-point solver can panic internally when its dense
        // eigendecomposition fails on severely ill-conditioned iterates
        // (typically right at the infeasibility boundary during bisection).
        // Contain the panic and report the probe as infeasible so the
        // caller backs off instead of crashing.
        let solved = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            let mut solver = DefaultSolver::new(&p_mat, q, &a_mat, &b, &cones, settings)
                .map_err(|e| Error::NumericalFailure(format!("solver setup: {e:?}")))?;
            solver.solve();
            let status = solver.solution.status;
            Ok(match status {
                SolverStatus::Solved | SolverStatus::AlmostSolved => {
                    Some(DVector::from_vec(solver.solution.x.clone()))
                }
                _ => None,
            })
        }));
        match solved {
            Ok(result) => result,
            Err(_) => Ok(None),
        }
    }

    /// Rebuild every constraint at `x` and return the smallest eigenvalue
    /// seen, both raw and scaled by the constraint's magnitude (independent
    /// verification of the conic solve).
    fn verify_point(&self, x: &DVector<f64>) -> (f64, f64) {
        let mut min_eig = f64::INFINITY;
        let mut min_scaled = f64::INFINITY;
        for c in &self.constraints {
            let m = self.eval_constraint(c, x);
            let e = min_symmetric_eigenvalue(&m);
            if e < min_eig {
                min_eig = e;
            }
            let scaled = e / (1.0 + m.amax());
            if scaled < min_scaled {
                min_scaled = scaled;
            }
        }
        (min_eig, min_scaled)
    }

    fn accept(&self, x: DVector<f64>) -> Result<LmiSolution> {
        let (min_eig, min_scaled) = self.verify_point(&x);
        if min_scaled < -EIGEN_VERIFY_TOL {
            return Err(Error::NumericalFailure(format!(
                "solution failed independent eigenvalue verification: min eig {min_eig:.3e}"
            )));
        }
        Ok(LmiSolution {
            x,
            vars: self
                .vars
                .iter()
                .map(|v| (v.kind, v.offset, v.name.clone()))
                .collect(),
            min_constraint_eig: min_eig,
        })
    }

    /// Find any point satisfying all constraints.
    pub fn solve_feasibility(&self) -> Result<LmiSolution> {
        let lin = self.linearize()?;
        let q = vec![0.0; self.total];
        match self.solve_raw(&q, None, &lin)? {
            Some(x) => self.accept(x),
            None => Err(Error::Infeasible(
                "semidefinite feasibility problem has no solution".to_string(),
            )),
        }
    }

    /// Maximize a scalar variable by bisection on feasibility probes over
    /// `[lo, hi]`, then cross-check against the solver's own linear
    /// objective. Returns the bisection value and the last feasible point.
    pub fn maximize_scalar(&self, t: VarId, lo: f64, hi: f64) -> Result<(f64, LmiSolution)> {
        let decl = &self.vars[t.0];
        let VarKind::Scalar = decl.kind else {
            panic!("maximize_scalar requires a scalar variable");
        };
        let idx = decl.offset;
        let lin = self.linearize()?;
        let q = vec![0.0; self.total];
        let lo0 = lo;
        let Some(mut best_x) = self.solve_raw(&q, Some((idx, lo)), &lin)? else {
            return Err(Error::NeverFeasible { lo, hi });
        };
        let (mut lo, mut hi) = (lo, hi);
        while hi - lo > BISECTION_TOL {
            let mid = 0.5 * (lo + hi);
            match self.solve_raw(&q, Some((idx, mid)), &lin)? {
                Some(x) => {
                    best_x = x;
                    lo = mid;
                }
                None => {
                    hi = mid;
                }
            }
        }
        // Direct objective cross-check: minimize -t over the same set.
        let mut q_dir = vec![0.0; self.total];
        q_dir[idx] = -1.0;
        if let Some(x_dir) = self.solve_raw(&q_dir, None, &lin)? {
            let direct = x_dir[idx];
            let tol = CROSS_CHECK_TOL * (1.0 + direct.abs()) + BISECTION_TOL;
            if (direct - lo).abs() > tol {
                return Err(Error::NumericalFailure(format!(
                    "objective cross-check mismatch: bisection {lo:.9e} vs direct {direct:.9e}"
                )));
            }
        }
        // At the bisection optimum the feasible set loses interior and
        // solver accuracy degrades; back the level off by growing multiples
        // of the tolerance until independent verification accepts a point.
        let mut last_err = None;
        for k in 0..5 {
            let level = if k == 0 {
                lo
            } else {
                (lo - BISECTION_TOL * 10f64.powi(k - 1) * (1.0 + lo.abs())).max(lo0)
            };
            let cand = if k == 0 {
                Some(std::mem::replace(&mut best_x, DVector::zeros(0)))
            } else {
                self.solve_raw(&q, Some((idx, level)), &lin)?
            };
            if let Some(x) = cand {
                match self.accept(x) {
                    Ok(sol) => return Ok((level, sol)),
                    Err(e) => last_err = Some(e),
                }
            }
            if k > 0 && level == lo0 {
                break;
            }
        }
        Err(last_err.unwrap_or_else(|| {
            Error::NumericalFailure("no verifiable point near the bisection optimum".to_string())
        }))
    }

    /// Evaluate an expression at a solved point (for diagnostics).
    pub fn eval_at(&self, sol: &LmiSolution, c_index: usize) -> DMatrix<f64> {
        self.eval_constraint(&self.constraints[c_index], &sol.x)
    }

    /// Number of declared constraints.
    pub fn constraint_count(&self) -> usize {
        self.constraints.len()
    }

    /// Borrow a [`Point`] view over a solution for reuse of callback code.
    pub fn point_of<'a>(&'a self, sol: &'a LmiSolution) -> Point<'a> {
        LmiSolution::point_view(&self.vars, &sol.x)
    }
}

/// Upper-triangle column-major scaled vectorization used by the solver's
/// semidefinite cone: off-diagonal entries are multiplied by `sqrt(2)`.
fn svec(m: &DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    let rt2 = std::f64::consts::SQRT_2;
    for j in 0..d {
        for i in 0..=j {
            if i == j {
                out.push(m[(i, j)]);
            } else {
                out.push(0.5 * (m[(i, j)] + m[(j, i)]) * rt2);
            }
        }
    }
    out
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let sym = 0.5 * (m + m.transpose());
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |acc, &e| acc.min(e))
}

/// Largest eigenvalue of the symmetric part of `m`.
pub fn max_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    let sym = 0.5 * (m + m.transpose());
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::NEG_INFINITY, |acc, &e| acc.max(e))
}

/// Diagonal-Lyapunov certificate for well-posedness of an implicit layer
/// with feedback matrix `e`: find diagonal `P > 0` with
/// `E'P + PE - 2P < 0`. Returns the diagonal of `P` when feasible
/// (normalized so `P <= I`), `None` otherwise.
pub fn diagonal_lyapunov_certificate(e: &DMatrix<f64>) -> Option<DVector<f64>> {
    let nu = e.nrows();
    if nu == 0 {
        return Some(DVector::zeros(0));
    }
    let mut prog = LmiProgram::new();
    let p = prog.diagonal("P", nu);
    let e_mat = e.clone();
    let margin = 1e-7;
    prog.require_psd("contraction", move |pt| {
        let p_mat = pt.diag_matrix(p);
        let m = e_mat.transpose() * &p_mat + &p_mat * &e_mat - 2.0 * &p_mat;
        -m - DMatrix::identity(nu, nu) * margin
    });
    prog.require_psd("lower", move |pt| {
        pt.diag_matrix(p) - DMatrix::identity(nu, nu) * 1e-6
    });
    prog.require_psd("upper", move |pt| {
        DMatrix::identity(nu, nu) - pt.diag_matrix(p)
    });
    match prog.solve_feasibility() {
        Ok(sol) => Some(sol.diag(p)),
        Err(_) => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn maximize_off_diagonal_of_unit_diagonal_matrix() {
        // [[1, t], [t, 1]] >= 0 iff |t| <= 1, so the maximum of t is 1.
        let mut prog = LmiProgram::new();
        let t = prog.scalar("t");
        prog.require_psd("corr", move |pt| {
            let v = pt.scalar(t);
            DMatrix::from_row_slice(2, 2, &[1.0, v, v, 1.0])
        });
        let (val, sol) = prog.maximize_scalar(t, -2.0, 5.0).unwrap();
        assert_abs_diff_eq!(val, 1.0, epsilon = 5e-6);
        assert!(sol.min_constraint_eig >= -EIGEN_VERIFY_TOL);
    }

    #[test]
    fn scalar_lyapunov_feasible_iff_stable() {
        for (a, feasible) in [(0.5, true), (1.5, false)] {
            let mut prog = LmiProgram::new();
            let p = prog.symmetric("P", 1);
            prog.require_psd("lyap", move |pt| {
                let p_m = pt.sym(p);
                let decay = &p_m - (a * a) * &p_m;
                decay - DMatrix::identity(1, 1) * 1e-4
            });
            prog.require_psd("norm", move |pt| DMatrix::identity(1, 1) - pt.sym(p));
            prog.require_psd("pos", move |pt| {
                pt.sym(p) - DMatrix::identity(1, 1) * 1e-3
            });
            assert_eq!(prog.solve_feasibility().is_ok(), feasible, "a = {a}");
        }
    }

    #[test]
    fn lower_triangular_feedback_certificate_exists() {
        // E = [[0,0],[1,0]]: E'P + PE - 2P = [[-2p1, p2],[p2, -2p2]] < 0
        // iff p2 < 4 p1 (Schur), so a certificate exists.
        let e = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        let cert = diagonal_lyapunov_certificate(&e).expect("feasible");
        assert!(cert[0] > 0.0 && cert[1] > 0.0);
        assert!(cert[1] < 4.0 * cert[0]);
        let p = DMatrix::from_diagonal(&cert);
        let m = e.transpose() * &p + &p * &e - 2.0 * &p;
        assert!(max_symmetric_eigenvalue(&m) < 0.0);
    }

    #[test]
    fn identity_feedback_has_no_certificate() {
        // E = I gives E'P + PE - 2P = 0, never negative definite.
        let e = DMatrix::identity(3, 3);
        assert!(diagonal_lyapunov_certificate(&e).is_none());
    }

    #[test]
    fn non_affine_expression_is_rejected() {
        let mut prog = LmiProgram::new();
        let t = prog.scalar("t");
        prog.require_psd("quad", move |pt| {
            let v = pt.scalar(t);
            DMatrix::from_row_slice(1, 1, &[v * v + 1.0])
        });
        let err = prog.solve_feasibility().unwrap_err();
        assert!(matches!(err, Error::NumericalFailure(_)));
    }

    #[test]
    fn infeasible_program_reports_infeasible() {
        let mut prog = LmiProgram::new();
        let t = prog.scalar("t");
        prog.require_psd("up", move |pt| {
            DMatrix::from_row_slice(1, 1, &[pt.scalar(t) - 1.0])
        });
        prog.require_psd("down", move |pt| {
            DMatrix::from_row_slice(1, 1, &[-1.0 - pt.scalar(t)])
        });
        assert!(matches!(
            prog.solve_feasibility(),
            Err(Error::Infeasible(_))
        ));
    }
}
