//! Implicit RNN plant models.
//!
//! The plant class is a discrete-time state-space model with an implicit
//! (equilibrium) activation layer:
//!
//! ```text
//! x(k+1) = A x(k) + B u(k) + B_s s(k)
//! s(k)   = sigma(A~ x(k) + B~ u(k) + B_s~ s(k))
//! y(k)   = C x(k)
//! ```
//!
//! where `sigma` applies a scalar sigmoid to each of the `nu` channels.
//! The layer equation is solved by Newton iteration with an analytic
//! Jacobian `I - diag(sigma'(v)) * B_s~`; invertibility of that Jacobian is
//! exactly the well-posedness condition checked by
//! [`RnnModel::well_posedness_check`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::errors::{Error, Result};

/// Residual tolerance (infinity norm) for every implicit-layer solve.
pub const IMPLICIT_TOL: f64 = 1e-10;
/// Newton iteration budget for implicit-layer solves.
pub const NEWTON_BUDGET: usize = 100;
/// Damped fixed-point fallback budget for implicit-layer solves.
pub const PICARD_BUDGET: usize = 10_000;

/// Scalar activation tags supported by the plant class.
///
/// Every kind must be a bounded, strictly increasing sigmoid with
/// `value(0) = 0`, `derivative(0) = 1`, `|value| <= 1`, and unit Lipschitz
/// constant; [`Activation::check_shape`] verifies this numerically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

impl Activation {
    /// Parse an activation tag as it appears in model files.
    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::UnsupportedActivation(other.to_string())),
        }
    }

    /// The scalar nonlinearity.
    #[inline]
    pub fn value(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
        }
    }

    /// First derivative of the nonlinearity.
    #[inline]
    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = v.tanh();
                1.0 - t * t
            }
        }
    }

    /// Numerically verify the sigmoid shape requirements on a sampled grid:
    /// `value(0) = 0`, `derivative(0) = 1`, `|value| <= 1`,
    /// `0 < derivative <= 1`, and `|value(a) - value(b)| <= |a - b|`.
    pub fn check_shape(self) -> Result<()> {
        let fail = |msg: &str| {
            Err(Error::UnsupportedActivation(format!(
                "activation fails sigmoid shape check: {msg}"
            )))
        };
        if self.value(0.0).abs() > 1e-15 {
            return fail("value(0) != 0");
        }
        if (self.derivative(0.0) - 1.0).abs() > 1e-15 {
            return fail("derivative(0) != 1");
        }
        let grid: Vec<f64> = (-200..=200).map(|i| i as f64 * 0.04).collect();
        for &v in &grid {
            let s = self.value(v);
            let d = self.derivative(v);
            if s.abs() > 1.0 + 1e-12 {
                return fail("|value| > 1 on grid");
            }
            if d <= 0.0 || d > 1.0 + 1e-12 {
                return fail("derivative outside (0, 1] on grid");
            }
        }
        // Lipschitz check on all grid pairs at stride 7 (keeps the pair count
        // around 10^4 while still spanning the whole range).
        for (i, &a) in grid.iter().enumerate().step_by(7) {
            for (j, &b) in grid.iter().enumerate().step_by(7) {
                if i == j {
                    continue;
                }
                if (self.value(a) - self.value(b)).abs() > (a - b).abs() + 1e-12 {
                    return fail("Lipschitz constant exceeds 1 on grid");
                }
            }
        }
        Ok(())
    }
}

/// Implicit RNN plant model: the seven system matrices plus per-channel
/// activation tags. Immutable after construction; shareable across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnModel {
    /// State matrix, `n x n`.
    pub a: DMatrix<f64>,
    /// Input matrix, `n x m`.
    pub b: DMatrix<f64>,
    /// Activation-to-state matrix, `n x nu`.
    pub b_s: DMatrix<f64>,
    /// State-to-preactivation matrix, `nu x n`.
    pub a_tilde: DMatrix<f64>,
    /// Input-to-preactivation matrix, `nu x m`.
    pub b_tilde: DMatrix<f64>,
    /// Activation feedback matrix, `nu x nu`.
    pub b_s_tilde: DMatrix<f64>,
    /// Output matrix, `p x n`.
    pub c: DMatrix<f64>,
    /// Per-channel activations, length `nu`.
    pub activations: Vec<Activation>,
}

/// State carried between plant steps: the current state vector, the last
/// implicit-layer solution (used as the next warm start and for increment
/// bookkeeping), and the last applied input.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    /// Current state `x(k)`.
    pub x: DVector<f64>,
    /// Implicit-layer solution at the pair that produced `x(k)`, i.e.
    /// `s(k-1) = f_s(x(k-1), u(k-1))`.
    pub s: DVector<f64>,
    /// Last applied input `u(k-1)`.
    pub u_prev: DVector<f64>,
}

impl PlantState {
    /// The zero resting state for the given dimensions.
    pub fn at_rest(n: usize, m: usize, nu: usize) -> Self {
        PlantState {
            x: DVector::zeros(n),
            s: DVector::zeros(nu),
            u_prev: DVector::zeros(m),
        }
    }
}

/// Elementwise input and output operating limits. Entries may be infinite
/// to leave a channel unconstrained.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxConstraints {
    /// Lower input bounds, length `m`.
    pub u_min: DVector<f64>,
    /// Upper input bounds, length `m`.
    pub u_max: DVector<f64>,
    /// Lower output bounds, length `p`.
    pub y_min: DVector<f64>,
    /// Upper output bounds, length `p`.
    pub y_max: DVector<f64>,
}

impl BoxConstraints {
    /// Fully unconstrained box of matching dimensions.
    pub fn unbounded(m: usize, p: usize) -> Self {
        BoxConstraints {
            u_min: DVector::from_element(m, f64::NEG_INFINITY),
            u_max: DVector::from_element(m, f64::INFINITY),
            y_min: DVector::from_element(p, f64::NEG_INFINITY),
            y_max: DVector::from_element(p, f64::INFINITY),
        }
    }

    /// Check lengths against plant dimensions and bound ordering.
    pub fn validate(&self, m: usize, p: usize) -> Result<()> {
        if self.u_min.len() != m || self.u_max.len() != m {
            return Err(Error::DimensionMismatch {
                path: "constraints.u".to_string(),
                expected: format!("{m} entries"),
                got: format!("{}/{}", self.u_min.len(), self.u_max.len()),
            });
        }
        if self.y_min.len() != p || self.y_max.len() != p {
            return Err(Error::DimensionMismatch {
                path: "constraints.y".to_string(),
                expected: format!("{p} entries"),
                got: format!("{}/{}", self.y_min.len(), self.y_max.len()),
            });
        }
        for j in 0..m {
            if self.u_min[j] >= self.u_max[j] {
                return Err(Error::InvalidField {
                    path: format!("constraints.u[{j}]"),
                    message: "lower bound not below upper bound".to_string(),
                });
            }
        }
        for i in 0..p {
            if self.y_min[i] >= self.y_max[i] {
                return Err(Error::InvalidField {
                    path: format!("constraints.y[{i}]"),
                    message: "lower bound not below upper bound".to_string(),
                });
            }
        }
        Ok(())
    }

    /// Whether an input vector satisfies the box (with slack `tol`).
    pub fn input_ok(&self, u: &DVector<f64>, tol: f64) -> bool {
        u.iter()
            .enumerate()
            .all(|(j, &v)| v >= self.u_min[j] - tol && v <= self.u_max[j] + tol)
    }

    /// Whether an output vector satisfies the box (with slack `tol`).
    pub fn output_ok(&self, y: &DVector<f64>, tol: f64) -> bool {
        y.iter()
            .enumerate()
            .all(|(i, &v)| v >= self.y_min[i] - tol && v <= self.y_max[i] + tol)
    }
}

/// Outcome of the two well-posedness checks. `sampled_nonsingular` is the
/// requirement; the diagonal-Lyapunov certificate is a sufficient condition
/// that may fail on models that are nonetheless well posed.
#[derive(Debug, Clone)]
pub struct WellPosednessReport {
    /// Feasibility of the diagonal-Lyapunov sufficient condition
    /// `E'P + PE - 2P < 0` with `E = B_s~` and diagonal `P > 0`.
    pub lemma1_feasible: bool,
    /// Diagonal entries of the certificate when feasible.
    pub lemma1_certificate: Option<DVector<f64>>,
    /// Whether `I - Theta*B_s~` was nonsingular for every sampled `Theta`.
    pub sampled_nonsingular: bool,
    /// Smallest singular value of `I - Theta*B_s~` seen across the grid.
    pub min_phi_sigma_min: f64,
    /// Number of `Theta` samples tested.
    pub theta_samples: usize,
}

impl WellPosednessReport {
    /// The binding requirement: nonsingularity on the sampled slope grid.
    pub fn passes(&self) -> bool {
        self.sampled_nonsingular
    }
}

impl RnnModel {
    /// Model dimensions `(n, m, p, nu)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (
            self.a.nrows(),
            self.b.ncols(),
            self.c.nrows(),
            self.b_s_tilde.nrows(),
        )
    }

    /// Number of states.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    /// Number of inputs.
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    /// Number of outputs.
    pub fn p(&self) -> usize {
        self.c.nrows()
    }
    /// Number of activation channels.
    pub fn nu(&self) -> usize {
        self.b_s_tilde.nrows()
    }

    /// Check matrix-dimension consistency and the sigmoid shape of every
    /// activation. Field paths in errors follow the model-file schema.
    pub fn validate_shape(&self) -> Result<()> {
        let (n, m, p, nu) = self.dims();
        let expect = |name: &str, rows: usize, cols: usize, mat: &DMatrix<f64>| {
            if mat.nrows() != rows || mat.ncols() != cols {
                Err(Error::DimensionMismatch {
                    path: name.to_string(),
                    expected: format!("{rows}x{cols}"),
                    got: format!("{}x{}", mat.nrows(), mat.ncols()),
                })
            } else {
                Ok(())
            }
        };
        expect("A", n, n, &self.a)?;
        expect("B", n, m, &self.b)?;
        expect("B_s", n, nu, &self.b_s)?;
        expect("A_tilde", nu, n, &self.a_tilde)?;
        expect("B_tilde", nu, m, &self.b_tilde)?;
        expect("B_s_tilde", nu, nu, &self.b_s_tilde)?;
        expect("C", p, n, &self.c)?;
        if self.activations.len() != nu {
            return Err(Error::DimensionMismatch {
                path: "activations".to_string(),
                expected: format!("{nu} entries"),
                got: format!("{} entries", self.activations.len()),
            });
        }
        for act in &self.activations {
            act.check_shape()?;
        }
        for (name, mat) in [
            ("A", &self.a),
            ("B", &self.b),
            ("B_s", &self.b_s),
            ("A_tilde", &self.a_tilde),
            ("B_tilde", &self.b_tilde),
            ("B_s_tilde", &self.b_s_tilde),
            ("C", &self.c),
        ] {
            if mat.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidField {
                    path: name.to_string(),
                    message: "non-finite entry".to_string(),
                });
            }
        }
        Ok(())
    }

    /// Apply the activation vector elementwise.
    pub fn sigma(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            v.len(),
            v.iter()
                .zip(&self.activations)
                .map(|(&vi, act)| act.value(vi)),
        )
    }

    /// Elementwise activation derivatives.
    pub fn sigma_prime(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            v.len(),
            v.iter()
                .zip(&self.activations)
                .map(|(&vi, act)| act.derivative(vi)),
        )
    }

    /// Pre-activation vector `v = A~ x + B~ u + B_s~ s`.
    pub fn preactivation(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        s: &DVector<f64>,
    ) -> DVector<f64> {
        &self.a_tilde * x + &self.b_tilde * u + &self.b_s_tilde * s
    }

    /// Solve a fixed point `s = sigma(w + F s)` to infinity-norm residual
    /// [`IMPLICIT_TOL`], for any bias `w` and activation feedback `F` that
    /// shares this plant's channel activations.
    ///
    /// Newton iteration on the residual `r(s) = s - sigma(w + F s)` with
    /// the analytic Jacobian `I - diag(sigma'(v)) F`, backed by a damped
    /// fixed-point fallback when a Newton step fails its line search.
    /// Deterministic for fixed inputs.
    pub fn solve_activation_fixed_point(
        &self,
        w: &DVector<f64>,
        feedback: &DMatrix<f64>,
        s_guess: &DVector<f64>,
        context: &'static str,
    ) -> Result<DVector<f64>> {
        let nu = self.nu();
        let residual = |s: &DVector<f64>| -> DVector<f64> {
            let v = w + feedback * s;
            s - self.sigma(&v)
        };
        let mut s = s_guess.clone();
        let mut r = residual(&s);
        let mut newton_iters = 0;
        while newton_iters < NEWTON_BUDGET {
            if r.amax() <= IMPLICIT_TOL {
                return Ok(s);
            }
            newton_iters += 1;
            let v = w + feedback * &s;
            let dsig = self.sigma_prime(&v);
            let mut jac = DMatrix::identity(nu, nu);
            for i in 0..nu {
                for j in 0..nu {
                    jac[(i, j)] -= dsig[i] * feedback[(i, j)];
                }
            }
            let Some(step) = jac.lu().solve(&(-&r)) else {
                break;
            };
            // Backtracking line search on the residual norm.
            let r_norm = r.norm();
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..9 {
                let cand = &s + t * &step;
                let rc = residual(&cand);
                if rc.norm() < r_norm {
                    s = cand;
                    r = rc;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        // Damped fixed-point fallback; the damping keeps oscillatory
        // borderline models from cycling.
        let mut fallback_iters = 0;
        while fallback_iters < PICARD_BUDGET {
            if r.amax() <= IMPLICIT_TOL {
                return Ok(s);
            }
            fallback_iters += 1;
            let v = w + feedback * &s;
            let target = self.sigma(&v);
            s = 0.5 * (&s + target);
            r = residual(&s);
        }
        if r.amax() <= IMPLICIT_TOL {
            return Ok(s);
        }
        Err(Error::NonConvergence {
            context,
            residual: r.amax(),
            newton_iters,
            fallback_iters,
        })
    }

    /// Solve the implicit layer equation `s = sigma(A~ x + B~ u + B_s~ s)`
    /// to infinity-norm residual [`IMPLICIT_TOL`].
    pub fn solve_implicit_layer(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        s_guess: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let w = &self.a_tilde * x + &self.b_tilde * u;
        self.solve_activation_fixed_point(&w, &self.b_s_tilde, s_guess, "plant implicit layer")
    }

    /// The implicit-layer solution `f_s(x, u)` from a zero warm start.
    pub fn f_s(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.solve_implicit_layer(x, u, &DVector::zeros(self.nu()))
    }

    /// The lifted vector `phi(x, u) = [x; u; f_s(x, u)]`.
    pub fn phi(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let s = self.f_s(x, u)?;
        let mut out = DVector::zeros(self.n() + self.m() + self.nu());
        out.rows_mut(0, self.n()).copy_from(x);
        out.rows_mut(self.n(), self.m()).copy_from(u);
        out.rows_mut(self.n() + self.m(), self.nu()).copy_from(&s);
        Ok(out)
    }

    /// Advance the plant one step under input `u`.
    ///
    /// The output is computed from the pre-update state (`y(k) = C x(k)`),
    /// and the returned state carries `x(k+1)` along with the layer solution
    /// `s(k)` that produced it.
    pub fn step(&self, state: &PlantState, u: &DVector<f64>) -> Result<(PlantState, DVector<f64>)> {
        let y = &self.c * &state.x;
        let s = self.solve_implicit_layer(&state.x, u, &state.s)?;
        let x_next = &self.a * &state.x + &self.b * u + &self.b_s * &s;
        Ok((
            PlantState {
                x: x_next,
                s,
                u_prev: u.clone(),
            },
            y,
        ))
    }

    /// Diagonal slope-sample grid on `(0, 1]` for the sampled well-posedness
    /// and rank checks: five points per channel, full cartesian product up to
    /// five channels, seeded random subsampling beyond that. `Theta = I` is
    /// always included.
    pub fn theta_grid(&self) -> Vec<DVector<f64>> {
        const LEVELS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
        const CAP: usize = 3125; // 5^5
        let nu = self.nu();
        let mut grid = Vec::new();
        grid.push(DVector::from_element(nu, 1.0));
        if nu <= 5 {
            let total = LEVELS.len().pow(nu as u32);
            for idx in 0..total {
                let mut rem = idx;
                let mut diag = DVector::zeros(nu);
                for d in diag.iter_mut() {
                    *d = LEVELS[rem % LEVELS.len()];
                    rem /= LEVELS.len();
                }
                if diag.iter().all(|&v| v == 1.0) {
                    continue; // already seeded
                }
                grid.push(diag);
            }
        } else {
            use rand::prelude::*;
            use rand_chacha::ChaCha8Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(THETA_GRID_SEED);
            for _ in 0..CAP {
                let diag =
                    DVector::from_fn(nu, |_, _| *LEVELS.choose(&mut rng).expect("non-empty"));
                grid.push(diag);
            }
        }
        grid
    }

    /// Run both well-posedness checks: the diagonal-Lyapunov sufficient
    /// condition (via a semidefinite feasibility solve) and direct
    /// nonsingularity of `I - Theta*B_s~` on the sampled slope grid.
    pub fn well_posedness_check(&self) -> WellPosednessReport {
        let nu = self.nu();
        let lemma1 = crate::lmi::diagonal_lyapunov_certificate(&self.b_s_tilde);
        let mut min_sv = f64::INFINITY;
        let grid = self.theta_grid();
        for diag in &grid {
            let mut phi = DMatrix::<f64>::identity(nu, nu);
            for i in 0..nu {
                for j in 0..nu {
                    phi[(i, j)] -= diag[i] * self.b_s_tilde[(i, j)];
                }
            }
            let sv = phi.svd(false, false).singular_values;
            let smallest = sv[sv.len() - 1];
            if smallest < min_sv {
                min_sv = smallest;
            }
        }
        WellPosednessReport {
            lemma1_feasible: lemma1.is_some(),
            lemma1_certificate: lemma1,
            sampled_nonsingular: min_sv > 1e-10,
            min_phi_sigma_min: min_sv,
            theta_samples: grid.len(),
        }
    }

    /// Assemble the steady-state system matrix
    ///
    /// ```text
    /// M(Theta) = [ A - I + B_s Phi^-1 Theta A~    B + B_s Phi^-1 Theta B~ ]
    ///            [ C(A + B_s Phi^-1 Theta A~)     C(B + B_s Phi^-1 Theta B~) ]
    /// ```
    ///
    /// with `Phi = I - Theta*B_s~`, for a diagonal slope sample `theta`.
    pub fn assemble_m(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let (n, m, p, nu) = self.dims();
        let mut phi = DMatrix::<f64>::identity(nu, nu);
        for i in 0..nu {
            for j in 0..nu {
                phi[(i, j)] -= theta[i] * self.b_s_tilde[(i, j)];
            }
        }
        let svd = phi.clone().svd(false, false);
        let sv = svd.singular_values;
        if sv[sv.len() - 1] <= 1e-10 {
            return Err(Error::SingularPhi {
                sigma_min: sv[sv.len() - 1],
            });
        }
        let lu = phi.lu();
        let theta_at = DMatrix::from_fn(nu, self.a_tilde.ncols(), |i, j| {
            theta[i] * self.a_tilde[(i, j)]
        });
        let theta_bt = DMatrix::from_fn(nu, self.b_tilde.ncols(), |i, j| {
            theta[i] * self.b_tilde[(i, j)]
        });
        let inv_theta_at = lu.solve(&theta_at).ok_or(Error::SingularPhi {
            sigma_min: sv[sv.len() - 1],
        })?;
        let inv_theta_bt = lu.solve(&theta_bt).ok_or(Error::SingularPhi {
            sigma_min: sv[sv.len() - 1],
        })?;
        let a_bar = &self.a + &self.b_s * &inv_theta_at;
        let b_bar = &self.b + &self.b_s * &inv_theta_bt;
        let mut m_mat = DMatrix::zeros(n + p, n + m);
        m_mat
            .view_mut((0, 0), (n, n))
            .copy_from(&(&a_bar - DMatrix::<f64>::identity(n, n)));
        m_mat.view_mut((0, n), (n, m)).copy_from(&b_bar);
        m_mat
            .view_mut((n, 0), (p, n))
            .copy_from(&(&self.c * &a_bar));
        m_mat
            .view_mut((n, n), (p, m))
            .copy_from(&(&self.c * &b_bar));
        Ok(m_mat)
    }

    /// Check that `M(Theta)` has full row rank `n + p` for every provided
    /// slope sample, judged by `sigma_min > 1e-8 * sigma_max`.
    pub fn rank_m_check(&self, thetas: &[DVector<f64>]) -> Result<bool> {
        for theta in thetas {
            let m_mat = self.assemble_m(theta)?;
            let sv = m_mat.svd(false, false).singular_values;
            let (n, _, p, _) = self.dims();
            if sv.len() < n + p {
                return Ok(false);
            }
            let largest = sv[0];
            let smallest = sv[n + p - 1];
            if smallest <= 1e-8 * largest {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Solve for the steady state `(x, s)` under a constant input, by Newton
    /// iteration on the combined fixed-point residual. Returns the steady
    /// output as well.
    pub fn steady_state(
        &self,
        u: &DVector<f64>,
        x_guess: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        let n = self.n();
        let mut x = x_guess.clone();
        for _ in 0..200 {
            let s = self.f_s(&x, u)?;
            let x_next = &self.a * &x + &self.b * u + &self.b_s * &s;
            let r = &x_next - &x;
            if r.amax() <= 1e-12 {
                let y = &self.c * &x;
                return Ok((x, s, y));
            }
            // dx_next/dx = A + B_s * dfs/dx with dfs/dx = Phi^-1 Theta A~.
            let v = self.preactivation(&x, u, &s);
            let theta = self.sigma_prime(&v);
            let nu = self.nu();
            let mut phi = DMatrix::<f64>::identity(nu, nu);
            for i in 0..nu {
                for j in 0..nu {
                    phi[(i, j)] -= theta[i] * self.b_s_tilde[(i, j)];
                }
            }
            let theta_at = DMatrix::from_fn(nu, n, |i, j| theta[i] * self.a_tilde[(i, j)]);
            let dfs_dx = phi.lu().solve(&theta_at).ok_or(Error::SingularPhi {
                sigma_min: 0.0,
            })?;
            let jac = &self.a + &self.b_s * &dfs_dx - DMatrix::<f64>::identity(n, n);
            let Some(step) = jac.lu().solve(&(-&r)) else {
                return Err(Error::NonConvergence {
                    context: "steady-state solve",
                    residual: r.amax(),
                    newton_iters: 0,
                    fallback_iters: 0,
                });
            };
            x += step;
        }
        let s = self.f_s(&x, u)?;
        let r = &self.a * &x + &self.b * u + &self.b_s * &s - &x;
        if r.amax() <= 1e-9 {
            let y = &self.c * &x;
            return Ok((x, s, y));
        }
        Err(Error::NonConvergence {
            context: "steady-state solve",
            residual: r.amax(),
            newton_iters: 200,
            fallback_iters: 0,
        })
    }

    /// Find the constant input that produces a target steady output, by
    /// Newton iteration through the steady-state map (square plants only).
    pub fn steady_input_for_output(
        &self,
        y_target: &DVector<f64>,
        u_guess: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        let (n, m, p, _) = self.dims();
        if m != p {
            return Err(Error::InvalidField {
                path: "dims".to_string(),
                message: format!("steady-input solve requires m == p, got m={m}, p={p}"),
            });
        }
        let mut u = u_guess.clone();
        let mut x = DVector::zeros(n);
        for _ in 0..100 {
            let (xs, s, y) = self.steady_state(&u, &x)?;
            x = xs;
            let r = &y - y_target;
            if r.amax() <= 1e-11 {
                return Ok((u, x, s));
            }
            // dy/du through the steady-state map: y = C x, x = (I - Abar)^-1 Bbar u
            // evaluated at the local slope sample.
            let v = self.preactivation(&x, &u, &s);
            let theta = self.sigma_prime(&v);
            let m_mat = self.assemble_m(&theta)?;
            // The lower-right block of M maps du to dy when dx rebalances:
            // solve [A-I+.., B+..; C(..), C(..)] [dx; du] = [0; dy].
            let lu = m_mat.lu();
            let mut rhs = DVector::zeros(n + p);
            rhs.rows_mut(n, p).copy_from(&(-&r));
            let Some(delta) = lu.solve(&rhs) else {
                return Err(Error::NonConvergence {
                    context: "steady-input solve",
                    residual: r.amax(),
                    newton_iters: 0,
                    fallback_iters: 0,
                });
            };
            x += delta.rows(0, n);
            u += delta.rows(n, m);
        }
        Err(Error::NonConvergence {
            context: "steady-input solve",
            residual: f64::INFINITY,
            newton_iters: 100,
            fallback_iters: 0,
        })
    }
}

/// Seed for the random slope subsampling used on wide activation layers.
const THETA_GRID_SEED: u64 = 0x5eed_c0de;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dm(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    fn scalar_model(a: f64, b: f64, b_s: f64, at: f64, bt: f64, bst: f64, c: f64) -> RnnModel {
        RnnModel {
            a: dm(1, 1, &[a]),
            b: dm(1, 1, &[b]),
            b_s: dm(1, 1, &[b_s]),
            a_tilde: dm(1, 1, &[at]),
            b_tilde: dm(1, 1, &[bt]),
            b_s_tilde: dm(1, 1, &[bst]),
            c: dm(1, 1, &[c]),
            activations: vec![Activation::Tanh],
        }
    }

    #[test]
    fn zero_point_is_fixed_point() {
        let model = scalar_model(0.5, 1.0, 0.2, 0.3, 0.1, 0.4, 1.0);
        let s = model
            .solve_implicit_layer(&DVector::zeros(1), &DVector::zeros(1), &DVector::zeros(1))
            .unwrap();
        assert_abs_diff_eq!(s[0], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn explicit_layer_when_no_feedback() {
        let model = scalar_model(0.5, 1.0, 0.2, 0.7, 0.3, 0.0, 1.0);
        let x = DVector::from_element(1, 0.4);
        let u = DVector::from_element(1, -0.2);
        let s = model.solve_implicit_layer(&x, &u, &DVector::zeros(1)).unwrap();
        let expected = (0.7_f64 * 0.4 + 0.3 * (-0.2)).tanh();
        assert_abs_diff_eq!(s[0], expected, epsilon = 1e-14);
    }

    #[test]
    fn scalar_fixed_point_matches_bisection_oracle() {
        // s = tanh(0.5 s + 1): bisection on the monotone residual to 1e-12
        // gives s* = 0.89521919617981042911 (frozen; 20-digit computation).
        let model = scalar_model(0.0, 0.0, 0.0, 0.0, 1.0, 0.5, 1.0);
        let x = DVector::zeros(1);
        let u = DVector::from_element(1, 1.0);
        let s = model.solve_implicit_layer(&x, &u, &DVector::zeros(1)).unwrap();
        assert_abs_diff_eq!(s[0], 0.8952191961798104, epsilon = 1e-10);
    }

    #[test]
    fn identity_dynamics_hold_state() {
        let model = scalar_model(1.0, 0.0, 0.0, 0.2, 0.1, 0.3, 1.0);
        let state = PlantState {
            x: DVector::from_element(1, 1.25),
            s: DVector::zeros(1),
            u_prev: DVector::zeros(1),
        };
        let (next, y) = model.step(&state, &DVector::from_element(1, 3.0)).unwrap();
        assert_abs_diff_eq!(next.x[0], 1.25, epsilon = 1e-14);
        assert_abs_diff_eq!(y[0], 1.25, epsilon = 1e-14);
    }

    #[test]
    fn step_is_bit_deterministic() {
        let model = scalar_model(0.5, 1.0, 0.2, 0.3, 0.1, 0.4, 1.0);
        let state = PlantState {
            x: DVector::from_element(1, 0.7),
            s: DVector::from_element(1, 0.1),
            u_prev: DVector::zeros(1),
        };
        let u = DVector::from_element(1, 0.3);
        let (s1, y1) = model.step(&state, &u).unwrap();
        let (s2, y2) = model.step(&state, &u).unwrap();
        assert_eq!(s1.x, s2.x);
        assert_eq!(s1.s, s2.s);
        assert_eq!(y1, y2);
    }
}
