//! Velocity-form reformulation of the implicit RNN plant.
//!
//! The augmented state stacks the state increment with the output offset
//! from a reference:
//!
//! ```text
//! xi(k) = [ x(k) - x(k-1) ]      (dimension n_xi = n + p)
//!         [ y(k) - y_ref  ]
//! ```
//!
//! Differencing the plant equations gives the exact increment dynamics
//!
//! ```text
//! xi(k+1) = Av xi(k) + Bv du(k) + Bsv ds(k)
//! Av = [ A   0 ]    Bv = [ B  ]    Bsv = [ B_s  ]
//!      [ CA  I ]         [ CB ]          [ CB_s ]
//! ```
//!
//! where `du` and `ds` are the input and activation increments. Integral
//! action is built in: any equilibrium of the augmented dynamics has zero
//! offset. The reformulation is exact — no linearization is involved.
//!
//! [`VelocityForm::lift`] expresses `xi(k)` directly from the previous
//! state-input pair, and [`VelocityForm::unlift`] inverts that map by
//! Newton iteration (square plants with a full-rank steady-state matrix).

use nalgebra::{DMatrix, DVector};

use crate::errors::{Error, Result};
use crate::model::RnnModel;

/// Precomputed velocity-form matrices for one plant.
#[derive(Debug, Clone)]
pub struct VelocityForm {
    /// The underlying plant.
    pub model: RnnModel,
    /// Augmented state matrix `[A 0; CA I]`, `n_xi x n_xi`.
    pub a_v: DMatrix<f64>,
    /// Augmented input matrix `[B; CB]`, `n_xi x m`.
    pub b_v: DMatrix<f64>,
    /// Augmented activation matrix `[B_s; CB_s]`, `n_xi x nu`.
    pub b_s_v: DMatrix<f64>,
    /// Augmented pre-activation read-out `[A~ 0]`, `nu x n_xi`.
    pub a_tilde_v: DMatrix<f64>,
    /// Lift read-out `[A-I B B_s; CA CB CB_s]`, `n_xi x (n+m+nu)`:
    /// maps `[x; u; f_s(x,u)]` at time `k-1` to `xi(k) + [0; y_ref]`.
    pub c_lift: DMatrix<f64>,
}

impl VelocityForm {
    /// Assemble the augmented matrices for a plant.
    pub fn new(model: &RnnModel) -> Self {
        let (n, m, p, nu) = model.dims();
        let n_xi = n + p;
        let ca = &model.c * &model.a;
        let cb = &model.c * &model.b;
        let cbs = &model.c * &model.b_s;

        let mut a_v = DMatrix::zeros(n_xi, n_xi);
        a_v.view_mut((0, 0), (n, n)).copy_from(&model.a);
        a_v.view_mut((n, 0), (p, n)).copy_from(&ca);
        a_v.view_mut((n, n), (p, p))
            .copy_from(&DMatrix::identity(p, p));

        let mut b_v = DMatrix::zeros(n_xi, m);
        b_v.view_mut((0, 0), (n, m)).copy_from(&model.b);
        b_v.view_mut((n, 0), (p, m)).copy_from(&cb);

        let mut b_s_v = DMatrix::zeros(n_xi, nu);
        b_s_v.view_mut((0, 0), (n, nu)).copy_from(&model.b_s);
        b_s_v.view_mut((n, 0), (p, nu)).copy_from(&cbs);

        let mut a_tilde_v = DMatrix::zeros(nu, n_xi);
        a_tilde_v
            .view_mut((0, 0), (nu, n))
            .copy_from(&model.a_tilde);

        let mut c_lift = DMatrix::zeros(n_xi, n + m + nu);
        c_lift
            .view_mut((0, 0), (n, n))
            .copy_from(&(&model.a - DMatrix::<f64>::identity(n, n)));
        c_lift.view_mut((0, n), (n, m)).copy_from(&model.b);
        c_lift.view_mut((0, n + m), (n, nu)).copy_from(&model.b_s);
        c_lift.view_mut((n, 0), (p, n)).copy_from(&ca);
        c_lift.view_mut((n, n), (p, m)).copy_from(&cb);
        c_lift.view_mut((n, n + m), (p, nu)).copy_from(&cbs);

        VelocityForm {
            model: model.clone(),
            a_v,
            b_v,
            b_s_v,
            a_tilde_v,
            c_lift,
        }
    }

    /// Augmented state dimension `n + p`.
    pub fn n_xi(&self) -> usize {
        self.a_v.nrows()
    }

    /// One exact step of the increment dynamics.
    pub fn step(&self, xi: &DVector<f64>, du: &DVector<f64>, ds: &DVector<f64>) -> DVector<f64> {
        &self.a_v * xi + &self.b_v * du + &self.b_s_v * ds
    }

    /// `xi(k)` expressed from the previous pair `(x, u) = (x(k-1), u(k-1))`
    /// with the implicit-layer solution `s = f_s(x, u)` already known.
    pub fn lift_with_s(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        s: &DVector<f64>,
        y_ref: &DVector<f64>,
    ) -> DVector<f64> {
        let (n, m, p, nu) = self.model.dims();
        let mut phi = DVector::zeros(n + m + nu);
        phi.rows_mut(0, n).copy_from(x);
        phi.rows_mut(n, m).copy_from(u);
        phi.rows_mut(n + m, nu).copy_from(s);
        let mut xi = &self.c_lift * phi;
        for i in 0..p {
            xi[n + i] -= y_ref[i];
        }
        xi
    }

    /// `xi(k)` expressed from the previous pair `(x, u) = (x(k-1), u(k-1))`.
    pub fn lift(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        y_ref: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let s = self.model.f_s(x, u)?;
        Ok(self.lift_with_s(x, u, &s, y_ref))
    }

    /// Activation increment between consecutive pairs:
    /// `f_s(x, u) - f_s(x_prev, u_prev)`.
    pub fn delta_s(
        &self,
        x_prev: &DVector<f64>,
        u_prev: &DVector<f64>,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let s_prev = self.model.f_s(x_prev, u_prev)?;
        let s = self.model.f_s(x, u)?;
        Ok(s - s_prev)
    }

    /// Invert the lift: find `(x, u)` with `lift(x, u, y_ref) = xi`.
    ///
    /// Newton iteration with the steady-state matrix `M(Theta)` evaluated at
    /// the current slope sample as the exact Jacobian; requires a square
    /// plant (`m == p`). `x0, u0` seed the iteration.
    pub fn unlift(
        &self,
        xi: &DVector<f64>,
        y_ref: &DVector<f64>,
        x0: &DVector<f64>,
        u0: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let (n, m, p, _) = self.model.dims();
        if m != p {
            return Err(Error::InvalidField {
                path: "dims".to_string(),
                message: format!("lift inversion requires m == p, got m={m}, p={p}"),
            });
        }
        let mut x = x0.clone();
        let mut u = u0.clone();
        let mut s = self.model.f_s(&x, &u)?;
        let mut r = self.lift_with_s(&x, &u, &s, y_ref) - xi;
        for _ in 0..100 {
            if r.amax() <= 1e-11 {
                return Ok((x, u));
            }
            let v = self.model.preactivation(&x, &u, &s);
            let theta = self.model.sigma_prime(&v);
            let m_mat = self.model.assemble_m(&theta)?;
            let Some(delta) = m_mat.lu().solve(&(-&r)) else {
                return Err(Error::NonConvergence {
                    context: "lift inversion (singular Jacobian)",
                    residual: r.amax(),
                    newton_iters: 0,
                    fallback_iters: 0,
                });
            };
            // Backtracking on the residual norm.
            let r_norm = r.norm();
            let mut t = 1.0;
            let mut advanced = false;
            for _ in 0..8 {
                let x_c = &x + t * delta.rows(0, n);
                let u_c = &u + t * delta.rows(n, m);
                let s_c = self.model.f_s(&x_c, &u_c)?;
                let r_c = self.lift_with_s(&x_c, &u_c, &s_c, y_ref) - xi;
                if r_c.norm() < r_norm {
                    x = x_c;
                    u = u_c;
                    s = s_c;
                    r = r_c;
                    advanced = true;
                    break;
                }
                t *= 0.5;
            }
            if !advanced {
                break;
            }
        }
        if r.amax() <= 1e-9 {
            return Ok((x, u));
        }
        Err(Error::NonConvergence {
            context: "lift inversion",
            residual: r.amax(),
            newton_iters: 100,
            fallback_iters: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::{random_model, random_vector, GenConfig};
    use approx::assert_abs_diff_eq;

    /// Straight-line simulation oracle: track `x(k)` explicitly and form
    /// increments by direct subtraction.
    fn simulate(
        model: &RnnModel,
        x0: &DVector<f64>,
        inputs: &[DVector<f64>],
    ) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let mut xs = vec![x0.clone()];
        let mut ss = Vec::new();
        for u in inputs {
            let x = xs.last().unwrap();
            let s = model.f_s(x, u).unwrap();
            let x_next = &model.a * x + &model.b * u + &model.b_s * &s;
            ss.push(s);
            xs.push(x_next);
        }
        (xs, ss)
    }

    #[test]
    fn increment_dynamics_match_direct_differences() {
        for seed in 0..20 {
            let model = random_model(&GenConfig::stable(4, 2, 2, 3, seed));
            let vf = VelocityForm::new(&model);
            let steps = 100;
            let x0 = random_vector(4, 0.3, 1000 + seed);
            let inputs: Vec<DVector<f64>> = (0..steps + 1)
                .map(|k| random_vector(2, 0.4, seed * 7919 + k as u64))
                .collect();
            let (xs, ss) = simulate(&model, &x0, &inputs);
            let y_ref = DVector::zeros(2);
            let y = |k: usize| &model.c * &xs[k];
            for k in 1..steps {
                let xi_k = {
                    let mut v = DVector::zeros(vf.n_xi());
                    v.rows_mut(0, 4).copy_from(&(&xs[k] - &xs[k - 1]));
                    v.rows_mut(4, 2).copy_from(&(y(k) - &y_ref));
                    v
                };
                let xi_next_direct = {
                    let mut v = DVector::zeros(vf.n_xi());
                    v.rows_mut(0, 4).copy_from(&(&xs[k + 1] - &xs[k]));
                    v.rows_mut(4, 2).copy_from(&(y(k + 1) - &y_ref));
                    v
                };
                let du = &inputs[k] - &inputs[k - 1];
                let ds = &ss[k] - &ss[k - 1];
                let xi_next = vf.step(&xi_k, &du, &ds);
                assert!(
                    (&xi_next - &xi_next_direct).amax() < 1e-8,
                    "seed {seed} step {k}: {}",
                    (&xi_next - &xi_next_direct).amax()
                );
            }
        }
    }

    #[test]
    fn lift_matches_direct_increment() {
        let model = random_model(&GenConfig::stable(5, 2, 2, 3, 42));
        let vf = VelocityForm::new(&model);
        let x0 = random_vector(5, 0.4, 9);
        let inputs: Vec<DVector<f64>> = (0..3).map(|k| random_vector(2, 0.5, 50 + k)).collect();
        let (xs, _) = simulate(&model, &x0, &inputs);
        let y_ref = random_vector(2, 0.2, 77);
        for k in 1..xs.len() {
            let xi = vf.lift(&xs[k - 1], &inputs[k - 1], &y_ref).unwrap();
            let dx = &xs[k] - &xs[k - 1];
            let eps = &model.c * &xs[k] - &y_ref;
            for i in 0..5 {
                assert_abs_diff_eq!(xi[i], dx[i], epsilon = 1e-10);
            }
            for i in 0..2 {
                assert_abs_diff_eq!(xi[5 + i], eps[i], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn lift_jacobian_is_steady_state_matrix() {
        let model = random_model(&GenConfig::stable(4, 2, 2, 2, 5));
        let vf = VelocityForm::new(&model);
        let x = random_vector(4, 0.3, 21);
        let u = random_vector(2, 0.3, 22);
        let y_ref = DVector::zeros(2);
        let s = model.f_s(&x, &u).unwrap();
        let v = model.preactivation(&x, &u, &s);
        let theta = model.sigma_prime(&v);
        let m_mat = model.assemble_m(&theta).unwrap();
        let base = vf.lift(&x, &u, &y_ref).unwrap();
        let h = 1e-7;
        for col in 0..6 {
            let mut xp = x.clone();
            let mut up = u.clone();
            if col < 4 {
                xp[col] += h;
            } else {
                up[col - 4] += h;
            }
            let lifted = vf.lift(&xp, &up, &y_ref).unwrap();
            let fd = (lifted - &base) / h;
            for row in 0..6 {
                assert_abs_diff_eq!(fd[row], m_mat[(row, col)], epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn unlift_recovers_the_pair() {
        let mut checked = 0;
        for seed in 0..10 {
            let model = random_model(&GenConfig::stable(4, 2, 2, 3, 100 + seed));
            if !model.rank_m_check(&model.theta_grid()).unwrap() {
                continue;
            }
            let vf = VelocityForm::new(&model);
            let y_ref = DVector::zeros(2);
            for trial in 0..100 {
                let x = random_vector(4, 0.4, seed * 1000 + trial);
                let u = random_vector(2, 0.4, seed * 1000 + 500 + trial);
                let xi = vf.lift(&x, &u, &y_ref).unwrap();
                let x0 = random_vector(4, 0.05, 333);
                let u0 = random_vector(2, 0.05, 334);
                let (xr, ur) = vf.unlift(&xi, &y_ref, &x0, &u0).unwrap();
                assert!((&xr - &x).amax() < 1e-7, "seed {seed} trial {trial}");
                assert!((&ur - &u).amax() < 1e-7, "seed {seed} trial {trial}");
                checked += 1;
            }
        }
        assert!(checked >= 500, "too few full-rank models: {checked}");
    }

    #[test]
    fn non_square_plants_cannot_unlift() {
        let model = random_model(&GenConfig::stable(4, 2, 1, 2, 3));
        let vf = VelocityForm::new(&model);
        let err = vf
            .unlift(
                &DVector::zeros(5),
                &DVector::zeros(1),
                &DVector::zeros(4),
                &DVector::zeros(2),
            )
            .unwrap_err();
        assert!(matches!(err, Error::InvalidField { .. }));
    }
}
