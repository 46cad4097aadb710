//! Online execution of certified designs.
//!
//! Two recursions run in real time:
//!
//! * [`StaticIncrementLaw`] / [`TrackingRuntime`] — the certified static
//!   feedback `du = K xi + K~ ds`. The activation increment `ds` is itself
//!   implicit in `du`, so each step solves a small fixed point whose
//!   well-posedness is certified by the design's multiplier condition.
//! * [`ObserverRuntime`] — the disturbance-augmented prediction observer
//!   with state and pre-activation innovation injection.
//!
//! Both halt with a [`crate::errors::Error::NonConvergence`] if an implicit
//! solve fails; callers treat that as runtime divergence rather than
//! silently continuing with an inconsistent state.

use nalgebra::DVector;

use crate::errors::Result;
use crate::model::{BoxConstraints, RnnModel};
use crate::synthesis::{closed_loop, observer_form, ClosedLoop, Gains, ObserverForm};
use crate::velocity::VelocityForm;

/// Static increment feedback with its closed-loop matrices precomputed.
#[derive(Debug, Clone)]
pub struct StaticIncrementLaw {
    /// Velocity form of the plant the law was designed for.
    pub vf: VelocityForm,
    /// Closed-loop matrices under the gains.
    pub cl: ClosedLoop,
    /// The gains themselves.
    pub gains: Gains,
}

impl StaticIncrementLaw {
    /// Precompute the closed-loop matrices for a gain pair.
    pub fn new(model: &RnnModel, gains: &Gains) -> Self {
        let vf = VelocityForm::new(model);
        let cl = closed_loop(&vf, gains);
        StaticIncrementLaw {
            vf,
            cl,
            gains: gains.clone(),
        }
    }

    /// The plant the law runs against.
    pub fn model(&self) -> &RnnModel {
        &self.vf.model
    }

    /// Solve the coupled control increment at one step.
    ///
    /// Given the increment state `xi` and the previous pre-activation
    /// `v_prev`, the activation increment satisfies
    /// `ds = sigma(v_prev + A~K xi + B~sK ds) - sigma(v_prev)`; the shift
    /// `tau = ds + sigma(v_prev)` turns this into the standard fixed-point
    /// form handled by the plant's layer solver. Returns `(du, ds)`.
    pub fn increment(
        &self,
        xi: &DVector<f64>,
        v_prev: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let model = self.model();
        let s_base = model.sigma(v_prev);
        let w = v_prev + &self.cl.a_tilde_k * xi - &self.cl.b_s_tilde_k * &s_base;
        let tau = model.solve_activation_fixed_point(
            &w,
            &self.cl.b_s_tilde_k,
            &s_base,
            "closed-loop activation increment",
        )?;
        let ds = tau - s_base;
        let du = &self.gains.k * xi + &self.gains.k_tilde * &ds;
        Ok((du, ds))
    }
}

/// Stateful tracking loop around a [`StaticIncrementLaw`]: remembers the
/// previous state, input, and pre-activation, and forms the increment
/// state from the measured output and the active reference.
#[derive(Debug, Clone)]
pub struct TrackingRuntime {
    /// The law being executed.
    pub law: StaticIncrementLaw,
    /// Active output reference.
    pub y_ref: DVector<f64>,
    x_prev: DVector<f64>,
    u_prev: DVector<f64>,
    s_prev: DVector<f64>,
    v_prev: DVector<f64>,
}

impl TrackingRuntime {
    /// Start the loop at an operating pair `(x0, u0)`; the first step sees
    /// a zero state increment by construction.
    pub fn new(
        model: &RnnModel,
        gains: &Gains,
        y_ref: DVector<f64>,
        x0: &DVector<f64>,
        u0: &DVector<f64>,
    ) -> Result<Self> {
        let law = StaticIncrementLaw::new(model, gains);
        let s0 = model.f_s(x0, u0)?;
        let v0 = model.preactivation(x0, u0, &s0);
        Ok(TrackingRuntime {
            law,
            y_ref,
            x_prev: x0.clone(),
            u_prev: u0.clone(),
            s_prev: s0,
            v_prev: v0,
        })
    }

    /// Change the output reference (takes effect at the next step).
    pub fn set_reference(&mut self, y_ref: DVector<f64>) {
        self.y_ref = y_ref;
    }

    /// The input applied at the previous step.
    pub fn previous_input(&self) -> &DVector<f64> {
        &self.u_prev
    }

    /// Increment state `[x - x_prev; y - y_ref]` from a state (estimate)
    /// and a measured output.
    pub fn increment_state(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let n = x.len();
        let p = y.len();
        let mut xi = DVector::zeros(n + p);
        for i in 0..n {
            xi[i] = x[i] - self.x_prev[i];
        }
        for i in 0..p {
            xi[n + i] = y[i] - self.y_ref[i];
        }
        xi
    }

    /// One step of the law: form the increment state, solve the coupled
    /// increment, and advance the memory with the exactly realized
    /// activation state at the new pair. Returns the input to apply.
    pub fn control(&mut self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        let xi = self.increment_state(x, y);
        let (du, ds) = self.law.increment(&xi, &self.v_prev)?;
        let u = &self.u_prev + du;
        let model = self.law.model();
        // Re-anchor the memory at the realized pair instead of accumulating
        // increments, so solver tolerances cannot drift the recursion.
        let s = model.solve_implicit_layer(x, &u, &(&self.s_prev + &ds))?;
        self.v_prev = model.preactivation(x, &u, &s);
        self.x_prev = x.clone();
        self.s_prev = s;
        self.u_prev = u.clone();
        Ok(u)
    }

    /// Like [`control`](Self::control), but the returned input is saturated
    /// into the box before the memory advances, so the recursion stays
    /// anchored at the input that is actually applied. The law carries no
    /// constraint certificate under saturation; callers log excursions.
    pub fn control_within(
        &mut self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        cons: &BoxConstraints,
    ) -> Result<DVector<f64>> {
        let xi = self.increment_state(x, y);
        let (du, _) = self.law.increment(&xi, &self.v_prev)?;
        let mut u = &self.u_prev + du;
        for j in 0..u.len() {
            u[j] = u[j].clamp(cons.u_min[j], cons.u_max[j]);
        }
        let model = self.law.model();
        // The clamp invalidates the solved activation increment, so the
        // layer is re-solved at the realized pair from the plain warm start.
        let s = model.solve_implicit_layer(x, &u, &self.s_prev)?;
        self.v_prev = model.preactivation(x, &u, &s);
        self.x_prev = x.clone();
        self.s_prev = s;
        self.u_prev = u.clone();
        Ok(u)
    }
}

/// Disturbance-augmented prediction observer.
///
/// Tracks the a-priori estimate `eta(k) = [x_hat(k); d_hat(k)]` of the
/// plant state and a constant output offset. Each update consumes the
/// applied input and the measurement of the current step:
///
/// ```text
/// e_y(k)   = y(k) - C_e eta(k)
/// s_hat(k) solves s = sigma(A~_e eta(k) + B~ u(k) + L~ e_y(k) + B_s~ s)
/// eta(k+1) = A_e eta(k) + B_e u(k) + B_s_e s_hat(k) + L e_y(k)
/// ```
#[derive(Debug, Clone)]
pub struct ObserverRuntime {
    model: RnnModel,
    of: ObserverForm,
    l: nalgebra::DMatrix<f64>,
    l_tilde: nalgebra::DMatrix<f64>,
    eta: DVector<f64>,
    s_warm: DVector<f64>,
}

impl ObserverRuntime {
    /// Start from initial state and offset estimates.
    pub fn new(
        model: &RnnModel,
        l: &nalgebra::DMatrix<f64>,
        l_tilde: &nalgebra::DMatrix<f64>,
        x0_hat: &DVector<f64>,
        d0_hat: &DVector<f64>,
    ) -> Self {
        let of = observer_form(model);
        let n = model.n();
        let p = model.p();
        let mut eta = DVector::zeros(n + p);
        eta.rows_mut(0, n).copy_from(x0_hat);
        eta.rows_mut(n, p).copy_from(d0_hat);
        ObserverRuntime {
            model: model.clone(),
            of,
            l: l.clone(),
            l_tilde: l_tilde.clone(),
            eta,
            s_warm: DVector::zeros(model.nu()),
        }
    }

    /// Current a-priori state estimate.
    pub fn x_hat(&self) -> DVector<f64> {
        self.eta.rows(0, self.model.n()).into_owned()
    }

    /// Current a-priori output-offset estimate.
    pub fn d_hat(&self) -> DVector<f64> {
        self.eta.rows(self.model.n(), self.model.p()).into_owned()
    }

    /// Full augmented estimate.
    pub fn eta(&self) -> &DVector<f64> {
        &self.eta
    }

    /// Advance the prediction with the applied input `u(k)` and the
    /// measurement `y(k)`.
    pub fn update(&mut self, u: &DVector<f64>, y: &DVector<f64>) -> Result<()> {
        let e_y = y - &self.of.c_e * &self.eta;
        let w = &self.of.a_tilde_e * &self.eta + &self.model.b_tilde * u + &self.l_tilde * &e_y;
        let s_hat = self.model.solve_activation_fixed_point(
            &w,
            &self.model.b_s_tilde,
            &self.s_warm,
            "observer implicit layer",
        )?;
        self.eta =
            &self.of.a_e * &self.eta + &self.of.b_e * u + &self.of.b_s_e * &s_hat + &self.l * &e_y;
        self.s_warm = s_hat;
        Ok(())
    }
}
