//! Closed-loop experiment harness.
//!
//! A scenario pits certified designs against a surrogate "true plant": a
//! perturbed copy of the design model with scheduled disturbance injection.
//! Three mismatch classes are supported, separately schedulable:
//!
//! * multiplicative parameter perturbation of every model matrix (fixed for
//!   the whole run, seeded),
//! * an additive output disturbance over step windows,
//! * a multiplicative input-gain change over step windows (the plant sees
//!   `g(k) .* u(k)` while the controller believes it applied `u(k)`).
//!
//! The loop never lets an observer-based controller see true plant
//! internals: it receives only the measured output and its own estimates.
//! Every step is captured in a [`Trajectory`] record; runs are bit-exactly
//! deterministic for a fixed scenario.

use nalgebra::{DMatrix, DVector};

use crate::errors::{Error, Result};
use crate::gen::perturb_model;
use crate::model::{BoxConstraints, PlantState, RnnModel};
use crate::nmpc::{NmpcController, NmpcOptions, NmpcProblem, NmpcState};
use crate::runtime::{ObserverRuntime, TrackingRuntime};
use crate::synthesis::{terminal_radius, Gains, ObserverCertificate, TerminalIngredients};
use crate::velocity::VelocityForm;

/// Additive output offset active on the step window `[start, end)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputDisturbance {
    /// First step on which the offset is applied.
    pub start: usize,
    /// First step on which it no longer applies.
    pub end: usize,
    /// Offset added to the measured output, length `p`.
    pub offset: DVector<f64>,
}

/// Multiplicative input-gain change active on the step window `[start, end)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGainWindow {
    /// First step on which the scaling is applied.
    pub start: usize,
    /// First step on which it no longer applies.
    pub end: usize,
    /// Per-channel gain factors, length `m`.
    pub scale: DVector<f64>,
}

/// Reference change: from step `at` (inclusive) the output reference is
/// `y_ref`.
#[derive(Debug, Clone, PartialEq)]
pub struct SetpointStep {
    /// Step index at which the setpoint becomes active.
    pub at: usize,
    /// Output reference, length `p`.
    pub y_ref: DVector<f64>,
}

/// Which control law closes the loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    /// The certified static increment law.
    Static,
    /// The finite-horizon constrained solver.
    Nmpc,
}

/// What the controller is allowed to see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedbackKind {
    /// The controller reads the true plant state.
    StateFeedback,
    /// The controller reads the observer's a-priori estimate only.
    ObserverBased,
}

/// Fixed multiplicative parameter mismatch applied to the plant copy.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantPerturbation {
    /// Relative magnitude: each matrix entry is scaled by an independent
    /// factor from `[1 - magnitude, 1 + magnitude]`. Zero disables.
    pub magnitude: f64,
    /// Seed of the perturbation draw.
    pub seed: u64,
}

impl PlantPerturbation {
    /// No mismatch: the surrogate equals the design model.
    pub fn none() -> Self {
        PlantPerturbation {
            magnitude: 0.0,
            seed: 0,
        }
    }
}

/// A complete closed-loop experiment description.
#[derive(Debug, Clone)]
pub struct Scenario {
    /// Display name carried into reports.
    pub name: String,
    /// Design (nominal) model; the plant is a perturbed copy of it.
    pub model: RnnModel,
    /// Number of closed-loop steps.
    pub steps: usize,
    /// Sampling period in seconds (display/reporting scale only).
    pub sampling_s: f64,
    /// Reference schedule, step-sorted, first entry at step 0.
    pub setpoints: Vec<SetpointStep>,
    /// Input and output operating limits.
    pub cons: BoxConstraints,
    /// Control law.
    pub controller: ControllerKind,
    /// Feedback wiring.
    pub feedback: FeedbackKind,
    /// Horizon for the finite-horizon controller (ignored for static).
    pub horizon: usize,
    /// Stage weight on the increment state (`None` = identity).
    pub q_weight: Option<DMatrix<f64>>,
    /// Stage weight on the input increment (`None` = identity).
    pub r_weight: Option<DMatrix<f64>>,
    /// Plant-side parameter mismatch.
    pub perturbation: PlantPerturbation,
    /// Additive output-offset windows.
    pub output_disturbances: Vec<OutputDisturbance>,
    /// Input-gain change windows.
    pub input_gain_windows: Vec<InputGainWindow>,
    /// Initial plant state (`None` = rest).
    pub x0: Option<DVector<f64>>,
    /// State magnitude beyond which the run is declared divergent.
    pub divergence_limit: f64,
}

impl Scenario {
    /// A nominal tracking scenario: no mismatch, no disturbances, default
    /// weights, observer-based NMPC.
    pub fn tracking(
        name: &str,
        model: RnnModel,
        steps: usize,
        setpoints: Vec<SetpointStep>,
        cons: BoxConstraints,
        horizon: usize,
    ) -> Self {
        Scenario {
            name: name.to_string(),
            model,
            steps,
            sampling_s: 1.0,
            setpoints,
            cons,
            controller: ControllerKind::Nmpc,
            feedback: FeedbackKind::ObserverBased,
            horizon,
            q_weight: None,
            r_weight: None,
            perturbation: PlantPerturbation::none(),
            output_disturbances: Vec::new(),
            input_gain_windows: Vec::new(),
            x0: None,
            divergence_limit: 1e6,
        }
    }

    /// Schema-level checks: dimensions, ordering, window sanity.
    pub fn validate(&self) -> Result<()> {
        self.model.validate_shape()?;
        let (n, m, p, _) = self.model.dims();
        self.cons.validate(m, p)?;
        if self.steps == 0 {
            return Err(Error::InvalidField {
                path: "steps".to_string(),
                message: "must be at least 1".to_string(),
            });
        }
        if !(self.sampling_s.is_finite() && self.sampling_s > 0.0) {
            return Err(Error::InvalidField {
                path: "sampling_s".to_string(),
                message: "must be positive and finite".to_string(),
            });
        }
        if self.setpoints.is_empty() {
            return Err(Error::InvalidField {
                path: "setpoints".to_string(),
                message: "at least one setpoint is required".to_string(),
            });
        }
        if self.setpoints[0].at != 0 {
            return Err(Error::InvalidField {
                path: "setpoints[0].at".to_string(),
                message: "the first setpoint must start at step 0".to_string(),
            });
        }
        for (i, w) in self.setpoints.windows(2).enumerate() {
            if w[1].at <= w[0].at {
                return Err(Error::InvalidField {
                    path: format!("setpoints[{}].at", i + 1),
                    message: "steps must be strictly increasing".to_string(),
                });
            }
        }
        for (i, sp) in self.setpoints.iter().enumerate() {
            if sp.y_ref.len() != p {
                return Err(Error::DimensionMismatch {
                    path: format!("setpoints[{i}].y_ref"),
                    expected: format!("{p} entries"),
                    got: format!("{}", sp.y_ref.len()),
                });
            }
        }
        for (i, d) in self.output_disturbances.iter().enumerate() {
            if d.end <= d.start {
                return Err(Error::InvalidField {
                    path: format!("output_disturbances[{i}]"),
                    message: "window must be nonempty (end > start)".to_string(),
                });
            }
            if d.offset.len() != p {
                return Err(Error::DimensionMismatch {
                    path: format!("output_disturbances[{i}].offset"),
                    expected: format!("{p} entries"),
                    got: format!("{}", d.offset.len()),
                });
            }
        }
        for (i, g) in self.input_gain_windows.iter().enumerate() {
            if g.end <= g.start {
                return Err(Error::InvalidField {
                    path: format!("input_gain_windows[{i}]"),
                    message: "window must be nonempty (end > start)".to_string(),
                });
            }
            if g.scale.len() != m {
                return Err(Error::DimensionMismatch {
                    path: format!("input_gain_windows[{i}].scale"),
                    expected: format!("{m} entries"),
                    got: format!("{}", g.scale.len()),
                });
            }
        }
        if let Some(x0) = &self.x0 {
            if x0.len() != n {
                return Err(Error::DimensionMismatch {
                    path: "x0".to_string(),
                    expected: format!("{n} entries"),
                    got: format!("{}", x0.len()),
                });
            }
        }
        if self.controller == ControllerKind::Nmpc && self.horizon == 0 {
            return Err(Error::InvalidField {
                path: "horizon".to_string(),
                message: "must be at least 1 for the finite-horizon controller".to_string(),
            });
        }
        if !(self.divergence_limit.is_finite() && self.divergence_limit > 0.0) {
            return Err(Error::InvalidField {
                path: "divergence_limit".to_string(),
                message: "must be positive and finite".to_string(),
            });
        }
        Ok(())
    }

    /// Sum of output-disturbance offsets active at step `k`.
    pub fn disturbance_at(&self, k: usize) -> DVector<f64> {
        let p = self.model.p();
        let mut d = DVector::zeros(p);
        for w in &self.output_disturbances {
            if (w.start..w.end).contains(&k) {
                d += &w.offset;
            }
        }
        d
    }

    /// Product of input-gain factors active at step `k`.
    pub fn input_gain_at(&self, k: usize) -> DVector<f64> {
        let m = self.model.m();
        let mut g = DVector::from_element(m, 1.0);
        for w in &self.input_gain_windows {
            if (w.start..w.end).contains(&k) {
                g.component_mul_assign(&w.scale);
            }
        }
        g
    }

    /// The reference active at step `k`.
    pub fn reference_at(&self, k: usize) -> &DVector<f64> {
        let mut active = &self.setpoints[0].y_ref;
        for sp in &self.setpoints {
            if sp.at <= k {
                active = &sp.y_ref;
            } else {
                break;
            }
        }
        active
    }
}

/// Certified artifacts the loop runs with.
#[derive(Debug, Clone)]
pub struct Designs {
    /// Increment-feedback gains (static law and warm-start tail).
    pub gains: Gains,
    /// Terminal ingredients; required by the finite-horizon controller.
    pub terminal: Option<TerminalIngredients>,
    /// Observer gains; required by observer-based feedback.
    pub observer: Option<ObserverCertificate>,
    /// Lyapunov pair `(P_c, gamma_c)` of the static design, used to log the
    /// decrease sequence and region membership.
    pub lyapunov: Option<(DMatrix<f64>, f64)>,
}

/// One captured step of a closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Step index.
    pub k: usize,
    /// Time in seconds (`k * sampling_s`).
    pub t: f64,
    /// True plant state.
    pub x: DVector<f64>,
    /// State the controller saw (estimate, or the true state).
    pub x_hat: DVector<f64>,
    /// Output-offset estimate (zeros without an observer).
    pub d_hat: DVector<f64>,
    /// Input commanded by the controller (saturated into the box).
    pub u: DVector<f64>,
    /// Input increment relative to the previous step.
    pub du: DVector<f64>,
    /// Measured output (plant output plus injected disturbance).
    pub y: DVector<f64>,
    /// Active reference.
    pub y_ref: DVector<f64>,
    /// Increment state in the controller's coordinates.
    pub xi: DVector<f64>,
    /// Quadratic value `xi' P_c xi` (static, when the pair is known) or the
    /// attained horizon cost (finite-horizon controller).
    pub cost: f64,
    /// Smallest signed distance of the commanded input to its bounds
    /// (nonnegative = inside).
    pub margin_u: f64,
    /// Smallest signed distance of the measured output to its bounds.
    pub margin_y: f64,
    /// Terminal quadratic `xi(N)' Pf xi(N)` (finite-horizon controller) or
    /// the Lyapunov quadratic again (static).
    pub terminal_quad: f64,
    /// Whether the quadratic sits inside its certified region/radius.
    pub in_region: bool,
    /// Solver iterations spent this step (0 for the static law).
    pub solver_iterations: usize,
    /// Final solver KKT residual (0 for the static law).
    pub solver_kkt: f64,
}

/// A full closed-loop run: one record per step, in step order.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Scenario name the run came from.
    pub name: String,
    /// Sampling period in seconds.
    pub sampling_s: f64,
    /// Plant dimensions `(n, m, p)` fixing the column layout of exports.
    pub dims: (usize, usize, usize),
    /// Per-step records.
    pub records: Vec<StepRecord>,
}

/// Settling report for one constant-reference segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentReport {
    /// First step of the segment.
    pub start: usize,
    /// One past the last step of the segment.
    pub end: usize,
    /// Steps from the segment start until `|y - y_ref|` stays within the
    /// settling tolerance for the rest of the segment (`None` = never).
    pub settled_after: Option<usize>,
    /// Offset magnitude at the last step of the segment.
    pub final_offset: f64,
}

/// Aggregate statistics of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    /// Total steps.
    pub steps: usize,
    /// Largest input-bound excursion of the commanded input (0 = none).
    pub max_input_violation: f64,
    /// Largest output-bound excursion of the measured output (0 = none).
    pub max_output_violation: f64,
    /// Offset magnitude `|y - y_ref|` at the final step.
    pub final_offset: f64,
    /// Per-segment settling behaviour, one entry per constant-reference
    /// stretch, with the settling tolerance used.
    pub segments: Vec<SegmentReport>,
    /// Tolerance used for the settling test.
    pub settle_tol: f64,
    /// Largest solver iteration count over the run.
    pub max_solver_iterations: usize,
}

impl Trajectory {
    /// Aggregate statistics with the given settling tolerance.
    pub fn summarize(&self, settle_tol: f64) -> RunSummary {
        let mut max_iu = 0.0_f64;
        let mut max_oy = 0.0_f64;
        let mut max_iters = 0usize;
        for r in &self.records {
            max_iu = max_iu.max(-r.margin_u);
            max_oy = max_oy.max(-r.margin_y);
            max_iters = max_iters.max(r.solver_iterations);
        }
        let mut segments = Vec::new();
        let mut seg_start = 0usize;
        let mut i = 0usize;
        while i < self.records.len() {
            let same = |a: &StepRecord, b: &StepRecord| a.y_ref == b.y_ref;
            if i + 1 == self.records.len() || !same(&self.records[i], &self.records[i + 1]) {
                let end = i + 1;
                // Last index after which the offset stays within tolerance.
                let mut settled = None;
                for j in (seg_start..end).rev() {
                    let off = (&self.records[j].y - &self.records[j].y_ref).amax();
                    if off > settle_tol {
                        break;
                    }
                    settled = Some(j - seg_start);
                }
                let final_offset = (&self.records[end - 1].y - &self.records[end - 1].y_ref).amax();
                segments.push(SegmentReport {
                    start: seg_start,
                    end,
                    settled_after: settled,
                    final_offset,
                });
                seg_start = end;
            }
            i += 1;
        }
        let final_offset = self
            .records
            .last()
            .map(|r| (&r.y - &r.y_ref).amax())
            .unwrap_or(0.0);
        RunSummary {
            steps: self.records.len(),
            max_input_violation: max_iu,
            max_output_violation: max_oy,
            final_offset,
            segments,
            settle_tol,
            max_solver_iterations: max_iters,
        }
    }
}

fn box_margin(v: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
    let mut margin = f64::INFINITY;
    for i in 0..v.len() {
        if hi[i].is_finite() {
            margin = margin.min(hi[i] - v[i]);
        }
        if lo[i].is_finite() {
            margin = margin.min(v[i] - lo[i]);
        }
    }
    margin
}

fn at_step(step: usize) -> impl Fn(Error) -> Error {
    move |e| Error::AtStep {
        step,
        source: Box::new(e),
    }
}

enum LoopController {
    Static(Box<TrackingRuntime>),
    Nmpc(Box<NmpcController>),
}

/// Run a scenario against its designs and capture the full trajectory.
///
/// Fails with [`Error::Diverged`] when the plant state leaves the trusted
/// range; every other runtime error is tagged with the step index.
pub fn run(scenario: &Scenario, designs: &Designs) -> Result<Trajectory> {
    scenario.validate()?;
    let model = &scenario.model;
    let (n, m, p, nu) = model.dims();
    let plant_model = if scenario.perturbation.magnitude > 0.0 {
        perturb_model(model, scenario.perturbation.magnitude, scenario.perturbation.seed)
    } else {
        model.clone()
    };

    let x0 = scenario
        .x0
        .clone()
        .unwrap_or_else(|| DVector::zeros(n));
    let u0 = DVector::zeros(m);
    let mut plant = PlantState {
        x: x0.clone(),
        s: DVector::zeros(nu),
        u_prev: u0.clone(),
    };

    let mut y_ref = scenario.setpoints[0].y_ref.clone();
    let mut controller = match scenario.controller {
        ControllerKind::Static => {
            let rt = TrackingRuntime::new(model, &designs.gains, y_ref.clone(), &x0, &u0)
                .map_err(at_step(0))?;
            LoopController::Static(Box::new(rt))
        }
        ControllerKind::Nmpc => {
            let terminal = designs.terminal.as_ref().ok_or_else(|| Error::InvalidField {
                path: "designs.terminal".to_string(),
                message: "terminal ingredients are required for the finite-horizon controller"
                    .to_string(),
            })?;
            let vf = VelocityForm::new(model);
            let q = scenario
                .q_weight
                .clone()
                .unwrap_or_else(|| DMatrix::identity(vf.n_xi(), vf.n_xi()));
            let r = scenario
                .r_weight
                .clone()
                .unwrap_or_else(|| DMatrix::identity(m, m));
            let problem = NmpcProblem::new(
                model,
                &designs.gains,
                q,
                r,
                terminal,
                scenario.cons.clone(),
                scenario.horizon,
            )?;
            LoopController::Nmpc(Box::new(NmpcController::new(problem, NmpcOptions::default())))
        }
    };
    let mut observer = match scenario.feedback {
        FeedbackKind::StateFeedback => None,
        FeedbackKind::ObserverBased => {
            let cert = designs.observer.as_ref().ok_or_else(|| Error::InvalidField {
                path: "designs.observer".to_string(),
                message: "observer gains are required for observer-based feedback".to_string(),
            })?;
            Some(ObserverRuntime::new(
                model,
                &cert.l,
                &cert.l_tilde,
                &x0,
                &DVector::zeros(p),
            ))
        }
    };

    // The seen state is what the controller is wired to: the true plant
    // state, or the observer's a-priori estimate.
    let mut x_seen_prev = x0.clone();
    let mut u_prev = u0.clone();
    let mut records = Vec::with_capacity(scenario.steps);
    let mut setpoint_idx = 0usize;

    for k in 0..scenario.steps {
        // Reference schedule.
        while setpoint_idx + 1 < scenario.setpoints.len()
            && scenario.setpoints[setpoint_idx + 1].at <= k
        {
            setpoint_idx += 1;
            y_ref = scenario.setpoints[setpoint_idx].y_ref.clone();
            match &mut controller {
                LoopController::Static(rt) => rt.set_reference(y_ref.clone()),
                LoopController::Nmpc(ctrl) => {
                    // The terminal radius depends on the operating point
                    // through the constraint offsets; re-level it here.
                    if let Some(terminal) = designs.terminal.as_ref() {
                        if ctrl.problem.gamma_f.is_finite() {
                            let gamma = terminal_radius(
                                model,
                                &terminal.p,
                                &terminal.lambda,
                                &scenario.cons,
                                &y_ref,
                                &u_prev,
                                &Default::default(),
                            )
                            .map_err(at_step(k))?;
                            ctrl.problem.gamma_f = gamma;
                        }
                    }
                    ctrl.reset_warm_start();
                }
            }
        }

        // Measure: true output plus scheduled disturbance.
        let y_meas = &plant_model.c * &plant.x + scenario.disturbance_at(k);

        let (x_seen, d_hat) = match (&observer, scenario.feedback) {
            (Some(obs), FeedbackKind::ObserverBased) => (obs.x_hat(), obs.d_hat()),
            _ => (plant.x.clone(), DVector::zeros(p)),
        };

        // Control.
        let (u, cost, terminal_quad, in_region, iters, kkt) = match &mut controller {
            LoopController::Static(rt) => {
                let u = rt
                    .control_within(&x_seen, &y_meas, &scenario.cons)
                    .map_err(at_step(k))?;
                let mut xi = DVector::zeros(n + p);
                for i in 0..n {
                    xi[i] = x_seen[i] - x_seen_prev[i];
                }
                for i in 0..p {
                    xi[n + i] = y_meas[i] - y_ref[i];
                }
                let (v, member) = match &designs.lyapunov {
                    Some((p_c, gamma_c)) => {
                        let v = (p_c * &xi).dot(&xi);
                        (v, v <= gamma_c * (1.0 + 1e-9))
                    }
                    None => (f64::NAN, false),
                };
                (u, v, v, member, 0, 0.0)
            }
            LoopController::Nmpc(ctrl) => {
                let st = NmpcState {
                    x: x_seen.clone(),
                    x_prev: x_seen_prev.clone(),
                    u_prev: u_prev.clone(),
                    y: y_meas.clone(),
                    y_ref: y_ref.clone(),
                };
                let sol = ctrl.step(&st).map_err(at_step(k))?;
                let member = !ctrl.problem.gamma_f.is_finite()
                    || sol.terminal_quad <= ctrl.problem.gamma_f * (1.0 + 1e-9);
                (
                    sol.u[0].clone(),
                    sol.cost,
                    sol.terminal_quad,
                    member,
                    sol.iterations,
                    sol.kkt,
                )
            }
        };

        // The observer learns from what was commanded and measured.
        if let Some(obs) = observer.as_mut() {
            obs.update(&u, &y_meas).map_err(at_step(k))?;
        }

        let mut xi = DVector::zeros(n + p);
        for i in 0..n {
            xi[i] = x_seen[i] - x_seen_prev[i];
        }
        for i in 0..p {
            xi[n + i] = y_meas[i] - y_ref[i];
        }
        records.push(StepRecord {
            k,
            t: k as f64 * scenario.sampling_s,
            x: plant.x.clone(),
            x_hat: x_seen.clone(),
            d_hat,
            u: u.clone(),
            du: &u - &u_prev,
            y: y_meas.clone(),
            y_ref: y_ref.clone(),
            xi,
            cost,
            margin_u: box_margin(&u, &scenario.cons.u_min, &scenario.cons.u_max),
            margin_y: box_margin(&y_meas, &scenario.cons.y_min, &scenario.cons.y_max),
            terminal_quad,
            in_region,
            solver_iterations: iters,
            solver_kkt: kkt,
        });

        // Actuate: the plant sees the gain-scaled input.
        let u_eff = scenario.input_gain_at(k).component_mul(&u);
        let (next, _) = plant_model.step(&plant, &u_eff).map_err(at_step(k))?;
        plant = next;
        let mag = plant.x.amax();
        if !mag.is_finite() || mag > scenario.divergence_limit {
            return Err(Error::Diverged { step: k, norm: mag });
        }

        x_seen_prev = x_seen;
        u_prev = u;
    }

    Ok(Trajectory {
        name: scenario.name.clone(),
        sampling_s: scenario.sampling_s,
        dims: (n, m, p),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::{random_model, GenConfig};
    use crate::synthesis::{
        design_controller, design_observer, design_terminal, ControllerOptions, ObserverOptions,
        TerminalOptions,
    };

    fn steady_reference(model: &RnnModel, u_level: f64) -> DVector<f64> {
        let m = model.m();
        let (_, _, y) = model
            .steady_state(&DVector::from_element(m, u_level), &DVector::zeros(model.n()))
            .unwrap();
        y
    }

    fn static_designs(model: &RnnModel) -> Designs {
        let cert = design_controller(model, &ControllerOptions::default()).unwrap();
        Designs {
            gains: cert.gains.clone(),
            terminal: None,
            observer: None,
            lyapunov: Some((cert.p.clone(), cert.gamma)),
        }
    }

    #[test]
    fn static_nominal_run_reaches_reference() {
        let model = random_model(&GenConfig::stable(3, 1, 1, 2, 2));
        let designs = static_designs(&model);
        let y_ref = steady_reference(&model, 0.2);
        let mut sc = Scenario::tracking(
            "nominal-static",
            model,
            400,
            vec![SetpointStep { at: 0, y_ref }],
            BoxConstraints::unbounded(1, 1),
            1,
        );
        sc.controller = ControllerKind::Static;
        sc.feedback = FeedbackKind::StateFeedback;
        let traj = run(&sc, &designs).unwrap();
        assert_eq!(traj.records.len(), 400);
        for w in traj.records.windows(2) {
            assert!(w[1].t > w[0].t, "time must be strictly increasing");
        }
        let last = traj.records.last().unwrap();
        assert!(
            (&last.y - &last.y_ref).amax() <= 1e-6,
            "offset {:.3e}",
            (&last.y - &last.y_ref).amax()
        );
    }

    #[test]
    fn runs_are_bit_identical() {
        let model = random_model(&GenConfig::stable(3, 1, 1, 2, 2));
        let designs = static_designs(&model);
        let y_ref = steady_reference(&model, 0.15);
        let mut sc = Scenario::tracking(
            "replay",
            model,
            120,
            vec![SetpointStep { at: 0, y_ref }],
            BoxConstraints::unbounded(1, 1),
            1,
        );
        sc.controller = ControllerKind::Static;
        sc.feedback = FeedbackKind::StateFeedback;
        sc.perturbation = PlantPerturbation {
            magnitude: 0.03,
            seed: 7,
        };
        let a = run(&sc, &designs).unwrap();
        let b = run(&sc, &designs).unwrap();
        assert_eq!(a, b, "identical scenario must replay bit-identically");
    }

    #[test]
    fn output_disturbance_window_recovers_offset_free() {
        // Mid-run additive output step of amplitude 0.15: the loop must pull
        // the measured output back to the reference before each window edge
        // and after the window clears.
        let model = random_model(&GenConfig::stable(3, 1, 1, 2, 2));
        let ctrl = design_controller(&model, &ControllerOptions::default()).unwrap();
        let obs = design_observer(&model, &ObserverOptions::default()).unwrap();
        let designs = Designs {
            gains: ctrl.gains.clone(),
            terminal: None,
            observer: Some(obs),
            lyapunov: Some((ctrl.p.clone(), ctrl.gamma)),
        };
        let y_ref = steady_reference(&model, 0.2);
        let mut sc = Scenario::tracking(
            "disturbance-window",
            model,
            600,
            vec![SetpointStep { at: 0, y_ref }],
            BoxConstraints::unbounded(1, 1),
            1,
        );
        sc.controller = ControllerKind::Static;
        sc.feedback = FeedbackKind::ObserverBased;
        sc.output_disturbances = vec![OutputDisturbance {
            start: 200,
            end: 400,
            offset: DVector::from_element(1, 0.15),
        }];
        let traj = run(&sc, &designs).unwrap();
        for probe in [195..200, 395..400, 595..600] {
            for k in probe {
                let r = &traj.records[k];
                assert!(
                    (&r.y - &r.y_ref).amax() <= 1e-3,
                    "step {k}: offset {:.3e}",
                    (&r.y - &r.y_ref).amax()
                );
            }
        }
        // The estimator actually carries the offset while the window is on.
        let mid = &traj.records[399];
        assert!(
            (mid.d_hat[0] - 0.15).abs() <= 1e-3,
            "estimated offset {:.4}",
            mid.d_hat[0]
        );
    }

    #[test]
    fn input_gain_mismatch_stays_offset_free_with_nmpc() {
        // Input-gain scaling by 1.6 over a window, horizon controller with
        // observer feedback: the loop re-trims and holds the reference.
        let model = random_model(&GenConfig::stable(3, 1, 1, 2, 2));
        let ctrl = design_controller(&model, &ControllerOptions::default()).unwrap();
        let obs = design_observer(&model, &ObserverOptions::default()).unwrap();
        let y_ref = steady_reference(&model, 0.15);
        let cons = BoxConstraints {
            u_min: DVector::from_element(1, -0.6),
            u_max: DVector::from_element(1, 0.6),
            y_min: DVector::from_element(1, -0.8),
            y_max: DVector::from_element(1, 0.8),
        };
        let terminal = design_terminal(
            &model,
            &ctrl.gains,
            &DMatrix::identity(4, 4),
            &DMatrix::identity(1, 1),
            &cons,
            &y_ref,
            &DVector::zeros(1),
            &TerminalOptions::default(),
        )
        .unwrap();
        let designs = Designs {
            gains: ctrl.gains.clone(),
            terminal: Some(terminal),
            observer: Some(obs),
            lyapunov: None,
        };
        let mut sc = Scenario::tracking(
            "gain-mismatch",
            model,
            300,
            vec![SetpointStep { at: 0, y_ref }],
            cons,
            8,
        );
        sc.input_gain_windows = vec![InputGainWindow {
            start: 100,
            end: 200,
            scale: DVector::from_element(1, 1.6),
        }];
        let traj = run(&sc, &designs).unwrap();
        for probe in [95..100, 195..200, 295..300] {
            for k in probe {
                let r = &traj.records[k];
                assert!(
                    (&r.y - &r.y_ref).amax() <= 1e-3,
                    "step {k}: offset {:.3e}",
                    (&r.y - &r.y_ref).amax()
                );
            }
        }
        // Hard input enforcement: every commanded input inside the box.
        for r in &traj.records {
            assert!(r.margin_u >= 0.0, "step {}: input outside box", r.k);
        }
    }

    #[test]
    fn summary_matches_record_arithmetic() {
        let model = random_model(&GenConfig::stable(3, 1, 1, 2, 2));
        let designs = static_designs(&model);
        let y_a = steady_reference(&model, 0.1);
        let y_b = steady_reference(&model, 0.25);
        let mut sc = Scenario::tracking(
            "summary",
            model,
            240,
            vec![
                SetpointStep { at: 0, y_ref: y_a },
                SetpointStep {
                    at: 120,
                    y_ref: y_b,
                },
            ],
            BoxConstraints::unbounded(1, 1),
            1,
        );
        sc.controller = ControllerKind::Static;
        sc.feedback = FeedbackKind::StateFeedback;
        let traj = run(&sc, &designs).unwrap();
        let summary = traj.summarize(1e-3);
        assert_eq!(summary.steps, 240);
        assert_eq!(summary.segments.len(), 2);
        assert_eq!(summary.segments[0].start, 0);
        assert_eq!(summary.segments[0].end, 120);
        assert_eq!(summary.segments[1].start, 120);
        assert_eq!(summary.segments[1].end, 240);
        let last = traj.records.last().unwrap();
        let expect = (&last.y - &last.y_ref).amax();
        assert_eq!(summary.final_offset, expect);
        // Both segments settle, and the settle index marks the first step
        // after which the offset stays inside the tolerance.
        for seg in &summary.segments {
            let idx = seg.settled_after.expect("segment should settle");
            for k in (seg.start + idx)..seg.end {
                let r = &traj.records[k];
                assert!((&r.y - &r.y_ref).amax() <= 1e-3);
            }
            if idx > 0 {
                let r = &traj.records[seg.start + idx - 1];
                assert!((&r.y - &r.y_ref).amax() > 1e-3);
            }
        }
    }

    #[test]
    fn open_loop_unstable_plant_reports_divergence() {
        let model = random_model(&GenConfig::unstable(3, 1, 1, 2, 5));
        // Zero gains: no feedback at all, so the unstable plant runs open
        // loop from a nonzero state and must blow past the limit.
        let designs = Designs {
            gains: Gains {
                k: DMatrix::zeros(1, 4),
                k_tilde: DMatrix::zeros(1, 2),
            },
            terminal: None,
            observer: None,
            lyapunov: None,
        };
        let mut sc = Scenario::tracking(
            "divergence",
            model,
            4000,
            vec![SetpointStep {
                at: 0,
                y_ref: DVector::zeros(1),
            }],
            BoxConstraints::unbounded(1, 1),
            1,
        );
        sc.controller = ControllerKind::Static;
        sc.feedback = FeedbackKind::StateFeedback;
        sc.x0 = Some(DVector::from_element(3, 0.1));
        sc.divergence_limit = 1e3;
        let err = run(&sc, &designs).unwrap_err();
        match err {
            Error::Diverged { norm, .. } => assert!(norm > 1e3),
            other => panic!("expected divergence, got {other}"),
        }
    }
}
