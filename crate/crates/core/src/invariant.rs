//! Ellipsoidal validity regions and their radii.
//!
//! A certificate quantified by `P` is valid on the sublevel set
//! `E(P, gamma) = { xi : xi' P xi <= gamma }` as long as every visited point
//! keeps a family of constraint rows satisfied. Rows act on the lifted
//! vector `phi(x, u) = [x; u; f_s(x, u)]` of the state-input pair that
//! produces `xi`; the radius program is
//!
//! ```text
//! gamma* = max gamma  s.t.  sup { g_i' phi(x,u) : xi(x,u) in E(P,gamma) } <= b_i  for all i
//! ```
//!
//! Each inner supremum is monotone in `gamma`, so `gamma*` is found by
//! bisection (relative tolerance 1e-4). Inner suprema are computed by
//! multi-start projected gradient ascent through the lift inversion, with
//! exact closed forms for rows that are linear in the region variable. A
//! sampling guard re-checks the returned radius on random interior points.
//!
//! Observer-error regions live in error space `e` with the activation
//! increment parameterized exactly by per-channel slopes, which makes every
//! row linear in `e` and the radius available in closed form per slope
//! sample.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::errors::{Error, Result};
use crate::model::{BoxConstraints, RnnModel};
use crate::sector::SectorBound;
use crate::velocity::VelocityForm;

/// One linear constraint row over the lifted vector `[x; u; s]`.
#[derive(Debug, Clone)]
pub struct PhiRow {
    /// Row coefficients, length `n + m + nu`.
    pub g: DVector<f64>,
    /// Right-hand bound.
    pub bound: f64,
    /// Human-readable origin of the row (for diagnostics).
    pub label: String,
}

/// Rows confining pre-activations to the sector validity box
/// `|A~ x + B~ u + B_s~ s| <= radius(lambda)`, two rows per channel.
/// Channels with infinite radius contribute nothing.
pub fn sector_validity_rows(model: &RnnModel, lambda: &SectorBound) -> Vec<PhiRow> {
    let (n, m, _, nu) = model.dims();
    let radii = lambda.radii(&model.activations);
    let mut rows = Vec::new();
    for i in 0..nu {
        if !radii[i].is_finite() {
            continue;
        }
        let mut g = DVector::zeros(n + m + nu);
        for j in 0..n {
            g[j] = model.a_tilde[(i, j)];
        }
        for j in 0..m {
            g[n + j] = model.b_tilde[(i, j)];
        }
        for j in 0..nu {
            g[n + m + j] = model.b_s_tilde[(i, j)];
        }
        rows.push(PhiRow {
            g: g.clone(),
            bound: radii[i],
            label: format!("preactivation[{i}] upper"),
        });
        rows.push(PhiRow {
            g: -g,
            bound: radii[i],
            label: format!("preactivation[{i}] lower"),
        });
    }
    rows
}

/// Rows enforcing input and output boxes on the lifted vector. Infinite
/// bounds are skipped.
pub fn input_output_rows(model: &RnnModel, cons: &BoxConstraints) -> Vec<PhiRow> {
    let (n, m, p, nu) = model.dims();
    let mut rows = Vec::new();
    for j in 0..m {
        if cons.u_max[j].is_finite() {
            let mut g = DVector::zeros(n + m + nu);
            g[n + j] = 1.0;
            rows.push(PhiRow {
                g,
                bound: cons.u_max[j],
                label: format!("input[{j}] upper"),
            });
        }
        if cons.u_min[j].is_finite() {
            let mut g = DVector::zeros(n + m + nu);
            g[n + j] = -1.0;
            rows.push(PhiRow {
                g,
                bound: -cons.u_min[j],
                label: format!("input[{j}] lower"),
            });
        }
    }
    for i in 0..p {
        if cons.y_max[i].is_finite() {
            let mut g = DVector::zeros(n + m + nu);
            for j in 0..n {
                g[j] = model.c[(i, j)];
            }
            rows.push(PhiRow {
                g,
                bound: cons.y_max[i],
                label: format!("output[{i}] upper"),
            });
        }
        if cons.y_min[i].is_finite() {
            let mut g = DVector::zeros(n + m + nu);
            for j in 0..n {
                g[j] = -model.c[(i, j)];
            }
            rows.push(PhiRow {
                g,
                bound: -cons.y_min[i],
                label: format!("output[{i}] lower"),
            });
        }
    }
    rows
}

/// The pre-image of an ellipsoid in augmented-increment space under the
/// lift, anchored at a steady pair (the region center, where the lift is
/// zero).
pub struct LiftedRegion<'a> {
    /// Velocity form of the plant.
    pub vf: &'a VelocityForm,
    /// Output reference defining the offset coordinate.
    pub y_ref: DVector<f64>,
    /// Steady state paired with `y_ref`.
    pub x_ref: DVector<f64>,
    /// Steady input paired with `y_ref`.
    pub u_ref: DVector<f64>,
}

impl<'a> LiftedRegion<'a> {
    /// Region centered at the origin steady state (always a steady state:
    /// all activations vanish at zero).
    pub fn origin(vf: &'a VelocityForm) -> Self {
        let (n, m, p, _) = vf.model.dims();
        LiftedRegion {
            vf,
            y_ref: DVector::zeros(p),
            x_ref: DVector::zeros(n),
            u_ref: DVector::zeros(m),
        }
    }

    /// Region centered at the steady pair for a setpoint, solved from an
    /// input guess.
    pub fn at_setpoint(
        vf: &'a VelocityForm,
        y_ref: &DVector<f64>,
        u_guess: &DVector<f64>,
    ) -> Result<Self> {
        let (u_ref, x_ref, _) = vf.model.steady_input_for_output(y_ref, u_guess)?;
        Ok(LiftedRegion {
            vf,
            y_ref: y_ref.clone(),
            x_ref,
            u_ref,
        })
    }

    fn phi_value(&self, x: &DVector<f64>, u: &DVector<f64>, g: &DVector<f64>) -> Result<f64> {
        let phi = self.vf.model.phi(x, u)?;
        Ok(g.dot(&phi))
    }
}

/// Tuning for radius computations.
#[derive(Debug, Clone)]
pub struct GammaOptions {
    /// Ascent starts per row during bisection probes.
    pub starts_probe: usize,
    /// Ascent starts per row for the final verification pass.
    pub starts_final: usize,
    /// Projected-gradient iteration budget per start.
    pub pg_iters: usize,
    /// Relative bisection tolerance on the radius.
    pub rel_tol: f64,
    /// Random interior points for the soundness guard (0 disables).
    pub guard_samples: usize,
    /// Seed for start generation and the guard sampler.
    pub seed: u64,
}

impl Default for GammaOptions {
    fn default() -> Self {
        GammaOptions {
            starts_probe: 8,
            starts_final: 50,
            pg_iters: 150,
            rel_tol: 1e-4,
            guard_samples: 100_000,
            seed: 0xA11CE,
        }
    }
}

/// Exact maximum of a linear functional over an ellipsoid:
/// `max { g'z : z' P z <= gamma } = sqrt(gamma * g' P^-1 g)`.
pub fn ellipsoid_linear_max(p: &DMatrix<f64>, gamma: f64, g: &DVector<f64>) -> Result<f64> {
    let sol = p
        .clone()
        .lu()
        .solve(g)
        .ok_or_else(|| Error::NumericalFailure("singular shape matrix".to_string()))?;
    Ok((gamma * g.dot(&sol)).max(0.0).sqrt())
}

/// Cached geometry of the ellipsoid `{ z : z' P z <= gamma }`.
pub struct EllipsoidGeom {
    p: DMatrix<f64>,
    p_inv_sqrt: DMatrix<f64>,
}

impl EllipsoidGeom {
    /// Eigendecompose the shape matrix; fails if it is not positive
    /// definite.
    pub fn new(p: &DMatrix<f64>) -> Result<Self> {
        let eig = p.clone().symmetric_eigen();
        let mut inv_sqrt_vals = eig.eigenvalues.clone();
        for v in inv_sqrt_vals.iter_mut() {
            if *v <= 0.0 {
                return Err(Error::NumericalFailure(
                    "region shape matrix is not positive definite".to_string(),
                ));
            }
            *v = 1.0 / v.sqrt();
        }
        let p_inv_sqrt =
            &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt_vals) * eig.eigenvectors.transpose();
        Ok(EllipsoidGeom {
            p: p.clone(),
            p_inv_sqrt,
        })
    }

    fn quad(&self, xi: &DVector<f64>) -> f64 {
        xi.dot(&(&self.p * xi))
    }

    fn apply_p_inv(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.p_inv_sqrt * (&self.p_inv_sqrt * v)
    }

    /// The boundary point maximizing a linear functional `<g, .>` over
    /// `E(P, gamma)`: `sqrt(gamma / g'P^-1 g) * P^-1 g`.
    fn linear_maximizer(&self, g: &DVector<f64>, gamma: f64) -> Option<DVector<f64>> {
        let pg = self.apply_p_inv(g);
        let denom = g.dot(&pg);
        if denom <= 1e-300 {
            return None;
        }
        Some(pg * (gamma / denom).sqrt())
    }

    /// A boundary point in the metric-scaled direction `d`.
    fn boundary_point(&self, d: &DVector<f64>, gamma: f64) -> DVector<f64> {
        let y = &self.p_inv_sqrt * d;
        let q = self.quad(&y);
        if q <= 0.0 {
            DVector::zeros(d.len())
        } else {
            y * (gamma / q).sqrt()
        }
    }
}

fn gaussian_vector(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| {
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

/// Row value and its gradient with respect to the region variable, chained
/// through the lift inversion at the current pair.
fn row_value_and_grad(
    region: &LiftedRegion<'_>,
    x: &DVector<f64>,
    u: &DVector<f64>,
    g: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let model = &region.vf.model;
    let (n, m, _, nu) = model.dims();
    let s = model.f_s(x, u)?;
    let mut val = 0.0;
    for j in 0..n {
        val += g[j] * x[j];
    }
    for j in 0..m {
        val += g[n + j] * u[j];
    }
    for j in 0..nu {
        val += g[n + m + j] * s[j];
    }
    let v = model.preactivation(x, u, &s);
    let theta = model.sigma_prime(&v);
    // d s / d (x,u) = Phi^-1 Theta [A~ B~]
    let mut phi_mat = DMatrix::<f64>::identity(nu, nu);
    for i in 0..nu {
        for j in 0..nu {
            phi_mat[(i, j)] -= theta[i] * model.b_s_tilde[(i, j)];
        }
    }
    let mut rhs = DMatrix::zeros(nu, n + m);
    for i in 0..nu {
        for j in 0..n {
            rhs[(i, j)] = theta[i] * model.a_tilde[(i, j)];
        }
        for j in 0..m {
            rhs[(i, n + j)] = theta[i] * model.b_tilde[(i, j)];
        }
    }
    let ds_dxu = phi_mat
        .lu()
        .solve(&rhs)
        .ok_or(Error::SingularPhi { sigma_min: 0.0 })?;
    let g_s = g.rows(n + m, nu);
    let mut eff = DVector::zeros(n + m);
    for j in 0..(n + m) {
        eff[j] = g[j];
        for i in 0..nu {
            eff[j] += g_s[i] * ds_dxu[(i, j)];
        }
    }
    // d(row)/d xi = M^-T * eff
    let m_mat = model.assemble_m(&theta)?;
    let grad = m_mat
        .transpose()
        .lu()
        .solve(&eff)
        .ok_or(Error::SingularPhi { sigma_min: 0.0 })?;
    Ok((val, grad))
}

/// Supremum of one row over the lifted pre-image of `E(P, gamma)`:
/// multi-start conditional-gradient ascent in region coordinates. Each
/// iteration jumps toward the exact ellipsoid maximizer of the linearized
/// row (so exactly linear rows converge in one step) with a backtracking
/// line search along the convex combination, and the lift is inverted by
/// warm-started Newton steps.
pub fn row_max_lifted(
    region: &LiftedRegion<'_>,
    geom: &EllipsoidGeom,
    gamma: f64,
    row: &PhiRow,
    starts: usize,
    pg_iters: usize,
    seed: u64,
) -> Result<f64> {
    let n_xi = geom.p.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = f64::NEG_INFINITY;
    for start in 0..starts.max(1) {
        let mut xi = if start == 0 {
            DVector::zeros(n_xi)
        } else {
            let d = gaussian_vector(&mut rng, n_xi);
            geom.boundary_point(&d, gamma)
        };
        let mut x = region.x_ref.clone();
        let mut u = region.u_ref.clone();
        if xi.amax() > 0.0 {
            match region.vf.unlift(&xi, &region.y_ref, &x, &u) {
                Ok((xs, us)) => {
                    x = xs;
                    u = us;
                }
                Err(_) => continue,
            }
        }
        let (mut val, mut grad) = row_value_and_grad(region, &x, &u, &row.g)?;
        for _ in 0..pg_iters {
            let Some(cand) = geom.linear_maximizer(&grad, gamma) else {
                break;
            };
            let gap = grad.dot(&(&cand - &xi));
            if gap <= 1e-12 * (1.0 + val.abs()) {
                break;
            }
            let mut alpha = 1.0;
            let mut advanced = false;
            for _ in 0..14 {
                let xi_try = (1.0 - alpha) * &xi + alpha * &cand;
                match region.vf.unlift(&xi_try, &region.y_ref, &x, &u) {
                    Ok((xt, ut)) => {
                        let (vt, gt) = row_value_and_grad(region, &xt, &ut, &row.g)?;
                        if vt > val + 1e-15 {
                            xi = xi_try;
                            x = xt;
                            u = ut;
                            val = vt;
                            grad = gt;
                            advanced = true;
                            break;
                        }
                    }
                    Err(_) => {}
                }
                alpha *= 0.5;
            }
            if !advanced {
                break;
            }
        }
        if val > best {
            best = val;
        }
    }
    Ok(best)
}

fn rows_satisfied(
    region: &LiftedRegion<'_>,
    geom: &EllipsoidGeom,
    gamma: f64,
    rows: &[PhiRow],
    starts: usize,
    pg_iters: usize,
    seed: u64,
) -> Result<bool> {
    for (i, row) in rows.iter().enumerate() {
        let sup = row_max_lifted(region, geom, gamma, row, starts, pg_iters, seed + i as u64)?;
        if sup > row.bound {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Largest radius `gamma` whose lifted pre-image satisfies every row, by
/// bisection over monotone feasibility probes. Returns infinity when no
/// finite rows are present or none of them ever binds.
pub fn max_gamma_lifted(
    region: &LiftedRegion<'_>,
    p: &DMatrix<f64>,
    rows: &[PhiRow],
    opts: &GammaOptions,
) -> Result<f64> {
    if rows.is_empty() {
        return Ok(f64::INFINITY);
    }
    // The center must be strictly interior to every row.
    for (i, row) in rows.iter().enumerate() {
        let center = region.phi_value(&region.x_ref, &region.u_ref, &row.g)?;
        if center >= row.bound - 1e-12 {
            return Err(Error::EmptyInterior { row: i, gamma: 0.0 });
        }
    }
    let geom = EllipsoidGeom::new(p)?;
    let mut lo = 0.0_f64;
    let mut hi = 1e-3_f64;
    loop {
        if !rows_satisfied(
            region,
            &geom,
            hi,
            rows,
            opts.starts_probe,
            opts.pg_iters,
            opts.seed,
        )? {
            break;
        }
        lo = hi;
        hi *= 4.0;
        if hi > 1e9 {
            return Ok(f64::INFINITY);
        }
    }
    while hi - lo > opts.rel_tol * hi.max(1e-12) {
        let mid = 0.5 * (lo + hi);
        if rows_satisfied(
            region,
            &geom,
            mid,
            rows,
            opts.starts_probe,
            opts.pg_iters,
            opts.seed,
        )? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Final pass with the full start budget; shrink if it finds violations
    // the probe pass missed.
    let mut gamma = lo;
    for _ in 0..60 {
        if gamma <= 0.0 {
            return Err(Error::EmptyInterior { row: 0, gamma });
        }
        if rows_satisfied(
            region,
            &geom,
            gamma,
            rows,
            opts.starts_final,
            opts.pg_iters,
            opts.seed ^ 0x5157,
        )? {
            break;
        }
        gamma *= 0.995;
    }
    if opts.guard_samples > 0 {
        soundness_guard(region, p, gamma, rows, opts.guard_samples, opts.seed ^ 0x9a7d)?;
    }
    Ok(gamma)
}

/// Re-check a radius on random interior points: every sampled pair must
/// satisfy all rows to `1e-6` slack. Errors with the violating row label.
pub fn soundness_guard(
    region: &LiftedRegion<'_>,
    p: &DMatrix<f64>,
    gamma: f64,
    rows: &[PhiRow],
    samples: usize,
    seed: u64,
) -> Result<()> {
    if rows.is_empty() || !gamma.is_finite() {
        return Ok(());
    }
    let geom = EllipsoidGeom::new(p)?;
    let n_xi = p.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = region.x_ref.clone();
    let mut u = region.u_ref.clone();
    for _ in 0..samples {
        let d = gaussian_vector(&mut rng, n_xi);
        let radius: f64 = rng.random::<f64>().powf(1.0 / n_xi as f64);
        let xi = geom.boundary_point(&d, gamma) * radius;
        let (xs, us) = match region.vf.unlift(&xi, &region.y_ref, &x, &u) {
            Ok(pair) => pair,
            Err(_) => {
                // Retry cold from the center before giving up on the point.
                region
                    .vf
                    .unlift(&xi, &region.y_ref, &region.x_ref, &region.u_ref)?
            }
        };
        x = xs;
        u = us;
        for row in rows {
            let val = region.phi_value(&x, &u, &row.g)?;
            if val > row.bound + 1e-6 {
                return Err(Error::DomainViolation {
                    channel: row.label.clone(),
                    value: val,
                    bound: row.bound,
                });
            }
        }
    }
    Ok(())
}

/// Ingredients of the observer-error validity program: rows bound the
/// estimation-side pre-activation increments, which are linear in the error
/// once the activation increment is parameterized by per-channel slopes.
pub struct ObserverRegion {
    /// Error-side pre-activation map `A~_e - L~ C_e`, `nu x n_e`.
    pub a_tilde_e_l: DMatrix<f64>,
    /// Activation feedback `B_s~`.
    pub b_s_tilde: DMatrix<f64>,
    /// Innovation injection rows `L~ C_e`, `nu x n_e`.
    pub l_tilde_c_e: DMatrix<f64>,
    /// Validity radii per channel (infinite entries drop their rows).
    pub radii: DVector<f64>,
    /// Slope lower bounds per channel.
    pub lambda: DVector<f64>,
}

/// Largest `gamma` such that every error in `E(P_o, gamma)` keeps all
/// observer validity rows satisfied. Exact per slope sample (linear rows
/// over an ellipsoid scale as `sqrt(gamma)`), with the worst case over the
/// feasible slope box found by grid search plus seeded hill climbing.
pub fn max_gamma_observer(reg: &ObserverRegion, p_o: &DMatrix<f64>) -> Result<f64> {
    let nu = reg.b_s_tilde.nrows();
    let mut worst_ratio: f64 = 0.0; // max over rows of coeff / radius
    let mut any = false;
    // Unit-radius coefficient of a linear row: sqrt(g' P^-1 g).
    let coeff = |g: &DVector<f64>| -> Result<f64> { ellipsoid_linear_max(p_o, 1.0, g) };
    for i in 0..nu {
        if !reg.radii[i].is_finite() {
            continue;
        }
        any = true;
        // Innovation rows: |(L~ C_e e)_i| <= radius.
        let g_inn = reg.l_tilde_c_e.row(i).transpose();
        worst_ratio = worst_ratio.max(coeff(&g_inn)? / reg.radii[i]);
    }
    // Increment rows: |(A~_el e + B_s~ ds)_i| with ds = (I - Theta B_s~)^-1
    // Theta A~_el e for a diagonal slope sample Theta in [lambda, 1].
    let eval_theta = |theta: &DVector<f64>| -> Result<f64> {
        let mut phi = DMatrix::<f64>::identity(nu, nu);
        for i in 0..nu {
            for j in 0..nu {
                phi[(i, j)] -= theta[i] * reg.b_s_tilde[(i, j)];
            }
        }
        let theta_a = DMatrix::from_fn(nu, reg.a_tilde_e_l.ncols(), |i, j| {
            theta[i] * reg.a_tilde_e_l[(i, j)]
        });
        let ds_de = phi
            .lu()
            .solve(&theta_a)
            .ok_or(Error::SingularPhi { sigma_min: 0.0 })?;
        let total = &reg.a_tilde_e_l + &reg.b_s_tilde * ds_de;
        let mut ratio: f64 = 0.0;
        for i in 0..nu {
            if !reg.radii[i].is_finite() {
                continue;
            }
            let g = total.row(i).transpose();
            ratio = ratio.max(coeff(&g)? / reg.radii[i]);
        }
        Ok(ratio)
    };
    if any {
        const LEVELS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
        let mut best_theta = DVector::from_element(nu, 1.0);
        let mut best_ratio = eval_theta(&best_theta)?;
        if nu <= 5 {
            let total = LEVELS.len().pow(nu as u32);
            for idx in 0..total {
                let mut rem = idx;
                let mut theta = DVector::zeros(nu);
                for (i, t) in theta.iter_mut().enumerate() {
                    let frac = LEVELS[rem % LEVELS.len()];
                    rem /= LEVELS.len();
                    *t = reg.lambda[i] + frac * (1.0 - reg.lambda[i]);
                }
                let r = eval_theta(&theta)?;
                if r > best_ratio {
                    best_ratio = r;
                    best_theta = theta;
                }
            }
        }
        // Seeded hill climb refines the grid optimum inside the slope box.
        let mut rng = ChaCha8Rng::seed_from_u64(0x0b5e);
        let mut radius = 0.25;
        for _ in 0..200 {
            let cand = DVector::from_fn(nu, |i, _| {
                (best_theta[i] + rng.random_range(-radius..radius))
                    .clamp(reg.lambda[i], 1.0)
            });
            let r = eval_theta(&cand)?;
            if r > best_ratio {
                best_ratio = r;
                best_theta = cand;
            } else {
                radius *= 0.97;
            }
        }
        worst_ratio = worst_ratio.max(best_ratio);
    }
    if !any || worst_ratio <= 0.0 {
        return Ok(f64::INFINITY);
    }
    // sqrt(gamma) * worst_ratio = 1  at the binding radius.
    Ok(1.0 / (worst_ratio * worst_ratio))
}
