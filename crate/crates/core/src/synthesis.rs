//! Certificate synthesis by semidefinite programming.
//!
//! Three designs are produced over the velocity form of a plant:
//!
//! * **Controller** — a static increment feedback `du = K xi + K~ ds`
//!   together with a Lyapunov certificate `(P, S)` proving contraction of
//!   the augmented increment state, hence offset-free tracking. Gains come
//!   from a convexified program in transformed variables
//!   (`Q = P^-1`, `Z = K Q`, `U = S^-1`, `Z~ = K~ U`); the certificate is
//!   then re-solved at fixed gains with the flattest admissible `P`.
//! * **Terminal ingredients** — `(P_f, S_f)` bounding the infinite-horizon
//!   tail cost of the auxiliary law for given stage weights, plus the
//!   radius `gamma_f` on which the terminal set keeps constraints and
//!   sector validity.
//! * **Observer** — injection gains `(L, L~)` for the disturbance-augmented
//!   state with a contraction certificate for the estimation error; with
//!   the substitution `W = P L`, `W~ = S L~` the global-sector design is a
//!   single semidefinite solve.
//!
//! The sector information enters every design through one multiplier
//! matrix, assembled by [`sector_multiplier`]; it vanishes on the global
//! sector and credits the tighter slope bound inside a finite validity
//! region otherwise.

use nalgebra::{DMatrix, DVector};

use crate::errors::{Error, Result};
use crate::invariant::{
    input_output_rows, max_gamma_lifted, max_gamma_observer, sector_validity_rows, GammaOptions,
    LiftedRegion, ObserverRegion,
};
use crate::lmi::{min_symmetric_eigenvalue, LmiProgram};
use crate::model::{BoxConstraints, RnnModel};
use crate::sector::SectorBound;
use crate::velocity::VelocityForm;

/// Static increment-feedback gains `du = K xi + K~ ds`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gains {
    /// State-increment gain, `m x n_xi`.
    pub k: DMatrix<f64>,
    /// Activation-increment gain, `m x nu`.
    pub k_tilde: DMatrix<f64>,
}

/// Closed-loop matrices of the velocity form under increment feedback.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    /// `Av + Bv K`.
    pub a_k: DMatrix<f64>,
    /// `Bsv + Bv K~`.
    pub b_s_k: DMatrix<f64>,
    /// `A~v + B~ K` (pre-activation read-out).
    pub a_tilde_k: DMatrix<f64>,
    /// `B_s~ + B~ K~` (pre-activation feedback).
    pub b_s_tilde_k: DMatrix<f64>,
}

/// Assemble the closed-loop matrices for gains over a velocity form.
pub fn closed_loop(vf: &VelocityForm, gains: &Gains) -> ClosedLoop {
    ClosedLoop {
        a_k: &vf.a_v + &vf.b_v * &gains.k,
        b_s_k: &vf.b_s_v + &vf.b_v * &gains.k_tilde,
        a_tilde_k: &vf.a_tilde_v + &vf.model.b_tilde * &gains.k,
        b_s_tilde_k: &vf.model.b_s_tilde + &vf.model.b_tilde * &gains.k_tilde,
    }
}

/// Well-posedness form `(I - B)' S + S (I - B)` for an activation feedback
/// matrix `B` and diagonal multiplier `S`.
pub fn wellposedness_form(b: &DMatrix<f64>, s: &DVector<f64>) -> DMatrix<f64> {
    let nu = b.nrows();
    let s_mat = DMatrix::from_diagonal(s);
    let i_minus_b = DMatrix::identity(nu, nu) - b;
    i_minus_b.transpose() * &s_mat + &s_mat * i_minus_b
}

/// Sector multiplier matrix on the stacked variable `[xi; ds]`.
///
/// With `F = [A, B - I]`, `G = [-Lambda A, I - Lambda B]` the incremental
/// sector condition reads `z' (F'SG + G'SF) z >= 0` on the validity region.
/// The multiplier is defined so that it vanishes on the global sector:
///
/// ```text
/// M(Lambda) = [0    A'S ]  -  (F'SG + G'SF)
///             [SA  -U_S ]
/// ```
///
/// where `U_S = (I-B)'S + S(I-B)`. Adding `M(Lambda)` to a decrease
/// inequality credits the slope lower bound.
pub fn sector_multiplier(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    s: &DVector<f64>,
    lambda: &DVector<f64>,
) -> DMatrix<f64> {
    let nu = b.nrows();
    let k = a.ncols();
    let s_mat = DMatrix::from_diagonal(s);
    let lam = DMatrix::from_diagonal(lambda);
    let mut f = DMatrix::zeros(nu, k + nu);
    f.view_mut((0, 0), (nu, k)).copy_from(a);
    f.view_mut((0, k), (nu, nu))
        .copy_from(&(b - DMatrix::<f64>::identity(nu, nu)));
    let mut g = DMatrix::zeros(nu, k + nu);
    g.view_mut((0, 0), (nu, k)).copy_from(&(-(&lam * a)));
    g.view_mut((0, k), (nu, nu))
        .copy_from(&(DMatrix::<f64>::identity(nu, nu) - &lam * b));
    let h = f.transpose() * &s_mat * &g + g.transpose() * &s_mat * &f;
    let mut reference = DMatrix::zeros(k + nu, k + nu);
    let a_t_s = a.transpose() * &s_mat;
    reference.view_mut((0, k), (k, nu)).copy_from(&a_t_s);
    reference
        .view_mut((k, 0), (nu, k))
        .copy_from(&a_t_s.transpose());
    reference
        .view_mut((k, k), (nu, nu))
        .copy_from(&(-wellposedness_form(b, s)));
    reference - h
}

/// Sector multiplier with the quadratic `(1,1)` block replaced by its
/// tangent minorant at `a0`: affine in `a` and a lower bound of
/// [`sector_multiplier`] in the semidefinite order, so any certificate
/// proved with it also holds for the exact multiplier.
pub fn sector_multiplier_minorized(
    a: &DMatrix<f64>,
    a0: &DMatrix<f64>,
    b: &DMatrix<f64>,
    s: &DVector<f64>,
    lambda: &DVector<f64>,
) -> DMatrix<f64> {
    let nu = b.nrows();
    let k = a.ncols();
    let s_lam = DMatrix::from_diagonal(&DVector::from_fn(nu, |i, _| s[i] * lambda[i]));
    let mut m = DMatrix::zeros(k + nu, k + nu);
    // Tangent minorant of 2 a' S Lambda a at a0.
    let m11 = 2.0
        * (a0.transpose() * &s_lam * a + a.transpose() * &s_lam * a0
            - a0.transpose() * &s_lam * a0);
    let m11 = 0.5 * (&m11 + m11.transpose());
    m.view_mut((0, 0), (k, k)).copy_from(&m11);
    // a' S Lambda (2b - I), exact and affine in a.
    let m12 = a.transpose() * &s_lam * (2.0 * b - DMatrix::<f64>::identity(nu, nu));
    m.view_mut((0, k), (k, nu)).copy_from(&m12);
    m.view_mut((k, 0), (nu, k)).copy_from(&m12.transpose());
    // 2 b' S Lambda b - S Lambda b - (S Lambda b)', independent of a.
    let slb = &s_lam * b;
    let m22 = 2.0 * b.transpose() * &slb - &slb - slb.transpose();
    m.view_mut((k, k), (nu, nu))
        .copy_from(&(0.5 * (&m22 + m22.transpose())));
    m
}

/// Left-hand side of the contraction certificate for a closed loop:
///
/// ```text
/// [P      -A~k' S ]  -  [Ak Bsk]' P [Ak Bsk]  +  M(Lambda)
/// [-S A~k  U_S    ]
/// ```
///
/// Positive definiteness of this matrix (with `U_S > 0`) certifies strict
/// decrease of `xi' P xi` on the sector validity region.
pub fn contraction_matrix(
    cl: &ClosedLoop,
    p: &DMatrix<f64>,
    s: &DVector<f64>,
    lambda: &DVector<f64>,
) -> DMatrix<f64> {
    let n_xi = cl.a_k.nrows();
    let nu = cl.b_s_k.ncols();
    let s_mat = DMatrix::from_diagonal(s);
    let mut x = DMatrix::zeros(n_xi + nu, n_xi + nu);
    x.view_mut((0, 0), (n_xi, n_xi)).copy_from(p);
    let cross = cl.a_tilde_k.transpose() * &s_mat;
    x.view_mut((0, n_xi), (n_xi, nu)).copy_from(&(-&cross));
    x.view_mut((n_xi, 0), (nu, n_xi))
        .copy_from(&(-cross.transpose()));
    x.view_mut((n_xi, n_xi), (nu, nu))
        .copy_from(&wellposedness_form(&cl.b_s_tilde_k, s));
    let mut stacked = DMatrix::zeros(n_xi, n_xi + nu);
    stacked.view_mut((0, 0), (n_xi, n_xi)).copy_from(&cl.a_k);
    stacked
        .view_mut((0, n_xi), (n_xi, nu))
        .copy_from(&cl.b_s_k);
    let gram = stacked.transpose() * p * stacked;
    x - gram + sector_multiplier(&cl.a_tilde_k, &cl.b_s_tilde_k, s, lambda)
}

/// Left-hand side of the terminal tail-cost certificate: the contraction
/// matrix with the stage cost of the auxiliary law subtracted, so that
/// semidefiniteness certifies
/// `V_f(xi+) - V_f(xi) <= -(xi'Q xi + du'R du)` under `du = K xi + K~ ds`.
#[allow(clippy::too_many_arguments)]
pub fn terminal_matrix(
    cl: &ClosedLoop,
    gains: &Gains,
    p_f: &DMatrix<f64>,
    s_f: &DVector<f64>,
    lambda: &DVector<f64>,
    q_w: &DMatrix<f64>,
    r_w: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n_xi = cl.a_k.nrows();
    let nu = cl.b_s_k.ncols();
    let mut m = contraction_matrix(cl, p_f, s_f, lambda);
    let krk = gains.k.transpose() * r_w * &gains.k;
    let krkt = gains.k.transpose() * r_w * &gains.k_tilde;
    let ktrkt = gains.k_tilde.transpose() * r_w * &gains.k_tilde;
    for i in 0..n_xi {
        for j in 0..n_xi {
            m[(i, j)] -= q_w[(i, j)] + krk[(i, j)];
        }
    }
    for i in 0..n_xi {
        for j in 0..nu {
            m[(i, n_xi + j)] -= krkt[(i, j)];
            m[(n_xi + j, i)] -= krkt[(i, j)];
        }
    }
    for i in 0..nu {
        for j in 0..nu {
            m[(n_xi + i, n_xi + j)] -= ktrkt[(i, j)];
        }
    }
    m
}

/// Options for controller design.
#[derive(Debug, Clone)]
pub struct ControllerOptions {
    /// Uniform sector slope lower bound used by the certificate (0 keeps
    /// the global sector and an unbounded validity region).
    pub lambda_c: f64,
    /// Floor on the certificate's Lyapunov matrix.
    pub p_min: f64,
    /// Strictness margin inside synthesis inequalities.
    pub margin: f64,
    /// Required margin of the convex gain-design step.
    pub beta_min: f64,
    /// Validity-radius tuning (used only with a nonzero slope bound).
    pub gamma: GammaOptions,
}

impl Default for ControllerOptions {
    fn default() -> Self {
        ControllerOptions {
            lambda_c: 0.0,
            p_min: 1e-3,
            margin: 1e-6,
            beta_min: 1e-6,
            gamma: GammaOptions::default(),
        }
    }
}

/// A designed controller: gains plus the contraction certificate.
#[derive(Debug, Clone)]
pub struct ControllerCertificate {
    /// Increment-feedback gains.
    pub gains: Gains,
    /// Lyapunov matrix of the augmented increment state.
    pub p: DMatrix<f64>,
    /// Diagonal sector multiplier.
    pub s: DVector<f64>,
    /// Sector slope bounds backing the certificate.
    pub lambda: SectorBound,
    /// Validity radius of `E(P, gamma)` at the origin steady pair
    /// (infinite on the global sector).
    pub gamma: f64,
    /// Margin achieved by the convex gain-design step.
    pub beta: f64,
    /// Normalization level (`-lambda_max(P)` at the optimum).
    pub alpha: f64,
}

/// Margins of a re-verified certificate (independent dense eigenvalue
/// checks, no conic solver involved).
#[derive(Debug, Clone)]
pub struct CertificateMargins {
    /// Smallest eigenvalue of the contraction (or tail-cost) matrix.
    pub contraction: f64,
    /// Smallest eigenvalue of the well-posedness form.
    pub wellposedness: f64,
    /// Smallest eigenvalue of the Lyapunov matrix.
    pub p_floor: f64,
}

impl CertificateMargins {
    /// Whether all margins clear a threshold.
    pub fn clears(&self, threshold: f64) -> bool {
        self.contraction >= threshold && self.wellposedness >= threshold && self.p_floor > 0.0
    }
}

/// Convex gain design on the global sector: maximize the margin `beta` of
/// the transformed-variable inequality, normalized by `Q <= I`, `U <= I`.
fn synthesize_gains(vf: &VelocityForm, opts: &ControllerOptions) -> Result<(Gains, f64)> {
    let n_xi = vf.n_xi();
    let m = vf.model.m();
    let nu = vf.model.nu();
    let mut prog = LmiProgram::new();
    let q = prog.symmetric("Q", n_xi);
    let z = prog.rectangular("Z", m, n_xi);
    let u = prog.diagonal("U", nu);
    let zt = prog.rectangular("Zt", m, nu);
    let beta = prog.scalar("beta");

    let a_v = vf.a_v.clone();
    let b_v = vf.b_v.clone();
    let b_s_v = vf.b_s_v.clone();
    let a_tilde_v = vf.a_tilde_v.clone();
    let b_tilde = vf.model.b_tilde.clone();
    let b_s_tilde = vf.model.b_s_tilde.clone();
    let dim = 2 * n_xi + nu;
    prog.require_psd("gain design", move |pt| {
        let q_m = pt.sym(q);
        let z_m = pt.rect(z);
        let u_m = pt.diag_matrix(u);
        let zt_m = pt.rect(zt);
        let b = pt.scalar(beta);
        let mut big = DMatrix::zeros(dim, dim);
        big.view_mut((0, 0), (n_xi, n_xi)).copy_from(&q_m);
        let blk01 = -&q_m * a_tilde_v.transpose() - z_m.transpose() * b_tilde.transpose();
        big.view_mut((0, n_xi), (n_xi, nu)).copy_from(&blk01);
        big.view_mut((n_xi, 0), (nu, n_xi))
            .copy_from(&blk01.transpose());
        let blk02 = &q_m * a_v.transpose() + z_m.transpose() * b_v.transpose();
        big.view_mut((0, n_xi + nu), (n_xi, n_xi)).copy_from(&blk02);
        big.view_mut((n_xi + nu, 0), (n_xi, n_xi))
            .copy_from(&blk02.transpose());
        let uz = (DMatrix::<f64>::identity(nu, nu) - &b_s_tilde) * &u_m - &b_tilde * &zt_m;
        let blk11 = &uz + uz.transpose();
        big.view_mut((n_xi, n_xi), (nu, nu)).copy_from(&blk11);
        let blk12 = &u_m * b_s_v.transpose() + zt_m.transpose() * b_v.transpose();
        big.view_mut((n_xi, n_xi + nu), (nu, n_xi)).copy_from(&blk12);
        big.view_mut((n_xi + nu, n_xi), (n_xi, nu))
            .copy_from(&blk12.transpose());
        big.view_mut((n_xi + nu, n_xi + nu), (n_xi, n_xi))
            .copy_from(&q_m);
        big - DMatrix::<f64>::identity(dim, dim) * b
    });
    prog.require_psd("q cap", move |pt| {
        DMatrix::<f64>::identity(n_xi, n_xi) - pt.sym(q)
    });
    prog.require_psd("u cap", move |pt| {
        DMatrix::<f64>::identity(nu, nu) - pt.diag_matrix(u)
    });
    prog.require_psd("q floor", move |pt| {
        pt.sym(q) - DMatrix::<f64>::identity(n_xi, n_xi) * 1e-6
    });
    prog.require_psd("u floor", move |pt| {
        pt.diag_matrix(u) - DMatrix::<f64>::identity(nu, nu) * 1e-6
    });
    let (beta_star, sol) = prog
        .maximize_scalar(beta, opts.beta_min, 1.5)
        .map_err(|e| match e {
            Error::NeverFeasible { .. } => Error::SynthesisFailed {
                reason: "convex gain design infeasible on the global sector".to_string(),
                last_lambdas: vec![0.0; nu],
            },
            other => other,
        })?;
    let q_m = sol.sym(q);
    let u_m = sol.diag(u);
    let z_m = sol.rect(z);
    let zt_m = sol.rect(zt);
    let q_lu = q_m.lu();
    let k = q_lu
        .solve(&z_m.transpose())
        .ok_or_else(|| Error::NumericalFailure("gain recovery: singular Q".to_string()))?
        .transpose();
    let mut k_tilde = zt_m;
    for j in 0..nu {
        for i in 0..k_tilde.nrows() {
            k_tilde[(i, j)] /= u_m[j];
        }
    }
    Ok((Gains { k, k_tilde }, beta_star))
}

/// Re-solve the certificate at fixed gains, maximizing the normalization
/// level `alpha` with `-P >= alpha I` and `P >= p_min I` (flattest
/// admissible Lyapunov matrix).
fn normalize_certificate(
    vf: &VelocityForm,
    gains: &Gains,
    lambda: &SectorBound,
    p_min: f64,
    margin: f64,
) -> Result<(DMatrix<f64>, DVector<f64>, f64)> {
    let n_xi = vf.n_xi();
    let nu = vf.model.nu();
    let cl = closed_loop(vf, gains);
    let mut prog = LmiProgram::new();
    let p = prog.symmetric("P", n_xi);
    let s = prog.diagonal("S", nu);
    let alpha = prog.scalar("alpha");
    let lambda_vec = lambda.lambda.clone();
    {
        let cl = cl.clone();
        let lambda_vec = lambda_vec.clone();
        let dim = n_xi + nu;
        prog.require_psd("contraction", move |pt| {
            contraction_matrix(&cl, &pt.sym(p), &pt.diag(s), &lambda_vec)
                - DMatrix::<f64>::identity(dim, dim) * margin
        });
    }
    {
        let b_s_tilde_k = cl.b_s_tilde_k.clone();
        prog.require_psd("wellposedness", move |pt| {
            wellposedness_form(&b_s_tilde_k, &pt.diag(s))
                - DMatrix::<f64>::identity(nu, nu) * margin
        });
    }
    prog.require_psd("p floor", move |pt| {
        pt.sym(p) - DMatrix::<f64>::identity(n_xi, n_xi) * p_min
    });
    prog.require_psd("normalization", move |pt| {
        -pt.sym(p) - DMatrix::<f64>::identity(n_xi, n_xi) * pt.scalar(alpha)
    });
    let (alpha_star, sol) = prog.maximize_scalar(alpha, -1e4, 0.0).map_err(|e| match e {
        Error::NeverFeasible { .. } => Error::SynthesisFailed {
            reason: "certificate infeasible at fixed gains".to_string(),
            last_lambdas: lambda_vec.iter().cloned().collect(),
        },
        other => other,
    })?;
    Ok((sol.sym(p), sol.diag(s), alpha_star))
}

/// Design a certified increment-feedback controller.
///
/// Runs the full pipeline: plant validation and well-posedness/rank
/// checks, velocity-form assembly, convex gain design on the global
/// sector, certificate normalization at the requested slope bound, and the
/// validity radius when that bound is nonzero.
pub fn design_controller(
    model: &RnnModel,
    opts: &ControllerOptions,
) -> Result<ControllerCertificate> {
    model.validate_shape()?;
    let wp = model.well_posedness_check();
    if !wp.passes() {
        return Err(Error::SynthesisFailed {
            reason: format!(
                "implicit layer not well posed on the slope grid (min sigma {:.3e})",
                wp.min_phi_sigma_min
            ),
            last_lambdas: vec![],
        });
    }
    if !model.rank_m_check(&model.theta_grid())? {
        return Err(Error::SynthesisFailed {
            reason: "steady-state matrix loses row rank on the slope grid".to_string(),
            last_lambdas: vec![],
        });
    }
    let vf = VelocityForm::new(model);
    let (gains, beta) = synthesize_gains(&vf, opts)?;
    let lambda = SectorBound::uniform(model.nu(), opts.lambda_c);
    lambda.validate()?;
    // Escalate the synthesis margin until the unmargined inequalities
    // re-verify: conic residuals grow with the certificate's magnitude,
    // which is not known before the first solve.
    let cl = closed_loop(&vf, &gains);
    let mut accepted = None;
    let mut worst: Option<CertificateMargins> = None;
    let mut margin = opts.margin;
    for _ in 0..3 {
        let (p, s, alpha) = normalize_certificate(&vf, &gains, &lambda, opts.p_min, margin)?;
        let margins = certificate_margins(&cl, &p, &s, &lambda);
        if margins.clears(1e-8) {
            accepted = Some((p, s, alpha));
            break;
        }
        worst = Some(margins);
        margin *= 100.0;
    }
    let Some((p, s, alpha)) = accepted else {
        let margins = worst.expect("at least one attempt");
        return Err(Error::NumericalFailure(format!(
            "controller certificate failed re-verification: contraction {:.3e}, wellposedness {:.3e}",
            margins.contraction, margins.wellposedness
        )));
    };
    let gamma = if opts.lambda_c == 0.0 {
        f64::INFINITY
    } else {
        let rows = sector_validity_rows(model, &lambda);
        let region = LiftedRegion::origin(&vf);
        max_gamma_lifted(&region, &p, &rows, &opts.gamma)?
    };
    Ok(ControllerCertificate {
        gains,
        p,
        s,
        lambda,
        gamma,
        beta,
        alpha,
    })
}

/// Independent margins of a contraction certificate.
pub fn certificate_margins(
    cl: &ClosedLoop,
    p: &DMatrix<f64>,
    s: &DVector<f64>,
    lambda: &SectorBound,
) -> CertificateMargins {
    CertificateMargins {
        contraction: min_symmetric_eigenvalue(&contraction_matrix(cl, p, s, &lambda.lambda)),
        wellposedness: min_symmetric_eigenvalue(&wellposedness_form(&cl.b_s_tilde_k, s)),
        p_floor: min_symmetric_eigenvalue(p),
    }
}

/// Re-verify a controller certificate against a plant.
pub fn verify_controller(model: &RnnModel, cert: &ControllerCertificate) -> CertificateMargins {
    let vf = VelocityForm::new(model);
    let cl = closed_loop(&vf, &cert.gains);
    certificate_margins(&cl, &cert.p, &cert.s, &cert.lambda)
}

/// Options for terminal-ingredient design.
#[derive(Debug, Clone)]
pub struct TerminalOptions {
    /// Uniform sector slope bound for the terminal certificate.
    pub lambda_f: f64,
    /// Floor on the terminal weight.
    pub p_min: f64,
    /// Strictness margin for the well-posedness inequality.
    pub margin: f64,
    /// Validity-radius tuning.
    pub gamma: GammaOptions,
}

impl Default for TerminalOptions {
    fn default() -> Self {
        TerminalOptions {
            lambda_f: 0.0,
            p_min: 1e-3,
            margin: 1e-6,
            gamma: GammaOptions::default(),
        }
    }
}

/// Terminal ingredients for the finite-horizon problem: tail-cost weight,
/// its multiplier, the slope bounds, and the terminal-set radius at one
/// setpoint.
#[derive(Debug, Clone)]
pub struct TerminalIngredients {
    /// Terminal weight on the augmented increment state.
    pub p: DMatrix<f64>,
    /// Diagonal sector multiplier of the tail-cost certificate.
    pub s: DVector<f64>,
    /// Sector slope bounds backing the certificate.
    pub lambda: SectorBound,
    /// Terminal-set radius: `E(P_f, gamma_f)` keeps constraints and sector
    /// validity and is invariant under the auxiliary law.
    pub gamma: f64,
    /// Normalization level (`-lambda_max(P_f)` at the optimum).
    pub alpha: f64,
}

/// Design terminal ingredients for given auxiliary gains, stage weights,
/// and operating constraints, at one setpoint.
#[allow(clippy::too_many_arguments)]
pub fn design_terminal(
    model: &RnnModel,
    gains: &Gains,
    q_w: &DMatrix<f64>,
    r_w: &DMatrix<f64>,
    cons: &BoxConstraints,
    y_ref: &DVector<f64>,
    u_guess: &DVector<f64>,
    opts: &TerminalOptions,
) -> Result<TerminalIngredients> {
    model.validate_shape()?;
    cons.validate(model.m(), model.p())?;
    let vf = VelocityForm::new(model);
    let n_xi = vf.n_xi();
    let nu = model.nu();
    if q_w.nrows() != n_xi || q_w.ncols() != n_xi {
        return Err(Error::DimensionMismatch {
            path: "weights.q".to_string(),
            expected: format!("{n_xi}x{n_xi}"),
            got: format!("{}x{}", q_w.nrows(), q_w.ncols()),
        });
    }
    if r_w.nrows() != model.m() || r_w.ncols() != model.m() {
        return Err(Error::DimensionMismatch {
            path: "weights.r".to_string(),
            expected: format!("{}x{}", model.m(), model.m()),
            got: format!("{}x{}", r_w.nrows(), r_w.ncols()),
        });
    }
    let lambda = SectorBound::uniform(nu, opts.lambda_f);
    lambda.validate()?;
    let cl = closed_loop(&vf, gains);
    let solve_at = |tail_margin: f64| -> Result<(DMatrix<f64>, DVector<f64>, f64)> {
        let mut prog = LmiProgram::new();
        let p = prog.symmetric("Pf", n_xi);
        let s = prog.diagonal("Sf", nu);
        let alpha = prog.scalar("alpha");
        {
            let cl = cl.clone();
            let gains = gains.clone();
            let lambda_vec = lambda.lambda.clone();
            let q_w = q_w.clone();
            let r_w = r_w.clone();
            let dim = n_xi + nu;
            prog.require_psd("tail cost", move |pt| {
                terminal_matrix(&cl, &gains, &pt.sym(p), &pt.diag(s), &lambda_vec, &q_w, &r_w)
                    - DMatrix::<f64>::identity(dim, dim) * tail_margin
            });
        }
        {
            let b_s_tilde_k = cl.b_s_tilde_k.clone();
            let margin = opts.margin;
            prog.require_psd("wellposedness", move |pt| {
                wellposedness_form(&b_s_tilde_k, &pt.diag(s))
                    - DMatrix::<f64>::identity(nu, nu) * margin
            });
        }
        let p_min = opts.p_min;
        prog.require_psd("p floor", move |pt| {
            pt.sym(p) - DMatrix::<f64>::identity(n_xi, n_xi) * p_min
        });
        prog.require_psd("normalization", move |pt| {
            -pt.sym(p) - DMatrix::<f64>::identity(n_xi, n_xi) * pt.scalar(alpha)
        });
        let (alpha_star, sol) = prog.maximize_scalar(alpha, -1e5, 0.0).map_err(|e| match e {
            Error::NeverFeasible { .. } => Error::SynthesisFailed {
                reason: "terminal tail-cost certificate infeasible for these gains".to_string(),
                last_lambdas: lambda.lambda.iter().cloned().collect(),
            },
            other => other,
        })?;
        Ok((sol.sym(p), sol.diag(s), alpha_star))
    };
    // Escalate the synthesis margin until the unmargined inequality
    // re-verifies: conic residuals grow with the certificate's magnitude,
    // which is not known before the first solve.
    let mut accepted = None;
    let mut worst = f64::NEG_INFINITY;
    let mut tail_margin = opts.margin;
    for _ in 0..3 {
        let (p_f, s_f, alpha_star) = solve_at(tail_margin)?;
        let tail = terminal_matrix(&cl, gains, &p_f, &s_f, &lambda.lambda, q_w, r_w);
        let margin_seen = min_symmetric_eigenvalue(&tail);
        if margin_seen >= 1e-8 {
            accepted = Some((p_f, s_f, alpha_star));
            break;
        }
        worst = worst.max(margin_seen);
        tail_margin *= 100.0;
    }
    let Some((p_f, s_f, alpha_star)) = accepted else {
        return Err(Error::NumericalFailure(format!(
            "terminal certificate failed re-verification: min eig {worst:.3e}"
        )));
    };
    let gamma = terminal_radius(model, &p_f, &lambda, cons, y_ref, u_guess, &opts.gamma)?;
    Ok(TerminalIngredients {
        p: p_f,
        s: s_f,
        lambda,
        gamma,
        alpha: alpha_star,
    })
}

/// Radius of the terminal set at one setpoint: the tail-cost weight and the
/// slope bounds are setpoint-independent, only the constraint offsets move,
/// so a designed weight can be re-leveled at a new operating point without
/// another semidefinite solve.
#[allow(clippy::too_many_arguments)]
pub fn terminal_radius(
    model: &RnnModel,
    p_f: &DMatrix<f64>,
    lambda: &SectorBound,
    cons: &BoxConstraints,
    y_ref: &DVector<f64>,
    u_guess: &DVector<f64>,
    opts: &GammaOptions,
) -> Result<f64> {
    let mut rows = sector_validity_rows(model, lambda);
    rows.extend(input_output_rows(model, cons));
    if rows.is_empty() {
        return Ok(f64::INFINITY);
    }
    let vf = VelocityForm::new(model);
    let region = LiftedRegion::at_setpoint(&vf, y_ref, u_guess)?;
    max_gamma_lifted(&region, p_f, &rows, opts)
}

/// Disturbance-augmented matrices used by the observer: the plant state is
/// extended with a constant output-offset state.
#[derive(Debug, Clone)]
pub struct ObserverForm {
    /// `[A 0; 0 I]`, `n_e x n_e`.
    pub a_e: DMatrix<f64>,
    /// `[B; 0]`, `n_e x m`.
    pub b_e: DMatrix<f64>,
    /// `[B_s; 0]`, `n_e x nu`.
    pub b_s_e: DMatrix<f64>,
    /// `[A~ 0]`, `nu x n_e`.
    pub a_tilde_e: DMatrix<f64>,
    /// `[C I]`, `p x n_e`.
    pub c_e: DMatrix<f64>,
}

/// Assemble the disturbance-augmented form of a plant.
pub fn observer_form(model: &RnnModel) -> ObserverForm {
    let (n, m, p, nu) = model.dims();
    let n_e = n + p;
    let mut a_e = DMatrix::zeros(n_e, n_e);
    a_e.view_mut((0, 0), (n, n)).copy_from(&model.a);
    a_e.view_mut((n, n), (p, p))
        .copy_from(&DMatrix::identity(p, p));
    let mut b_e = DMatrix::zeros(n_e, m);
    b_e.view_mut((0, 0), (n, m)).copy_from(&model.b);
    let mut b_s_e = DMatrix::zeros(n_e, nu);
    b_s_e.view_mut((0, 0), (n, nu)).copy_from(&model.b_s);
    let mut a_tilde_e = DMatrix::zeros(nu, n_e);
    a_tilde_e
        .view_mut((0, 0), (nu, n))
        .copy_from(&model.a_tilde);
    let mut c_e = DMatrix::zeros(p, n_e);
    c_e.view_mut((0, 0), (p, n)).copy_from(&model.c);
    c_e.view_mut((0, n), (p, p))
        .copy_from(&DMatrix::identity(p, p));
    ObserverForm {
        a_e,
        b_e,
        b_s_e,
        a_tilde_e,
        c_e,
    }
}

/// Observer error-contraction matrix: the analog of [`contraction_matrix`]
/// for the error dynamics `e+ = (A_e - L C_e) e + B_s_e ds` with
/// pre-activation error map `A~_e - L~ C_e`.
pub fn observer_contraction_matrix(
    of: &ObserverForm,
    l: &DMatrix<f64>,
    l_tilde: &DMatrix<f64>,
    p_o: &DMatrix<f64>,
    s_o: &DVector<f64>,
    b_s_tilde: &DMatrix<f64>,
    lambda: &DVector<f64>,
) -> DMatrix<f64> {
    let n_e = of.a_e.nrows();
    let nu = b_s_tilde.nrows();
    let a_el = &of.a_e - l * &of.c_e;
    let a_tilde_el = &of.a_tilde_e - l_tilde * &of.c_e;
    let s_mat = DMatrix::from_diagonal(s_o);
    let mut x = DMatrix::zeros(n_e + nu, n_e + nu);
    x.view_mut((0, 0), (n_e, n_e)).copy_from(p_o);
    let cross = a_tilde_el.transpose() * &s_mat;
    x.view_mut((0, n_e), (n_e, nu)).copy_from(&(-&cross));
    x.view_mut((n_e, 0), (nu, n_e))
        .copy_from(&(-cross.transpose()));
    x.view_mut((n_e, n_e), (nu, nu))
        .copy_from(&wellposedness_form(b_s_tilde, s_o));
    let mut stacked = DMatrix::zeros(n_e, n_e + nu);
    stacked.view_mut((0, 0), (n_e, n_e)).copy_from(&a_el);
    stacked
        .view_mut((0, n_e), (n_e, nu))
        .copy_from(&of.b_s_e);
    let gram = stacked.transpose() * p_o * stacked;
    x - gram + sector_multiplier(&a_tilde_el, b_s_tilde, s_o, lambda)
}

/// Options for observer design.
#[derive(Debug, Clone)]
pub struct ObserverOptions {
    /// Uniform sector slope bound for the error certificate.
    pub lambda_o: f64,
    /// Floor on the error Lyapunov matrix (with the `P <= I` cap this
    /// bounds its conditioning).
    pub p_min: f64,
    /// Strictness margin inside synthesis inequalities.
    pub margin: f64,
    /// Alternating gain-refinement sweeps for nonzero slope bounds.
    pub refine_iters: usize,
}

impl Default for ObserverOptions {
    fn default() -> Self {
        ObserverOptions {
            lambda_o: 0.0,
            p_min: 1e-3,
            margin: 1e-6,
            refine_iters: 12,
        }
    }
}

/// A designed observer: injection gains plus the error-contraction
/// certificate.
#[derive(Debug, Clone)]
pub struct ObserverCertificate {
    /// State injection gain, `n_e x p`.
    pub l: DMatrix<f64>,
    /// Pre-activation injection gain, `nu x p`.
    pub l_tilde: DMatrix<f64>,
    /// Error Lyapunov matrix.
    pub p: DMatrix<f64>,
    /// Diagonal sector multiplier.
    pub s: DVector<f64>,
    /// Sector slope bounds backing the certificate.
    pub lambda: SectorBound,
    /// Validity radius of the error region (infinite on the global
    /// sector).
    pub gamma: f64,
    /// Contraction margin achieved (smallest eigenvalue of the verified
    /// certificate matrix).
    pub contraction: f64,
}

/// Global-sector observer design: with `W = P L` and `W~ = S L~` the
/// certificate is one semidefinite program; the contraction margin is
/// maximized under the normalization `P <= I`.
fn observer_one_shot(
    model: &RnnModel,
    of: &ObserverForm,
    opts: &ObserverOptions,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
    let n_e = of.a_e.nrows();
    let nu = model.nu();
    let p_dim = model.p();
    let mut prog = LmiProgram::new();
    let p = prog.symmetric("Po", n_e);
    let s = prog.diagonal("So", nu);
    let w = prog.rectangular("W", n_e, p_dim);
    let wt = prog.rectangular("Wt", nu, p_dim);
    let t = prog.scalar("t");
    {
        let a_e = of.a_e.clone();
        let a_tilde_e = of.a_tilde_e.clone();
        let c_e = of.c_e.clone();
        let b_s_e = of.b_s_e.clone();
        let b_s_tilde = model.b_s_tilde.clone();
        let dim = 2 * n_e + nu;
        prog.require_psd("error contraction", move |pt| {
            let p_m = pt.sym(p);
            let s_m = pt.diag_matrix(s);
            let w_m = pt.rect(w);
            let wt_m = pt.rect(wt);
            let tv = pt.scalar(t);
            let mut big = DMatrix::zeros(dim, dim);
            big.view_mut((0, 0), (n_e, n_e)).copy_from(&p_m);
            // -A~el' S = -(A~e' S - C_e' W~')
            let blk01 = -(a_tilde_e.transpose() * &s_m - c_e.transpose() * wt_m.transpose());
            big.view_mut((0, n_e), (n_e, nu)).copy_from(&blk01);
            big.view_mut((n_e, 0), (nu, n_e))
                .copy_from(&blk01.transpose());
            let us = (DMatrix::<f64>::identity(nu, nu) - &b_s_tilde).transpose() * &s_m
                + &s_m * (DMatrix::<f64>::identity(nu, nu) - &b_s_tilde);
            big.view_mut((n_e, n_e), (nu, nu)).copy_from(&us);
            // A_el' P = A_e' P - C_e' W'
            let blk02 = a_e.transpose() * &p_m - c_e.transpose() * w_m.transpose();
            big.view_mut((0, n_e + nu), (n_e, n_e)).copy_from(&blk02);
            big.view_mut((n_e + nu, 0), (n_e, n_e))
                .copy_from(&blk02.transpose());
            let blk12 = b_s_e.transpose() * &p_m;
            big.view_mut((n_e, n_e + nu), (nu, n_e)).copy_from(&blk12);
            big.view_mut((n_e + nu, n_e), (n_e, nu))
                .copy_from(&blk12.transpose());
            big.view_mut((n_e + nu, n_e + nu), (n_e, n_e))
                .copy_from(&p_m);
            big - DMatrix::<f64>::identity(dim, dim) * tv
        });
    }
    {
        let b_s_tilde = model.b_s_tilde.clone();
        let margin = opts.margin;
        prog.require_psd("wellposedness", move |pt| {
            wellposedness_form(&b_s_tilde, &pt.diag(s))
                - DMatrix::<f64>::identity(nu, nu) * margin
        });
    }
    prog.require_psd("p cap", move |pt| {
        DMatrix::<f64>::identity(n_e, n_e) - pt.sym(p)
    });
    let p_min = opts.p_min;
    prog.require_psd("p floor", move |pt| {
        pt.sym(p) - DMatrix::<f64>::identity(n_e, n_e) * p_min
    });
    let (_, sol) = prog
        .maximize_scalar(t, opts.margin, 5.0)
        .map_err(|e| match e {
            Error::NeverFeasible { .. } => Error::SynthesisFailed {
                reason: "observer design infeasible on the global sector".to_string(),
                last_lambdas: vec![0.0; nu],
            },
            other => other,
        })?;
    let p_o = sol.sym(p);
    let s_o = sol.diag(s);
    let w_m = sol.rect(w);
    let wt_m = sol.rect(wt);
    let l = p_o
        .clone()
        .lu()
        .solve(&w_m)
        .ok_or_else(|| Error::NumericalFailure("gain recovery: singular P".to_string()))?;
    let mut l_tilde = wt_m;
    for i in 0..nu {
        for j in 0..p_dim {
            l_tilde[(i, j)] /= s_o[i];
        }
    }
    Ok((l, l_tilde, p_o, s_o))
}

/// Re-solve the observer certificate at fixed gains (affine in `(P, S)`
/// for any slope bound), maximizing the contraction margin under `P <= I`.
fn observer_certificate_at_gains(
    model: &RnnModel,
    of: &ObserverForm,
    l: &DMatrix<f64>,
    l_tilde: &DMatrix<f64>,
    lambda: &SectorBound,
    opts: &ObserverOptions,
) -> Result<(DMatrix<f64>, DVector<f64>, f64)> {
    let n_e = of.a_e.nrows();
    let nu = model.nu();
    let mut prog = LmiProgram::new();
    let p = prog.symmetric("Po", n_e);
    let s = prog.diagonal("So", nu);
    let t = prog.scalar("t");
    {
        let of = of.clone();
        let l = l.clone();
        let l_tilde = l_tilde.clone();
        let b_s_tilde = model.b_s_tilde.clone();
        let lambda_vec = lambda.lambda.clone();
        let dim = n_e + nu;
        prog.require_psd("error contraction", move |pt| {
            observer_contraction_matrix(
                &of,
                &l,
                &l_tilde,
                &pt.sym(p),
                &pt.diag(s),
                &b_s_tilde,
                &lambda_vec,
            ) - DMatrix::<f64>::identity(dim, dim) * pt.scalar(t)
        });
    }
    {
        let b_s_tilde = model.b_s_tilde.clone();
        let margin = opts.margin;
        prog.require_psd("wellposedness", move |pt| {
            wellposedness_form(&b_s_tilde, &pt.diag(s))
                - DMatrix::<f64>::identity(nu, nu) * margin
        });
    }
    prog.require_psd("p cap", move |pt| {
        DMatrix::<f64>::identity(n_e, n_e) - pt.sym(p)
    });
    let p_min = opts.p_min;
    prog.require_psd("p floor", move |pt| {
        pt.sym(p) - DMatrix::<f64>::identity(n_e, n_e) * p_min
    });
    let (t_star, sol) = prog
        .maximize_scalar(t, opts.margin, 5.0)
        .map_err(|e| match e {
            Error::NeverFeasible { .. } => Error::SynthesisFailed {
                reason: "observer certificate infeasible at fixed gains".to_string(),
                last_lambdas: lambda.lambda.iter().cloned().collect(),
            },
            other => other,
        })?;
    Ok((sol.sym(p), sol.diag(s), t_star))
}

/// Gain-refinement sweep at fixed `(P, S)`: affine in `(L, L~)` once the
/// quadratic multiplier block is replaced by its tangent minorant at the
/// current gains (sound: the minorant underestimates the credit).
fn observer_refine_gains(
    model: &RnnModel,
    of: &ObserverForm,
    p_o: &DMatrix<f64>,
    s_o: &DVector<f64>,
    l_tilde0: &DMatrix<f64>,
    lambda: &SectorBound,
) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
    let n_e = of.a_e.nrows();
    let nu = model.nu();
    let p_dim = model.p();
    let mut prog = LmiProgram::new();
    let l_var = prog.rectangular("L", n_e, p_dim);
    let lt_var = prog.rectangular("Lt", nu, p_dim);
    let t = prog.scalar("t");
    {
        let of = of.clone();
        let p_o = p_o.clone();
        let s_o = s_o.clone();
        let b_s_tilde = model.b_s_tilde.clone();
        let lambda_vec = lambda.lambda.clone();
        let a_tilde_el0 = &of.a_tilde_e - l_tilde0 * &of.c_e;
        let dim = 2 * n_e + nu;
        prog.require_psd("error contraction", move |pt| {
            let l_m = pt.rect(l_var);
            let lt_m = pt.rect(lt_var);
            let tv = pt.scalar(t);
            let a_el = &of.a_e - &l_m * &of.c_e;
            let a_tilde_el = &of.a_tilde_e - &lt_m * &of.c_e;
            let s_mat = DMatrix::from_diagonal(&s_o);
            let mut big = DMatrix::zeros(dim, dim);
            // X block plus minorized multiplier, then Schur on the Gram.
            let mut x = DMatrix::zeros(n_e + nu, n_e + nu);
            x.view_mut((0, 0), (n_e, n_e)).copy_from(&p_o);
            let cross = a_tilde_el.transpose() * &s_mat;
            x.view_mut((0, n_e), (n_e, nu)).copy_from(&(-&cross));
            x.view_mut((n_e, 0), (nu, n_e))
                .copy_from(&(-cross.transpose()));
            x.view_mut((n_e, n_e), (nu, nu))
                .copy_from(&wellposedness_form(&b_s_tilde, &s_o));
            x += sector_multiplier_minorized(
                &a_tilde_el,
                &a_tilde_el0,
                &b_s_tilde,
                &s_o,
                &lambda_vec,
            );
            big.view_mut((0, 0), (n_e + nu, n_e + nu)).copy_from(&x);
            let blk02 = a_el.transpose() * &p_o;
            big.view_mut((0, n_e + nu), (n_e, n_e)).copy_from(&blk02);
            big.view_mut((n_e + nu, 0), (n_e, n_e))
                .copy_from(&blk02.transpose());
            let blk12 = of.b_s_e.transpose() * &p_o;
            big.view_mut((n_e, n_e + nu), (nu, n_e)).copy_from(&blk12);
            big.view_mut((n_e + nu, n_e), (n_e, nu))
                .copy_from(&blk12.transpose());
            big.view_mut((n_e + nu, n_e + nu), (n_e, n_e))
                .copy_from(&p_o);
            big - DMatrix::<f64>::identity(dim, dim) * tv
        });
    }
    let (t_star, sol) = prog.maximize_scalar(t, 0.0, 5.0)?;
    Ok((sol.rect(l_var), sol.rect(lt_var), t_star))
}

/// Design a certified disturbance observer.
///
/// The global-sector path is one convex solve. For nonzero slope bounds the
/// design alternates certificate solves at fixed gains with minorized gain
/// refinements, then computes the error-region validity radius.
pub fn design_observer(model: &RnnModel, opts: &ObserverOptions) -> Result<ObserverCertificate> {
    model.validate_shape()?;
    let wp = model.well_posedness_check();
    if !wp.passes() {
        return Err(Error::SynthesisFailed {
            reason: format!(
                "implicit layer not well posed on the slope grid (min sigma {:.3e})",
                wp.min_phi_sigma_min
            ),
            last_lambdas: vec![],
        });
    }
    let of = observer_form(model);
    let (mut l, mut l_tilde, _, _) = observer_one_shot(model, &of, opts)?;
    let lambda = SectorBound::uniform(model.nu(), opts.lambda_o);
    lambda.validate()?;
    let (mut p_o, mut s_o, mut t_star) =
        observer_certificate_at_gains(model, &of, &l, &l_tilde, &lambda, opts)?;
    if opts.lambda_o > 0.0 {
        for _ in 0..opts.refine_iters {
            let (l_new, lt_new, _) =
                match observer_refine_gains(model, &of, &p_o, &s_o, &l_tilde, &lambda) {
                    Ok(v) => v,
                    Err(_) => break,
                };
            let (p_new, s_new, t_new) =
                match observer_certificate_at_gains(model, &of, &l_new, &lt_new, &lambda, opts) {
                    Ok(v) => v,
                    Err(_) => break,
                };
            if t_new <= t_star + 1e-6 {
                break;
            }
            l = l_new;
            l_tilde = lt_new;
            p_o = p_new;
            s_o = s_new;
            t_star = t_new;
        }
    }
    let stab = observer_contraction_matrix(
        &of,
        &l,
        &l_tilde,
        &p_o,
        &s_o,
        &model.b_s_tilde,
        &lambda.lambda,
    );
    let contraction = min_symmetric_eigenvalue(&stab);
    if contraction < 1e-8 {
        return Err(Error::NumericalFailure(format!(
            "observer certificate failed re-verification: min eig {contraction:.3e}"
        )));
    }
    let gamma = if opts.lambda_o == 0.0 {
        f64::INFINITY
    } else {
        let region = ObserverRegion {
            a_tilde_e_l: &of.a_tilde_e - &l_tilde * &of.c_e,
            b_s_tilde: model.b_s_tilde.clone(),
            l_tilde_c_e: &l_tilde * &of.c_e,
            radii: lambda.radii(&model.activations),
            lambda: lambda.lambda.clone(),
        };
        max_gamma_observer(&region, &p_o)?
    };
    Ok(ObserverCertificate {
        l,
        l_tilde,
        p: p_o,
        s: s_o,
        lambda,
        gamma,
        contraction,
    })
}

/// Re-verify an observer certificate against a plant.
pub fn verify_observer(model: &RnnModel, cert: &ObserverCertificate) -> CertificateMargins {
    let of = observer_form(model);
    let stab = observer_contraction_matrix(
        &of,
        &cert.l,
        &cert.l_tilde,
        &cert.p,
        &cert.s,
        &model.b_s_tilde,
        &cert.lambda.lambda,
    );
    CertificateMargins {
        contraction: min_symmetric_eigenvalue(&stab),
        wellposedness: min_symmetric_eigenvalue(&wellposedness_form(&model.b_s_tilde, &cert.s)),
        p_floor: min_symmetric_eigenvalue(&cert.p),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::{random_model, random_vector, GenConfig};
    use crate::model::Activation;
    use approx::assert_abs_diff_eq;

    fn spectral_radius(m: &DMatrix<f64>) -> f64 {
        m.complex_eigenvalues()
            .iter()
            .map(|c| c.norm())
            .fold(0.0_f64, f64::max)
    }

    #[test]
    fn multiplier_vanishes_on_global_sector() {
        let a = DMatrix::from_fn(2, 5, |i, j| 0.3 * (i as f64) - 0.2 * (j as f64) + 0.1);
        let b = DMatrix::from_fn(2, 2, |i, j| if i > j { 0.4 } else { 0.0 });
        let s = DVector::from_vec(vec![1.3, 0.7]);
        let m = sector_multiplier(&a, &b, &s, &DVector::zeros(2));
        assert!(m.amax() < 1e-13);
    }

    #[test]
    fn multiplier_reproduces_sector_quadratic_form() {
        // z'([0 A'S; SA -U_S] - M) z must equal 2 (Fz)' S (Gz) for the
        // sector factors F, G; checked at random points.
        let k = 4;
        let nu = 3;
        let a = DMatrix::from_fn(nu, k, |i, j| ((i * 7 + j * 3) as f64 * 0.11).sin());
        let b = DMatrix::from_fn(nu, nu, |i, j| ((i + 2 * j) as f64 * 0.21).cos() * 0.3);
        let s = DVector::from_vec(vec![0.8, 1.4, 0.5]);
        let lambda = DVector::from_vec(vec![0.2, 0.0, 0.6]);
        let s_mat = DMatrix::from_diagonal(&s);
        let lam = DMatrix::from_diagonal(&lambda);
        let m = sector_multiplier(&a, &b, &s, &lambda);
        let mut reference = DMatrix::zeros(k + nu, k + nu);
        let a_t_s = a.transpose() * &s_mat;
        reference.view_mut((0, k), (k, nu)).copy_from(&a_t_s);
        reference
            .view_mut((k, 0), (nu, k))
            .copy_from(&a_t_s.transpose());
        reference
            .view_mut((k, k), (nu, nu))
            .copy_from(&(-wellposedness_form(&b, &s)));
        for trial in 0..50 {
            let z = random_vector(k + nu, 1.0, trial);
            let zr = z.rows(0, k).into_owned();
            let zs = z.rows(k, nu).into_owned();
            let dv = &a * &zr + &b * &zs;
            let f_z = &dv - &zs;
            let g_z = &zs - &lam * &dv;
            let expected = 2.0 * f_z.dot(&(&s_mat * &g_z));
            let got = z.dot(&((&reference - &m) * &z));
            assert_abs_diff_eq!(got, expected, epsilon = 1e-11 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn minorized_multiplier_is_exact_at_base_and_below_elsewhere() {
        let k = 3;
        let nu = 2;
        let a0 = DMatrix::from_fn(nu, k, |i, j| 0.2 * ((i + j) as f64) - 0.15);
        let b = DMatrix::from_fn(nu, nu, |i, j| if i > j { -0.3 } else { 0.0 });
        let s = DVector::from_vec(vec![1.1, 0.6]);
        let lambda = DVector::from_vec(vec![0.4, 0.3]);
        let exact0 = sector_multiplier(&a0, &b, &s, &lambda);
        let minor0 = sector_multiplier_minorized(&a0, &a0, &b, &s, &lambda);
        assert!((exact0 - &minor0).amax() < 1e-12);
        for trial in 0..20 {
            let a = &a0 + DMatrix::from_fn(nu, k, |i, j| {
                0.5 * random_vector(1, 1.0, trial * 100 + (i * k + j) as u64)[0]
            });
            let gap = sector_multiplier(&a, &b, &s, &lambda)
                - sector_multiplier_minorized(&a, &a0, &b, &s, &lambda);
            assert!(
                min_symmetric_eigenvalue(&gap) > -1e-11,
                "minorant exceeded exact multiplier"
            );
        }
    }

    #[test]
    fn controller_design_stabilizes_stable_plant() {
        let model = random_model(&GenConfig::stable(3, 1, 1, 2, 2));
        let cert = design_controller(&model, &ControllerOptions::default()).unwrap();
        let vf = VelocityForm::new(&model);
        let cl = closed_loop(&vf, &cert.gains);
        assert!(spectral_radius(&cl.a_k) < 1.0);
        let margins = verify_controller(&model, &cert);
        assert!(margins.clears(1e-8), "margins {margins:?}");
        assert!(cert.gamma.is_infinite());
        assert!(cert.beta > 0.0);
    }

    #[test]
    fn controller_design_stabilizes_unstable_plant() {
        let mut found = 0;
        for seed in 0..6 {
            let model = random_model(&GenConfig::unstable(3, 2, 2, 2, seed));
            if spectral_radius(&model.a) <= 1.0 {
                continue;
            }
            match design_controller(&model, &ControllerOptions::default()) {
                Ok(cert) => {
                    let vf = VelocityForm::new(&model);
                    let cl = closed_loop(&vf, &cert.gains);
                    assert!(
                        spectral_radius(&cl.a_k) < 1.0,
                        "seed {seed} closed loop not contractive"
                    );
                    found += 1;
                }
                Err(Error::SynthesisFailed { .. }) => {}
                Err(other) => panic!("seed {seed}: unexpected error {other}"),
            }
        }
        assert!(found >= 3, "too few unstable plants certified: {found}");
    }

    #[test]
    fn unstabilizable_mode_is_rejected() {
        // The unstable first state is untouched by the input on every path.
        let model = RnnModel {
            a: DMatrix::from_row_slice(2, 2, &[1.5, 0.0, 0.0, 0.5]),
            b: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            b_s: DMatrix::zeros(2, 1),
            a_tilde: DMatrix::zeros(1, 2),
            b_tilde: DMatrix::zeros(1, 1),
            b_s_tilde: DMatrix::zeros(1, 1),
            c: DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            activations: vec![Activation::Tanh],
        };
        let err = design_controller(&model, &ControllerOptions::default()).unwrap_err();
        assert!(matches!(err, Error::SynthesisFailed { .. }), "{err}");
    }

    #[test]
    fn rank_deficient_steady_map_is_rejected() {
        // No input path at all: the steady-state matrix loses column rank
        // in its input block, so no feasible input-to-output pairing exists.
        let model = RnnModel {
            a: DMatrix::from_row_slice(1, 1, &[0.5]),
            b: DMatrix::zeros(1, 1),
            b_s: DMatrix::zeros(1, 1),
            a_tilde: DMatrix::zeros(1, 1),
            b_tilde: DMatrix::zeros(1, 1),
            b_s_tilde: DMatrix::zeros(1, 1),
            c: DMatrix::from_row_slice(1, 1, &[1.0]),
            activations: vec![Activation::Tanh],
        };
        let err = design_controller(&model, &ControllerOptions::default()).unwrap_err();
        assert!(matches!(err, Error::SynthesisFailed { .. }), "{err}");
    }

    #[test]
    fn normalization_reports_flattest_certificate() {
        let model = random_model(&GenConfig::stable(2, 1, 1, 1, 4));
        let opts = ControllerOptions::default();
        let cert = design_controller(&model, &opts).unwrap();
        let lam_max = -min_symmetric_eigenvalue(&(-cert.p.clone()));
        assert_abs_diff_eq!(lam_max, -cert.alpha, epsilon = 2e-5);
        assert!(cert.alpha <= -opts.p_min + 2e-5);
        let lam_min = min_symmetric_eigenvalue(&cert.p);
        assert!(lam_min >= opts.p_min - 1e-7);
    }

    #[test]
    fn terminal_weight_matches_value_iteration_on_linear_plant() {
        // Purely linear plant (all activation paths zero): the tail-cost
        // program collapses to a discrete Lyapunov inequality whose minimal
        // solution is the value-iteration fixed point for the fixed gain.
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, 0.0, 0.7]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let model = RnnModel {
            a: a.clone(),
            b: b.clone(),
            b_s: DMatrix::zeros(2, 1),
            a_tilde: DMatrix::zeros(1, 2),
            b_tilde: DMatrix::zeros(1, 1),
            b_s_tilde: DMatrix::zeros(1, 1),
            c: c.clone(),
            activations: vec![Activation::Tanh],
        };
        let vf = VelocityForm::new(&model);
        let n_xi = vf.n_xi();
        let q_w = DMatrix::identity(n_xi, n_xi);
        let r_w = DMatrix::identity(1, 1);
        // Independent oracle: value-iterate the Riccati recursion for the
        // optimal gain, then the Lyapunov recursion for its cost.
        let mut p_ric = q_w.clone();
        for _ in 0..20_000 {
            let ba = vf.b_v.transpose() * &p_ric * &vf.a_v;
            let rr = &r_w + vf.b_v.transpose() * &p_ric * &vf.b_v;
            let k_gain = -rr.clone().lu().solve(&ba).unwrap();
            let acl = &vf.a_v + &vf.b_v * &k_gain;
            let next = &q_w
                + k_gain.transpose() * &r_w * &k_gain
                + acl.transpose() * &p_ric * &acl;
            let diff = (&next - &p_ric).amax();
            p_ric = next;
            if diff < 1e-13 {
                break;
            }
        }
        let ba = vf.b_v.transpose() * &p_ric * &vf.a_v;
        let rr = &r_w + vf.b_v.transpose() * &p_ric * &vf.b_v;
        let k_opt = -rr.lu().solve(&ba).unwrap();
        let gains = Gains {
            k: k_opt.clone(),
            k_tilde: DMatrix::zeros(1, 1),
        };
        // Lyapunov fixed point for the fixed gain (equals p_ric here, but
        // recomputed independently).
        let acl = &vf.a_v + &vf.b_v * &k_opt;
        let w = &q_w + k_opt.transpose() * &r_w * &k_opt;
        let mut p_star = w.clone();
        for _ in 0..20_000 {
            let next = &w + acl.transpose() * &p_star * &acl;
            let diff = (&next - &p_star).amax();
            p_star = next;
            if diff < 1e-13 {
                break;
            }
        }
        let cons = BoxConstraints::unbounded(1, 1);
        let terminal = design_terminal(
            &model,
            &gains,
            &q_w,
            &r_w,
            &cons,
            &DVector::zeros(1),
            &DVector::zeros(1),
            &TerminalOptions::default(),
        )
        .unwrap();
        let lam_max_sol = -min_symmetric_eigenvalue(&(-terminal.p.clone()));
        let lam_max_star = -min_symmetric_eigenvalue(&(-p_star.clone()));
        assert_abs_diff_eq!(lam_max_sol, lam_max_star, epsilon = 1e-4 * (1.0 + lam_max_star));
        // The designed weight dominates the minimal tail cost.
        assert!(min_symmetric_eigenvalue(&(&terminal.p - &p_star)) > -1e-6);
        assert!(terminal.gamma.is_infinite());
    }

    #[test]
    fn terminal_radius_is_finite_under_constraints() {
        let model = random_model(&GenConfig::stable(3, 1, 1, 2, 2));
        let cert = design_controller(&model, &ControllerOptions::default()).unwrap();
        let n_xi = model.n() + model.p();
        let cons = BoxConstraints {
            u_min: DVector::from_element(1, -0.6),
            u_max: DVector::from_element(1, 0.6),
            y_min: DVector::from_element(1, -0.5),
            y_max: DVector::from_element(1, 0.5),
        };
        let opts = TerminalOptions {
            gamma: GammaOptions {
                guard_samples: 2000,
                ..Default::default()
            },
            ..Default::default()
        };
        let terminal = design_terminal(
            &model,
            &cert.gains,
            &DMatrix::identity(n_xi, n_xi),
            &DMatrix::identity(1, 1),
            &cons,
            &DVector::zeros(1),
            &DVector::zeros(1),
            &opts,
        )
        .unwrap();
        assert!(terminal.gamma.is_finite());
        assert!(terminal.gamma > 0.0);
    }

    #[test]
    fn observer_design_contracts_error_dynamics() {
        let model = random_model(&GenConfig::stable(3, 1, 1, 2, 6));
        let cert = design_observer(&model, &ObserverOptions::default()).unwrap();
        let of = observer_form(&model);
        let a_el = &of.a_e - &cert.l * &of.c_e;
        assert!(spectral_radius(&a_el) < 1.0);
        let margins = verify_observer(&model, &cert);
        assert!(margins.clears(1e-8), "margins {margins:?}");
        assert!(cert.gamma.is_infinite());
    }

    #[test]
    fn observer_design_with_slope_bound_has_finite_region() {
        let model = random_model(&GenConfig::stable(3, 1, 1, 2, 6));
        let opts = ObserverOptions {
            lambda_o: 0.35,
            ..Default::default()
        };
        let cert = design_observer(&model, &opts).unwrap();
        let margins = verify_observer(&model, &cert);
        assert!(margins.clears(1e-8), "margins {margins:?}");
        assert!(cert.gamma.is_finite());
        assert!(cert.gamma > 0.0);
    }
}
