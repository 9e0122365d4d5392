//! Constrained GLM fitting with the modified differential multiplier method.
//!
//! Minimizes the mean negative log-likelihood `ℓ(γ)` of a GLM with design
//! `D = [1 | Z]` subject to `𝒜(γ) = ‖Xcᵀ h(Dγ)‖² = 0`. Each iteration takes
//!
//! ```text
//! γ ← γ − ν P⁻¹ [∇ℓ + (λ + ζ𝒜) ∇𝒜]
//! λ ← λ + ν 𝒜
//! ```
//!
//! where `P` is the preconditioner. With the identity this is plain MDMM
//! gradient descent/ascent. The squared constraint has a vanishing gradient
//! on the feasible set, so plain gradient steps need a multiplier that grows
//! without bound and are only practical on small, well-scaled problems. The
//! Gauss-Newton preconditioner uses the curvature of the same energy and
//! reaches feasibility in a handful of iterations at unit step size.

use std::f64::consts::PI;
use std::fmt;
use std::sync::OnceLock;

use log::{debug, warn};
use nalgebra::Cholesky;

use super::CorrectionOutcome;
use crate::error::{OrthoError, Result};
use crate::glm::{fit_glm, GlmFamily, GlmOptions};
use crate::linalg::{self, check_finite, check_finite_vec, Matrix, Vector};
use crate::registry::Registry;

#[derive(Debug, Clone, Copy)]
pub struct MdmmConfig {
    /// Step size `ν` shared by the descent and ascent updates.
    pub learning_rate: f64,
    /// Penalty weight `ζ` of the `ζ/2 𝒜²` augmentation.
    pub damping: f64,
    pub max_iter: usize,
    pub constraint_tol: f64,
    pub lambda_init: f64,
    pub preconditioner: &'static dyn Preconditioner,
    /// Anneal `ν` along a half cosine over `max_iter`.
    pub cosine_decay: bool,
    /// Length of the window over which the loss must be stable.
    pub loss_window: usize,
    /// Relative loss change allowed over `loss_window` iterations.
    pub loss_rel_tol: f64,
    /// Restarts from the initial point with `ν` halved after divergence.
    pub max_restarts: usize,
    /// An infeasible run whose constraint has not dropped by 0.1% within
    /// this many iterations is treated like a divergence; 0 disables.
    pub stall_window: usize,
    /// Start at the unconstrained fit instead of the intercept-only model.
    pub warm_start: bool,
    /// Record every `trace_every`-th iterate; 0 disables tracing.
    pub trace_every: usize,
}

impl MdmmConfig {
    /// Plain MDMM gradient steps with the textbook defaults.
    pub fn plain_gradient() -> Self {
        MdmmConfig {
            learning_rate: 1e-2,
            preconditioner: &IDENTITY,
            // Plain gradient steps are slow by design, not stalled.
            stall_window: 0,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(OrthoError::InvalidSpec(format!("MDMM {what}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return bad("damping must be non-negative");
        }
        if !(self.constraint_tol > 0.0) {
            return bad("constraint tolerance must be positive");
        }
        if !self.lambda_init.is_finite() {
            return bad("initial multiplier must be finite");
        }
        if self.max_iter == 0 {
            return bad("iteration budget must be positive");
        }
        Ok(())
    }
}

impl Default for MdmmConfig {
    fn default() -> Self {
        MdmmConfig {
            learning_rate: 1.0,
            damping: 1.0,
            max_iter: 50_000,
            constraint_tol: 1e-6,
            lambda_init: 0.0,
            preconditioner: &GAUSS_NEWTON,
            cosine_decay: false,
            loss_window: 100,
            loss_rel_tol: 1e-9,
            max_restarts: 5,
            stall_window: 500,
            warm_start: true,
            trace_every: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MdmmStep {
    pub iteration: usize,
    pub loss: f64,
    pub constraint: f64,
    pub lambda: f64,
    pub gamma: Vector,
}

/// Quantities at the current iterate that a preconditioner may use.
pub struct MdmmState<'a> {
    pub design: &'a Matrix,
    pub xc: &'a Matrix,
    pub family: &'a dyn GlmFamily,
    pub eta: &'a Vector,
    /// `Xcᵀ h(η)`.
    pub constraint_vector: &'a Vector,
    /// `λ + ζ 𝒜`.
    pub multiplier: f64,
    pub damping: f64,
}

pub trait Preconditioner: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// Returns `P⁻¹ g`.
    fn apply(&self, state: &MdmmState<'_>, g: &Vector) -> Result<Vector>;
}

#[derive(Debug)]
pub struct IdentityPreconditioner;

/// Fisher information of the loss plus the Gauss-Newton curvature of the
/// multiplier and penalty terms.
#[derive(Debug)]
pub struct GaussNewton;

pub static IDENTITY: IdentityPreconditioner = IdentityPreconditioner;
pub static GAUSS_NEWTON: GaussNewton = GaussNewton;

impl Preconditioner for IdentityPreconditioner {
    fn name(&self) -> &'static str {
        "gradient"
    }

    fn apply(&self, _state: &MdmmState<'_>, g: &Vector) -> Result<Vector> {
        Ok(g.clone())
    }
}

impl Preconditioner for GaussNewton {
    fn name(&self) -> &'static str {
        "gauss-newton"
    }

    /// Solves `(H + 2 Jᵀ S J) d = g` with `H = DᵀWD/n`, `J = Xcᵀ diag(h') D`
    /// and `S = Λ I + 2ζ c cᵀ`.
    ///
    /// `S` can be huge once the multiplier has grown, so the system is solved
    /// in the bordered form `[[H, Jᵀ], [J, -(2S)⁻¹]] [d; w] = [g; 0]`, which
    /// stays well conditioned as `Λ → ∞`.
    fn apply(&self, state: &MdmmState<'_>, g: &Vector) -> Result<Vector> {
        let (n, k) = state.design.shape();
        let slope = state.eta.map(|e| state.family.inverse_link_deriv(e));
        let mut weighted = state.design.clone();
        for mut col in weighted.column_iter_mut() {
            col.component_mul_assign(&slope);
        }
        // Explicit transpose: the gemm path is several times faster than tr_mul.
        let mut h = state.design.transpose() * &weighted / n as f64;
        // Keeps H invertible when fitted means saturate.
        let ridge = 1e-12 * (h.trace() / k as f64).max(f64::MIN_POSITIVE);
        for j in 0..k {
            h[(j, j)] += ridge;
        }

        let lam = state.multiplier;
        if !(lam > 0.0) {
            return match Cholesky::new(h.clone()) {
                Some(chol) => Ok(chol.solve(g)),
                None => h.lu().solve(g).ok_or(OrthoError::SingularInformation),
            };
        }

        let j = state.xc.transpose() * &weighted;
        let p = j.nrows();
        let c = state.constraint_vector;
        let zeta2 = 2.0 * state.damping;
        // (2S)⁻¹ by Sherman-Morrison.
        let mut s_inv = Matrix::identity(p, p);
        s_inv -= (c * c.transpose()) * (zeta2 / (lam + zeta2 * c.norm_squared()));
        s_inv /= 2.0 * lam;

        let mut kkt = Matrix::zeros(k + p, k + p);
        kkt.view_mut((0, 0), (k, k)).copy_from(&h);
        kkt.view_mut((0, k), (k, p)).copy_from(&j.transpose());
        kkt.view_mut((k, 0), (p, k)).copy_from(&j);
        kkt.view_mut((k, k), (p, p)).copy_from(&(-s_inv));
        let mut rhs = Vector::zeros(k + p);
        rhs.rows_mut(0, k).copy_from(g);
        let sol = kkt.lu().solve(&rhs).ok_or(OrthoError::SingularInformation)?;
        Ok(sol.rows(0, k).into_owned())
    }
}

fn preconditioners() -> &'static Registry<dyn Preconditioner> {
    static REG: OnceLock<Registry<dyn Preconditioner>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut reg: Registry<dyn Preconditioner> = Registry::new("preconditioner");
        reg.register("gradient", Box::new(IdentityPreconditioner))
            .register("gauss-newton", Box::new(GaussNewton));
        reg
    })
}

pub fn preconditioner_by_name(name: &str) -> Result<&'static dyn Preconditioner> {
    preconditioners().get(name)
}

pub fn preconditioner_names() -> Vec<&'static str> {
    preconditioners().names()
}

/// `𝒜(γ) = ‖Xcᵀ h(Zγ)‖²`. `xc` must be column-centered.
pub fn constraint_value(gamma: &Vector, z: &Matrix, xc: &Matrix, family: &dyn GlmFamily) -> f64 {
    let mu = (z * gamma).map(|e| family.inverse_link(e));
    xc.tr_mul(&mu).norm_squared()
}

/// `∇𝒜(γ) = 2 Zᵀ diag(h'(Zγ)) Xc Xcᵀ h(Zγ)`.
pub fn constraint_gradient(gamma: &Vector, z: &Matrix, xc: &Matrix, family: &dyn GlmFamily) -> Vector {
    let eta = z * gamma;
    let mu = eta.map(|e| family.inverse_link(e));
    let c = xc.tr_mul(&mu);
    let mut inner = xc * c;
    for (v, &e) in inner.iter_mut().zip(eta.iter()) {
        *v *= 2.0 * family.inverse_link_deriv(e);
    }
    z.tr_mul(&inner)
}

struct Problem<'a> {
    design: Matrix,
    xc: Matrix,
    y: &'a Vector,
    family: &'static dyn GlmFamily,
}

struct Point {
    eta: Vector,
    mu: Vector,
    c: Vector,
    constraint: f64,
    loss: f64,
}

impl Problem<'_> {
    fn n(&self) -> f64 {
        self.design.nrows() as f64
    }

    fn at(&self, gamma: &Vector) -> Point {
        let eta = &self.design * gamma;
        let mu = eta.map(|e| self.family.inverse_link(e));
        let c = self.xc.tr_mul(&mu);
        let loss = self
            .y
            .iter()
            .zip(eta.iter())
            .map(|(&yi, &ei)| self.family.unit_nll(yi, ei))
            .sum::<f64>()
            / self.n();
        Point {
            constraint: c.norm_squared(),
            eta,
            mu,
            c,
            loss,
        }
    }

    fn loss_gradient(&self, pt: &Point) -> Vector {
        self.design.tr_mul(&(&pt.mu - self.y)) / self.n()
    }

    fn constraint_gradient(&self, pt: &Point) -> Vector {
        let mut inner = &self.xc * &pt.c;
        for (v, &e) in inner.iter_mut().zip(pt.eta.iter()) {
            *v *= 2.0 * self.family.inverse_link_deriv(e);
        }
        self.design.tr_mul(&inner)
    }

    fn outcome(&self, gamma: Vector, pt: Point, lambda: f64, iterations: usize, converged: bool) -> CorrectionOutcome {
        CorrectionOutcome {
            gamma_c: gamma,
            corrected_predictions: pt.mu,
            constraint_residual: pt.constraint,
            loss: pt.loss,
            lambda_final: lambda,
            iterations,
            converged,
            trajectory: Vec::new(),
        }
    }
}

/// Tracks the most useful iterate seen: feasible with the lowest loss, or
/// failing that, the least infeasible.
#[derive(Default)]
struct Best {
    entry: Option<(Vector, f64, f64, f64, usize)>,
}

impl Best {
    fn offer(&mut self, gamma: &Vector, pt: &Point, lambda: f64, iteration: usize, tol: f64) {
        let better = match &self.entry {
            None => true,
            Some((_, a, l, _, _)) => {
                let (was_ok, now_ok) = (*a <= tol, pt.constraint <= tol);
                match (was_ok, now_ok) {
                    (true, true) => pt.loss < *l,
                    (false, true) => true,
                    (true, false) => false,
                    (false, false) => pt.constraint < *a,
                }
            }
        };
        if better && pt.loss.is_finite() && pt.constraint.is_finite() {
            self.entry = Some((gamma.clone(), pt.constraint, pt.loss, lambda, iteration));
        }
    }
}

enum RunEnd {
    Converged(CorrectionOutcome),
    Diverged,
    Stalled,
    Exhausted,
}

/// Fits `y ~ h([1 | Z] γ)` subject to the protected-orthogonality constraint.
///
/// `gamma_c` has the intercept first. On an exhausted iteration budget the
/// error carries the best iterate seen.
pub fn fit_constrained_glm(
    z: &Matrix,
    y: &Vector,
    x: &Matrix,
    family: &'static dyn GlmFamily,
    cfg: &MdmmConfig,
) -> Result<CorrectionOutcome> {
    let (n, q) = z.shape();
    let p = x.ncols();
    if y.len() != n {
        return Err(OrthoError::dims("response length", n, y.len()));
    }
    if x.nrows() != n {
        return Err(OrthoError::dims("rows of protected features", n, x.nrows()));
    }
    if !(n > q && q >= p && p >= 1) {
        return Err(OrthoError::InvalidSpec(format!(
            "constrained fit needs n > q >= p >= 1, got n={n}, q={q}, p={p}"
        )));
    }
    cfg.validate()?;
    check_finite(z, "features")?;
    check_finite(x, "protected features")?;
    check_finite_vec(y, "response")?;
    family.validate_response(y)?;

    let problem = Problem {
        design: linalg::with_intercept(z),
        xc: linalg::center_columns(x),
        y,
        family,
    };
    linalg::check_full_rank(&problem.design)?;
    let mut start = initial_point(z, y, family, cfg.warm_start);
    let mut warm = cfg.warm_start;

    let mut best = Best::default();
    let mut lr = cfg.learning_rate;
    let mut trace = Vec::new();
    for attempt in 0..=cfg.max_restarts {
        trace.clear();
        match run(&problem, &start, lr, cfg, &mut best, &mut trace)? {
            RunEnd::Converged(mut out) => {
                out.trajectory = trace;
                return Ok(out);
            }
            RunEnd::Exhausted => break,
            // A separated unconstrained fit saturates the weights, and a
            // very infeasible one inflates the multiplier until unit steps
            // oscillate. The intercept-only model is feasible and always usable.
            end @ (RunEnd::Diverged | RunEnd::Stalled) if warm => {
                warm = false;
                start = initial_point(z, y, family, false);
                warn!("MDMM {} from the unconstrained fit (attempt {}), restarting from the intercept-only model", end.verb(), attempt + 1);
            }
            end @ (RunEnd::Diverged | RunEnd::Stalled) => {
                lr *= 0.5;
                warn!("MDMM {} (attempt {}), restarting with learning rate {lr:e}", end.verb(), attempt + 1);
            }
        }
    }

    let Some((gamma, _, _, lambda, iteration)) = best.entry else {
        return Err(OrthoError::DidNotConverge { iterations: 0 });
    };
    let pt = problem.at(&gamma);
    let mut out = problem.outcome(gamma, pt, lambda, iteration, false);
    out.trajectory = trace;
    Err(OrthoError::ConstrainedDidNotConverge(Box::new(out)))
}

impl RunEnd {
    fn verb(&self) -> &'static str {
        match self {
            RunEnd::Stalled => "stalled",
            _ => "diverged",
        }
    }
}

fn initial_point(z: &Matrix, y: &Vector, family: &'static dyn GlmFamily, warm: bool) -> Vector {
    let q = z.ncols();
    if warm {
        match fit_glm(z, y, family, &GlmOptions::default()) {
            Ok(fit) => return fit.coefficients,
            Err(e) => warn!("unconstrained warm start failed ({e}); starting from the intercept-only model"),
        }
    }
    let mut gamma = Vector::zeros(q + 1);
    gamma[0] = family.link(family.clamp_mean(y.mean()));
    gamma
}

fn run(
    problem: &Problem<'_>,
    start: &Vector,
    lr: f64,
    cfg: &MdmmConfig,
    best: &mut Best,
    trace: &mut Vec<MdmmStep>,
) -> Result<RunEnd> {
    let mut gamma = start.clone();
    let mut lambda = cfg.lambda_init;
    let mut pt = problem.at(&gamma);
    let guard = 1e8 * pt.constraint.max(1.0);
    let mut losses = Vec::with_capacity(cfg.max_iter.min(1 << 16) + 1);
    // Lowest constraint of this run and the iteration it was reached.
    let mut record = (f64::INFINITY, 0);

    for t in 0..=cfg.max_iter {
        if cfg.trace_every > 0 && t % cfg.trace_every == 0 {
            trace.push(MdmmStep {
                iteration: t,
                loss: pt.loss,
                constraint: pt.constraint,
                lambda,
                gamma: gamma.clone(),
            });
        }
        let finite = pt.loss.is_finite() && pt.constraint.is_finite() && lambda.is_finite();
        if !finite || pt.loss > 1e8 || pt.constraint > guard {
            debug!("MDMM divergence at iteration {t}: loss {:e}, constraint {:e}", pt.loss, pt.constraint);
            return Ok(RunEnd::Diverged);
        }
        best.offer(&gamma, &pt, lambda, t, cfg.constraint_tol);
        losses.push(pt.loss);
        if pt.constraint < 0.999 * record.0 {
            record = (pt.constraint, t);
        } else if cfg.stall_window > 0 && pt.constraint > cfg.constraint_tol && t - record.1 >= cfg.stall_window {
            debug!("MDMM stalled at iteration {t}: constraint {:e}", pt.constraint);
            return Ok(RunEnd::Stalled);
        }

        if pt.constraint <= cfg.constraint_tol && t >= cfg.loss_window {
            let old = losses[t - cfg.loss_window];
            if (pt.loss - old).abs() <= cfg.loss_rel_tol * pt.loss.abs().max(f64::MIN_POSITIVE) {
                let out = problem.outcome(gamma, pt, lambda, t, true);
                return Ok(RunEnd::Converged(out));
            }
        }
        if t == cfg.max_iter {
            break;
        }

        let step = if cfg.cosine_decay {
            lr * 0.5 * (1.0 + (PI * t as f64 / cfg.max_iter as f64).cos())
        } else {
            lr
        };
        let multiplier = lambda + cfg.damping * pt.constraint;
        let mut g = problem.loss_gradient(&pt);
        g.axpy(multiplier, &problem.constraint_gradient(&pt), 1.0);
        let state = MdmmState {
            design: &problem.design,
            xc: &problem.xc,
            family: problem.family,
            eta: &pt.eta,
            constraint_vector: &pt.c,
            multiplier,
            damping: cfg.damping,
        };
        let direction = match cfg.preconditioner.apply(&state, &g) {
            Ok(d) => d,
            Err(OrthoError::SingularInformation) => return Ok(RunEnd::Diverged),
            Err(e) => return Err(e),
        };
        gamma.axpy(-step, &direction, 1.0);
        lambda += step * pt.constraint;
        pt = problem.at(&gamma);
    }
    Ok(RunEnd::Exhausted)
}
