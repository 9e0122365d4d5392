//! Generalized linear models: canonical families, IRLS fitting with Fisher
//! weights, and Wald inference.
//!
//! The same engine serves as prediction model (fitting `y` on `Z`) and as
//! evaluation model (fitting corrected predictions on the protected `X`).

mod family;
mod inference;

pub use family::{
    family_by_name, family_names, Bernoulli, Gaussian, GlmFamily, Poisson, BERNOULLI, GAUSSIAN,
    MEAN_CLAMP, POISSON,
};
pub use inference::{
    normal_cdf, two_sided_p_value, wald_inference, CoefficientRow, EvaluationReport,
    NullThresholds,
};

use log::debug;

use crate::error::{OrthoError, Result};
use crate::linalg::{self, check_finite, check_finite_vec, Matrix, Vector};

/// Maximum number of step halvings per IRLS iteration.
pub const MAX_HALVINGS: usize = 30;

/// Likelihood increases below this relative size are rounding noise.
const NLL_ROUNDING: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct GlmOptions {
    pub max_iter: usize,
    /// Bound on the max-norm of the score at the returned coefficients.
    pub tol: f64,
    /// Prepend an intercept column to the design.
    pub with_intercept: bool,
}

impl Default for GlmOptions {
    fn default() -> Self {
        GlmOptions {
            max_iter: 100,
            tol: 1e-8,
            with_intercept: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GlmFit {
    pub family: &'static dyn GlmFamily,
    /// Intercept first when `with_intercept` is set.
    pub coefficients: Vector,
    pub with_intercept: bool,
    pub linear_predictor: Vector,
    pub fitted_means: Vector,
    /// Fisher weights `Υ` at the returned coefficients.
    pub weights: Vector,
    pub iterations: usize,
    pub converged: bool,
    pub final_deviance: f64,
    /// Max-norm of the score `D^T (y - μ)` at the returned coefficients.
    pub score_norm: f64,
    /// Deviance at the start and after every accepted IRLS step.
    pub deviance_path: Vec<f64>,
}

/// `Υ_i = 1 / (g'(μ_i)² V(μ_i))`.
pub fn fisher_weights(family: &dyn GlmFamily, mu: &Vector) -> Result<Vector> {
    check_means(family, mu)?;
    Ok(mu.map(|m| unchecked_weight(family, m)))
}

/// `r_i = g'(μ_i) (y_i - μ_i)`.
pub fn working_response(family: &dyn GlmFamily, y: &Vector, mu: &Vector) -> Result<Vector> {
    if y.len() != mu.len() {
        return Err(OrthoError::dims("working response length", mu.len(), y.len()));
    }
    check_means(family, mu)?;
    Ok(Vector::from_iterator(
        y.len(),
        y.iter().zip(mu.iter()).map(|(&yi, &mi)| family.link_deriv(mi) * (yi - mi)),
    ))
}

fn check_means(family: &dyn GlmFamily, mu: &Vector) -> Result<()> {
    match mu.iter().position(|&m| !family.mean_in_domain(m)) {
        None => Ok(()),
        Some(i) => Err(OrthoError::Domain(format!(
            "mean {} at row {i} is on or outside the boundary of the {} mean domain",
            mu[i],
            family.name()
        ))),
    }
}

fn unchecked_weight(family: &dyn GlmFamily, mu: f64) -> f64 {
    let g = family.link_deriv(mu);
    1.0 / (g * g * family.variance(mu))
}

/// Sum of per-observation negative log-likelihoods at linear predictor `eta`.
pub fn negative_log_likelihood(family: &dyn GlmFamily, y: &Vector, eta: &Vector) -> f64 {
    y.iter()
        .zip(eta.iter())
        .map(|(&yi, &ei)| family.unit_nll(yi, ei))
        .sum()
}

/// Gradient of [`negative_log_likelihood`] in the coefficients,
/// `-D^T (y - h(Dβ))` for a canonical link.
pub fn nll_gradient(family: &dyn GlmFamily, design: &Matrix, y: &Vector, beta: &Vector) -> Vector {
    let eta = design * beta;
    let resid = Vector::from_iterator(
        y.len(),
        y.iter().zip(eta.iter()).map(|(&yi, &ei)| family.inverse_link(ei) - yi),
    );
    design.tr_mul(&resid)
}

pub fn deviance(family: &dyn GlmFamily, y: &Vector, eta: &Vector) -> f64 {
    2.0 * y
        .iter()
        .zip(eta.iter())
        .map(|(&yi, &ei)| family.unit_nll(yi, ei) - family.saturated_nll(yi))
        .sum::<f64>()
}

/// Builds the design used by a fit: `[1 | Z]` or `Z`.
pub fn design_matrix(z: &Matrix, with_intercept: bool) -> Matrix {
    if with_intercept {
        linalg::with_intercept(z)
    } else {
        z.clone()
    }
}

/// `argmin_b Σ w_i (t_i - d_iᵀ b)²`.
///
/// Normal equations through a Cholesky factor; the line search and the score
/// test absorb their rounding. Falls back to QR on `√W D` when the weighted
/// information matrix is not numerically positive definite.
fn weighted_least_squares(design: &Matrix, weights: &Vector, target: &Vector) -> Result<Vector> {
    let mut weighted = design.clone();
    for mut col in weighted.column_iter_mut() {
        col.component_mul_assign(weights);
    }
    let info = design.transpose() * &weighted;
    let rhs = weighted.tr_mul(target);
    if let Some(chol) = info.cholesky() {
        let b = chol.solve(&rhs);
        if b.iter().all(|v| v.is_finite()) {
            return Ok(b);
        }
    }
    let sqrt_w = weights.map(f64::sqrt);
    let mut scaled = design.clone();
    for mut col in scaled.column_iter_mut() {
        col.component_mul_assign(&sqrt_w);
    }
    linalg::least_squares_vec(&scaled, &target.component_mul(&sqrt_w))
}

/// Fits a GLM by Fisher scoring (IRLS) with step halving on the likelihood.
pub fn fit_glm(
    z: &Matrix,
    y: &Vector,
    family: &'static dyn GlmFamily,
    opts: &GlmOptions,
) -> Result<GlmFit> {
    let design = design_matrix(z, opts.with_intercept);
    fit_design(&design, y, family, opts)
}

pub(crate) fn fit_design(
    design: &Matrix,
    y: &Vector,
    family: &'static dyn GlmFamily,
    opts: &GlmOptions,
) -> Result<GlmFit> {
    let (n, k) = design.shape();
    if y.len() != n {
        return Err(OrthoError::dims("response length", n, y.len()));
    }
    check_finite(design, "design matrix")?;
    check_finite_vec(y, "response")?;
    family.validate_response(y)?;
    // Rank check up front so the failure names a column.
    linalg::check_full_rank(design)?;

    let mut beta = Vector::zeros(k);
    if opts.with_intercept && n > 0 {
        beta[0] = family.link(family.clamp_mean(y.mean()));
    }
    let mut eta = design * &beta;
    let mut nll = negative_log_likelihood(family, y, &eta);
    let mut path = vec![deviance(family, y, &eta)];
    let score_scale = design.tr_mul(y).amax().max(1.0);

    let mut iterations = 0;
    loop {
        let mu = eta.map(|e| family.inverse_link(e));
        let score = design.tr_mul(&(y - &mu));
        let score_norm = score.amax();
        if score_norm <= opts.tol {
            return Ok(finish(y, family, opts, beta, eta, iterations, score_norm, path));
        }
        if iterations >= opts.max_iter {
            return Err(OrthoError::DidNotConverge { iterations });
        }
        iterations += 1;

        let clamped = mu.map(|m| family.clamp_mean(m));
        let weights = clamped.map(|m| unchecked_weight(family, m));
        let mut target = Vector::zeros(n);
        for i in 0..n {
            target[i] = eta[i] + family.link_deriv(clamped[i]) * (y[i] - mu[i]);
        }
        let proposal = weighted_least_squares(design, &weights, &target)?;

        let step = &proposal - &beta;
        let mut accepted = None;
        let mut scale = 1.0;
        for _ in 0..=MAX_HALVINGS {
            let candidate = &beta + &step * scale;
            let cand_eta = design * &candidate;
            let cand_nll = negative_log_likelihood(family, y, &cand_eta);
            if cand_nll.is_finite() && cand_nll <= nll + NLL_ROUNDING * nll.abs().max(1.0) {
                accepted = Some((candidate, cand_eta, cand_nll));
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some((b, e, l)) => {
                let moved = (&b - &beta).amax();
                beta = b;
                eta = e;
                nll = l;
                path.push(deviance(family, y, &eta));
                if moved <= 1e-15 * beta.amax().max(1.0) && score_norm <= 1e-6 * score_scale {
                    debug!("IRLS stalled at machine precision after {iterations} iterations");
                    return Ok(finish(y, family, opts, beta, eta, iterations, score_norm, path));
                }
            }
            None => {
                // No descent direction left: accept only if the score is at rounding level.
                if score_norm <= 1e-6 * score_scale {
                    return Ok(finish(y, family, opts, beta, eta, iterations, score_norm, path));
                }
                return Err(OrthoError::DidNotConverge { iterations });
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    y: &Vector,
    family: &'static dyn GlmFamily,
    opts: &GlmOptions,
    beta: Vector,
    eta: Vector,
    iterations: usize,
    score_norm: f64,
    deviance_path: Vec<f64>,
) -> GlmFit {
    let fitted_means = eta.map(|e| family.inverse_link(e));
    let weights = fitted_means.map(|m| unchecked_weight(family, family.clamp_mean(m)));
    GlmFit {
        family,
        coefficients: beta,
        with_intercept: opts.with_intercept,
        final_deviance: deviance(family, y, &eta),
        linear_predictor: eta,
        fitted_means,
        weights,
        iterations,
        converged: true,
        score_norm,
        deviance_path,
    }
}
