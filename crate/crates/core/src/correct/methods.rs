//! Correction methods behind a common interface, looked up by CLI name.

use std::fmt;
use std::sync::OnceLock;

use log::debug;

use super::{correct_features_linear, correct_features_relu, fit_constrained_glm, relu, CorrectionOutcome, MdmmConfig};
use crate::error::{OrthoError, Result};
use crate::glm::{fit_glm, negative_log_likelihood, GlmFamily, GlmFit, GlmOptions};
use crate::linalg::{self, Matrix, Vector};
use crate::registry::Registry;

/// Everything a correction method may need. `z` and `x` exclude intercepts.
pub struct CorrectionProblem<'a> {
    pub z: &'a Matrix,
    pub y: &'a Vector,
    pub x: &'a Matrix,
    pub family: &'static dyn GlmFamily,
    pub mdmm: MdmmConfig,
}

pub trait Corrector: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// Fits the prediction model and returns its (corrected) predictions.
    fn correct(&self, problem: &CorrectionProblem<'_>) -> Result<CorrectionOutcome>;
}

/// The unconstrained GLM, as a baseline.
#[derive(Debug)]
pub struct Uncorrected;

/// Classical correction: fit the GLM on `P⊥_{[1,X]} Z`.
///
/// Columns of `Z` that the projection makes linearly dependent are dropped
/// and get a zero coefficient.
#[derive(Debug)]
pub struct LinearCorrection;

/// Constrained GLM fit solved by MDMM.
#[derive(Debug)]
pub struct GlmConstrained;

/// ReLU prediction model `ReLU(Z_c γ)` without intercept, fitted by least
/// squares on `Z_c = P⊥_X Z`. The outcome's intercept entry is always 0.
#[derive(Debug)]
pub struct ReluCorrection;

fn mean_loss(family: &dyn GlmFamily, y: &Vector, eta: &Vector) -> f64 {
    negative_log_likelihood(family, y, eta) / y.len() as f64
}

fn constraint_of(x: &Matrix, predictions: &Vector) -> f64 {
    linalg::center_columns(x).tr_mul(predictions).norm_squared()
}

fn glm_outcome(fit: GlmFit, y: &Vector, x: &Matrix, gamma: Vector) -> CorrectionOutcome {
    CorrectionOutcome {
        constraint_residual: constraint_of(x, &fit.fitted_means),
        loss: mean_loss(fit.family, y, &fit.linear_predictor),
        gamma_c: gamma,
        corrected_predictions: fit.fitted_means,
        lambda_final: 0.0,
        iterations: fit.iterations,
        converged: fit.converged,
        trajectory: Vec::new(),
    }
}

/// Fits on the columns of `z` listed in `keep`, dropping columns the QR flags
/// as dependent. Returns the fit and the surviving column indices.
fn fit_dropping_dependent(
    z: &Matrix,
    y: &Vector,
    family: &'static dyn GlmFamily,
    mut keep: Vec<usize>,
) -> Result<(GlmFit, Vec<usize>)> {
    loop {
        let sub = z.select_columns(keep.iter());
        match fit_glm(&sub, y, family, &GlmOptions::default()) {
            Ok(fit) => return Ok((fit, keep)),
            // Column 0 of the design is the intercept.
            Err(OrthoError::RankDeficient { column }) if column > 0 => {
                debug!("dropping feature {} made dependent by the projection", keep[column - 1]);
                keep.remove(column - 1);
            }
            Err(e) => return Err(e),
        }
    }
}

fn scatter(q: usize, keep: &[usize], coefs: &Vector, intercept: f64) -> Vector {
    let mut gamma = Vector::zeros(q + 1);
    gamma[0] = intercept;
    for (slot, &col) in keep.iter().enumerate() {
        gamma[col + 1] = coefs[slot];
    }
    gamma
}

impl Corrector for Uncorrected {
    fn name(&self) -> &'static str {
        "uncorrected"
    }

    fn correct(&self, pb: &CorrectionProblem<'_>) -> Result<CorrectionOutcome> {
        let fit = fit_glm(pb.z, pb.y, pb.family, &GlmOptions::default())?;
        let gamma = fit.coefficients.clone();
        Ok(glm_outcome(fit, pb.y, pb.x, gamma))
    }
}

impl Corrector for LinearCorrection {
    fn name(&self) -> &'static str {
        "linear"
    }

    /// `gamma_c` refers to the corrected design `[1 | Z_c]`.
    fn correct(&self, pb: &CorrectionProblem<'_>) -> Result<CorrectionOutcome> {
        let zc = correct_features_linear(&linalg::with_intercept(pb.x), pb.z)?;
        let (fit, keep) = fit_dropping_dependent(&zc, pb.y, pb.family, (0..zc.ncols()).collect())?;
        let coefs = fit.coefficients.rows(1, keep.len()).into_owned();
        let gamma = scatter(zc.ncols(), &keep, &coefs, fit.coefficients[0]);
        Ok(glm_outcome(fit, pb.y, pb.x, gamma))
    }
}

impl Corrector for GlmConstrained {
    fn name(&self) -> &'static str {
        "glm-constrained"
    }

    fn correct(&self, pb: &CorrectionProblem<'_>) -> Result<CorrectionOutcome> {
        fit_constrained_glm(pb.z, pb.y, pb.x, pb.family, &pb.mdmm)
    }
}

/// Mean of `(y - ReLU(Aγ))² / 2`.
fn relu_objective(a: &Matrix, y: &Vector, gamma: &Vector) -> f64 {
    let fitted = (a * gamma).map(relu);
    0.5 * (y - fitted).norm_squared() / y.len() as f64
}

/// Least squares on the active rows, with step halving, starting from the
/// linear least-squares solution.
fn fit_relu_regression(a: &Matrix, y: &Vector, max_iter: usize) -> Result<(Vector, usize)> {
    let (n, k) = a.shape();
    let mut gamma = linalg::least_squares_vec(a, y)?;
    let mut obj = relu_objective(a, y, &gamma);
    for iter in 1..=max_iter {
        let eta = a * &gamma;
        let active: Vec<usize> = (0..n).filter(|&i| eta[i] > 0.0).collect();
        if active.len() < k {
            return Ok((gamma, iter));
        }
        let sub_a = a.select_rows(active.iter());
        let sub_y = Vector::from_iterator(active.len(), active.iter().map(|&i| y[i]));
        let proposal = match linalg::least_squares_vec(&sub_a, &sub_y) {
            Ok(v) => v,
            Err(OrthoError::RankDeficient { .. }) => return Ok((gamma, iter)),
            Err(e) => return Err(e),
        };
        let step = &proposal - &gamma;
        let mut scale = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let cand = &gamma + &step * scale;
            let cand_obj = relu_objective(a, y, &cand);
            if cand_obj < obj {
                let gain = obj - cand_obj;
                gamma = cand;
                obj = cand_obj;
                improved = gain > 1e-14 * obj.max(f64::MIN_POSITIVE);
                break;
            }
            scale *= 0.5;
        }
        if !improved {
            return Ok((gamma, iter));
        }
    }
    Ok((gamma, max_iter))
}

impl Corrector for ReluCorrection {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn correct(&self, pb: &CorrectionProblem<'_>) -> Result<CorrectionOutcome> {
        let zc = correct_features_relu(pb.x, pb.z)?;
        let mut keep: Vec<usize> = (0..zc.ncols()).collect();
        let (coefs, iterations) = loop {
            let sub = zc.select_columns(keep.iter());
            match fit_relu_regression(&sub, pb.y, 200) {
                Ok(res) => break res,
                Err(OrthoError::RankDeficient { column }) => {
                    keep.remove(column);
                }
                Err(e) => return Err(e),
            }
        };
        let gamma = scatter(zc.ncols(), &keep, &coefs, 0.0);
        let sub = zc.select_columns(keep.iter());
        let fitted = (&sub * &coefs).map(relu);
        Ok(CorrectionOutcome {
            constraint_residual: constraint_of(pb.x, &fitted),
            loss: 0.5 * (pb.y - &fitted).norm_squared() / pb.y.len() as f64,
            gamma_c: gamma,
            corrected_predictions: fitted,
            lambda_final: 0.0,
            iterations,
            converged: true,
            trajectory: Vec::new(),
        })
    }
}

fn registry() -> &'static Registry<dyn Corrector> {
    static REG: OnceLock<Registry<dyn Corrector>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut reg: Registry<dyn Corrector> = Registry::new("correction method");
        reg.register("uncorrected", Box::new(Uncorrected))
            .register("linear", Box::new(LinearCorrection))
            .register("glm-constrained", Box::new(GlmConstrained))
            .register("relu", Box::new(ReluCorrection));
        reg
    })
}

pub fn corrector_by_name(name: &str) -> Result<&'static dyn Corrector> {
    registry().get(name)
}

pub fn corrector_names() -> Vec<&'static str> {
    registry().names()
}
