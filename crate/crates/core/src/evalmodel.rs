//! Evaluation models: regress (corrected) predictions on the protected
//! features and report whether anything is left to explain.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::correct::relu;
use crate::error::{OrthoError, Result};
use crate::glm::{fit_glm, wald_inference, EvaluationReport, GlmFamily, GlmOptions};
use crate::linalg::{self, DenseTensor, Matrix, Vector};
use crate::registry::Registry;

/// Fits `ŷ_c ~ h([1 | X] β)` and reports Wald inference for the slopes.
///
/// Bernoulli targets may be probabilities rather than labels.
pub fn evaluate_glm(x: &Matrix, y_hat: &Vector, family: &'static dyn GlmFamily) -> Result<EvaluationReport> {
    let fit = fit_glm(x, y_hat, family, &GlmOptions::default())?;
    wald_inference(&fit, x)
}

#[derive(Debug, Clone, Copy)]
pub struct ReluEvalOptions {
    pub starts: usize,
    /// Standard deviation of the random starting coefficients.
    pub start_scale: f64,
    pub seed: u64,
    pub max_iter: usize,
}

impl Default for ReluEvalOptions {
    fn default() -> Self {
        ReluEvalOptions {
            starts: 16,
            start_scale: 0.1,
            seed: 0,
            max_iter: 20_000,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReluEvaluation {
    pub beta: Vec<f64>,
    pub objective: f64,
    pub objective_at_zero: f64,
    /// `‖ReLU(X β̂)‖`.
    pub relu_norm: f64,
    /// Index of the start that produced `beta`.
    pub start: usize,
    pub certified: bool,
}

/// `‖ŷ - ReLU(Xβ)‖² / n`.
pub fn relu_objective(x: &Matrix, y_hat: &Vector, beta: &Vector) -> f64 {
    let fitted = (x * beta).map(relu);
    (y_hat - fitted).norm_squared() / y_hat.len() as f64
}

fn relu_gradient(x: &Matrix, y_hat: &Vector, beta: &Vector) -> Vector {
    let eta = x * beta;
    let n = y_hat.len() as f64;
    let inner = Vector::from_iterator(
        eta.len(),
        eta.iter().zip(y_hat.iter()).map(|(&e, &y)| if e > 0.0 { -2.0 * (y - e) / n } else { 0.0 }),
    );
    x.tr_mul(&inner)
}

struct Descent {
    beta: Vector,
    objective: f64,
    converged: bool,
}

/// Gradient descent with Armijo backtracking.
fn descend(x: &Matrix, y_hat: &Vector, mut beta: Vector, max_iter: usize) -> Descent {
    let mut obj = relu_objective(x, y_hat, &beta);
    let mut step = 1.0;
    for _ in 0..max_iter {
        let g = relu_gradient(x, y_hat, &beta);
        let gnorm2 = g.norm_squared();
        if gnorm2.sqrt() <= 1e-12 * (1.0 + obj) {
            return Descent { beta, objective: obj, converged: true };
        }
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &beta - &g * step;
            let cand_obj = relu_objective(x, y_hat, &cand);
            if cand_obj <= obj - 0.5 * step * gnorm2 {
                let gain = obj - cand_obj;
                beta = cand;
                obj = cand_obj;
                accepted = true;
                if gain <= 1e-15 * obj.max(f64::MIN_POSITIVE) {
                    return Descent { beta, objective: obj, converged: true };
                }
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No decrease at any resolvable step: a kink or rounding-level optimum.
            return Descent { beta, objective: obj, converged: true };
        }
    }
    Descent { beta, objective: obj, converged: false }
}

/// Multi-start gradient descent on `β ↦ ‖ŷ_c - ReLU(Xβ)‖² / n`.
///
/// The minimizer is not unique (every `β` with `Xβ ≤ 0` gives the same
/// value), so certification looks at `‖ReLU(X β̂)‖` and at whether the best
/// objective improves on `β = 0`.
pub fn evaluate_relu_l2(x: &Matrix, y_hat: &Vector, opts: &ReluEvalOptions) -> Result<ReluEvaluation> {
    if y_hat.len() != x.nrows() {
        return Err(OrthoError::dims("prediction length", x.nrows(), y_hat.len()));
    }
    linalg::check_finite_vec(y_hat, "predictions")?;
    linalg::check_full_rank(x)?;
    if opts.starts == 0 {
        return Err(OrthoError::InvalidSpec("at least one start is required".into()));
    }
    let p = x.ncols();
    let normal = Normal::new(0.0, opts.start_scale)
        .map_err(|e| OrthoError::InvalidSpec(format!("start scale: {e}")))?;

    let runs: Vec<Descent> = (0..opts.starts)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(s as u64);
            let start = Vector::from_fn(p, |_, _| normal.sample(&mut rng));
            descend(x, y_hat, start, opts.max_iter)
        })
        .collect();

    // Lowest objective wins; ties go to the earlier start.
    let (start, best) = runs
        .iter()
        .enumerate()
        .filter(|(_, r)| r.converged)
        .min_by(|a, b| a.1.objective.total_cmp(&b.1.objective).then(a.0.cmp(&b.0)))
        .ok_or(OrthoError::DidNotConverge { iterations: opts.max_iter })?;

    let relu_norm = (x * &best.beta).map(relu).norm();
    let objective_at_zero = y_hat.norm_squared() / y_hat.len() as f64;
    Ok(ReluEvaluation {
        beta: best.beta.iter().copied().collect(),
        objective: best.objective,
        objective_at_zero,
        relu_norm,
        start,
        certified: relu_norm <= 1e-6 && best.objective >= objective_at_zero - 1e-9,
    })
}

#[derive(Debug, Clone)]
pub struct TensorEvaluation {
    /// `p x d1 x ... x dR` coefficient tensor.
    pub coefficients: DenseTensor,
    pub frobenius: f64,
}

/// Tensor-on-vector regression `Ŷ ≈ X ×₁ 𝔅`, solved column by column on the
/// matricization.
pub fn evaluate_tensor(x: &Matrix, y_hat: &DenseTensor) -> Result<TensorEvaluation> {
    if y_hat.n() != x.nrows() {
        return Err(OrthoError::dims("tensor mode-1 size", x.nrows(), y_hat.n()));
    }
    let coef = linalg::least_squares(x, &y_hat.matricize())?;
    let mut dims = y_hat.dims().to_vec();
    dims[0] = x.ncols();
    let coefficients = DenseTensor::from_matricized(dims, &coef)?;
    Ok(TensorEvaluation {
        frobenius: coefficients.frobenius_norm(),
        coefficients,
    })
}

/// Result of a vector-valued evaluation model.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum Evaluation {
    Glm(EvaluationReport),
    ReluL2(ReluEvaluation),
}

impl Evaluation {
    pub fn certified(&self) -> bool {
        match self {
            Evaluation::Glm(r) => r.null_certified,
            Evaluation::ReluL2(r) => r.certified,
        }
    }
}

pub trait Evaluator: Send + Sync {
    fn name(&self) -> &'static str;

    fn evaluate(&self, x: &Matrix, y_hat: &Vector, family: &'static dyn GlmFamily) -> Result<Evaluation>;
}

pub struct GlmEvaluator;

/// Ignores the family; the activation is always ReLU.
pub struct ReluL2Evaluator(pub ReluEvalOptions);

impl Evaluator for GlmEvaluator {
    fn name(&self) -> &'static str {
        "glm"
    }

    fn evaluate(&self, x: &Matrix, y_hat: &Vector, family: &'static dyn GlmFamily) -> Result<Evaluation> {
        evaluate_glm(x, y_hat, family).map(Evaluation::Glm)
    }
}

impl Evaluator for ReluL2Evaluator {
    fn name(&self) -> &'static str {
        "relu-l2"
    }

    fn evaluate(&self, x: &Matrix, y_hat: &Vector, _family: &'static dyn GlmFamily) -> Result<Evaluation> {
        evaluate_relu_l2(x, y_hat, &self.0).map(Evaluation::ReluL2)
    }
}

fn registry() -> &'static Registry<dyn Evaluator> {
    static REG: OnceLock<Registry<dyn Evaluator>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut reg: Registry<dyn Evaluator> = Registry::new("evaluation model");
        reg.register("glm", Box::new(GlmEvaluator))
            .register("relu-l2", Box::new(ReluL2Evaluator(ReluEvalOptions::default())));
        reg
    })
}

pub fn evaluator_by_name(name: &str) -> Result<&'static dyn Evaluator> {
    registry().get(name)
}

pub fn evaluator_names() -> Vec<&'static str> {
    registry().names()
}
