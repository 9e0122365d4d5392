//! Corrections that remove the protected features' influence.
//!
//! Linear and ReLU feature corrections and the tensor corrections are a single
//! projection. GLM predictions are corrected either after the fact (the
//! prediction-level correction, which may leave the mean domain) or during
//! fitting, by minimizing the likelihood subject to `Xcᵀ h(Zγ) = 0` with
//! [`fit_constrained_glm`].

mod mdmm;
mod methods;

pub use mdmm::{
    constraint_gradient, constraint_value, fit_constrained_glm, preconditioner_by_name,
    preconditioner_names, GaussNewton, IdentityPreconditioner, MdmmConfig, MdmmState, MdmmStep,
    Preconditioner, GAUSS_NEWTON, IDENTITY,
};
pub use methods::{
    corrector_by_name, corrector_names, CorrectionProblem, Corrector, GlmConstrained,
    LinearCorrection, ReluCorrection, Uncorrected,
};

use crate::error::Result;
use crate::glm::GlmFamily;
use crate::linalg::{self, build_projector, mode1_product, DenseTensor, Matrix, Vector};

#[derive(Debug, Clone)]
pub struct CorrectionOutcome {
    /// Coefficients of the prediction model, intercept first.
    pub gamma_c: Vector,
    /// `h(D γ_c)` where `D` is the design the coefficients refer to.
    pub corrected_predictions: Vector,
    /// `‖Xcᵀ ŷ_c‖²` with `Xc` the centered protected features.
    pub constraint_residual: f64,
    /// Mean negative log-likelihood of the response at `ŷ_c`.
    pub loss: f64,
    pub lambda_final: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Recorded MDMM iterates; empty unless tracing was requested.
    pub trajectory: Vec<MdmmStep>,
}

/// `Z_c = P⊥_X Z`.
///
/// Pass `linalg::with_intercept(X)` when the downstream evaluation model
/// carries an intercept, so the corrected features are also centered.
pub fn correct_features_linear(x: &Matrix, z: &Matrix) -> Result<Matrix> {
    let proj = build_projector(x)?;
    proj.apply_complement(z)
}

/// Same transformation as [`correct_features_linear`], applied to the input
/// of a ReLU layer.
///
/// The pre-activation cross term `(Z_c γ)ᵀ X β` vanishes for every `γ`, `β`.
/// The activated cross term `ReLU(Z_c γ)ᵀ ReLU(Xβ)` does not in general; see
/// [`relu_decomposition`].
pub fn correct_features_relu(x: &Matrix, z: &Matrix) -> Result<Matrix> {
    correct_features_linear(x, z)
}

/// `ŷ_c = P⊥_{[1, X]} ŷ + h(0)·1`.
///
/// The intercept column joins the projector so that an evaluation GLM with
/// intercept returns zero slopes. The result is not clipped to the family's
/// mean domain.
pub fn correct_predictions_glm(x: &Matrix, y_hat: &Vector, family: &dyn GlmFamily) -> Result<Vector> {
    linalg::check_finite_vec(y_hat, "predictions")?;
    let proj = build_projector(&linalg::with_intercept(x))?;
    let offset = family.inverse_link(0.0);
    Ok(proj.apply_complement_vec(y_hat)?.add_scalar(offset))
}

/// `Ŷ_c = P⊥_X ×₁ Ŷ`.
pub fn correct_tensor_prediction(x: &Matrix, y_hat: &DenseTensor) -> Result<DenseTensor> {
    let proj = build_projector(x)?;
    mode1_product(&proj, y_hat)
}

/// `Ȳ_c = P⊥_X ×₁ Ȳ`, to be applied before the ReLU.
pub fn correct_tensor_preactivation(x: &Matrix, pre: &DenseTensor) -> Result<DenseTensor> {
    correct_tensor_prediction(x, pre)
}

pub fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// The four products `h(±a)ᵀ h(±b)` in the order `(+,+), (-,+), (+,-), (-,-)`.
///
/// Since `a = h(a) - h(-a)`, they combine to `aᵀb` with signs `+, -, -, +`.
/// Orthogonal `a` and `b` therefore only force the two diagonal products to
/// balance the two off-diagonal ones, not each product to vanish.
pub fn relu_decomposition(a: &Vector, b: &Vector) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (&ai, &bi) in a.iter().zip(b.iter()) {
        out[0] += relu(ai) * relu(bi);
        out[1] += relu(-ai) * relu(bi);
        out[2] += relu(ai) * relu(-bi);
        out[3] += relu(-ai) * relu(-bi);
    }
    out
}
