use libm::erfc;
use nalgebra::Cholesky;
use serde::Serialize;

use super::{design_matrix, GlmFit};
use crate::error::{OrthoError, Result};
use crate::linalg::Matrix;

/// Thresholds an evaluation must clear to count as a null model.
#[derive(Debug, Clone, Copy)]
pub struct NullThresholds {
    /// Every slope p-value must be at least this.
    pub alpha: f64,
    /// Every slope must be at most this in absolute value.
    pub max_abs_coefficient: f64,
}

impl Default for NullThresholds {
    fn default() -> Self {
        NullThresholds {
            alpha: 0.05,
            max_abs_coefficient: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
}

impl CoefficientRow {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Wald inference for the protected-feature slopes of an evaluation model.
#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub intercept: Option<CoefficientRow>,
    pub slopes: Vec<CoefficientRow>,
    pub converged: bool,
    pub null_certified: bool,
}

impl EvaluationReport {
    pub fn coefficients(&self) -> Vec<f64> {
        self.slopes.iter().map(|r| r.estimate).collect()
    }

    pub fn std_errors(&self) -> Vec<f64> {
        self.slopes.iter().map(|r| r.std_error).collect()
    }

    pub fn z_stats(&self) -> Vec<f64> {
        self.slopes.iter().map(|r| r.z).collect()
    }

    pub fn p_values(&self) -> Vec<f64> {
        self.slopes.iter().map(|r| r.p_value).collect()
    }

    pub fn max_abs_coefficient(&self) -> f64 {
        self.slopes.iter().map(|r| r.estimate.abs()).fold(0.0, f64::max)
    }

    pub fn min_p_value(&self) -> f64 {
        self.slopes.iter().map(|r| r.p_value).fold(1.0, f64::min)
    }

    /// Re-evaluates the null certificate under other thresholds.
    pub fn certify(&self, thresholds: &NullThresholds) -> bool {
        self.converged
            && self.slopes.iter().all(|r| {
                r.p_value >= thresholds.alpha && r.estimate.abs() <= thresholds.max_abs_coefficient
            })
    }

    pub fn rename_slopes<S: AsRef<str>>(&mut self, names: &[S]) {
        for (row, name) in self.slopes.iter_mut().zip(names) {
            row.name = name.as_ref().to_string();
        }
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `2 (1 - Φ(|z|))`, evaluated through `erfc` to keep precision in the tail.
pub fn two_sided_p_value(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Standard errors from the inverse Fisher information `(Zᵀ Υ Z)⁻¹`, scaled
/// by the residual variance for families with a dispersion parameter.
///
/// `z` is the design the fit was computed on, without the intercept column.
pub fn wald_inference(fit: &GlmFit, z: &Matrix) -> Result<EvaluationReport> {
    wald_inference_with(fit, z, &NullThresholds::default())
}

pub fn wald_inference_with(
    fit: &GlmFit,
    z: &Matrix,
    thresholds: &NullThresholds,
) -> Result<EvaluationReport> {
    let design = design_matrix(z, fit.with_intercept);
    let (n, k) = design.shape();
    if fit.coefficients.len() != k {
        return Err(OrthoError::dims("coefficient count", k, fit.coefficients.len()));
    }
    if fit.weights.len() != n {
        return Err(OrthoError::dims("weight count", n, fit.weights.len()));
    }

    let mut weighted = design.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        row *= fit.weights[i];
    }
    let info = design.tr_mul(&weighted);
    let chol = Cholesky::new(info).ok_or(OrthoError::SingularInformation)?;
    let cov = chol.inverse();
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(OrthoError::SingularInformation);
    }

    let dispersion = if fit.family.estimates_dispersion() {
        if n <= k {
            return Err(OrthoError::SingularInformation);
        }
        // gaussian: deviance is the residual sum of squares
        fit.final_deviance / (n - k) as f64
    } else {
        1.0
    };

    let mut rows: Vec<CoefficientRow> = (0..k)
        .map(|j| {
            let estimate = fit.coefficients[j];
            let std_error = (cov[(j, j)] * dispersion).sqrt();
            let z = if estimate == 0.0 { 0.0 } else { estimate / std_error };
            CoefficientRow {
                name: String::new(),
                estimate,
                std_error,
                z,
                p_value: two_sided_p_value(z),
            }
        })
        .collect();

    let intercept = if fit.with_intercept {
        let mut row = rows.remove(0);
        row.name = "(Intercept)".into();
        Some(row)
    } else {
        None
    };
    for (j, row) in rows.iter_mut().enumerate() {
        row.name = format!("x{}", j + 1);
    }

    let mut report = EvaluationReport {
        intercept,
        slopes: rows,
        converged: fit.converged,
        null_certified: false,
    };
    report.null_certified = report.certify(thresholds);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::{fit_glm, GlmOptions, GAUSSIAN};
    use crate::linalg::Vector;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn normal_cdf_reference_points() {
        assert_abs_diff_eq!(normal_cdf(0.0), 0.5, epsilon = 1e-15);
        // Φ(1.959963984540054) = 0.975
        assert_abs_diff_eq!(normal_cdf(1.959963984540054), 0.975, epsilon = 1e-12);
        assert_abs_diff_eq!(normal_cdf(-1.0), 0.15865525393145707, epsilon = 1e-12);
        assert_abs_diff_eq!(two_sided_p_value(0.0), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn doubling_z_lowers_p() {
        for &z in &[0.1, 0.8, 1.5, 3.0] {
            assert!(two_sided_p_value(2.0 * z) < two_sided_p_value(z));
        }
    }

    #[test]
    fn ols_standard_errors_match_textbook_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 10;
        let x = Matrix::from_fn(n, 1, |_, _| rng.random_range(-2.0..2.0));
        let y = Vector::from_fn(n, |i, _| 0.5 + 1.5 * x[(i, 0)] + rng.sample::<f64, _>(StandardNormal));
        let fit = fit_glm(&x, &y, &GAUSSIAN, &GlmOptions::default()).unwrap();
        let report = wald_inference(&fit, &x).unwrap();

        // hand-rolled (XᵀX)⁻¹ σ̂² for the simple regression
        let xbar = x.column(0).mean();
        let ybar = y.mean();
        let sxx: f64 = x.column(0).iter().map(|v| (v - xbar).powi(2)).sum();
        let sxy: f64 = (0..n).map(|i| (x[(i, 0)] - xbar) * (y[i] - ybar)).sum();
        let slope = sxy / sxx;
        let intercept = ybar - slope * xbar;
        let rss: f64 = (0..n).map(|i| (y[i] - intercept - slope * x[(i, 0)]).powi(2)).sum();
        let sigma2 = rss / (n as f64 - 2.0);
        let se_slope = (sigma2 / sxx).sqrt();
        let se_icept = (sigma2 * (1.0 / n as f64 + xbar * xbar / sxx)).sqrt();

        assert_abs_diff_eq!(report.slopes[0].estimate, slope, epsilon = 1e-8);
        assert_abs_diff_eq!(report.slopes[0].std_error, se_slope, epsilon = 1e-8);
        assert_abs_diff_eq!(report.intercept.as_ref().unwrap().std_error, se_icept, epsilon = 1e-8);
    }

    #[test]
    fn zero_estimate_gives_unit_p_value() {
        let x = Matrix::from_column_slice(4, 1, &[-1.0, 1.0, -1.0, 1.0]);
        let y = Vector::from_vec(vec![2.0, 2.0, 4.0, 4.0]);
        let fit = fit_glm(&x, &y, &GAUSSIAN, &GlmOptions::default()).unwrap();
        let mut fit = fit;
        fit.coefficients[1] = 0.0;
        let report = wald_inference(&fit, &x).unwrap();
        assert_eq!(report.slopes[0].z, 0.0);
        assert_eq!(report.slopes[0].p_value, 1.0);
    }
}
