//! Exponential-family distributions with their canonical links.

use std::fmt;
use std::sync::OnceLock;

use crate::error::{OrthoError, Result};
use crate::linalg::Vector;
use crate::registry::Registry;

/// Means are kept this far from the boundary of the mean domain when
/// computing IRLS weights and working responses.
pub const MEAN_CLAMP: f64 = 1e-10;

/// A GLM family paired with its canonical link `g = h⁻¹`.
///
/// `h` is the inverse link, which doubles as the activation function of a
/// prediction model.
pub trait GlmFamily: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// `h(η)`.
    fn inverse_link(&self, eta: f64) -> f64;

    /// `h'(η)`.
    fn inverse_link_deriv(&self, eta: f64) -> f64;

    /// `g(μ)`.
    fn link(&self, mu: f64) -> f64;

    /// `g'(μ)`.
    fn link_deriv(&self, mu: f64) -> f64;

    /// `V(μ)`.
    fn variance(&self, mu: f64) -> f64;

    /// Whether `μ` lies in the open mean domain.
    fn mean_in_domain(&self, mu: f64) -> bool;

    /// Pulls `μ` inside the open mean domain.
    fn clamp_mean(&self, mu: f64) -> f64;

    /// Whether a response value is admissible.
    fn response_in_domain(&self, y: f64) -> bool;

    /// Negative log-likelihood of one observation as a function of the
    /// linear predictor, dropping terms that depend on `y` only.
    fn unit_nll(&self, y: f64, eta: f64) -> f64;

    /// `unit_nll` minimized over `η`, used to turn likelihoods into deviances.
    fn saturated_nll(&self, y: f64) -> f64;

    /// True when the family carries a free dispersion parameter that Wald
    /// inference must estimate.
    fn estimates_dispersion(&self) -> bool {
        false
    }

    fn validate_response(&self, y: &Vector) -> Result<()> {
        match y.iter().position(|&v| !v.is_finite() || !self.response_in_domain(v)) {
            None => Ok(()),
            Some(i) => Err(OrthoError::Domain(format!(
                "response {} at row {i} is outside the {} domain",
                y[i],
                self.name()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Gaussian;

#[derive(Debug, Clone, Copy, Default)]
pub struct Bernoulli;

#[derive(Debug, Clone, Copy, Default)]
pub struct Poisson;

pub static GAUSSIAN: Gaussian = Gaussian;
pub static BERNOULLI: Bernoulli = Bernoulli;
pub static POISSON: Poisson = Poisson;

impl GlmFamily for Gaussian {
    fn name(&self) -> &'static str {
        "gaussian"
    }
    fn inverse_link(&self, eta: f64) -> f64 {
        eta
    }
    fn inverse_link_deriv(&self, _eta: f64) -> f64 {
        1.0
    }
    fn link(&self, mu: f64) -> f64 {
        mu
    }
    fn link_deriv(&self, _mu: f64) -> f64 {
        1.0
    }
    fn variance(&self, _mu: f64) -> f64 {
        1.0
    }
    fn mean_in_domain(&self, mu: f64) -> bool {
        mu.is_finite()
    }
    fn clamp_mean(&self, mu: f64) -> f64 {
        mu
    }
    fn response_in_domain(&self, y: f64) -> bool {
        y.is_finite()
    }
    fn unit_nll(&self, y: f64, eta: f64) -> f64 {
        0.5 * (y - eta) * (y - eta)
    }
    fn saturated_nll(&self, _y: f64) -> f64 {
        0.0
    }
    fn estimates_dispersion(&self) -> bool {
        true
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn xlogx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

impl GlmFamily for Bernoulli {
    fn name(&self) -> &'static str {
        "bernoulli"
    }
    fn inverse_link(&self, eta: f64) -> f64 {
        if eta >= 0.0 {
            1.0 / (1.0 + (-eta).exp())
        } else {
            let e = eta.exp();
            e / (1.0 + e)
        }
    }
    fn inverse_link_deriv(&self, eta: f64) -> f64 {
        let mu = self.inverse_link(eta);
        mu * (1.0 - mu)
    }
    fn link(&self, mu: f64) -> f64 {
        (mu / (1.0 - mu)).ln()
    }
    fn link_deriv(&self, mu: f64) -> f64 {
        1.0 / (mu * (1.0 - mu))
    }
    fn variance(&self, mu: f64) -> f64 {
        mu * (1.0 - mu)
    }
    fn mean_in_domain(&self, mu: f64) -> bool {
        mu > 0.0 && mu < 1.0
    }
    fn clamp_mean(&self, mu: f64) -> f64 {
        mu.clamp(MEAN_CLAMP, 1.0 - MEAN_CLAMP)
    }
    /// Soft targets in `[0, 1]` are admissible.
    fn response_in_domain(&self, y: f64) -> bool {
        (0.0..=1.0).contains(&y)
    }
    fn unit_nll(&self, y: f64, eta: f64) -> f64 {
        softplus(eta) - y * eta
    }
    fn saturated_nll(&self, y: f64) -> f64 {
        -(xlogx(y) + xlogx(1.0 - y))
    }
}

impl GlmFamily for Poisson {
    fn name(&self) -> &'static str {
        "poisson"
    }
    fn inverse_link(&self, eta: f64) -> f64 {
        eta.exp()
    }
    fn inverse_link_deriv(&self, eta: f64) -> f64 {
        eta.exp()
    }
    fn link(&self, mu: f64) -> f64 {
        mu.ln()
    }
    fn link_deriv(&self, mu: f64) -> f64 {
        1.0 / mu
    }
    fn variance(&self, mu: f64) -> f64 {
        mu
    }
    fn mean_in_domain(&self, mu: f64) -> bool {
        mu > 0.0 && mu.is_finite()
    }
    fn clamp_mean(&self, mu: f64) -> f64 {
        mu.max(MEAN_CLAMP)
    }
    fn response_in_domain(&self, y: f64) -> bool {
        y >= 0.0
    }
    fn unit_nll(&self, y: f64, eta: f64) -> f64 {
        eta.exp() - y * eta
    }
    fn saturated_nll(&self, y: f64) -> f64 {
        y - xlogx(y)
    }
}

fn registry() -> &'static Registry<dyn GlmFamily> {
    static FAMILIES: OnceLock<Registry<dyn GlmFamily>> = OnceLock::new();
    FAMILIES.get_or_init(|| {
        let mut reg: Registry<dyn GlmFamily> = Registry::new("family");
        reg.register("gaussian", Box::new(Gaussian))
            .register("bernoulli", Box::new(Bernoulli))
            .register("poisson", Box::new(Poisson));
        reg
    })
}

/// Looks up a family by name (`gaussian`, `bernoulli`, `poisson`).
pub fn family_by_name(name: &str) -> Result<&'static dyn GlmFamily> {
    registry().get(name)
}

pub fn family_names() -> Vec<&'static str> {
    registry().names()
}
