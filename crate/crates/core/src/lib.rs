//! Orthogonalization of model predictions and learned representations with
//! respect to protected features.
//!
//! Linear corrections project features onto the orthogonal complement of the
//! protected design. Models with a non-linear activation need more: GLM
//! predictions are corrected by a constrained fit solved with the modified
//! differential multiplier method, ReLU layers by projecting their inputs, and
//! tensor-valued layer outputs by a mode-1 projection. Evaluation models
//! certify that the protected features no longer explain the corrected
//! predictions.

pub mod correct;
pub mod error;
pub mod evalmodel;
pub mod glm;
pub mod linalg;
pub mod online;
pub mod registry;
pub mod synth;

pub use error::{OrthoError, Result};
pub use linalg::{DenseTensor, Matrix, Projector, Vector};
