//! The denoiser contract shared by the exact oracle and the neural net.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::state::ReasoningState;

/// A denoiser output: the clean-data estimate per variable, plus optional
/// per-variable scalar uncertainty, mixture responsibilities and a learned
/// variance-interpolation coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Estimated clean values, `n x dim`.
    pub x0_mean: DMatrix<f64>,
    /// Per-variable scalar uncertainty (posterior variance trace), length `n`.
    pub var: Option<DVector<f64>>,
    /// Posterior component responsibilities, length `k`, on the simplex.
    pub responsibilities: Option<DVector<f64>>,
    /// Learned reverse-variance interpolation coefficient in `[0, 1]`,
    /// length `n`; produced only by nets with the variance-interp head.
    pub var_interp: Option<DVector<f64>>,
}

impl Prediction {
    pub fn from_mean(x0_mean: DMatrix<f64>) -> Self {
        Self {
            x0_mean,
            var: None,
            responsibilities: None,
            var_interp: None,
        }
    }
}

/// Anything that can denoise a state: maps the noisy per-variable values and
/// levels to a clean-data estimate. Implementations must be reentrant; the
/// sampling engine may call them from several chains at once.
pub trait Denoiser: Sync {
    fn denoise(&self, state: &ReasoningState) -> Result<Prediction>;
}
