//! Modular training losses and their gradients at the prediction outputs.
//!
//! Four loss kinds, freely combinable with weights:
//!
//! * `mse` — mean squared error in any target parameterization; the implied
//!   prediction in that parameterization is derived from the clean-data
//!   estimate through the paradigm identities,
//! * `nll` — Gaussian negative log-likelihood driving the uncertainty head,
//! * `vlb` — KL between the discrete-grid true posterior and the model
//!   posterior with interpolated variance; drives only the interpolation
//!   head (the mean contribution is stop-gradiented),
//! * `cosine` — `1 - cos(angle)` between predicted and true velocity.
//!
//! Loss terms and gradients exclude conditioned variables.

use nalgebra::{DMatrix, DVector};

use crate::denoiser::Prediction;
use crate::error::{Error, Result};
use crate::paradigm::{Coeffs, Paradigm, PredictionKind};

/// Variance floor of the `nll` term.
pub const SIGMA2_FLOOR: f64 = 1e-6;
/// Floor for the true posterior variance inside `vlb` (the first grid step
/// has an exactly-zero posterior variance).
pub const BETA_TILDE_FLOOR: f64 = 1e-12;
const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Mse,
    Nll,
    Vlb,
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub kind: LossKind,
    pub weight: f64,
    pub target: PredictionKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub terms: Vec<LossTerm>,
}

impl LossSpec {
    pub fn mse(target: PredictionKind) -> Self {
        Self {
            terms: vec![LossTerm {
                kind: LossKind::Mse,
                weight: 1.0,
                target,
            }],
        }
    }

    pub fn validate(&self, paradigm: &Paradigm) -> Result<()> {
        if !self.terms.iter().any(|t| t.weight > 0.0) {
            return Err(Error::InvalidSpec(
                "loss spec needs at least one positively weighted term".into(),
            ));
        }
        for term in &self.terms {
            if term.weight < 0.0 {
                return Err(Error::InvalidSpec("loss weights must be >= 0".into()));
            }
            match term.kind {
                LossKind::Vlb if paradigm.grid().is_none() => {
                    return Err(Error::InvalidSpec(
                        "vlb loss requires the discrete-step paradigm".into(),
                    ));
                }
                LossKind::Cosine if term.target != PredictionKind::U => {
                    return Err(Error::InvalidSpec(
                        "cosine loss is defined only for the velocity parameterization".into(),
                    ));
                }
                LossKind::Cosine if !paradigm.has_derivatives() => {
                    return Err(Error::InvalidSpec(
                        "cosine loss needs a paradigm with coefficient derivatives".into(),
                    ));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Gradients of the total loss at the prediction outputs: with respect to
/// the clean-data estimate, the log-variance and the interpolation
/// coefficient (before the sigmoid).
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub d_x0: DMatrix<f64>,
    pub d_logvar: Option<DVector<f64>>,
    /// With respect to the interpolation value `h` in `[0, 1]`.
    pub d_interp: Option<DVector<f64>>,
}

/// How a residual in the target parameterization relates to a residual in
/// the clean-data estimate: `pred_K - tgt_K = slope * (x0_hat - x0)`.
fn residual_slope(c: &Coeffs, kind: PredictionKind, t: f64) -> Result<f64> {
    match kind {
        PredictionKind::X0 => Ok(1.0),
        PredictionKind::Epsilon => {
            if c.b == 0.0 {
                return Err(Error::SingularConversion {
                    from: PredictionKind::X0,
                    to: kind,
                    t,
                });
            }
            Ok(-c.a / c.b)
        }
        PredictionKind::V => {
            if c.b == 0.0 {
                return Err(Error::SingularConversion {
                    from: PredictionKind::X0,
                    to: kind,
                    t,
                });
            }
            Ok(-(c.a * c.a + c.b * c.b) / c.b)
        }
        PredictionKind::U => {
            let (da, db) = match (c.da, c.db) {
                (Some(da), Some(db)) => (da, db),
                _ => return Err(Error::DerivativesUndefined("u loss target")),
            };
            if c.b == 0.0 {
                return Err(Error::SingularConversion {
                    from: PredictionKind::X0,
                    to: kind,
                    t,
                });
            }
            Ok(da - db * c.a / c.b)
        }
    }
}

/// Computes the weighted total loss and its gradients at the prediction
/// outputs. Targets in any parameterization are derived from
/// `(target_x0, target_eps, levels)` through the paradigm identities.
#[allow(clippy::too_many_arguments)]
pub fn compute_loss(
    pred: &Prediction,
    target_x0: &DMatrix<f64>,
    target_eps: &DMatrix<f64>,
    paradigm: &Paradigm,
    levels: &DVector<f64>,
    conditioned: &[bool],
    spec: &LossSpec,
) -> Result<(f64, LossGrads)> {
    compute_loss_detached(
        pred, target_x0, target_eps, paradigm, levels, conditioned, spec, None,
    )
}

/// Like [`compute_loss`], but the vlb mean residual is taken from
/// `frozen_x0` when given. The vlb term stop-gradients its mean input, so
/// the stopped objective — the function whose gradient the backward pass
/// computes — holds that residual fixed; finite-difference checks must
/// evaluate it the same way.
#[allow(clippy::too_many_arguments)]
pub(crate) fn compute_loss_detached(
    pred: &Prediction,
    target_x0: &DMatrix<f64>,
    target_eps: &DMatrix<f64>,
    paradigm: &Paradigm,
    levels: &DVector<f64>,
    conditioned: &[bool],
    spec: &LossSpec,
    frozen_x0: Option<&DMatrix<f64>>,
) -> Result<(f64, LossGrads)> {
    spec.validate(paradigm)?;
    let (n, dim) = pred.x0_mean.shape();
    if target_x0.shape() != (n, dim)
        || target_eps.shape() != (n, dim)
        || levels.len() != n
        || conditioned.len() != n
    {
        return Err(Error::ShapeMismatch {
            context: "compute_loss",
            expected: format!("{n}x{dim} targets, {n} levels"),
            got: format!(
                "{:?} x0, {:?} eps, {} levels",
                target_x0.shape(),
                target_eps.shape(),
                levels.len()
            ),
        });
    }
    let active: Vec<usize> = (0..n).filter(|&i| !conditioned[i]).collect();
    if active.is_empty() {
        return Err(Error::InvalidSpec(
            "loss needs at least one unconditioned variable".into(),
        ));
    }
    let count = (active.len() * dim) as f64;

    let mut total = 0.0;
    let mut d_x0 = DMatrix::zeros(n, dim);
    let mut d_logvar: Option<DVector<f64>> = None;
    let mut d_interp: Option<DVector<f64>> = None;

    for term in &spec.terms {
        if term.weight == 0.0 {
            continue;
        }
        match term.kind {
            LossKind::Mse => {
                for &i in &active {
                    let t = levels[i];
                    let c = paradigm.coefficients(t)?;
                    let slope = residual_slope(&c, term.target, t)?;
                    for j in 0..dim {
                        let r = slope * (pred.x0_mean[(i, j)] - target_x0[(i, j)]);
                        total += term.weight * r * r / count;
                        d_x0[(i, j)] += term.weight * 2.0 * r * slope / count;
                    }
                }
            }
            LossKind::Nll => {
                let var = pred.var.as_ref().ok_or_else(|| {
                    Error::InvalidSpec(
                        "nll loss requires a prediction with the uncertainty head".into(),
                    )
                })?;
                let dl = d_logvar.get_or_insert_with(|| DVector::zeros(n));
                for &i in &active {
                    let floored = var[i] < SIGMA2_FLOOR;
                    let sigma2 = var[i].max(SIGMA2_FLOOR);
                    let mut r2 = 0.0;
                    for j in 0..dim {
                        let r = pred.x0_mean[(i, j)] - target_x0[(i, j)];
                        r2 += r * r;
                        d_x0[(i, j)] += term.weight * r / sigma2 / count;
                    }
                    total += term.weight
                        * 0.5
                        * (dim as f64 * (LN_2PI + sigma2.ln()) + r2 / sigma2)
                        / count;
                    if !floored {
                        // d/d(log sigma^2); zero in the floored region
                        dl[i] += term.weight * 0.5 * (dim as f64 - r2 / sigma2) / count;
                    }
                }
            }
            LossKind::Vlb => {
                let grid = paradigm.grid().expect("validated");
                let interp = pred.var_interp.as_ref().ok_or_else(|| {
                    Error::InvalidSpec(
                        "vlb loss requires a prediction with the variance-interpolation head"
                            .into(),
                    )
                })?;
                let dh = d_interp.get_or_insert_with(|| DVector::zeros(n));
                for &i in &active {
                    let idx = grid.grid_index(levels[i])?;
                    if idx == 0 {
                        continue; // clean variable: no reverse step to bound
                    }
                    let beta = grid.beta(idx);
                    let beta_tilde = grid.beta_tilde(idx).max(BETA_TILDE_FLOOR);
                    let ab = grid.alpha_bar(idx);
                    let ab_prev = grid.alpha_bar(idx - 1);
                    let coef_x0 = ab_prev.sqrt() * beta / (1.0 - ab);
                    let h = interp[i].clamp(0.0, 1.0);
                    let sigma2 = (h * beta.ln() + (1.0 - h) * beta_tilde.ln()).exp();
                    let dsigma2_dh = sigma2 * (beta.ln() - beta_tilde.ln());
                    let mean_source = frozen_x0.unwrap_or(&pred.x0_mean);
                    for j in 0..dim {
                        // the x_t terms of the true and model posterior means
                        // cancel; only the clean-data estimates differ. That
                        // difference is stop-gradiented, so vlb drives the
                        // interpolation head alone.
                        let delta = coef_x0 * (mean_source[(i, j)] - target_x0[(i, j)]);
                        let kl = 0.5
                            * ((sigma2 / beta_tilde).ln()
                                + (beta_tilde + delta * delta) / sigma2
                                - 1.0);
                        total += term.weight * kl / count;
                        let dkl_dsigma2 = 0.5
                            * (1.0 / sigma2 - (beta_tilde + delta * delta) / (sigma2 * sigma2));
                        dh[i] += term.weight * dkl_dsigma2 * dsigma2_dh / count;
                    }
                }
            }
            LossKind::Cosine => {
                let n_active = active.len() as f64;
                for &i in &active {
                    let t = levels[i];
                    let c = paradigm.coefficients(t)?;
                    let (da, db) = (
                        c.da.ok_or(Error::DerivativesUndefined("cosine loss"))?,
                        c.db.ok_or(Error::DerivativesUndefined("cosine loss"))?,
                    );
                    let slope = residual_slope(&c, PredictionKind::U, t)?;
                    // true velocity and the velocity implied by the estimate
                    let mut u_true = DVector::zeros(dim);
                    let mut u_hat = DVector::zeros(dim);
                    for j in 0..dim {
                        u_true[j] = da * target_x0[(i, j)] + db * target_eps[(i, j)];
                        u_hat[j] =
                            u_true[j] + slope * (pred.x0_mean[(i, j)] - target_x0[(i, j)]);
                    }
                    let nu = u_true.norm();
                    let nh = u_hat.norm();
                    let denom = (nu * nh).max(1e-12);
                    let cos = u_true.dot(&u_hat) / denom;
                    total += term.weight * (1.0 - cos) / n_active;
                    if nu > 1e-12 && nh > 1e-12 {
                        for j in 0..dim {
                            let dcos_duj = u_true[j] / denom - cos * u_hat[j] / (nh * nh);
                            d_x0[(i, j)] -= term.weight * dcos_duj * slope / n_active;
                        }
                    }
                }
            }
        }
    }

    if !total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: 0,
            detail: "loss evaluated non-finite".into(),
        });
    }
    Ok((
        total,
        LossGrads {
            d_x0,
            d_logvar,
            d_interp,
        },
    ))
}
