//! Denoising paradigms and prediction parameterizations.
//!
//! Every paradigm is described by its mixing coefficients `(a_t, b_t)` in the
//! forward process `x_t = a_t * x0 + b_t * eps`, with `t = 0` clean and
//! `t = 1` pure noise:
//!
//! * rectified flow: `a = 1 - t`, `b = t` (straight-line interpolation),
//! * cosine flow:    `a = cos(pi t / 2)`, `b = sin(pi t / 2)` (variance
//!   preserving),
//! * discrete DDPM:  `a = sqrt(alpha_bar_i)`, `b = sqrt(1 - alpha_bar_i)` on
//!   the grid `t = i / d`, with linear or cosine beta schedules. Time
//!   derivatives are undefined for the discrete paradigm.
//!
//! The four prediction parameterizations (`eps`, `x0`, `v`, `u`) are linked
//! by linear identities at fixed `(x_t, t)` and convert losslessly wherever
//! the algebra is nonsingular:
//!
//! ```text
//! x_t = a x0 + b eps        v = a eps - b x0        u = da x0 + db eps
//! ```

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const DDPM_LINEAR_BETA_START: f64 = 1e-4;
pub const DDPM_LINEAR_BETA_END: f64 = 0.02;
/// Offset of the cosine alpha-bar schedule.
pub const DDPM_COSINE_OFFSET: f64 = 0.008;

/// Beta schedule for the discrete paradigm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaSchedule {
    /// Linear betas from 1e-4 to 0.02.
    Linear,
    /// Cosine alpha-bar schedule with offset 0.008, betas clipped at 0.999.
    Cosine,
}

/// Precomputed discrete grid: `alpha_bar[i]` for `i = 0..=steps`, with
/// `alpha_bar[0] = 1` (clean).
#[derive(Debug, Clone, PartialEq)]
pub struct DdpmGrid {
    steps: usize,
    betas: Vec<f64>,     // betas[i-1] is beta_i for i = 1..=steps
    alpha_bar: Vec<f64>, // length steps + 1
}

impl DdpmGrid {
    fn new(steps: usize, schedule: BetaSchedule) -> Result<Self> {
        if steps < 1 {
            return Err(Error::InvalidSpec(
                "discrete paradigm needs at least one step".into(),
            ));
        }
        let betas: Vec<f64> = match schedule {
            BetaSchedule::Linear => (1..=steps)
                .map(|i| {
                    if steps == 1 {
                        DDPM_LINEAR_BETA_START
                    } else {
                        DDPM_LINEAR_BETA_START
                            + (DDPM_LINEAR_BETA_END - DDPM_LINEAR_BETA_START) * (i - 1) as f64
                                / (steps - 1) as f64
                    }
                })
                .collect(),
            BetaSchedule::Cosine => {
                let s = DDPM_COSINE_OFFSET;
                let f = |i: usize| {
                    let x = (i as f64 / steps as f64 + s) / (1.0 + s);
                    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=steps)
                    .map(|i| (1.0 - f(i) / f(i - 1)).min(0.999))
                    .collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for (i, &beta) in betas.iter().enumerate() {
            if !(0.0 < beta && beta < 1.0) {
                return Err(Error::InvalidSpec(format!(
                    "beta_{} = {beta} outside (0, 1)",
                    i + 1
                )));
            }
            alpha_bar.push(alpha_bar[i] * (1.0 - beta));
        }
        for i in 1..alpha_bar.len() {
            if alpha_bar[i] >= alpha_bar[i - 1] {
                return Err(Error::InvalidSpec(
                    "alpha-bar must be strictly decreasing".into(),
                ));
            }
        }
        Ok(Self {
            steps,
            betas,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `beta_i` for grid index `i` in `1..=steps`.
    pub fn beta(&self, i: usize) -> f64 {
        self.betas[i - 1]
    }

    pub fn alpha_bar(&self, i: usize) -> f64 {
        self.alpha_bar[i]
    }

    /// DDPM posterior variance `beta_tilde_i` of the reverse step `i -> i-1`.
    pub fn beta_tilde(&self, i: usize) -> f64 {
        (1.0 - self.alpha_bar[i - 1]) / (1.0 - self.alpha_bar[i]) * self.beta(i)
    }

    /// Maps a level to its grid index, rejecting off-grid values.
    pub fn grid_index(&self, t: f64) -> Result<usize> {
        let raw = t * self.steps as f64;
        let idx = raw.round();
        if (raw - idx).abs() > 1e-9 || !(0.0..=self.steps as f64).contains(&idx) {
            return Err(Error::OffGridLevel {
                t,
                steps: self.steps,
            });
        }
        Ok(idx as usize)
    }
}

/// A denoising formulation.
#[derive(Debug, Clone, PartialEq)]
pub enum Paradigm {
    DdpmDiscrete(DdpmGrid),
    CosineFlow,
    RectifiedFlow,
}

impl Paradigm {
    pub fn ddpm_discrete(steps: usize, schedule: BetaSchedule) -> Result<Self> {
        Ok(Self::DdpmDiscrete(DdpmGrid::new(steps, schedule)?))
    }

    pub fn grid(&self) -> Option<&DdpmGrid> {
        match self {
            Self::DdpmDiscrete(g) => Some(g),
            _ => None,
        }
    }

    /// Whether `a^2 + b^2 = 1` holds for all levels.
    pub fn is_variance_preserving(&self) -> bool {
        !matches!(self, Self::RectifiedFlow)
    }

    /// Whether the coefficients have time derivatives (flow methods need
    /// them; the discrete paradigm does not define any).
    pub fn has_derivatives(&self) -> bool {
        !matches!(self, Self::DdpmDiscrete(_))
    }

    /// Rounds a level onto the discrete grid; identity for continuous
    /// paradigms.
    pub fn snap_level(&self, t: f64) -> f64 {
        match self {
            Self::DdpmDiscrete(g) => {
                (t * g.steps as f64).round() / g.steps as f64
            }
            _ => t,
        }
    }

    /// Mixing coefficients and their time derivatives at level `t`.
    pub fn coefficients(&self, t: f64) -> Result<Coeffs> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::LevelOutOfRange { index: 0, value: t });
        }
        Ok(match self {
            Self::RectifiedFlow => Coeffs {
                a: 1.0 - t,
                b: t,
                da: Some(-1.0),
                db: Some(1.0),
            },
            Self::CosineFlow => {
                let half_pi = std::f64::consts::FRAC_PI_2;
                Coeffs {
                    a: (half_pi * t).cos(),
                    b: (half_pi * t).sin(),
                    da: Some(-half_pi * (half_pi * t).sin()),
                    db: Some(half_pi * (half_pi * t).cos()),
                }
            }
            Self::DdpmDiscrete(grid) => {
                let i = grid.grid_index(t)?;
                let ab = grid.alpha_bar(i);
                Coeffs {
                    a: ab.sqrt(),
                    b: (1.0 - ab).sqrt(),
                    da: None,
                    db: None,
                }
            }
        })
    }
}

/// Signal/noise mixing coefficients at one level, plus time derivatives when
/// the paradigm defines them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coeffs {
    pub a: f64,
    pub b: f64,
    pub da: Option<f64>,
    pub db: Option<f64>,
}

impl Coeffs {
    fn derivatives(&self, what: &'static str) -> Result<(f64, f64)> {
        match (self.da, self.db) {
            (Some(da), Some(db)) => Ok((da, db)),
            _ => Err(Error::DerivativesUndefined(what)),
        }
    }
}

/// Which quantity a denoiser output represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionKind {
    Epsilon,
    X0,
    V,
    U,
}

impl PredictionKind {
    pub const ALL: [PredictionKind; 4] = [
        PredictionKind::Epsilon,
        PredictionKind::X0,
        PredictionKind::V,
        PredictionKind::U,
    ];
}

/// Applies the forward (noising) process per variable:
/// row `i` of the output is `a_{t_i} * x0[i] + b_{t_i} * eps[i]`.
pub fn forward_diffuse(
    paradigm: &Paradigm,
    x0: &DMatrix<f64>,
    eps: &DMatrix<f64>,
    levels: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    if x0.shape() != eps.shape() || x0.nrows() != levels.len() {
        return Err(Error::ShapeMismatch {
            context: "forward_diffuse",
            expected: format!("x0 {:?}, eps same, levels {}", x0.shape(), x0.nrows()),
            got: format!("eps {:?}, levels {}", eps.shape(), levels.len()),
        });
    }
    let mut out = DMatrix::zeros(x0.nrows(), x0.ncols());
    for i in 0..x0.nrows() {
        let c = paradigm.coefficients(levels[i])?;
        for j in 0..x0.ncols() {
            out[(i, j)] = c.a * x0[(i, j)] + c.b * eps[(i, j)];
        }
    }
    Ok(out)
}

/// Recovers the `(x0, eps)` pair implied by a prediction of the given kind at
/// fixed `(x_t, t)`. Scalar form; used per variable.
fn to_x0_eps(
    c: &Coeffs,
    kind: PredictionKind,
    pred: f64,
    x_t: f64,
    t: f64,
    to: PredictionKind,
) -> Result<(f64, f64)> {
    match kind {
        PredictionKind::X0 => {
            if c.b == 0.0 {
                return Err(Error::SingularConversion {
                    from: kind,
                    to,
                    t,
                });
            }
            Ok((pred, (x_t - c.a * pred) / c.b))
        }
        PredictionKind::Epsilon => {
            if c.a == 0.0 {
                return Err(Error::SingularConversion {
                    from: kind,
                    to,
                    t,
                });
            }
            Ok(((x_t - c.b * pred) / c.a, pred))
        }
        PredictionKind::V => {
            // a x_t - b v = (a^2 + b^2) x0 ; b x_t + a v = (a^2 + b^2) eps
            let denom = c.a * c.a + c.b * c.b;
            Ok((
                (c.a * x_t - c.b * pred) / denom,
                (c.b * x_t + c.a * pred) / denom,
            ))
        }
        PredictionKind::U => {
            let (da, db) = c.derivatives("u prediction")?;
            // db x_t - b u = (db a - b da) x0 ; a u - da x_t = (a db - da b) eps
            let det = c.a * db - da * c.b;
            if det == 0.0 {
                return Err(Error::SingularConversion {
                    from: kind,
                    to,
                    t,
                });
            }
            Ok(((db * x_t - c.b * pred) / det, (c.a * pred - da * x_t) / det))
        }
    }
}

fn from_x0_eps(c: &Coeffs, kind: PredictionKind, x0: f64, eps: f64) -> Result<f64> {
    Ok(match kind {
        PredictionKind::X0 => x0,
        PredictionKind::Epsilon => eps,
        PredictionKind::V => c.a * eps - c.b * x0,
        PredictionKind::U => {
            let (da, db) = c.derivatives("u prediction")?;
            da * x0 + db * eps
        }
    })
}

/// The affine map from a raw prediction of the given kind to the implied
/// clean value at fixed `(x_t, t)`: `x0 = s * raw + r * x_t`. Exposes the
/// slope the net's backward pass needs.
pub fn x0_affine(c: &Coeffs, kind: PredictionKind, t: f64) -> Result<(f64, f64)> {
    match kind {
        PredictionKind::X0 => Ok((1.0, 0.0)),
        PredictionKind::Epsilon => {
            if c.a == 0.0 {
                return Err(Error::SingularConversion {
                    from: kind,
                    to: PredictionKind::X0,
                    t,
                });
            }
            Ok((-c.b / c.a, 1.0 / c.a))
        }
        PredictionKind::V => {
            let denom = c.a * c.a + c.b * c.b;
            Ok((-c.b / denom, c.a / denom))
        }
        PredictionKind::U => {
            let (da, db) = c.derivatives("u prediction")?;
            let det = c.a * db - da * c.b;
            if det == 0.0 {
                return Err(Error::SingularConversion {
                    from: kind,
                    to: PredictionKind::X0,
                    t,
                });
            }
            Ok((-c.b / det, db / det))
        }
    }
}

/// Converts one scalar prediction between parameterizations at fixed
/// `(x_t, t)`.
pub fn convert_scalar(
    paradigm: &Paradigm,
    pred: f64,
    from: PredictionKind,
    to: PredictionKind,
    x_t: f64,
    t: f64,
) -> Result<f64> {
    if from == to {
        return Ok(pred);
    }
    let c = paradigm.coefficients(t)?;
    let (x0, eps) = to_x0_eps(&c, from, pred, x_t, t, to)?;
    from_x0_eps(&c, to, x0, eps)
}

/// Converts an `n x dim` prediction matrix between parameterizations, each
/// variable at its own level.
pub fn convert_prediction(
    paradigm: &Paradigm,
    pred: &DMatrix<f64>,
    from: PredictionKind,
    to: PredictionKind,
    x_t: &DMatrix<f64>,
    levels: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    if from == to {
        return Ok(pred.clone());
    }
    if pred.shape() != x_t.shape() || pred.nrows() != levels.len() {
        return Err(Error::ShapeMismatch {
            context: "convert_prediction",
            expected: format!("{:?}", pred.shape()),
            got: format!("x_t {:?}, levels {}", x_t.shape(), levels.len()),
        });
    }
    let mut out = DMatrix::zeros(pred.nrows(), pred.ncols());
    for i in 0..pred.nrows() {
        let t = levels[i];
        let c = paradigm.coefficients(t)?;
        for j in 0..pred.ncols() {
            let (x0, eps) = to_x0_eps(&c, from, pred[(i, j)], x_t[(i, j)], t, to)?;
            out[(i, j)] = from_x0_eps(&c, to, x0, eps)?;
        }
    }
    Ok(out)
}
