//! The sampling engine: one denoising step per schedule column, plus the
//! full inference loop over a schedule matrix or an adaptive policy.
//!
//! All methods are expressed through the `(x0, eps)` re-mix implied by the
//! current prediction: the deterministic jump `x <- a_{t'} x0 + b_{t'} eps`
//! is defined for arbitrary `(t -> t')` pairs and every paradigm, which is
//! exactly what heterogeneous-level schedules need. Ancestral stochastic
//! stepping is restricted to the discrete grid where its posterior formula
//! is defined.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::denoiser::{Denoiser, Prediction};
use crate::error::{Error, Result};
use crate::paradigm::Paradigm;
use crate::schedule::{adaptive_select, ScheduleMatrix};
use crate::state::{DependencyGraph, ReasoningState};

/// Reverse-step method.
#[derive(Debug, Clone, PartialEq)]
pub enum StepMethod {
    /// Stochastic DDPM posterior step on adjacent grid levels; optionally
    /// uses the predicted variance interpolation instead of beta-tilde.
    DdpmAncestral { learned_variance: bool },
    /// Deterministic jump at `eta = 0`; fresh noise mixed in with weight
    /// `eta` following the DDIM variance family (`eta = 1` reproduces the
    /// ancestral variance on the grid).
    Ddim { eta: f64 },
    /// First-order ODE step along the velocity field.
    EulerFlow,
    /// Two-stage predictor-corrector averaging velocities at `t` and `t'`.
    HeunFlow,
}

impl StepMethod {
    fn check_paradigm(&self, paradigm: &Paradigm) -> Result<()> {
        match self {
            StepMethod::DdpmAncestral { .. } if paradigm.grid().is_none() => Err(
                Error::MethodParadigmMismatch("ancestral stepping needs the discrete paradigm"),
            ),
            StepMethod::EulerFlow | StepMethod::HeunFlow if !paradigm.has_derivatives() => {
                Err(Error::MethodParadigmMismatch(
                    "flow methods need a paradigm with coefficient derivatives",
                ))
            }
            StepMethod::Ddim { eta } if *eta < 0.0 => {
                Err(Error::InvalidSpec(format!("eta {eta} must be nonnegative")))
            }
            _ => Ok(()),
        }
    }
}

/// Deterministic per-(column, variable) noise substreams derived from one
/// master seed, so changing the draws of one variable never shifts
/// another's.
#[derive(Debug, Clone, Copy)]
pub struct NoiseStreams {
    master: u64,
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable seed derivation for independent chains or sub-runs.
pub fn mix_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ index)
}

impl NoiseStreams {
    pub fn new(master_seed: u64) -> Self {
        Self {
            master: master_seed,
        }
    }

    fn substream(&self, column: u64, variable: u64) -> ChaCha8Rng {
        let seed = splitmix64(splitmix64(splitmix64(self.master) ^ column) ^ variable);
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Standard-normal draw for variable `variable` at step `column`.
    pub fn step_normal(&self, column: usize, variable: usize, len: usize) -> DVector<f64> {
        let mut rng = self.substream(column as u64, variable as u64);
        DVector::from_fn(len, |_, _| StandardNormal.sample(&mut rng))
    }

    /// Standard-normal draw for the initial all-noise state.
    pub fn init_normal(&self, variable: usize, len: usize) -> DVector<f64> {
        let mut rng = self.substream(u64::MAX, variable as u64);
        DVector::from_fn(len, |_, _| StandardNormal.sample(&mut rng))
    }
}

/// Builds the usual starting state: conditioned variables clamped to given
/// values at level 0, all others standard normal at level 1.
pub fn initial_state(
    n: usize,
    dim: usize,
    conditioned: &[(usize, DVector<f64>)],
    noise: &NoiseStreams,
) -> Result<ReasoningState> {
    let mut values = DMatrix::zeros(n, dim);
    let mut levels = DVector::from_element(n, 1.0);
    let mut mask = vec![false; n];
    for (v, row) in conditioned {
        if *v >= n {
            return Err(Error::IndexOutOfRange {
                context: "conditioned variable",
                index: *v,
                bound: n,
            });
        }
        if row.len() != dim {
            return Err(Error::ShapeMismatch {
                context: "conditioned values",
                expected: format!("{dim}"),
                got: format!("{}", row.len()),
            });
        }
        mask[*v] = true;
        levels[*v] = 0.0;
        values.row_mut(*v).copy_from(&row.transpose());
    }
    for (i, &is_cond) in mask.iter().enumerate() {
        if !is_cond {
            values.row_mut(i).copy_from(&noise.init_normal(i, dim).transpose());
        }
    }
    ReasoningState::new(values, levels, mask)
}

fn row_of(m: &DMatrix<f64>, i: usize) -> DVector<f64> {
    m.row(i).transpose()
}

/// Executes one reverse step to the given per-variable target levels.
/// Variables whose target equals their current level are untouched
/// bit-for-bit; conditioned variables never change. The denoiser is consulted
/// a second time only by the Heun corrector.
#[allow(clippy::too_many_arguments)]
pub fn denoise_step(
    denoiser: &dyn Denoiser,
    state: &ReasoningState,
    pred: &Prediction,
    target_levels: &DVector<f64>,
    paradigm: &Paradigm,
    method: &StepMethod,
    noise: &NoiseStreams,
    column: usize,
) -> Result<ReasoningState> {
    method.check_paradigm(paradigm)?;
    let n = state.n();
    let dim = state.dim();
    if target_levels.len() != n || pred.x0_mean.shape() != (n, dim) {
        return Err(Error::ShapeMismatch {
            context: "denoise_step",
            expected: format!("{n} levels, {n}x{dim} prediction"),
            got: format!(
                "{} levels, {:?} prediction",
                target_levels.len(),
                pred.x0_mean.shape()
            ),
        });
    }

    // variables that actually move this step
    let mut stepped: Vec<usize> = Vec::new();
    for i in 0..n {
        let t = state.levels()[i];
        let t_new = target_levels[i];
        if state.is_conditioned(i) || t_new == t {
            continue;
        }
        if t_new > t {
            return Err(Error::TargetAboveCurrent {
                index: i,
                current: t,
                target: t_new,
            });
        }
        stepped.push(i);
    }

    let mut next = state.clone();
    match method {
        StepMethod::Ddim { eta } => {
            for &i in &stepped {
                let t = state.levels()[i];
                let t_new = target_levels[i];
                let c = paradigm.coefficients(t)?;
                let cn = paradigm.coefficients(t_new)?;
                let x = row_of(state.values(), i);
                let x0 = row_of(&pred.x0_mean, i);
                let eps = (&x - &x0 * c.a) / c.b;
                let mut sigma2 = 0.0;
                if *eta > 0.0 {
                    // eta^2 (b'^2 / b^2)(1 - a^2 / a'^2); equals the ancestral
                    // beta-tilde at eta = 1 on the grid. Clamped to b'^2 for
                    // paradigms that are not variance preserving.
                    let ratio = (1.0 - (c.a * c.a) / (cn.a * cn.a)).max(0.0);
                    sigma2 = (eta * eta * (cn.b * cn.b) / (c.b * c.b) * ratio)
                        .min(cn.b * cn.b);
                }
                let mut x_new = &x0 * cn.a + &eps * (cn.b * cn.b - sigma2).max(0.0).sqrt();
                if sigma2 > 0.0 {
                    let z = noise.step_normal(column, i, dim);
                    x_new += z * sigma2.sqrt();
                }
                next.update_variable(i, &x_new, t_new)?;
            }
        }
        StepMethod::EulerFlow => {
            for &i in &stepped {
                let t = state.levels()[i];
                let t_new = target_levels[i];
                let c = paradigm.coefficients(t)?;
                let (da, db) = (c.da.unwrap(), c.db.unwrap());
                let x = row_of(state.values(), i);
                let x0 = row_of(&pred.x0_mean, i);
                let eps = (&x - &x0 * c.a) / c.b;
                let velocity = &x0 * da + &eps * db;
                let x_new = &x + velocity * (t_new - t);
                next.update_variable(i, &x_new, t_new)?;
            }
        }
        StepMethod::HeunFlow => {
            // predictor: plain Euler to the target levels
            let mut velocities: Vec<(usize, DVector<f64>)> = Vec::with_capacity(stepped.len());
            for &i in &stepped {
                let t = state.levels()[i];
                let t_new = target_levels[i];
                let c = paradigm.coefficients(t)?;
                let (da, db) = (c.da.unwrap(), c.db.unwrap());
                let x = row_of(state.values(), i);
                let x0 = row_of(&pred.x0_mean, i);
                let eps = (&x - &x0 * c.a) / c.b;
                let velocity = &x0 * da + &eps * db;
                let x_pred = &x + &velocity * (t_new - t);
                next.update_variable(i, &x_pred, t_new)?;
                velocities.push((i, velocity));
            }
            // corrector: average with the velocity at the predictor point;
            // the final step to t' = 0 stays plain Euler (the velocity there
            // would need a singular conversion).
            if velocities.iter().any(|(i, _)| target_levels[*i] > 0.0) {
                let pred2 = denoiser.denoise(&next)?;
                for (i, v1) in velocities {
                    let t = state.levels()[i];
                    let t_new = target_levels[i];
                    if t_new == 0.0 {
                        continue;
                    }
                    let cn = paradigm.coefficients(t_new)?;
                    let (da, db) = (cn.da.unwrap(), cn.db.unwrap());
                    let xp = row_of(next.values(), i);
                    let x0p = row_of(&pred2.x0_mean, i);
                    let epsp = (&xp - &x0p * cn.a) / cn.b;
                    let v2 = &x0p * da + &epsp * db;
                    let x = row_of(state.values(), i);
                    let x_new = &x + (v1 + v2) * (0.5 * (t_new - t));
                    next.update_variable(i, &x_new, t_new)?;
                }
            }
        }
        StepMethod::DdpmAncestral { learned_variance } => {
            let grid = paradigm.grid().expect("checked above");
            for &i in &stepped {
                let t = state.levels()[i];
                let t_new = target_levels[i];
                let idx = grid.grid_index(t)?;
                let idx_new = grid.grid_index(t_new)?;
                if idx_new + 1 != idx {
                    return Err(Error::NonAdjacentAncestralStep {
                        from_t: t,
                        to_t: t_new,
                    });
                }
                let beta = grid.beta(idx);
                let alpha = 1.0 - beta;
                let ab = grid.alpha_bar(idx);
                let ab_prev = grid.alpha_bar(idx_new);
                let coef_x0 = ab_prev.sqrt() * beta / (1.0 - ab);
                let coef_xt = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                let x = row_of(state.values(), i);
                let x0 = row_of(&pred.x0_mean, i);
                let mean = &x0 * coef_x0 + &x * coef_xt;
                let beta_tilde = grid.beta_tilde(idx);
                let sigma2 = if *learned_variance {
                    let h = pred
                        .var_interp
                        .as_ref()
                        .ok_or_else(|| {
                            Error::InvalidSpec(
                                "learned variance requested but the prediction carries no \
                                 variance-interpolation head"
                                    .into(),
                            )
                        })?[i]
                        .clamp(0.0, 1.0);
                    (h * beta.ln() + (1.0 - h) * beta_tilde.max(1e-12).ln()).exp()
                } else {
                    beta_tilde
                };
                let x_new = if sigma2 > 0.0 {
                    let z = noise.step_normal(column, i, dim);
                    mean + z * sigma2.sqrt()
                } else {
                    mean
                };
                next.update_variable(i, &x_new, t_new)?;
            }
        }
    }
    Ok(next)
}

/// Either a precomputed schedule matrix or the online certainty-driven
/// policy.
#[derive(Debug, Clone)]
pub enum InferencePolicy {
    Schedule(ScheduleMatrix),
    AdaptiveCertainty {
        select_k: usize,
        steps: usize,
        graph: Option<DependencyGraph>,
    },
}

/// One recorded step: the state entering the column and the prediction made
/// from it.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub column: usize,
    pub state: ReasoningState,
    pub prediction: Prediction,
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
}

impl Trajectory {
    /// One CSV row per snapshot per variable:
    /// `column,variable,level,value_0,...`.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let dim = self
            .snapshots
            .first()
            .map(|s| s.state.dim())
            .unwrap_or(0);
        let header: Vec<String> = (0..dim).map(|j| format!("value_{j}")).collect();
        writeln!(out, "column,variable,level,{}", header.join(","))?;
        for snap in &self.snapshots {
            for i in 0..snap.state.n() {
                let vals: Vec<String> = (0..dim)
                    .map(|j| format!("{}", snap.state.values()[(i, j)]))
                    .collect();
                writeln!(
                    out,
                    "{},{},{},{}",
                    snap.column,
                    i,
                    snap.state.levels()[i],
                    vals.join(",")
                )?;
            }
        }
        Ok(())
    }
}

pub struct RunResult {
    pub state: ReasoningState,
    pub trajectory: Option<Trajectory>,
}

/// Runs a full inference trajectory: iterates [`denoise_step`] over schedule
/// columns, or over adaptive rounds that query [`adaptive_select`] with the
/// denoiser's uncertainties. Deterministic given the seed.
pub fn run_inference(
    denoiser: &dyn Denoiser,
    initial: &ReasoningState,
    policy: &InferencePolicy,
    paradigm: &Paradigm,
    method: &StepMethod,
    seed: u64,
    record: bool,
) -> Result<RunResult> {
    let noise = NoiseStreams::new(seed);
    let mut trajectory = record.then(Trajectory::default);
    let mut state = initial.clone();

    match policy {
        InferencePolicy::Schedule(schedule) => {
            if schedule.n() != state.n() {
                return Err(Error::ShapeMismatch {
                    context: "run_inference schedule",
                    expected: format!("{}", state.n()),
                    got: format!("{}", schedule.n()),
                });
            }
            if let Some(v) = schedule.validate() {
                return Err(Error::InvalidSpec(format!(
                    "schedule invalid at row {}, column {}: {}",
                    v.row, v.column, v.reason
                )));
            }
            let col0 = schedule.column(0);
            for i in 0..state.n() {
                if (col0[i] - state.levels()[i]).abs() > 1e-12 {
                    return Err(Error::InvalidSpec(format!(
                        "schedule column 0 does not match initial levels at variable {i}"
                    )));
                }
            }
            for k in 1..=schedule.steps() {
                let pred = denoiser.denoise(&state)?;
                if let Some(t) = trajectory.as_mut() {
                    t.snapshots.push(Snapshot {
                        column: k - 1,
                        state: state.clone(),
                        prediction: pred.clone(),
                    });
                }
                let targets = schedule.column(k);
                state = denoise_step(
                    denoiser, &state, &pred, &targets, paradigm, method, &noise, k - 1,
                )?;
            }
        }
        InferencePolicy::AdaptiveCertainty {
            select_k,
            steps,
            graph,
        } => {
            let active = state.active_variables().len().max(1);
            let ramp = steps.div_ceil(active).max(1);
            // per-variable count of ramp columns already taken
            let mut progress: Vec<Option<usize>> = vec![None; state.n()];
            let mut in_flight: Vec<usize> = Vec::new();
            let mut column = 0usize;
            while state
                .active_variables()
                .iter()
                .any(|&i| state.levels()[i] > 0.0)
            {
                let pred = denoiser.denoise(&state)?;
                if in_flight.is_empty() {
                    let unc = pred.var.as_ref().ok_or_else(|| {
                        Error::InvalidSpec(
                            "adaptive policy needs a denoiser that predicts uncertainty".into(),
                        )
                    })?;
                    in_flight = adaptive_select(&state, unc, *select_k, graph.as_ref());
                    if in_flight.is_empty() {
                        return Err(Error::NoProgress);
                    }
                    for &v in &in_flight {
                        progress[v] = Some(0);
                    }
                }
                let mut targets = state.levels().clone();
                for &v in &in_flight {
                    let done = progress[v].unwrap() + 1;
                    targets[v] = (ramp - done) as f64 / ramp as f64;
                    progress[v] = Some(done);
                }
                if let Some(t) = trajectory.as_mut() {
                    t.snapshots.push(Snapshot {
                        column,
                        state: state.clone(),
                        prediction: pred.clone(),
                    });
                }
                state = denoise_step(
                    denoiser, &state, &pred, &targets, paradigm, method, &noise, column,
                )?;
                column += 1;
                in_flight.retain(|&v| state.levels()[v] > 0.0);
            }
        }
    }

    if let Some(t) = trajectory.as_mut() {
        let final_pred = denoiser.denoise(&state)?;
        t.snapshots.push(Snapshot {
            column: t.snapshots.last().map(|s| s.column + 1).unwrap_or(0),
            state: state.clone(),
            prediction: final_pred,
        });
    }
    Ok(RunResult {
        state,
        trajectory,
    })
}
