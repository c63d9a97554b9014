//! Training loop, optimizers and the finite-difference gradient check.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::net::loss::LossSpec;
use crate::net::{DenoiserNet, ForwardCache};
use crate::paradigm::{forward_diffuse, Paradigm};
use crate::state::ReasoningState;
use crate::task::TaskDomain;
use crate::tsample::TSampler;

/// Parameter update rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Self::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
}

/// One training example: clean data, the noise draw and the level vector.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub x0: DMatrix<f64>,
    pub eps: DMatrix<f64>,
    pub levels: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub steps: usize,
    pub batch: usize,
    pub loss: LossSpec,
}

/// Forward + loss + backward for one example; returns the loss, the flat
/// parameter gradient, and the clean-data estimate the pass produced.
fn example_grad(
    net: &DenoiserNet,
    example: &TrainExample,
    positions: &DVector<f64>,
    paradigm: &Paradigm,
    spec: &LossSpec,
    frozen_x0: Option<&DMatrix<f64>>,
) -> Result<(f64, Vec<f64>, DMatrix<f64>)> {
    let n = example.x0.nrows();
    let x_t = forward_diffuse(paradigm, &example.x0, &example.eps, &example.levels)?;
    let conditioned = vec![false; n];
    let state = ReasoningState::new(x_t, example.levels.clone(), conditioned.clone())?;
    let tokens = net.config().tokenizer()?.tokenize(&state, positions)?;
    let cache: ForwardCache = net.forward_raw(&tokens)?;
    let (x0_mean, slopes) = net.prediction_from_cache(&cache, &state, paradigm)?;

    let var = cache.raw_logvar.as_ref().map(|lv| lv.map(|v| v.exp()));
    let var_interp = cache
        .raw_interp_logit
        .as_ref()
        .map(|lg| lg.map(|v| 1.0 / (1.0 + (-v).exp())));
    let pred = crate::denoiser::Prediction {
        x0_mean: x0_mean.clone(),
        var: var.clone(),
        responsibilities: None,
        var_interp: var_interp.clone(),
    };

    let (loss, grads) = crate::net::loss::compute_loss_detached(
        &pred,
        &example.x0,
        &example.eps,
        paradigm,
        &example.levels,
        &conditioned,
        spec,
        frozen_x0,
    )?;

    // chain gradients back to the raw heads
    let mut d_raw_mean = grads.d_x0.clone();
    for i in 0..n {
        for j in 0..example.x0.ncols() {
            d_raw_mean[(i, j)] *= slopes[i];
        }
    }
    let d_raw_logvar = grads.d_logvar; // loss is already parameterized in log-variance
    let d_raw_interp = match (grads.d_interp, &var_interp) {
        (Some(dh), Some(h)) => Some(DVector::from_fn(n, |i, _| dh[i] * h[i] * (1.0 - h[i]))),
        _ => None,
    };

    let flat = net.backward(
        &cache,
        &d_raw_mean,
        d_raw_logvar.as_ref(),
        d_raw_interp.as_ref(),
    );
    Ok((loss, flat, pred.x0_mean))
}

/// Mean loss, mean flat gradient and per-example clean-data estimates over a
/// batch. `frozen_x0` pins the vlb mean residual per example (see
/// [`gradient_check`]).
fn batch_grad(
    net: &DenoiserNet,
    batch: &[TrainExample],
    positions: &DVector<f64>,
    paradigm: &Paradigm,
    spec: &LossSpec,
    frozen_x0: Option<&[DMatrix<f64>]>,
) -> Result<(f64, Vec<f64>, Vec<DMatrix<f64>>)> {
    let mut total = 0.0;
    let mut acc = vec![0.0; net.param_count()];
    let mut estimates = Vec::with_capacity(batch.len());
    for (b, example) in batch.iter().enumerate() {
        let (loss, grad, x0_mean) = example_grad(
            net,
            example,
            positions,
            paradigm,
            spec,
            frozen_x0.map(|f| &f[b]),
        )?;
        total += loss;
        for (a, g) in acc.iter_mut().zip(&grad) {
            *a += g;
        }
        estimates.push(x0_mean);
    }
    let scale = 1.0 / batch.len() as f64;
    for a in acc.iter_mut() {
        *a *= scale;
    }
    Ok((total * scale, acc, estimates))
}

/// Trains the net in place: each step draws a batch of clean samples from
/// the task, noise levels from the t-sampler (snapped to the grid for the
/// discrete paradigm), fresh noise, then takes one optimizer step.
/// Deterministic given the seed. Returns the per-step loss trace.
pub fn train(
    net: &mut DenoiserNet,
    task: &TaskDomain,
    tsampler: &TSampler,
    paradigm: &Paradigm,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.loss.validate(paradigm)?;
    if cfg.batch == 0 {
        return Err(Error::InvalidSpec("batch size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut adam: Option<AdamState> = None;
    for step in 0..cfg.steps {
        let batch: Vec<TrainExample> = (0..cfg.batch)
            .map(|_| {
                let x0 = task.sample_x0(&mut rng);
                let eps =
                    DMatrix::from_fn(task.n, task.dim, |_, _| StandardNormal.sample(&mut rng));
                let levels = tsampler
                    .sample_levels(task.n, &mut rng)
                    .map(|t| paradigm.snap_level(t));
                TrainExample { x0, eps, levels }
            })
            .collect();
        let (loss, grad, _) = batch_grad(net, &batch, &task.positions, paradigm, &cfg.loss, None)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("loss = {loss}"),
            });
        }
        apply_update(net, &grad, &cfg.optimizer, &mut adam)?;
        trace.push(loss);
    }
    Ok(trace)
}

fn apply_update(
    net: &mut DenoiserNet,
    grad: &[f64],
    optimizer: &Optimizer,
    adam: &mut Option<AdamState>,
) -> Result<()> {
    let mut params = net.flatten_params();
    match optimizer {
        Optimizer::Sgd { lr } => {
            for (p, g) in params.iter_mut().zip(grad) {
                *p -= lr * g;
            }
        }
        Optimizer::Adam {
            lr,
            beta1,
            beta2,
            eps,
        } => {
            let state = adam.get_or_insert_with(|| AdamState {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
                step: 0,
            });
            state.step += 1;
            let t = state.step as f64;
            let bc1 = 1.0 - beta1.powf(t);
            let bc2 = 1.0 - beta2.powf(t);
            for i in 0..grad.len() {
                state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad[i];
                state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                let m_hat = state.m[i] / bc1;
                let v_hat = state.v[i] / bc2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    net.set_params(&params)
}

/// Compares analytic parameter gradients against central finite differences
/// on up to `max_params` randomly selected parameters. Returns the max
/// relative error with denominator `max(|analytic|, 1e-8)`.
///
/// The vlb term stop-gradients its mean residual, so every finite-difference
/// evaluation freezes that residual at the unperturbed net's estimates: the
/// check differentiates exactly the objective the backward pass claims to.
pub fn gradient_check(
    net: &DenoiserNet,
    batch: &[TrainExample],
    positions: &DVector<f64>,
    paradigm: &Paradigm,
    spec: &LossSpec,
    max_params: usize,
    seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidSpec("gradient check needs a batch".into()));
    }
    let (_, analytic, base_estimates) =
        batch_grad(net, batch, positions, paradigm, spec, None)?;
    let count = net.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..count).collect();
    if count > max_params {
        for i in 0..max_params {
            let j = rng.random_range(i..count);
            indices.swap(i, j);
        }
        indices.truncate(max_params);
    }

    let h = 1e-5;
    let base = net.flatten_params();
    let mut probe = net.clone();
    let mut max_rel: f64 = 0.0;
    for &idx in &indices {
        let mut params = base.clone();
        params[idx] = base[idx] + h;
        probe.set_params(&params)?;
        let (lp, _, _) =
            batch_grad(&probe, batch, positions, paradigm, spec, Some(&base_estimates))?;
        params[idx] = base[idx] - h;
        probe.set_params(&params)?;
        let (lm, _, _) =
            batch_grad(&probe, batch, positions, paradigm, spec, Some(&base_estimates))?;
        let fd = (lp - lm) / (2.0 * h);
        let rel = (fd - analytic[idx]).abs() / analytic[idx].abs().max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
