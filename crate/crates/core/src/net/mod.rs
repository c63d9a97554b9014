//! A small trainable denoiser with hand-rolled reverse-mode gradients.
//!
//! Architecture: a per-token shared multilayer perceptron (tanh) over the
//! tokenizer features, one global mean-pooled context vector concatenated to
//! each token, then shared head layers feeding three outputs: the mean
//! prediction (in the configured parameterization), an optional log-variance
//! (the uncertainty head) and an optional variance-interpolation coefficient
//! squashed to `[0, 1]`. Mean pooling is the only cross-variable
//! information path, so the net is exactly permutation equivariant.

pub mod checkpoint;
pub mod loss;
pub mod tokenizer;
pub mod train;

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::denoiser::{Denoiser, Prediction};
use crate::error::{Error, Result};
use crate::paradigm::{x0_affine, Paradigm, PredictionKind};
use crate::state::ReasoningState;

pub use loss::{compute_loss, LossGrads, LossKind, LossSpec, LossTerm};
pub use tokenizer::Tokenizer;
pub use train::{gradient_check, train, Optimizer, TrainConfig, TrainExample};

/// Net shape and head selection.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub dim: usize,
    pub level_embed: usize,
    pub pos_embed: usize,
    pub hidden: usize,
    pub trunk_layers: usize,
    pub head_layers: usize,
    /// What the mean head predicts.
    pub output_kind: PredictionKind,
    /// Enables the log-variance (uncertainty) head.
    pub uncertainty_head: bool,
    /// Enables the variance-interpolation head.
    pub variance_interp_head: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            dim: 1,
            level_embed: 16,
            pos_embed: 16,
            hidden: 32,
            trunk_layers: 2,
            head_layers: 1,
            output_kind: PredictionKind::X0,
            uncertainty_head: false,
            variance_interp_head: false,
        }
    }
}

impl NetConfig {
    pub fn tokenizer(&self) -> Result<Tokenizer> {
        Tokenizer::new(self.dim, self.level_embed, self.pos_embed)
    }

    fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.trunk_layers == 0 || self.head_layers == 0 {
            return Err(Error::InvalidSpec(
                "net needs hidden > 0 and at least one trunk and head layer".into(),
            ));
        }
        self.tokenizer().map(|_| ())
    }
}

/// One dense layer; also reused as the gradient holder of that layer.
#[derive(Debug, Clone, PartialEq)]
struct LayerParams {
    w: DMatrix<f64>, // out x in
    b: DVector<f64>, // out
}

impl LayerParams {
    fn zeros(out: usize, input: usize) -> Self {
        Self {
            w: DMatrix::zeros(out, input),
            b: DVector::zeros(out),
        }
    }

    fn init<R: rand::Rng>(out: usize, input: usize, rng: &mut R) -> Self {
        let scale = (1.0 / input as f64).sqrt();
        Self {
            w: DMatrix::from_fn(out, input, |_, _| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            }),
            b: DVector::zeros(out),
        }
    }

    /// rows(x) -> rows(act): `x w^T + 1 b^T`.
    fn affine(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x * self.w.transpose();
        for mut row in out.row_iter_mut() {
            row += self.b.transpose();
        }
        out
    }
}

fn tanh_mat(m: &mut DMatrix<f64>) {
    m.apply(|v| *v = v.tanh());
}

/// `d_pre = d_act * (1 - act^2)` elementwise.
fn tanh_backward(d_act: &DMatrix<f64>, act: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = d_act.clone();
    for (o, a) in out.iter_mut().zip(act.iter()) {
        *o *= 1.0 - a * a;
    }
    out
}

fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.ncols(), |j, _| m.column(j).sum())
}

/// The denoiser net: trunk, pooled context, head, output layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    cfg: NetConfig,
    trunk: Vec<LayerParams>,
    head: Vec<LayerParams>,
    out_mean: LayerParams,
    out_logvar: Option<LayerParams>,
    out_interp: Option<LayerParams>,
}

/// Intermediate activations kept for the backward pass, plus the raw head
/// outputs.
pub struct ForwardCache {
    tokens: DMatrix<f64>,
    trunk_acts: Vec<DMatrix<f64>>,
    z: DMatrix<f64>,
    head_acts: Vec<DMatrix<f64>>,
    /// Mean-head output in the configured parameterization, `n x dim`.
    pub raw_mean: DMatrix<f64>,
    /// Log-variance head output, length `n`.
    pub raw_logvar: Option<DVector<f64>>,
    /// Variance-interpolation logits, length `n`.
    pub raw_interp_logit: Option<DVector<f64>>,
}

impl DenoiserNet {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let token_w = cfg.tokenizer()?.token_width();
        let h = cfg.hidden;
        let mut trunk = Vec::with_capacity(cfg.trunk_layers);
        trunk.push(LayerParams::init(h, token_w, &mut rng));
        for _ in 1..cfg.trunk_layers {
            trunk.push(LayerParams::init(h, h, &mut rng));
        }
        let mut head = Vec::with_capacity(cfg.head_layers);
        head.push(LayerParams::init(h, 2 * h, &mut rng));
        for _ in 1..cfg.head_layers {
            head.push(LayerParams::init(h, h, &mut rng));
        }
        let out_mean = LayerParams::init(cfg.dim, h, &mut rng);
        let out_logvar = cfg
            .uncertainty_head
            .then(|| LayerParams::init(1, h, &mut rng));
        let out_interp = cfg
            .variance_interp_head
            .then(|| LayerParams::init(1, h, &mut rng));
        Ok(Self {
            cfg,
            trunk,
            head,
            out_mean,
            out_logvar,
            out_interp,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    fn layers(&self) -> Vec<&LayerParams> {
        self.trunk
            .iter()
            .chain(self.head.iter())
            .chain(std::iter::once(&self.out_mean))
            .chain(self.out_logvar.iter())
            .chain(self.out_interp.iter())
            .collect()
    }

    fn layers_mut(&mut self) -> Vec<&mut LayerParams> {
        self.trunk
            .iter_mut()
            .chain(self.head.iter_mut())
            .chain(std::iter::once(&mut self.out_mean))
            .chain(self.out_logvar.iter_mut())
            .chain(self.out_interp.iter_mut())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.w.len() + l.b.len())
            .sum()
    }

    /// Parameters in canonical order: each layer's weights row-major, then
    /// its biases; trunk, head, mean, log-variance, interpolation.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in self.layers() {
            for r in 0..layer.w.nrows() {
                for c in 0..layer.w.ncols() {
                    out.push(layer.w[(r, c)]);
                }
            }
            out.extend(layer.b.iter());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                context: "set_params",
                expected: format!("{}", self.param_count()),
                got: format!("{}", flat.len()),
            });
        }
        let mut pos = 0;
        for layer in self.layers_mut() {
            for r in 0..layer.w.nrows() {
                for c in 0..layer.w.ncols() {
                    layer.w[(r, c)] = flat[pos];
                    pos += 1;
                }
            }
            for r in 0..layer.b.len() {
                layer.b[r] = flat[pos];
                pos += 1;
            }
        }
        Ok(())
    }

    /// Forward pass over one token matrix, keeping activations for backward.
    pub fn forward_raw(&self, tokens: &DMatrix<f64>) -> Result<ForwardCache> {
        let token_w = self.cfg.tokenizer()?.token_width();
        if tokens.ncols() != token_w {
            return Err(Error::ShapeMismatch {
                context: "net forward",
                expected: format!("token width {token_w}"),
                got: format!("{}", tokens.ncols()),
            });
        }
        let n = tokens.nrows();
        let h = self.cfg.hidden;

        let mut trunk_acts = Vec::with_capacity(self.trunk.len());
        let mut current = tokens.clone();
        for layer in &self.trunk {
            let mut act = layer.affine(&current);
            tanh_mat(&mut act);
            trunk_acts.push(act.clone());
            current = act;
        }
        let trunk_out = trunk_acts.last().expect("at least one trunk layer");

        // mean-pooled context concatenated to every token
        let ctx = RowDVector::from_fn(h, |_, j| trunk_out.column(j).sum() / n as f64);
        let mut z = DMatrix::zeros(n, 2 * h);
        z.view_mut((0, 0), (n, h)).copy_from(trunk_out);
        for i in 0..n {
            z.view_mut((i, h), (1, h)).copy_from(&ctx);
        }

        let mut head_acts = Vec::with_capacity(self.head.len());
        let mut current = z.clone();
        for layer in &self.head {
            let mut act = layer.affine(&current);
            tanh_mat(&mut act);
            head_acts.push(act.clone());
            current = act;
        }
        let head_out = head_acts.last().expect("at least one head layer");

        let raw_mean = self.out_mean.affine(head_out);
        let raw_logvar = self.out_logvar.as_ref().map(|l| {
            let m = l.affine(head_out);
            DVector::from_fn(n, |i, _| m[(i, 0)])
        });
        let raw_interp_logit = self.out_interp.as_ref().map(|l| {
            let m = l.affine(head_out);
            DVector::from_fn(n, |i, _| m[(i, 0)])
        });

        Ok(ForwardCache {
            tokens: tokens.clone(),
            trunk_acts,
            z,
            head_acts,
            raw_mean,
            raw_logvar,
            raw_interp_logit,
        })
    }

    /// Reverse pass: gradients of a scalar loss with respect to every
    /// parameter, given the loss gradients at the raw outputs. Returned in
    /// the canonical flat order.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_raw_mean: &DMatrix<f64>,
        d_raw_logvar: Option<&DVector<f64>>,
        d_raw_interp: Option<&DVector<f64>>,
    ) -> Vec<f64> {
        let n = cache.tokens.nrows();
        let h = self.cfg.hidden;
        let head_out = cache.head_acts.last().unwrap();

        let mut g_trunk: Vec<LayerParams> = self
            .trunk
            .iter()
            .map(|l| LayerParams::zeros(l.w.nrows(), l.w.ncols()))
            .collect();
        let mut g_head: Vec<LayerParams> = self
            .head
            .iter()
            .map(|l| LayerParams::zeros(l.w.nrows(), l.w.ncols()))
            .collect();
        let mut g_mean = LayerParams::zeros(self.out_mean.w.nrows(), self.out_mean.w.ncols());
        let mut g_logvar = self
            .out_logvar
            .as_ref()
            .map(|l| LayerParams::zeros(l.w.nrows(), l.w.ncols()));
        let mut g_interp = self
            .out_interp
            .as_ref()
            .map(|l| LayerParams::zeros(l.w.nrows(), l.w.ncols()));

        // output layers
        g_mean.w = d_raw_mean.transpose() * head_out;
        g_mean.b = column_sums(d_raw_mean);
        let mut d_head_out = d_raw_mean * &self.out_mean.w;
        if let (Some(layer), Some(grad), Some(d)) =
            (&self.out_logvar, g_logvar.as_mut(), d_raw_logvar)
        {
            let d_mat = DMatrix::from_fn(n, 1, |i, _| d[i]);
            grad.w = d_mat.transpose() * head_out;
            grad.b = column_sums(&d_mat);
            d_head_out += d_mat * &layer.w;
        }
        if let (Some(layer), Some(grad), Some(d)) =
            (&self.out_interp, g_interp.as_mut(), d_raw_interp)
        {
            let d_mat = DMatrix::from_fn(n, 1, |i, _| d[i]);
            grad.w = d_mat.transpose() * head_out;
            grad.b = column_sums(&d_mat);
            d_head_out += d_mat * &layer.w;
        }

        // head layers in reverse
        let mut d_act = d_head_out;
        for (l, layer) in self.head.iter().enumerate().rev() {
            let act = &cache.head_acts[l];
            let d_pre = tanh_backward(&d_act, act);
            let input = if l == 0 { &cache.z } else { &cache.head_acts[l - 1] };
            g_head[l].w = d_pre.transpose() * input;
            g_head[l].b = column_sums(&d_pre);
            d_act = d_pre * &layer.w;
        }

        // split the head-input gradient: direct token part plus the pooled
        // context part redistributed to every token
        let d_z = d_act;
        let d_ctx = column_sums(&d_z.columns(h, h).into_owned());
        let mut d_trunk_out = d_z.columns(0, h).into_owned();
        for i in 0..n {
            for j in 0..h {
                d_trunk_out[(i, j)] += d_ctx[j] / n as f64;
            }
        }

        // trunk layers in reverse
        let mut d_act = d_trunk_out;
        for (l, layer) in self.trunk.iter().enumerate().rev() {
            let act = &cache.trunk_acts[l];
            let d_pre = tanh_backward(&d_act, act);
            let input = if l == 0 {
                &cache.tokens
            } else {
                &cache.trunk_acts[l - 1]
            };
            g_trunk[l].w = d_pre.transpose() * input;
            g_trunk[l].b = column_sums(&d_pre);
            d_act = d_pre * &layer.w;
        }

        // flatten in canonical order
        let all: Vec<&LayerParams> = g_trunk
            .iter()
            .chain(g_head.iter())
            .chain(std::iter::once(&g_mean))
            .chain(g_logvar.iter())
            .chain(g_interp.iter())
            .collect();
        let mut flat = Vec::with_capacity(self.param_count());
        for layer in all {
            for r in 0..layer.w.nrows() {
                for c in 0..layer.w.ncols() {
                    flat.push(layer.w[(r, c)]);
                }
            }
            flat.extend(layer.b.iter());
        }
        flat
    }

    /// Full denoiser output for a state: mean head interpreted under the
    /// configured parameterization and converted to a clean-data estimate,
    /// uncertainty head exponentiated into a variance, interpolation head
    /// squashed by a sigmoid. Conditioned variables are clamped to their
    /// observed values with zero variance.
    pub fn forward_prediction(
        &self,
        state: &ReasoningState,
        positions: &DVector<f64>,
        paradigm: &Paradigm,
    ) -> Result<Prediction> {
        let tokens = self.cfg.tokenizer()?.tokenize(state, positions)?;
        let cache = self.forward_raw(&tokens)?;
        let (x0_mean, _) = self.prediction_from_cache(&cache, state, paradigm)?;
        let n = state.n();
        let var = cache
            .raw_logvar
            .as_ref()
            .map(|lv| DVector::from_fn(n, |i, _| if state.is_conditioned(i) { 0.0 } else { lv[i].exp() }));
        let var_interp = cache
            .raw_interp_logit
            .as_ref()
            .map(|lg| DVector::from_fn(n, |i, _| 1.0 / (1.0 + (-lg[i]).exp())));
        Ok(Prediction {
            x0_mean,
            var,
            responsibilities: None,
            var_interp,
        })
    }

    /// Converts the cached raw mean to the clean-data estimate and returns
    /// the per-variable conversion slopes `d x0 / d raw` for backward.
    pub(crate) fn prediction_from_cache(
        &self,
        cache: &ForwardCache,
        state: &ReasoningState,
        paradigm: &Paradigm,
    ) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let n = state.n();
        let dim = state.dim();
        let mut x0 = DMatrix::zeros(n, dim);
        let mut slopes = DVector::zeros(n);
        for i in 0..n {
            if state.is_conditioned(i) {
                for j in 0..dim {
                    x0[(i, j)] = state.values()[(i, j)];
                }
                continue;
            }
            let t = state.levels()[i];
            let c = paradigm.coefficients(t)?;
            let (s, r) = x0_affine(&c, self.cfg.output_kind, t)?;
            slopes[i] = s;
            for j in 0..dim {
                x0[(i, j)] = s * cache.raw_mean[(i, j)] + r * state.values()[(i, j)];
            }
        }
        Ok((x0, slopes))
    }
}

/// A trained (or oracle-free) denoiser bound to fixed positions and a
/// paradigm, usable by the sampling engine.
pub struct NeuralDenoiser {
    pub net: DenoiserNet,
    pub positions: DVector<f64>,
    pub paradigm: Paradigm,
}

impl Denoiser for NeuralDenoiser {
    fn denoise(&self, state: &ReasoningState) -> Result<Prediction> {
        self.net
            .forward_prediction(state, &self.positions, &self.paradigm)
    }
}
