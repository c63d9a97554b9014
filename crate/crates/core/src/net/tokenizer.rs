//! Token construction: per-variable feature rows for the denoiser net.
//!
//! Each variable becomes one token: its value dims, a sinusoidal embedding
//! of its noise level, and a sinusoidal embedding of its position. Token
//! width is identical for all variables, so the net applies per token with
//! shared weights.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::state::ReasoningState;

/// Sinusoidal feature recipe. Frequencies run geometrically from 1 to 1000.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tokenizer {
    pub dim: usize,
    /// Level-embedding width (even, >= 2).
    pub level_embed: usize,
    /// Position-embedding width (even, >= 2).
    pub pos_embed: usize,
}

pub const MAX_FREQUENCY: f64 = 1000.0;

fn embed_into(out: &mut [f64], x: f64) {
    let pairs = out.len() / 2;
    for j in 0..pairs {
        let freq = if pairs > 1 {
            MAX_FREQUENCY.powf(j as f64 / (pairs - 1) as f64)
        } else {
            1.0
        };
        out[2 * j] = (freq * x).sin();
        out[2 * j + 1] = (freq * x).cos();
    }
}

impl Tokenizer {
    pub fn new(dim: usize, level_embed: usize, pos_embed: usize) -> Result<Self> {
        if dim == 0
            || level_embed < 2
            || !level_embed.is_multiple_of(2)
            || pos_embed < 2
            || !pos_embed.is_multiple_of(2)
        {
            return Err(Error::InvalidSpec(
                "tokenizer needs dim >= 1 and even embedding widths >= 2".into(),
            ));
        }
        Ok(Self {
            dim,
            level_embed,
            pos_embed,
        })
    }

    pub fn token_width(&self) -> usize {
        self.dim + self.level_embed + self.pos_embed
    }

    /// Row `i` = `concat(values[i], embed(levels[i]), embed(positions[i]))`.
    pub fn tokenize(&self, state: &ReasoningState, positions: &DVector<f64>) -> Result<DMatrix<f64>> {
        if positions.len() != state.n() {
            return Err(Error::ShapeMismatch {
                context: "tokenize positions",
                expected: format!("{}", state.n()),
                got: format!("{}", positions.len()),
            });
        }
        if state.dim() != self.dim {
            return Err(Error::ShapeMismatch {
                context: "tokenize values",
                expected: format!("{}", self.dim),
                got: format!("{}", state.dim()),
            });
        }
        let n = state.n();
        let width = self.token_width();
        let mut tokens = DMatrix::zeros(n, width);
        let mut level_buf = vec![0.0; self.level_embed];
        let mut pos_buf = vec![0.0; self.pos_embed];
        for i in 0..n {
            for j in 0..self.dim {
                tokens[(i, j)] = state.values()[(i, j)];
            }
            embed_into(&mut level_buf, state.levels()[i]);
            for (j, &v) in level_buf.iter().enumerate() {
                tokens[(i, self.dim + j)] = v;
            }
            embed_into(&mut pos_buf, positions[i]);
            for (j, &v) in pos_buf.iter().enumerate() {
                tokens[(i, self.dim + self.level_embed + j)] = v;
            }
        }
        Ok(tokens)
    }
}
