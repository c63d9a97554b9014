//! Generative reasoning over sets of continuous variables, each carrying its
//! own noise level.
//!
//! The crate provides the building blocks of a multi-noise-level denoising
//! pipeline and an exact verification oracle:
//!
//! * [`state`] — the variable-set state (values, per-variable levels,
//!   conditioning mask) and dependency graphs,
//! * [`paradigm`] — mixing coefficients for discrete diffusion, cosine flows
//!   and rectified flows, plus lossless conversion among the four prediction
//!   parameterizations,
//! * [`oracle`] — Gaussian mixtures and the closed-form posterior-mean
//!   denoiser, exact for heterogeneous levels,
//! * [`net`] — a small trainable denoiser with hand-rolled reverse-mode
//!   gradients, tokenizer, prediction heads and modular losses,
//! * [`tsample`] — training-time noise-level samplers,
//! * [`schedule`] — inference schedule matrices and the adaptive
//!   certainty-driven selection policy,
//! * [`sampler`] — the stepping engine (ancestral, DDIM-family jumps, Euler
//!   and Heun flow steps) and the full inference loop,
//! * [`task`] — concrete task domains (Latin-square boards, autoregressive
//!   sequences, explicit mixtures) and evaluation metrics,
//! * [`render`] — PGM/PPM output for boards and schedule heat maps.

pub mod denoiser;
pub mod error;
pub mod net;
pub mod oracle;
pub mod paradigm;
pub mod render;
pub mod sampler;
pub mod schedule;
pub mod state;
pub mod task;
pub mod tsample;

pub use denoiser::{Denoiser, Prediction};
pub use error::{Error, Result};
pub use state::{DependencyGraph, ReasoningState};
