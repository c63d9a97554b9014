//! Inference schedules: the per-variable noise-level trajectory grid.
//!
//! A schedule matrix holds `d + 1` columns of target levels for `n`
//! variables: column 0 is the start state and column `k` is the state after
//! step `k`. Every non-adaptive inference run is fully specified by this
//! grid. The builders cover the blend from fully parallel to fully
//! autoregressive generation:
//!
//! * `parallel`: every active variable rides one linear ramp `1 -> 0`,
//! * `sequential(order, overlap)`: active variable `j` ramps inside the
//!   normalized window `[start_j, start_j + w]` with `w = 1/(m - o(m-1))`
//!   and `start_j = j w (1 - o)`; `o = 0` is strictly autoregressive and
//!   `o = 1` reproduces `parallel`,
//! * `next-k`: groups of `k` consecutive variables share a ramp, groups
//!   strictly sequential,
//! * `rolling-window(window, stride)`: a staircase where at most `window`
//!   variables are mid-ramp at any column, advancing `stride` variables at a
//!   time,
//! * `adaptive-certainty(k)`: only the start column is built; later columns
//!   are produced online by [`adaptive_select`] inside the sampling engine.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::render;
use crate::state::{DependencyGraph, ReasoningState};

/// Target noise levels for all variables over all steps, plus the
/// conditioning mask the schedule was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleMatrix {
    levels: DMatrix<f64>, // n x (d + 1)
    conditioned: Vec<bool>,
}

/// First failed schedule invariant, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleViolation {
    pub row: usize,
    pub column: usize,
    pub reason: &'static str,
}

impl ScheduleMatrix {
    pub fn from_raw(levels: DMatrix<f64>, conditioned: Vec<bool>) -> Result<Self> {
        if levels.nrows() != conditioned.len() || levels.ncols() == 0 {
            return Err(Error::ShapeMismatch {
                context: "schedule matrix",
                expected: format!("{} rows, >= 1 column", conditioned.len()),
                got: format!("{:?}", levels.shape()),
            });
        }
        Ok(Self {
            levels,
            conditioned,
        })
    }

    pub fn n(&self) -> usize {
        self.levels.nrows()
    }

    /// Number of steps `d`; the matrix has `d + 1` columns.
    pub fn steps(&self) -> usize {
        self.levels.ncols() - 1
    }

    pub fn conditioned(&self) -> &[bool] {
        &self.conditioned
    }

    pub fn levels(&self) -> &DMatrix<f64> {
        &self.levels
    }

    pub fn column(&self, k: usize) -> DVector<f64> {
        DVector::from_fn(self.n(), |i, _| self.levels[(i, k)])
    }

    /// Checks every matrix invariant, reporting the first violating cell.
    pub fn validate(&self) -> Option<ScheduleViolation> {
        let (n, cols) = self.levels.shape();
        for i in 0..n {
            for k in 0..cols {
                let v = self.levels[(i, k)];
                if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                    return Some(ScheduleViolation {
                        row: i,
                        column: k,
                        reason: "level outside [0, 1]",
                    });
                }
                if k > 0 && v > self.levels[(i, k - 1)] {
                    return Some(ScheduleViolation {
                        row: i,
                        column: k,
                        reason: "row not nonincreasing",
                    });
                }
                if self.conditioned[i] && v != 0.0 {
                    return Some(ScheduleViolation {
                        row: i,
                        column: k,
                        reason: "conditioned row must be identically zero",
                    });
                }
            }
            if self.levels[(i, cols - 1)] != 0.0 {
                return Some(ScheduleViolation {
                    row: i,
                    column: cols - 1,
                    reason: "final level must be zero",
                });
            }
        }
        None
    }

    /// Writes the raw level grid as CSV: `n` rows, `d + 1` columns.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for i in 0..self.n() {
            let row: Vec<String> = (0..self.levels.ncols())
                .map(|k| format!("{}", self.levels[(i, k)]))
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Writes a grayscale heat map (PGM, level 1 = black, 0 = white); each
    /// level cell becomes a `scale x scale` pixel block.
    pub fn write_pgm<P: AsRef<Path>>(&self, path: P, scale: usize) -> Result<()> {
        let (n, cols) = self.levels.shape();
        let gray = |i: usize, k: usize| ((1.0 - self.levels[(i, k)]) * 255.0).round() as u8;
        let mut pixels = Vec::with_capacity(n * cols * scale * scale);
        for i in 0..n {
            for _ in 0..scale {
                for k in 0..cols {
                    let g = gray(i, k);
                    pixels.extend(std::iter::repeat_n(g, scale));
                }
            }
        }
        render::write_pgm(path, cols * scale, n * scale, &pixels)
    }
}

/// How sequential-style builders order the variables.
#[derive(Debug, Clone, PartialEq)]
pub enum VariableOrder {
    /// Explicit permutation of all `n` variable indices.
    Explicit(Vec<usize>),
    /// Deterministic shuffle of `0..n` from the given seed.
    Random { seed: u64 },
    /// Topological order of the dependency graph.
    Graph,
}

impl VariableOrder {
    /// The canonical ascending-index order.
    pub fn index(n: usize) -> Self {
        Self::Explicit((0..n).collect())
    }

    fn resolve(&self, n: usize, graph: Option<&DependencyGraph>) -> Result<Vec<usize>> {
        match self {
            Self::Explicit(order) => {
                if order.len() != n {
                    return Err(Error::InvalidSpec(format!(
                        "explicit order has {} entries for {} variables",
                        order.len(),
                        n
                    )));
                }
                let mut seen = vec![false; n];
                for &v in order {
                    if v >= n || seen[v] {
                        return Err(Error::InvalidSpec(
                            "explicit order is not a permutation".into(),
                        ));
                    }
                    seen[v] = true;
                }
                Ok(order.clone())
            }
            Self::Random { seed } => {
                let mut order: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                order.shuffle(&mut rng);
                Ok(order)
            }
            Self::Graph => {
                let graph = graph.ok_or(Error::MissingGraph)?;
                if graph.n() != n {
                    return Err(Error::ShapeMismatch {
                        context: "graph order",
                        expected: format!("{n}"),
                        got: format!("{}", graph.n()),
                    });
                }
                graph.topological_order()
            }
        }
    }
}

/// Schedule strategy.
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    Parallel,
    Sequential { order: VariableOrder, overlap: f64 },
    NextK { k: usize, order: VariableOrder },
    RollingWindow { window: usize, stride: usize },
    AdaptiveCertainty { k: usize },
}

/// Strategy plus step count.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
}

impl ScheduleSpec {
    fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::InvalidSpec("schedule needs at least one step".into()));
        }
        match &self.kind {
            ScheduleKind::Sequential { overlap, .. } => {
                if !(0.0..=1.0).contains(overlap) {
                    return Err(Error::InvalidSpec(format!(
                        "overlap {overlap} outside [0, 1]"
                    )));
                }
            }
            ScheduleKind::NextK { k, .. } | ScheduleKind::AdaptiveCertainty { k } => {
                if *k < 1 {
                    return Err(Error::InvalidSpec("k must be at least 1".into()));
                }
            }
            ScheduleKind::RollingWindow { window, stride } => {
                if *window < 1 || *stride < 1 {
                    return Err(Error::InvalidSpec(
                        "window and stride must be at least 1".into(),
                    ));
                }
            }
            ScheduleKind::Parallel => {}
        }
        Ok(())
    }
}

/// Ramp windows in normalized time: active variable `v` descends linearly
/// from 1 to 0 over `[start, start + width]`.
struct Window {
    variable: usize,
    start: f64,
    width: f64,
}

fn windows_to_matrix(
    windows: &[Window],
    n: usize,
    steps: usize,
    conditioned: &[bool],
) -> ScheduleMatrix {
    let mut levels = DMatrix::zeros(n, steps + 1);
    for i in 0..n {
        if !conditioned[i] {
            // variables without a window stay fully noisy until one is given
            for k in 0..=steps {
                levels[(i, k)] = 1.0;
            }
        }
    }
    for w in windows {
        for k in 0..=steps {
            let s = k as f64 / steps as f64;
            let raw = 1.0 - (s - w.start) / w.width;
            levels[(w.variable, k)] = raw.clamp(0.0, 1.0);
        }
        // snap the terminal column exactly
        levels[(w.variable, steps)] = 0.0;
    }
    ScheduleMatrix {
        levels,
        conditioned: conditioned.to_vec(),
    }
}

/// Builds the full level grid for the given strategy. Conditioned variables
/// get identically-zero rows. For `adaptive-certainty` only the start column
/// is returned; the engine produces the rest online.
pub fn build_schedule(
    spec: &ScheduleSpec,
    n: usize,
    conditioned: &[bool],
    graph: Option<&DependencyGraph>,
) -> Result<ScheduleMatrix> {
    spec.validate()?;
    if conditioned.len() != n {
        return Err(Error::ShapeMismatch {
            context: "build_schedule",
            expected: format!("{n}"),
            got: format!("{}", conditioned.len()),
        });
    }
    let active: Vec<usize> = (0..n).filter(|&i| !conditioned[i]).collect();
    let m = active.len();
    let d = spec.steps;

    if m == 0 {
        return ScheduleMatrix::from_raw(DMatrix::zeros(n, d + 1), conditioned.to_vec());
    }

    let windows: Vec<Window> = match &spec.kind {
        ScheduleKind::Parallel => active
            .iter()
            .map(|&v| Window {
                variable: v,
                start: 0.0,
                width: 1.0,
            })
            .collect(),
        ScheduleKind::Sequential { order, overlap } => {
            let o = *overlap;
            if o == 0.0 && d < m {
                return Err(Error::TooFewSteps { needed: m, steps: d });
            }
            let order: Vec<usize> = order
                .resolve(n, graph)?
                .into_iter()
                .filter(|v| !conditioned[*v])
                .collect();
            let w = 1.0 / (m as f64 - o * (m as f64 - 1.0));
            order
                .iter()
                .enumerate()
                .map(|(j, &v)| Window {
                    variable: v,
                    start: j as f64 * w * (1.0 - o),
                    width: w,
                })
                .collect()
        }
        ScheduleKind::NextK { k, order } => {
            let order: Vec<usize> = order
                .resolve(n, graph)?
                .into_iter()
                .filter(|v| !conditioned[*v])
                .collect();
            let groups = m.div_ceil(*k);
            if d < groups {
                return Err(Error::TooFewSteps {
                    needed: groups,
                    steps: d,
                });
            }
            let width = 1.0 / groups as f64;
            order
                .iter()
                .enumerate()
                .map(|(j, &v)| Window {
                    variable: v,
                    start: (j / k) as f64 * width,
                    width,
                })
                .collect()
        }
        ScheduleKind::RollingWindow { window, stride } => {
            let w = (*window).min(m);
            let s = (*stride).min(w);
            let blocks_in_flight = (w / s).max(1);
            let n_blocks = m.div_ceil(s);
            let g = 1.0 / (n_blocks - 1 + blocks_in_flight) as f64;
            active
                .iter()
                .enumerate()
                .map(|(j, &v)| Window {
                    variable: v,
                    start: (j / s) as f64 * g,
                    width: blocks_in_flight as f64 * g,
                })
                .collect()
        }
        ScheduleKind::AdaptiveCertainty { .. } => {
            let mut col0 = DMatrix::zeros(n, 1);
            for &v in &active {
                col0[(v, 0)] = 1.0;
            }
            return ScheduleMatrix::from_raw(col0, conditioned.to_vec());
        }
    };
    Ok(windows_to_matrix(&windows, n, d, conditioned))
}

/// Picks up to `k` not-yet-started variables (level exactly 1), skipping any
/// whose graph parent is unfinished (level > 0), smallest uncertainty first
/// with ties broken by ascending index. Empty once every variable has
/// started.
pub fn adaptive_select(
    state: &ReasoningState,
    uncertainties: &DVector<f64>,
    k: usize,
    graph: Option<&DependencyGraph>,
) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..state.n())
        .filter(|&i| !state.is_conditioned(i) && state.levels()[i] == 1.0)
        .filter(|&i| {
            graph.is_none_or(|g| g.parents_of(i).all(|p| state.levels()[p] == 0.0))
        })
        .collect();
    candidates.sort_by(|&a, &b| {
        uncertainties[a]
            .partial_cmp(&uncertainties[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    candidates.truncate(k);
    candidates
}
