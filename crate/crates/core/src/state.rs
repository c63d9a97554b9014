//! Variable-set state and dependency graphs.
//!
//! A [`ReasoningState`] holds `n` variables of `dim` scalar dimensions each,
//! every variable carrying its own noise level in `[0, 1]` (0 = clean,
//! 1 = pure noise). Conditioned variables are observed values: they are kept
//! in the state at level 0 and never modified, so every denoiser input keeps
//! the fixed `n x dim` shape.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Per-variable values, noise levels and conditioning mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningState {
    values: DMatrix<f64>,
    levels: DVector<f64>,
    conditioned: Vec<bool>,
}

impl ReasoningState {
    /// Builds a validated state from raw parts.
    pub fn new(
        values: DMatrix<f64>,
        levels: DVector<f64>,
        conditioned: Vec<bool>,
    ) -> Result<Self> {
        let n = values.nrows();
        if levels.len() != n {
            return Err(Error::ShapeMismatch {
                context: "state levels",
                expected: format!("{n}"),
                got: format!("{}", levels.len()),
            });
        }
        if conditioned.len() != n {
            return Err(Error::ShapeMismatch {
                context: "state conditioning mask",
                expected: format!("{n}"),
                got: format!("{}", conditioned.len()),
            });
        }
        for (i, &t) in levels.iter().enumerate() {
            if !t.is_finite() || !(0.0..=1.0).contains(&t) {
                return Err(Error::LevelOutOfRange { index: i, value: t });
            }
            if conditioned[i] && t != 0.0 {
                return Err(Error::ConditionedNotClean { index: i, level: t });
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("state values"));
        }
        Ok(Self {
            values,
            levels,
            conditioned,
        })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn levels(&self) -> &DVector<f64> {
        &self.levels
    }

    pub fn conditioned(&self) -> &[bool] {
        &self.conditioned
    }

    pub fn is_conditioned(&self, i: usize) -> bool {
        self.conditioned[i]
    }

    /// State values flattened row-major to a length `n * dim` vector.
    pub fn flat_values(&self) -> DVector<f64> {
        let (n, dim) = (self.n(), self.dim());
        DVector::from_fn(n * dim, |p, _| self.values[(p / dim, p % dim)])
    }

    /// Indices of variables that are not conditioned.
    pub fn active_variables(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.conditioned[i]).collect()
    }

    /// Replaces one variable's value row and level. The sampler owns all
    /// mutation; conditioned variables are rejected here so the clamping
    /// contract cannot be broken by a stray write.
    pub(crate) fn update_variable(
        &mut self,
        i: usize,
        row: &DVector<f64>,
        level: f64,
    ) -> Result<()> {
        if self.conditioned[i] {
            return Err(Error::ConditionedNotClean { index: i, level });
        }
        if !(0.0..=1.0).contains(&level) {
            return Err(Error::LevelOutOfRange {
                index: i,
                value: level,
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("updated variable values"));
        }
        self.values.row_mut(i).copy_from(&row.transpose());
        self.levels[i] = level;
        Ok(())
    }
}

/// Directed dependency structure between variables: an edge `(parent, child)`
/// means the parent should be resolved before the child.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
}

impl DependencyGraph {
    pub fn new(n: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        for &(p, c) in &edges {
            if p >= n {
                return Err(Error::IndexOutOfRange {
                    context: "graph edge parent",
                    index: p,
                    bound: n,
                });
            }
            if c >= n {
                return Err(Error::IndexOutOfRange {
                    context: "graph edge child",
                    index: c,
                    bound: n,
                });
            }
            if p == c {
                return Err(Error::SelfLoop(p));
            }
        }
        Ok(Self { n, edges })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn parents_of(&self, child: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges
            .iter()
            .filter(move |&&(_, c)| c == child)
            .map(|&(p, _)| p)
    }

    /// Kahn topological sort with ties broken by ascending index, so the
    /// order is deterministic. On a cycle, reports one edge lying on it.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let n = self.n;
        let mut indegree = vec![0usize; n];
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(p, c) in &self.edges {
            indegree[c] += 1;
            children[p].push(c);
        }
        // Min-heap on index via Reverse.
        let mut ready: std::collections::BinaryHeap<std::cmp::Reverse<usize>> = (0..n)
            .filter(|&i| indegree[i] == 0)
            .map(std::cmp::Reverse)
            .collect();
        let mut order = Vec::with_capacity(n);
        while let Some(std::cmp::Reverse(i)) = ready.pop() {
            order.push(i);
            for &c in &children[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(std::cmp::Reverse(c));
                }
            }
        }
        if order.len() == n {
            return Ok(order);
        }
        // Every remaining node has an unresolved parent; walk backwards until
        // a node repeats to name an edge on an actual cycle.
        let remaining: Vec<usize> = (0..n).filter(|&i| indegree[i] > 0).collect();
        let start = remaining[0];
        let mut seen = vec![false; n];
        let mut node = start;
        loop {
            if seen[node] {
                // node is on a cycle; report the edge from its unresolved parent
                let parent = self
                    .parents_of(node)
                    .find(|&p| indegree[p] > 0)
                    .expect("cyclic node must have an unresolved parent");
                return Err(Error::CycleDetected {
                    parent,
                    child: node,
                });
            }
            seen[node] = true;
            node = self
                .parents_of(node)
                .find(|&p| indegree[p] > 0)
                .expect("unresolved node must have an unresolved parent");
        }
    }
}
