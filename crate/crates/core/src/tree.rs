//! Binomial scenario tree and adapted fields on it.
//!
//! Nodes are stored breadth-first: level `l` occupies indices
//! `2^l - 1 .. 2^(l+1) - 1`, the children of `n` are `2n + 1` (up move,
//! `dB = +sqrt(dtau)`) and `2n + 2` (down move).

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::grid::TimeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScenarioTree {
    pub depth: usize,
    pub horizon: f64,
    /// Noise step `T / depth` (equal to `T` for the degenerate tree).
    pub dtau: f64,
    #[serde(skip)]
    sqrt_dtau: f64,
}

pub fn build_tree(depth: usize, horizon: f64) -> Result<ScenarioTree> {
    if depth > 24 {
        return Err(LabError::Config(format!("tree depth {depth} is too large")));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(LabError::Config(format!("invalid horizon {horizon}")));
    }
    let dtau = if depth == 0 { horizon } else { horizon / depth as f64 };
    Ok(ScenarioTree {
        depth,
        horizon,
        dtau,
        sqrt_dtau: dtau.sqrt(),
    })
}

impl ScenarioTree {
    pub fn n_nodes(&self) -> usize {
        (1 << (self.depth + 1)) - 1
    }

    pub fn n_leaves(&self) -> usize {
        1 << self.depth
    }

    pub fn sqrt_dtau(&self) -> f64 {
        self.sqrt_dtau
    }

    pub fn level(&self, node: usize) -> usize {
        (usize::BITS - 1 - (node + 1).leading_zeros()) as usize
    }

    pub fn level_range(&self, level: usize) -> std::ops::Range<usize> {
        ((1 << level) - 1)..((1 << (level + 1)) - 1)
    }

    pub fn leaves(&self) -> std::ops::Range<usize> {
        self.level_range(self.depth)
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.level(node) == self.depth
    }

    pub fn children(&self, node: usize) -> Option<[usize; 2]> {
        if self.is_leaf(node) {
            None
        } else {
            Some([2 * node + 1, 2 * node + 2])
        }
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        if node == 0 {
            None
        } else {
            Some((node - 1) / 2)
        }
    }

    pub fn ancestor_at(&self, mut node: usize, level: usize) -> usize {
        let mut l = self.level(node);
        while l > level {
            node = (node - 1) / 2;
            l -= 1;
        }
        node
    }

    pub fn probability(&self, node: usize) -> f64 {
        0.5f64.powi(self.level(node) as i32)
    }

    /// Brownian increment that leads into `node` (zero at the root).
    pub fn increment(&self, node: usize) -> f64 {
        if node == 0 {
            0.0
        } else if node % 2 == 1 {
            self.sqrt_dtau
        } else {
            -self.sqrt_dtau
        }
    }

    /// `B` at the node's time, the running sum of increments along the path.
    pub fn brownian(&self, node: usize) -> f64 {
        let mut path = Vec::with_capacity(self.depth);
        let mut n = node;
        while n != 0 {
            path.push(n);
            n = (n - 1) / 2;
        }
        path.iter().rev().map(|&c| self.increment(c)).sum()
    }

    fn require_children(&self, node: usize, n_values: usize) -> Result<()> {
        if node >= self.n_nodes() {
            return Err(LabError::Dimension(format!("node {node} outside the tree")));
        }
        if self.is_leaf(node) {
            return Err(LabError::NoChildren(node));
        }
        if n_values != 2 {
            return Err(LabError::Dimension(format!(
                "expected 2 child values, got {n_values}"
            )));
        }
        Ok(())
    }

    /// `E[v | node]` from the values at the two children (up, down).
    pub fn conditional_expectation(&self, node: usize, child_values: &[Complex64]) -> Result<Complex64> {
        self.require_children(node, child_values.len())?;
        Ok(ce(child_values[0], child_values[1]))
    }

    /// `E[v dB | node] / dtau`, the unique `Y` with `v = E v + Y dB` on both
    /// branches.
    pub fn martingale_increment(&self, node: usize, child_values: &[Complex64]) -> Result<Complex64> {
        self.require_children(node, child_values.len())?;
        Ok(self.mi(child_values[0], child_values[1]))
    }

    pub(crate) fn mi(&self, up: Complex64, down: Complex64) -> Complex64 {
        (up - down) / (2.0 * self.sqrt_dtau)
    }

    /// `E[v]` from leaf values, summed in leaf order.
    pub fn expectation_over_leaves(&self, leaf_values: &[Complex64]) -> Result<Complex64> {
        if leaf_values.len() != self.n_leaves() {
            return Err(LabError::Dimension(format!(
                "expected {} leaf values, got {}",
                self.n_leaves(),
                leaf_values.len()
            )));
        }
        let p = 0.5f64.powi(self.depth as i32);
        Ok(leaf_values.iter().fold(Complex64::new(0.0, 0.0), |acc, v| acc + v * p))
    }

    pub fn description(&self) -> TreeDescription {
        TreeDescription {
            depth: self.depth,
            dtau: self.dtau,
            n_nodes: self.n_nodes(),
            n_leaves: self.n_leaves(),
        }
    }
}

pub(crate) fn ce(up: Complex64, down: Complex64) -> Complex64 {
    0.5 * (up + down)
}

#[derive(Debug, Clone, Serialize)]
pub struct TreeDescription {
    pub depth: usize,
    pub dtau: f64,
    pub n_nodes: usize,
    pub n_leaves: usize,
}

/// Which time indices a node owns.
///
/// `State`: a node at level `j < depth` owns `[jS, (j+1)S)` and each leaf owns
/// the terminal index `N` (for the degenerate tree the root owns `[0, N]`).
/// `Step`: the same ranges for internal nodes, while leaves own nothing (for
/// the degenerate tree the root owns `[0, N)`). `S` is the number of PDE steps
/// per noise step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    State,
    Step,
}

/// A scenario tree bound to a PDE time grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lattice {
    pub tree: ScenarioTree,
    pub time: TimeGrid,
    pub steps_per_node: usize,
}

impl Lattice {
    pub fn new(tree: ScenarioTree, time: TimeGrid) -> Result<Self> {
        if (tree.horizon - time.horizon).abs() > 1e-14 * time.horizon {
            return Err(LabError::Config(
                "tree and time grid use different horizons".into(),
            ));
        }
        let n = time.n_steps;
        let steps_per_node = if tree.depth == 0 {
            n
        } else {
            if n % tree.depth != 0 {
                return Err(LabError::Config(format!(
                    "n_b = {} does not divide n_steps = {n}",
                    tree.depth
                )));
            }
            n / tree.depth
        };
        Ok(Lattice {
            tree,
            time,
            steps_per_node,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.time.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.time.dt
    }

    /// Half-open range of time indices owned by `node`.
    pub fn range(&self, node: usize, layout: Layout) -> std::ops::Range<usize> {
        let j = self.tree.level(node);
        let start = j * self.steps_per_node;
        let end = if j < self.tree.depth {
            start + self.steps_per_node
        } else {
            match layout {
                Layout::State => self.n_steps() + 1,
                Layout::Step => self.n_steps(),
            }
        };
        start..end
    }

    /// Level of the node that owns time index `k` on any path.
    pub fn owner_level(&self, k: usize) -> usize {
        (k / self.steps_per_node).min(self.tree.depth)
    }

    /// Owner of time `k` on the path through `node` (an ancestor or `node`
    /// itself).
    pub fn owner_on_path(&self, node: usize, k: usize) -> usize {
        self.tree.ancestor_at(node, self.owner_level(k))
    }

    /// Whether step `k -> k + 1` crosses into the next noise interval.
    pub fn is_boundary_step(&self, k: usize) -> bool {
        self.tree.depth > 0 && (k + 1) % self.steps_per_node == 0
    }
}

/// Complex field on `nx` spatial nodes for every (node, owned time) slot.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedField {
    pub lattice: Lattice,
    pub layout: Layout,
    pub nx: usize,
    offsets: Vec<usize>,
    pub data: Vec<Complex64>,
}

impl AdaptedField {
    pub fn zeros(lattice: &Lattice, layout: Layout, nx: usize) -> Self {
        let n_nodes = lattice.tree.n_nodes();
        let mut offsets = Vec::with_capacity(n_nodes + 1);
        let mut acc = 0;
        for node in 0..n_nodes {
            offsets.push(acc);
            acc += lattice.range(node, layout).len() * nx;
        }
        offsets.push(acc);
        AdaptedField {
            lattice: *lattice,
            layout,
            nx,
            offsets,
            data: vec![Complex64::new(0.0, 0.0); acc],
        }
    }

    pub fn zeros_like(&self) -> Self {
        AdaptedField {
            data: vec![Complex64::new(0.0, 0.0); self.data.len()],
            ..self.clone()
        }
    }

    pub fn tree(&self) -> &ScenarioTree {
        &self.lattice.tree
    }

    pub fn range(&self, node: usize) -> std::ops::Range<usize> {
        self.lattice.range(node, self.layout)
    }

    fn index(&self, node: usize, k: usize) -> usize {
        let r = self.range(node);
        debug_assert!(r.contains(&k), "time {k} not owned by node {node} ({r:?})");
        self.offsets[node] + (k - r.start) * self.nx
    }

    pub fn get(&self, node: usize, k: usize) -> &[Complex64] {
        let i = self.index(node, k);
        &self.data[i..i + self.nx]
    }

    pub fn get_mut(&mut self, node: usize, k: usize) -> &mut [Complex64] {
        let i = self.index(node, k);
        let nx = self.nx;
        &mut self.data[i..i + nx]
    }

    pub fn set(&mut self, node: usize, k: usize, values: &[Complex64]) {
        self.get_mut(node, k).copy_from_slice(values);
    }

    /// All slots owned by one node, time-major.
    pub fn node_slice(&self, node: usize) -> &[Complex64] {
        &self.data[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn node_slice_mut(&mut self, node: usize) -> &mut [Complex64] {
        let (a, b) = (self.offsets[node], self.offsets[node + 1]);
        &mut self.data[a..b]
    }

    /// Value at time `k` seen from the path through `node`.
    pub fn on_path(&self, node: usize, k: usize) -> &[Complex64] {
        self.get(self.lattice.owner_on_path(node, k), k)
    }

    pub fn same_shape(&self, other: &AdaptedField) -> bool {
        self.layout == other.layout
            && self.nx == other.nx
            && self.lattice == other.lattice
            && self.data.len() == other.data.len()
    }

    pub fn check_shape(&self, other: &AdaptedField, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(LabError::Dimension(format!("{what}: adapted field shapes differ")))
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &AdaptedField) {
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += c * b);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &AdaptedField) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Visits every slot as `(node, k, probability, values)` in storage order.
    pub fn for_each_slot(&self, mut f: impl FnMut(usize, usize, f64, &[Complex64])) {
        for node in 0..self.tree().n_nodes() {
            let p = self.tree().probability(node);
            for k in self.range(node) {
                f(node, k, p, self.get(node, k));
            }
        }
    }

    /// Copies the path through `leaf` into a time-indexed vector of snapshots.
    pub fn path(&self, leaf: usize) -> Vec<(usize, Vec<Complex64>)> {
        let n_times = match self.layout {
            Layout::State => self.lattice.n_steps() + 1,
            Layout::Step => self.lattice.n_steps(),
        };
        (0..n_times)
            .map(|k| (k, self.on_path(leaf, k).to_vec()))
            .collect()
    }
}
