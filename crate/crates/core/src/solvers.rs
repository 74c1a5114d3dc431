//! Time steppers on the scenario tree.
//!
//! With `A_k = I - dt (a+ib) D(t_{k+1})` the schemes are
//!
//! * forward: `y_{k+1} = A_k^{-1} (y_k + dt (F_k + chi h_k + f(y_k)))`; at the end
//!   of noise interval `j` each child adds `dB_c * mean_{k in I_j}(g(y_k) + H_k)`;
//! * backward: `y_k = A_k^{-*} E_k[y_{k+1} - dt s_{k+1}]` with
//!   `s = F + chi h + Upsilon(y, Y)`, and `Y` on interval `j` the martingale
//!   increment of `y_{k+1} - dt s_{k+1}` over the two children;
//! * forward random: `p_{k+1} = A_k^{-1} (p_k + dt src_k)`, copied to both
//!   children at interval ends.
//!
//! The backward scheme is the exact adjoint of the forward one, which makes the
//! HUM gradients exact to rounding.

use std::collections::BTreeMap;
use std::ops::{Index, IndexMut};

use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use num_complex::Complex64;

use crate::error::{LabError, Result};
use crate::grid::{ComplexField, GLCoefficients, GLOperator, SpatialGrid, TimeGrid};
use crate::nonlinear::{NonlinearityKind, NonlinearitySpec};
use crate::tree::{ce, AdaptedField, Lattice, Layout, ScenarioTree};
use crate::weights::Geometry;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Grids, operator, tree and control mask bundled together.
#[derive(Debug, Clone)]
pub struct Model {
    pub op: GLOperator,
    pub lattice: Lattice,
    pub geometry: Geometry,
    /// Nodal indicator of `G0`.
    pub mask: Vec<f64>,
}

impl Model {
    pub fn new(
        space: &SpatialGrid,
        time: &TimeGrid,
        tree: &ScenarioTree,
        coeff: &GLCoefficients,
        geometry: &Geometry,
    ) -> Result<Self> {
        geometry.validate()?;
        let lattice = Lattice::new(*tree, *time)?;
        let op = GLOperator::new(coeff, space, time)?;
        Ok(Model {
            op,
            lattice,
            geometry: *geometry,
            mask: space.g0_mask(geometry),
        })
    }

    pub fn nx(&self) -> usize {
        self.op.nx()
    }

    pub fn dt(&self) -> f64 {
        self.op.dt()
    }

    pub fn h(&self) -> f64 {
        self.op.space.spacing
    }

    pub fn tree(&self) -> &ScenarioTree {
        &self.lattice.tree
    }

    pub fn n_steps(&self) -> usize {
        self.lattice.n_steps()
    }

    pub fn zeros(&self, layout: Layout) -> AdaptedField {
        AdaptedField::zeros(&self.lattice, layout, self.nx())
    }

    pub fn leaf_fields(&self, value: &[Complex64]) -> Vec<ComplexField> {
        vec![value.to_vec(); self.tree().n_leaves()]
    }
}

/// Controls of the forward problem: `h` (masked to `G0`) and `H`, both on the
/// step layout. For backward problems only `h` is used, on the state layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSet {
    pub h: AdaptedField,
    pub big_h: Option<AdaptedField>,
}

impl ControlSet {
    pub fn zero_forward(model: &Model) -> Self {
        ControlSet {
            h: model.zeros(Layout::Step),
            big_h: Some(model.zeros(Layout::Step)),
        }
    }

    pub fn zero_backward(model: &Model) -> Self {
        ControlSet {
            h: model.zeros(Layout::State),
            big_h: None,
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.h.scale(c);
        if let Some(hh) = self.big_h.as_mut() {
            hh.scale(c);
        }
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &ControlSet) {
        self.h.axpy(c, &other.h);
        if let (Some(a), Some(b)) = (self.big_h.as_mut(), other.big_h.as_ref()) {
            a.axpy(c, b);
        }
    }

    /// Zeroes `h` outside `G0`.
    pub fn apply_mask(&mut self, mask: &[f64]) {
        apply_mask(&mut self.h, mask);
    }
}

pub fn apply_mask(field: &mut AdaptedField, mask: &[f64]) {
    let nx = field.nx;
    for (i, v) in field.data.iter_mut().enumerate() {
        *v *= mask[i % nx];
    }
}

#[derive(Debug, Clone)]
pub struct ForwardData {
    pub y0: ComplexField,
    /// `F` on the step layout, or `None` for zero.
    pub source: Option<AdaptedField>,
    pub controls: ControlSet,
    pub nonlinearity: NonlinearitySpec,
}

#[derive(Debug, Clone)]
pub struct BackwardData {
    /// One terminal field per leaf, in leaf order.
    pub terminal: Vec<ComplexField>,
    /// `F` on the state layout (times `1..=N` are used), or `None`.
    pub source: Option<AdaptedField>,
    /// `h` on the state layout, or `None`.
    pub h: Option<AdaptedField>,
    pub nonlinearity: NonlinearitySpec,
}

fn check_field(model: &Model, f: &AdaptedField, layout: Layout, what: &str) -> Result<()> {
    if f.layout != layout || f.nx != model.nx() || f.lattice != model.lattice {
        return Err(LabError::Dimension(format!(
            "{what} does not match the model lattice/layout"
        )));
    }
    Ok(())
}

fn check_len(len: usize, nx: usize, what: &str) -> Result<()> {
    if len != nx {
        return Err(LabError::Dimension(format!("{what} has {len} nodes, expected {nx}")));
    }
    Ok(())
}

fn check_finite(v: &[Complex64], step: usize) -> Result<()> {
    if v.iter().all(|z| z.is_finite()) {
        Ok(())
    } else {
        Err(LabError::Divergence { step })
    }
}

/// Solves the controlled forward equation; the trajectory is on the state
/// layout.
pub fn solve_forward(model: &Model, data: &ForwardData) -> Result<AdaptedField> {
    let nx = model.nx();
    let dt = model.dt();
    let tree = model.tree();
    check_len(data.y0.len(), nx, "y0")?;
    if let Some(f) = &data.source {
        check_field(model, f, Layout::Step, "source")?;
    }
    check_field(model, &data.controls.h, Layout::Step, "h")?;
    if let Some(hh) = &data.controls.big_h {
        check_field(model, hh, Layout::Step, "H")?;
    }
    let nl = &data.nonlinearity;
    let mut y = model.zeros(Layout::State);
    y.set(0, 0, &data.y0);
    let s = model.lattice.steps_per_node as f64;
    let mut rhs = vec![ZERO; nx];
    let mut noise = vec![ZERO; nx];
    for node in 0..tree.n_nodes() {
        let steps = model.lattice.range(node, Layout::Step);
        let state_end = y.range(node).end;
        noise.iter_mut().for_each(|v| *v = ZERO);
        for k in steps {
            {
                let yk = y.get(node, k);
                let hk = data.controls.h.get(node, k);
                for i in 0..nx {
                    let mut src = model.mask[i] * hk[i];
                    if let Some(f) = &data.source {
                        src += f.get(node, k)[i];
                    }
                    if nl.has_drift() {
                        src += nl.drift(yk[i]);
                    }
                    rhs[i] = yk[i] + dt * src;
                    if tree.depth > 0 {
                        let mut g = ZERO;
                        if nl.has_diffusion() {
                            g += nl.diffusion(yk[i]);
                        }
                        if let Some(hh) = &data.controls.big_h {
                            g += hh.get(node, k)[i];
                        }
                        noise[i] += g;
                    }
                }
            }
            let next = model.op.forward_solve(k + 1, &rhs)?;
            check_finite(&next, k + 1)?;
            if k + 1 < state_end {
                y.set(node, k + 1, &next);
            } else {
                let [up, down] = tree
                    .children(node)
                    .ok_or_else(|| LabError::Internal("step past a leaf".into()))?;
                for child in [up, down] {
                    let db = tree.increment(child);
                    let out = y.get_mut(child, k + 1);
                    for i in 0..nx {
                        out[i] = next[i] + db * noise[i] / s;
                    }
                }
            }
        }
    }
    Ok(y)
}

/// `F + chi h` at a state slot, written into `out`.
fn backward_drive(
    model: &Model,
    data: &BackwardData,
    node: usize,
    k: usize,
    out: &mut [Complex64],
) {
    out.iter_mut().for_each(|v| *v = ZERO);
    if let Some(f) = &data.source {
        for (o, v) in out.iter_mut().zip(f.get(node, k)) {
            *o += v;
        }
    }
    if let Some(h) = &data.h {
        for ((o, v), m) in out.iter_mut().zip(h.get(node, k)).zip(&model.mask) {
            *o += m * v;
        }
    }
}

/// `y_{k+1} - dt s_{k+1}` at a state slot with martingale part `big_y`.
fn backward_target(
    model: &Model,
    data: &BackwardData,
    y: &AdaptedField,
    node: usize,
    k: usize,
    big_y: Option<&[Complex64]>,
    drive: &mut [Complex64],
) -> ComplexField {
    let dt = model.dt();
    let nl = &data.nonlinearity;
    backward_drive(model, data, node, k, drive);
    let yk = y.get(node, k);
    (0..model.nx())
        .map(|i| {
            let mut s = drive[i];
            if nl.has_backward_drift() {
                s += nl.backward_drift(yk[i], big_y.map_or(ZERO, |b| b[i]));
            }
            yk[i] - dt * s
        })
        .collect()
}

/// Solves the backward stochastic equation. Returns `y` on the state layout
/// and the martingale part `Y` on the step layout (constant on each noise
/// interval, zero for the degenerate tree).
pub fn solve_backward_bsde(model: &Model, data: &BackwardData) -> Result<(AdaptedField, AdaptedField)> {
    let nx = model.nx();
    let tree = model.tree();
    if data.terminal.len() != tree.n_leaves() {
        return Err(LabError::Dimension(format!(
            "terminal data has {} leaves, tree has {}",
            data.terminal.len(),
            tree.n_leaves()
        )));
    }
    for t in &data.terminal {
        check_len(t.len(), nx, "terminal field")?;
    }
    if let Some(f) = &data.source {
        check_field(model, f, Layout::State, "source")?;
    }
    if let Some(h) = &data.h {
        check_field(model, h, Layout::State, "h")?;
    }
    let n = model.n_steps();
    let mut y = model.zeros(Layout::State);
    let mut big_y = model.zeros(Layout::Step);
    let first_leaf = tree.leaves().start;
    for leaf in tree.leaves() {
        y.set(leaf, n, &data.terminal[leaf - first_leaf]);
    }
    let mut drive = vec![ZERO; nx];
    for level in (0..=tree.depth).rev() {
        for node in tree.level_range(level) {
            let steps = model.lattice.range(node, Layout::Step);
            let mut own_y = vec![ZERO; nx];
            for k in steps.clone().rev() {
                let target = if k + 1 == steps.end && tree.depth > 0 {
                    let [up, down] = tree
                        .children(node)
                        .ok_or_else(|| LabError::Internal("leaf with steps".into()))?;
                    let vs: Vec<ComplexField> = [up, down]
                        .iter()
                        .map(|&c| {
                            let yc = if tree.is_leaf(c) {
                                None
                            } else {
                                Some(big_y.get(c, k + 1).to_vec())
                            };
                            backward_target(model, data, &y, c, k + 1, yc.as_deref(), &mut drive)
                        })
                        .collect();
                    own_y = (0..nx).map(|i| tree.mi(vs[0][i], vs[1][i])).collect();
                    for kk in steps.clone() {
                        big_y.set(node, kk, &own_y);
                    }
                    (0..nx).map(|i| ce(vs[0][i], vs[1][i])).collect::<Vec<_>>()
                } else {
                    backward_target(model, data, &y, node, k + 1, Some(&own_y), &mut drive)
                };
                let yk = model.op.adjoint_solve(k + 1, &target)?;
                check_finite(&yk, k)?;
                y.set(node, k, &yk);
            }
        }
    }
    Ok((y, big_y))
}

/// Pathwise forward march without noise: `p_{k+1} = A_k^{-1}(p_k + dt src_k)`.
/// `source` is on the state layout (times `0..N` are used).
pub fn solve_forward_random(
    model: &Model,
    initial: &[Complex64],
    source: Option<&AdaptedField>,
) -> Result<AdaptedField> {
    let nx = model.nx();
    let dt = model.dt();
    let tree = model.tree();
    check_len(initial.len(), nx, "initial field")?;
    if let Some(s) = source {
        check_field(model, s, Layout::State, "source")?;
    }
    let mut p = model.zeros(Layout::State);
    p.set(0, 0, initial);
    let mut rhs = vec![ZERO; nx];
    for node in 0..tree.n_nodes() {
        let state_end = p.range(node).end;
        for k in model.lattice.range(node, Layout::Step) {
            let pk = p.get(node, k);
            match source {
                Some(s) => {
                    let sk = s.get(node, k);
                    for i in 0..nx {
                        rhs[i] = pk[i] + dt * sk[i];
                    }
                }
                None => rhs.copy_from_slice(pk),
            }
            let next = model.op.forward_solve(k + 1, &rhs)?;
            check_finite(&next, k + 1)?;
            if k + 1 < state_end {
                p.set(node, k + 1, &next);
            } else if let Some(children) = tree.children(node) {
                for c in children {
                    p.set(c, k + 1, &next);
                }
            }
        }
    }
    Ok(p)
}

/// `H* = H - g(y)` on the step layout: the control that reproduces, with the
/// diffusion nonlinearity switched on, a trajectory driven by `H` alone.
pub fn absorb_diffusion_nonlinearity(
    y: &AdaptedField,
    big_h: &AdaptedField,
    nl: &NonlinearitySpec,
) -> Result<AdaptedField> {
    if y.layout != Layout::State || big_h.layout != Layout::Step || y.nx != big_h.nx {
        return Err(LabError::Dimension("H must be on the step layout of y's lattice".into()));
    }
    let mut out = big_h.clone();
    if !nl.has_diffusion() {
        return Ok(out);
    }
    for node in 0..y.tree().n_nodes() {
        for k in big_h.range(node) {
            let yk = y.get(node, k);
            for (o, v) in out.get_mut(node, k).iter_mut().zip(yk) {
                *o -= nl.diffusion(*v);
            }
        }
    }
    Ok(out)
}

/// Result of the brute-force oracle.
#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub y: AdaptedField,
    pub big_y: AdaptedField,
    pub n_unknowns: usize,
    /// Max-norm residual of the assembled system at the returned solution.
    pub residual: f64,
}

pub const ORACLE_MAX_UNKNOWNS: usize = 10_000;

/// Sparse assembly buffer; entries are created on first write.
struct Assembly {
    entries: BTreeMap<(usize, usize), Complex64>,
}

impl Index<(usize, usize)> for Assembly {
    type Output = Complex64;

    fn index(&self, rc: (usize, usize)) -> &Complex64 {
        self.entries.get(&rc).unwrap_or(&ZERO)
    }
}

impl IndexMut<(usize, usize)> for Assembly {
    fn index_mut(&mut self, rc: (usize, usize)) -> &mut Complex64 {
        self.entries.entry(rc).or_insert(ZERO)
    }
}

/// Assembles the whole backward recursion as one linear system and solves it
/// by sparse direct LU. Unknowns per spatial node: `y` on every state slot, and the
/// conditional mean `m` and martingale increment `Y` for every internal node.
pub fn bsde_bruteforce_oracle(model: &Model, data: &BackwardData) -> Result<OracleSolution> {
    let nl = &data.nonlinearity;
    let kappa2 = match nl.kind {
        NonlinearityKind::Zero => 0.0,
        NonlinearityKind::Linear => nl.kappa2,
        _ => {
            return Err(LabError::Refused(
                "the oracle handles only zero or linear backward drifts".into(),
            ))
        }
    };
    let nx = model.nx();
    let tree = model.tree();
    let n = model.n_steps();
    let dt = model.dt();
    let lat = &model.lattice;
    let n_nodes = tree.n_nodes();
    let internal: Vec<usize> = if tree.depth == 0 {
        Vec::new()
    } else {
        (0..tree.leaves().start).collect()
    };
    // slot numbering
    let mut slot_start = Vec::with_capacity(n_nodes);
    let mut n_slots = 0;
    for node in 0..n_nodes {
        slot_start.push(n_slots);
        n_slots += lat.range(node, Layout::State).len();
    }
    let slot = |node: usize, k: usize| slot_start[node] + k - lat.range(node, Layout::State).start;
    let m_block = |node: usize| n_slots + 2 * node;
    let y_block = |node: usize| n_slots + 2 * node + 1;
    let n_blocks = n_slots + 2 * internal.len();
    let dim = n_blocks * nx;
    if dim > ORACLE_MAX_UNKNOWNS {
        return Err(LabError::Refused(format!(
            "{dim} unknowns exceed the oracle cap of {ORACLE_MAX_UNKNOWNS}"
        )));
    }
    if data.terminal.len() != tree.n_leaves() {
        return Err(LabError::Dimension("terminal data per leaf required".into()));
    }
    let mut a = Assembly {
        entries: BTreeMap::new(),
    };
    let mut b = vec![ZERO; dim];
    let one = Complex64::new(1.0, 0.0);
    let cbar = Complex64::new(model.op.coeff.a, -model.op.coeff.b);
    let h2 = model.h() * model.h();
    let faces = |k: usize| model.op.coeff.face_values(&model.op.space, model.op.time.time(k));
    let mut drive = vec![ZERO; nx];
    let mut eq = 0usize;

    // A* y_k written into row block `row` for unknown block `col`
    let put_adjoint = |a: &mut Assembly, row: usize, col: usize, fc: &[f64]| {
        for i in 0..nx {
            let r = row * nx + i;
            a[(r, col * nx + i)] += one + dt * cbar * (fc[i] + fc[i + 1]) / h2;
            if i > 0 {
                a[(r, col * nx + i - 1)] -= dt * cbar * fc[i] / h2;
            }
            if i + 1 < nx {
                a[(r, col * nx + i + 1)] -= dt * cbar * fc[i + 1] / h2;
            }
        }
    };

    for node in 0..n_nodes {
        let srange = lat.range(node, Layout::State);
        for k in srange.clone() {
            let row = eq;
            eq += 1;
            if k == n {
                let leaf = node - tree.leaves().start;
                for i in 0..nx {
                    a[(row * nx + i, slot(node, k) * nx + i)] = one;
                    b[row * nx + i] = data.terminal[leaf][i];
                }
                continue;
            }
            let fc = faces(k + 1)?;
            put_adjoint(&mut a, row, slot(node, k), &fc);
            if k + 1 == srange.end && tree.depth > 0 {
                // A* y_k = m
                for i in 0..nx {
                    a[(row * nx + i, m_block(node) * nx + i)] -= one;
                }
            } else {
                // A* y_k - y_{k+1} + dt s_{k+1} = 0
                backward_drive(model, data, node, k + 1, &mut drive);
                for i in 0..nx {
                    let r = row * nx + i;
                    a[(r, slot(node, k + 1) * nx + i)] += -one + dt * 0.5 * kappa2;
                    if tree.depth > 0 {
                        a[(r, y_block(node) * nx + i)] += dt * 0.5 * kappa2;
                    }
                    b[r] = -dt * drive[i];
                }
            }
        }
    }
    for &node in &internal {
        let k1 = lat.range(node, Layout::State).end;
        for child in tree.children(node).unwrap_or([0, 0]) {
            // y^c - dt s^c - m - dB Y = 0
            let row = eq;
            eq += 1;
            backward_drive(model, data, child, k1, &mut drive);
            for i in 0..nx {
                let r = row * nx + i;
                a[(r, slot(child, k1) * nx + i)] += one - dt * 0.5 * kappa2;
                if !tree.is_leaf(child) {
                    a[(r, y_block(child) * nx + i)] -= dt * 0.5 * kappa2;
                }
                a[(r, m_block(node) * nx + i)] -= one;
                a[(r, y_block(node) * nx + i)] -= Complex64::new(tree.increment(child), 0.0);
                b[r] = dt * drive[i];
            }
        }
    }
    debug_assert_eq!(eq, n_blocks);
    let triplets: Vec<Triplet<usize, usize, Complex64>> = a
        .entries
        .iter()
        .map(|(&(row, col), &val)| Triplet { row, col, val })
        .collect();
    let matrix = SparseColMat::<usize, Complex64>::try_new_from_triplets(dim, dim, &triplets)
        .map_err(|e| LabError::Internal(format!("oracle assembly failed: {e:?}")))?;
    let lu = matrix
        .sp_lu()
        .map_err(|e| LabError::Internal(format!("oracle system is singular: {e:?}")))?;
    let rhs = Mat::<Complex64>::from_fn(dim, 1, |i, _| b[i]);
    let sol = faer::linalg::solvers::Solve::solve(&lu, &rhs);
    let x: Vec<Complex64> = (0..dim).map(|i| sol[(i, 0)]).collect();
    let mut ax = vec![ZERO; dim];
    for (&(r, c), &v) in &a.entries {
        ax[r] += v * x[c];
    }
    let residual = ax.iter().zip(&b).map(|(l, r)| (l - r).norm()).fold(0.0, f64::max);

    let mut y = model.zeros(Layout::State);
    let mut big_y = model.zeros(Layout::Step);
    for node in 0..n_nodes {
        for k in lat.range(node, Layout::State) {
            let base = slot(node, k) * nx;
            y.set(node, k, &x[base..base + nx]);
        }
    }
    for &node in &internal {
        let base = y_block(node) * nx;
        for k in lat.range(node, Layout::Step) {
            big_y.set(node, k, &x[base..base + nx]);
        }
    }
    Ok(OracleSolution {
        y,
        big_y,
        n_unknowns: dim,
        residual,
    })
}
