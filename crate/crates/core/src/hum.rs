//! Penalized HUM: cost evaluation, adjoint gradients, preconditioned conjugate
//! gradients and the optimality/duality diagnostics.
//!
//! Forward problem (controls `h`, `H` on the step layout):
//!
//! ```text
//! J = 1/2 E sum_{k<N} dt |y_k|^2_{wS} + 1/2 |h|^2_{wh} + 1/2 |H|^2_{wH} + 1/(2 eps) E|y_N|^2
//! ```
//!
//! with `wS = theta_eps^-2`, `wh = theta^-2 lambda^-3 mu^-4 xi^-3` (on `G0`) and
//! `wH = theta^-2 lambda^-2 mu^-2 xi^-3`. The adjoint `(r, R)` solves the
//! backward equation with terminal value `y_N / eps` and source `-wS y`, and the
//! gradient in the control inner product `E sum dt h sum u conj(v)` is
//! `(chi r + wh h, R + wH H)`.
//!
//! Backward problem (control `h` on the state layout, times `1..=N`):
//!
//! ```text
//! J = 1/2 E sum_{k>=1} dt |y_k|^2_{wS} + 1/2 |h|^2_{wh} + 1/(2 eps) |y_0|^2
//! ```
//!
//! with the mirrored weights; the adjoint `p` is the pathwise forward solution
//! started from `y_0 / eps` with source `wS y`, and the gradient is
//! `-chi p + wh h`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grid::ComplexField;
use crate::nonlinear::NonlinearitySpec;
use crate::norms::{weighted_seminorm, Quadrature};
use crate::solvers::{
    solve_backward_bsde, solve_forward, solve_forward_random, BackwardData, ControlSet,
    ForwardData, Model,
};
use crate::tree::{AdaptedField, Layout};
use crate::weights::{exp_checked, LogWeight, WeightSet, WeightVariant};

pub const DUALITY_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenalizationConfig {
    pub eps: f64,
    #[serde(default = "default_cg_tol")]
    pub cg_tol: f64,
    #[serde(default = "default_cg_max_iters")]
    pub cg_max_iters: usize,
}

fn default_cg_tol() -> f64 {
    1e-8
}

fn default_cg_max_iters() -> usize {
    500
}

impl Default for PenalizationConfig {
    fn default() -> Self {
        PenalizationConfig {
            eps: 1e-3,
            cg_tol: default_cg_tol(),
            cg_max_iters: default_cg_max_iters(),
        }
    }
}

impl PenalizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(LabError::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.cg_tol > 0.0 && self.cg_tol < 1.0) {
            return Err(LabError::Config(format!("cg_tol must lie in (0,1), got {}", self.cg_tol)));
        }
        if self.cg_max_iters == 0 {
            return Err(LabError::Config("cg_max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Log exponents of the penalty weights.
pub fn control_h_weight(ws: &WeightSet) -> LogWeight {
    LogWeight::new(-2.0, -3.0, -ws.params.log_poly(3.0, 4.0))
}

pub fn control_big_h_weight(ws: &WeightSet) -> LogWeight {
    LogWeight::new(-2.0, -3.0, -ws.params.log_poly(2.0, 2.0))
}

pub const STATE_WEIGHT: LogWeight = LogWeight {
    theta_pow: -2.0,
    xi_pow: 0.0,
    log_const: 0.0,
};

/// Exponentiated weight on the time indices in `k_range`; other rows hold 1.
#[derive(Debug, Clone)]
pub struct WeightTable {
    nx: usize,
    values: Vec<f64>,
}

impl WeightTable {
    pub fn new(
        ws: &WeightSet,
        w: LogWeight,
        k_range: std::ops::RangeInclusive<usize>,
        context: &str,
    ) -> Result<Self> {
        let nx = ws.nx();
        let mut values = vec![1.0; ws.nt() * nx];
        for k in k_range {
            for i in 0..nx {
                values[k * nx + i] = exp_checked(ws.log_weight(k, i, w), context)?;
            }
        }
        Ok(WeightTable { nx, values })
    }

    pub fn at(&self, k: usize, i: usize) -> f64 {
        self.values[k * self.nx + i]
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.nx..(k + 1) * self.nx]
    }
}

/// `Re E sum dt h sum w a conj(b)` over all slots of two equally shaped fields.
fn field_inner(a: &AdaptedField, b: &AdaptedField, w: Option<&WeightTable>, dx: f64) -> f64 {
    let dt = a.lattice.dt();
    let tree = a.tree();
    let mut total = 0.0;
    for node in 0..tree.n_nodes() {
        let p = tree.probability(node);
        let mut node_sum = 0.0;
        for k in a.range(node) {
            let (x, y) = (a.get(node, k), b.get(node, k));
            node_sum += match w {
                Some(w) => {
                    let row = w.row(k);
                    (0..x.len()).map(|i| row[i] * (x[i] * y[i].conj()).re).sum::<f64>()
                }
                None => (0..x.len()).map(|i| (x[i] * y[i].conj()).re).sum::<f64>(),
            };
        }
        total += p * node_sum;
    }
    total * dt * dx
}

/// `u / w` (or `u * w` when `invert` is false) slot by slot.
fn field_weighted(u: &AdaptedField, w: &WeightTable, invert: bool) -> AdaptedField {
    let mut out = u.clone();
    for node in 0..u.tree().n_nodes() {
        for k in u.range(node) {
            let row = w.row(k);
            for (i, v) in out.get_mut(node, k).iter_mut().enumerate() {
                if invert {
                    *v /= row[i];
                } else {
                    *v *= row[i];
                }
            }
        }
    }
    out
}

fn field_norm_sq(a: &AdaptedField, w: Option<&WeightTable>, dx: f64) -> f64 {
    field_inner(a, a, w, dx)
}

/// Named terms of `J`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CostBreakdown {
    pub state: f64,
    pub control_h: f64,
    pub control_big_h: f64,
    /// `(1/2 eps) E|y(T)|^2` or `(1/2 eps)|y(0)|^2`.
    pub endpoint: f64,
    pub total: f64,
}

impl CostBreakdown {
    fn new(state: f64, control_h: f64, control_big_h: f64, endpoint: f64) -> Self {
        CostBreakdown {
            state,
            control_h,
            control_big_h,
            endpoint,
            total: state + control_h + control_big_h + endpoint,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone)]
pub struct HumSolution {
    pub direction: Direction,
    pub eps: f64,
    pub controls: ControlSet,
    /// State on the state layout.
    pub trajectory: AdaptedField,
    /// Martingale part of the state (backward problems).
    pub big_y: Option<AdaptedField>,
    /// `r` (forward) or `p` (backward), state layout.
    pub adjoint: AdaptedField,
    /// `R` (forward problems), step layout.
    pub adjoint_big: Option<AdaptedField>,
    /// `E|y(T)|^2` (forward) or `|y(0)|^2` (backward).
    pub residual: f64,
    pub cost: CostBreakdown,
    /// Weighted norm of `h + chi wh^-1 r` (resp. `h - chi wh^-1 p`).
    pub defect_h: f64,
    /// Weighted norm of `H + wH^-1 R`.
    pub defect_big_h: f64,
    pub optimality_defect: f64,
    /// `|g(0)|` in the inverse-weight norm, the scale of the optimal controls.
    pub control_scale: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `J` after each CG iteration (index 0 is the zero control).
    pub j_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DualityReport {
    pub lhs: f64,
    pub rhs: f64,
    pub defect: f64,
    pub converged: bool,
}

/// Minimal interface the conjugate-gradient driver needs.
trait Quadratic {
    /// `(gradient, J)` at `controls`, with the data switched on or off.
    fn gradient(&self, controls: &ControlSet, with_data: bool) -> Result<(ControlSet, f64)>;
    fn inner(&self, a: &ControlSet, b: &ControlSet) -> f64;
    fn precondition(&self, g: &ControlSet) -> ControlSet;
    fn zero_controls(&self) -> ControlSet;
}

struct CgOutcome {
    controls: ControlSet,
    iterations: usize,
    converged: bool,
    j_history: Vec<f64>,
    g0_norm: f64,
}

/// Preconditioned CG on the quadratic, from zero controls.
fn conjugate_gradient(q: &impl Quadratic, tol: f64, max_iters: usize) -> Result<CgOutcome> {
    let zero = q.zero_controls();
    let (g0, j0) = q.gradient(&zero, true)?;
    let mut x = zero;
    let mut r = g0.clone();
    r.scale(-1.0);
    let b = r.clone();
    let mut z = q.precondition(&r);
    let mut rz = q.inner(&r, &z);
    let rz0 = rz;
    let mut j_history = vec![j0];
    let g0_norm = rz0.max(0.0).sqrt();
    if rz0 <= 0.0 {
        return Ok(CgOutcome {
            controls: x,
            iterations: 0,
            converged: true,
            j_history,
            g0_norm,
        });
    }
    let mut p = z.clone();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let (kp, _) = q.gradient(&p, false)?;
        let pkp = q.inner(&p, &kp);
        if !(pkp > 0.0) {
            return Err(LabError::Internal(format!(
                "CG lost positive curvature ({pkp:e})"
            )));
        }
        let alpha = rz / pkp;
        x.axpy(alpha, &p);
        r.axpy(-alpha, &kp);
        z = q.precondition(&r);
        let rz_new = q.inner(&r, &z);
        j_history.push(j0 - 0.5 * q.inner(&x, &b) - 0.5 * q.inner(&x, &r));
        if rz_new.max(0.0).sqrt() < tol * g0_norm {
            converged = true;
            break;
        }
        let beta = rz_new / rz;
        rz = rz_new;
        let mut next = z.clone();
        next.axpy(beta, &p);
        p = next;
    }
    Ok(CgOutcome {
        controls: x,
        iterations,
        converged,
        j_history,
        g0_norm,
    })
}

fn check_variant(ws: &WeightSet, want: fn(&WeightVariant) -> bool, what: &str) -> Result<()> {
    if want(&ws.variant) {
        Ok(())
    } else {
        Err(LabError::Config(format!(
            "{what} requires a different weight variant, got {}",
            ws.variant.name()
        )))
    }
}

/// Forward penalized problem for fixed model and weights; data are passed to
/// each call.
pub struct ForwardHum<'a> {
    pub model: &'a Model,
    pub ws: &'a WeightSet,
    pub ws_eps: &'a WeightSet,
    pub cfg: PenalizationConfig,
    w_state: WeightTable,
    w_h: WeightTable,
    w_big_h: WeightTable,
}

/// Initial value and source of the forward problem.
#[derive(Debug, Clone)]
pub struct ForwardInput {
    pub y0: ComplexField,
    /// `F` on the step layout.
    pub source: Option<AdaptedField>,
}

impl<'a> ForwardHum<'a> {
    pub fn new(
        model: &'a Model,
        ws: &'a WeightSet,
        ws_eps: &'a WeightSet,
        cfg: PenalizationConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        check_variant(ws, |v| *v == WeightVariant::Forward, "control weights")?;
        check_variant(ws_eps, |v| matches!(v, WeightVariant::ForwardEps(_)), "state weights")?;
        let n = model.n_steps();
        Ok(ForwardHum {
            model,
            ws,
            ws_eps,
            cfg,
            w_state: WeightTable::new(ws_eps, STATE_WEIGHT, 0..=n - 1, "state penalty")?,
            w_h: WeightTable::new(ws, control_h_weight(ws), 0..=n - 1, "h penalty")?,
            w_big_h: WeightTable::new(ws, control_big_h_weight(ws), 0..=n - 1, "H penalty")?,
        })
    }

    fn dx(&self) -> f64 {
        self.model.h()
    }

    pub fn state(&self, input: &ForwardInput, controls: &ControlSet) -> Result<AdaptedField> {
        solve_forward(
            self.model,
            &ForwardData {
                y0: input.y0.clone(),
                source: input.source.clone(),
                controls: controls.clone(),
                nonlinearity: NonlinearitySpec::zero(),
            },
        )
    }

    /// `E|y_N|^2` over the leaves.
    pub fn terminal_residual(&self, y: &AdaptedField) -> f64 {
        let tree = self.model.tree();
        let n = self.model.n_steps();
        tree.leaves()
            .map(|l| tree.probability(l) * crate::grid::l2_norm_sq(y.get(l, n), self.dx()))
            .sum()
    }

    /// State quadrature `E sum_{k<N} dt sum wS |y_k|^2` (unhalved).
    fn state_norm_sq(&self, y: &AdaptedField) -> f64 {
        let n = self.model.n_steps();
        let dt = self.model.dt();
        let tree = self.model.tree();
        let mut total = 0.0;
        for node in 0..tree.n_nodes() {
            let p = tree.probability(node);
            for k in y.range(node).filter(|k| *k < n) {
                let row = self.w_state.row(k);
                total += p * y.get(node, k).iter().zip(row).map(|(v, w)| w * v.norm_sqr()).sum::<f64>();
            }
        }
        total * dt * self.dx()
    }

    pub fn cost(&self, y: &AdaptedField, controls: &ControlSet) -> CostBreakdown {
        let dx = self.dx();
        let big_h = controls
            .big_h
            .as_ref()
            .map_or(0.0, |hh| 0.5 * field_norm_sq(hh, Some(&self.w_big_h), dx));
        CostBreakdown::new(
            0.5 * self.state_norm_sq(y),
            0.5 * field_norm_sq(&controls.h, Some(&self.w_h), dx),
            big_h,
            0.5 / self.cfg.eps * self.terminal_residual(y),
        )
    }

    pub fn eval_j(&self, input: &ForwardInput, controls: &ControlSet) -> Result<(CostBreakdown, AdaptedField)> {
        let y = self.state(input, controls)?;
        Ok((self.cost(&y, controls), y))
    }

    /// Adjoint pair `(r, R)` for a trajectory.
    pub fn adjoint(&self, y: &AdaptedField) -> Result<(AdaptedField, AdaptedField)> {
        let n = self.model.n_steps();
        let tree = self.model.tree();
        let terminal: Vec<ComplexField> = tree
            .leaves()
            .map(|l| y.get(l, n).iter().map(|v| v / self.cfg.eps).collect())
            .collect();
        let mut xi = self.model.zeros(Layout::State);
        for node in 0..tree.n_nodes() {
            for k in y.range(node).filter(|k| *k < n) {
                let row = self.w_state.row(k);
                let src: ComplexField = y.get(node, k).iter().zip(row).map(|(v, w)| -w * v).collect();
                xi.set(node, k, &src);
            }
        }
        solve_backward_bsde(
            self.model,
            &BackwardData {
                terminal,
                source: Some(xi),
                h: None,
                nonlinearity: NonlinearitySpec::zero(),
            },
        )
    }

    fn gradient_from(&self, controls: &ControlSet, r: &AdaptedField, big_r: &AdaptedField) -> ControlSet {
        let mut g = controls.clone();
        let mask = &self.model.mask;
        for node in 0..self.model.tree().n_nodes() {
            for k in g.h.range(node) {
                let rk = r.get(node, k).to_vec();
                let row = self.w_h.row(k);
                for (i, v) in g.h.get_mut(node, k).iter_mut().enumerate() {
                    *v = mask[i] * (rk[i] + row[i] * *v);
                }
                if let Some(hh) = g.big_h.as_mut() {
                    let rr = big_r.get(node, k).to_vec();
                    let row = self.w_big_h.row(k);
                    for (i, v) in hh.get_mut(node, k).iter_mut().enumerate() {
                        *v = rr[i] + row[i] * *v;
                    }
                }
            }
        }
        g
    }

    /// Gradient of `J` in the control inner product, plus the trajectory and
    /// adjoint it was computed from.
    pub fn gradient(
        &self,
        input: &ForwardInput,
        controls: &ControlSet,
    ) -> Result<(ControlSet, AdaptedField, AdaptedField, AdaptedField)> {
        let y = self.state(input, controls)?;
        let (r, big_r) = self.adjoint(&y)?;
        Ok((self.gradient_from(controls, &r, &big_r), y, r, big_r))
    }

    /// Control-space inner product `Re E sum dt h sum u conj(v)`.
    pub fn inner(&self, a: &ControlSet, b: &ControlSet) -> f64 {
        let dx = self.dx();
        let mut s = field_inner(&a.h, &b.h, None, dx);
        if let (Some(x), Some(y)) = (a.big_h.as_ref(), b.big_h.as_ref()) {
            s += field_inner(x, y, None, dx);
        }
        s
    }

    pub fn solve(&self, input: &ForwardInput) -> Result<HumSolution> {
        let problem = ForwardQuadratic { hum: self, input };
        let cg = conjugate_gradient(&problem, self.cfg.cg_tol, self.cfg.cg_max_iters)?;
        let (_, y, r, big_r) = self.gradient(input, &cg.controls)?;
        let dx = self.dx();
        // h + chi wh^-1 r and H + wH^-1 R measured in the penalty norms
        let mut dh = field_weighted(&r, &self.w_h, true);
        let mut dh_step = cg.controls.h.clone();
        for node in 0..self.model.tree().n_nodes() {
            for k in dh_step.range(node) {
                let rk = dh.get_mut(node, k).to_vec();
                for (i, v) in dh_step.get_mut(node, k).iter_mut().enumerate() {
                    *v += self.model.mask[i] * rk[i];
                }
            }
        }
        dh = dh_step;
        let defect_h = field_norm_sq(&dh, Some(&self.w_h), dx).sqrt();
        let defect_big_h = match cg.controls.big_h.as_ref() {
            Some(hh) => {
                let mut d = field_weighted(&big_r, &self.w_big_h, true);
                d.axpy(1.0, hh);
                field_norm_sq(&d, Some(&self.w_big_h), dx).sqrt()
            }
            None => 0.0,
        };
        Ok(HumSolution {
            direction: Direction::Forward,
            eps: self.cfg.eps,
            residual: self.terminal_residual(&y),
            cost: self.cost(&y, &cg.controls),
            controls: cg.controls,
            trajectory: y,
            big_y: None,
            adjoint: r,
            adjoint_big: Some(big_r),
            defect_h,
            defect_big_h,
            optimality_defect: (defect_h * defect_h + defect_big_h * defect_big_h).sqrt(),
            control_scale: cg.g0_norm,
            iterations: cg.iterations,
            converged: cg.converged,
            j_history: cg.j_history,
        })
    }

    /// Both sides of the duality identity
    /// `|r|^2_{wh^-1} + |R|^2_{wH^-1} + |y|^2_{wS} + E|y_N|^2 / eps
    ///  = Re[<y0, r_0 + dt wS_0 y0> + <F, r>]`.
    pub fn duality(&self, sol: &HumSolution, input: &ForwardInput) -> DualityReport {
        let dx = self.dx();
        let dt = self.model.dt();
        let r = &sol.adjoint;
        let mut masked_r = field_weighted(r, &self.w_h, true);
        crate::solvers::apply_mask(&mut masked_r, &self.model.mask);
        let step_r = restrict_to_step(&masked_r, self.model);
        let mut lhs = field_inner(&step_r, &restrict_to_step(r, self.model), None, dx);
        if let Some(big_r) = sol.adjoint_big.as_ref() {
            lhs += field_norm_sq(&field_weighted(big_r, &self.w_big_h, true), Some(&self.w_big_h), dx);
        }
        lhs += self.state_norm_sq(&sol.trajectory) + self.terminal_residual(&sol.trajectory) / self.cfg.eps;
        let r0 = r.get(0, 0);
        let w0 = self.w_state.row(0);
        let mut rhs: f64 = dx
            * input
                .y0
                .iter()
                .enumerate()
                .map(|(i, y)| (y * (r0[i] + dt * w0[i] * y).conj()).re)
                .sum::<f64>();
        if let Some(f) = input.source.as_ref() {
            rhs += field_inner(f, &restrict_to_step(r, self.model), None, dx);
        }
        DualityReport {
            lhs,
            rhs,
            defect: (lhs - rhs).abs() / (rhs.abs() + DUALITY_FLOOR),
            converged: sol.converged,
        }
    }
}

/// Copies the step-layout slots out of a state-layout field.
fn restrict_to_step(f: &AdaptedField, model: &Model) -> AdaptedField {
    let mut out = model.zeros(Layout::Step);
    for node in 0..model.tree().n_nodes() {
        for k in out.range(node) {
            out.set(node, k, f.get(node, k));
        }
    }
    out
}

struct ForwardQuadratic<'h, 'a> {
    hum: &'h ForwardHum<'a>,
    input: &'h ForwardInput,
}

impl Quadratic for ForwardQuadratic<'_, '_> {
    fn gradient(&self, controls: &ControlSet, with_data: bool) -> Result<(ControlSet, f64)> {
        let zero_input;
        let input = if with_data {
            self.input
        } else {
            zero_input = ForwardInput {
                y0: vec![Complex64::new(0.0, 0.0); self.hum.model.nx()],
                source: None,
            };
            &zero_input
        };
        let (g, y, _, _) = self.hum.gradient(input, controls)?;
        Ok((g, if with_data { self.hum.cost(&y, controls).total } else { 0.0 }))
    }

    fn inner(&self, a: &ControlSet, b: &ControlSet) -> f64 {
        self.hum.inner(a, b)
    }

    fn precondition(&self, g: &ControlSet) -> ControlSet {
        ControlSet {
            h: field_weighted(&g.h, &self.hum.w_h, true),
            big_h: g.big_h.as_ref().map(|hh| field_weighted(hh, &self.hum.w_big_h, true)),
        }
    }

    fn zero_controls(&self) -> ControlSet {
        ControlSet::zero_forward(self.hum.model)
    }
}

/// Backward penalized problem.
pub struct BackwardHum<'a> {
    pub model: &'a Model,
    pub ws: &'a WeightSet,
    pub ws_eps: &'a WeightSet,
    pub cfg: PenalizationConfig,
    w_state: WeightTable,
    w_h: WeightTable,
}

/// Terminal data per leaf and source of the backward problem.
#[derive(Debug, Clone)]
pub struct BackwardInput {
    pub terminal: Vec<ComplexField>,
    /// `F` on the state layout (times `1..=N`).
    pub source: Option<AdaptedField>,
}

impl<'a> BackwardHum<'a> {
    pub fn new(
        model: &'a Model,
        ws: &'a WeightSet,
        ws_eps: &'a WeightSet,
        cfg: PenalizationConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        check_variant(ws, |v| *v == WeightVariant::Backward, "control weights")?;
        check_variant(ws_eps, |v| matches!(v, WeightVariant::BackwardEps(_)), "state weights")?;
        let n = model.n_steps();
        Ok(BackwardHum {
            model,
            ws,
            ws_eps,
            cfg,
            w_state: WeightTable::new(ws_eps, STATE_WEIGHT, 1..=n, "state penalty")?,
            w_h: WeightTable::new(ws, control_h_weight(ws), 1..=n, "h penalty")?,
        })
    }

    fn dx(&self) -> f64 {
        self.model.h()
    }

    pub fn state(&self, input: &BackwardInput, controls: &ControlSet) -> Result<(AdaptedField, AdaptedField)> {
        solve_backward_bsde(
            self.model,
            &BackwardData {
                terminal: input.terminal.clone(),
                source: input.source.clone(),
                h: Some(controls.h.clone()),
                nonlinearity: NonlinearitySpec::zero(),
            },
        )
    }

    pub fn initial_residual(&self, y: &AdaptedField) -> f64 {
        crate::grid::l2_norm_sq(y.get(0, 0), self.dx())
    }

    fn state_norm_sq(&self, y: &AdaptedField) -> f64 {
        let dt = self.model.dt();
        let tree = self.model.tree();
        let mut total = 0.0;
        for node in 0..tree.n_nodes() {
            let p = tree.probability(node);
            for k in y.range(node).filter(|k| *k >= 1) {
                let row = self.w_state.row(k);
                total += p * y.get(node, k).iter().zip(row).map(|(v, w)| w * v.norm_sqr()).sum::<f64>();
            }
        }
        total * dt * self.dx()
    }

    pub fn cost(&self, y: &AdaptedField, controls: &ControlSet) -> CostBreakdown {
        CostBreakdown::new(
            0.5 * self.state_norm_sq(y),
            0.5 * field_norm_sq(&controls.h, Some(&self.w_h), self.dx()),
            0.0,
            0.5 / self.cfg.eps * self.initial_residual(y),
        )
    }

    pub fn eval_j(&self, input: &BackwardInput, controls: &ControlSet) -> Result<(CostBreakdown, AdaptedField, AdaptedField)> {
        let (y, big_y) = self.state(input, controls)?;
        Ok((self.cost(&y, controls), y, big_y))
    }

    /// Pathwise adjoint `p` for a trajectory.
    pub fn adjoint(&self, y: &AdaptedField) -> Result<AdaptedField> {
        let n = self.model.n_steps();
        let tree = self.model.tree();
        let mut src = self.model.zeros(Layout::State);
        for node in 0..tree.n_nodes() {
            for k in y.range(node).filter(|k| *k >= 1 && *k < n) {
                let row = self.w_state.row(k);
                let v: ComplexField = y.get(node, k).iter().zip(row).map(|(v, w)| w * v).collect();
                src.set(node, k, &v);
            }
        }
        let p0: ComplexField = y.get(0, 0).iter().map(|v| v / self.cfg.eps).collect();
        solve_forward_random(self.model, &p0, Some(&src))
    }

    fn gradient_from(&self, controls: &ControlSet, p: &AdaptedField) -> ControlSet {
        let mut g = controls.clone();
        let mask = &self.model.mask;
        for node in 0..self.model.tree().n_nodes() {
            for k in g.h.range(node) {
                let pk = p.get(node, k).to_vec();
                let row = self.w_h.row(k);
                for (i, v) in g.h.get_mut(node, k).iter_mut().enumerate() {
                    *v = if k == 0 { Complex64::new(0.0, 0.0) } else { mask[i] * (-pk[i] + row[i] * *v) };
                }
            }
        }
        g
    }

    pub fn gradient(
        &self,
        input: &BackwardInput,
        controls: &ControlSet,
    ) -> Result<(ControlSet, AdaptedField, AdaptedField, AdaptedField)> {
        let (y, big_y) = self.state(input, controls)?;
        let p = self.adjoint(&y)?;
        Ok((self.gradient_from(controls, &p), y, big_y, p))
    }

    pub fn inner(&self, a: &ControlSet, b: &ControlSet) -> f64 {
        field_inner(&a.h, &b.h, None, self.dx())
    }

    pub fn solve(&self, input: &BackwardInput) -> Result<HumSolution> {
        let problem = BackwardQuadratic { hum: self, input };
        let cg = conjugate_gradient(&problem, self.cfg.cg_tol, self.cfg.cg_max_iters)?;
        let (_, y, big_y, p) = self.gradient(input, &cg.controls)?;
        // h - chi wh^-1 p, zero at t = 0
        let mut d = field_weighted(&p, &self.w_h, true);
        crate::solvers::apply_mask(&mut d, &self.model.mask);
        d.scale(-1.0);
        d.axpy(1.0, &cg.controls.h);
        d.get_mut(0, 0).iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        let defect_h = field_norm_sq(&d, Some(&self.w_h), self.dx()).sqrt();
        Ok(HumSolution {
            direction: Direction::Backward,
            eps: self.cfg.eps,
            residual: self.initial_residual(&y),
            cost: self.cost(&y, &cg.controls),
            controls: cg.controls,
            trajectory: y,
            big_y: Some(big_y),
            adjoint: p,
            adjoint_big: None,
            defect_h,
            defect_big_h: 0.0,
            optimality_defect: defect_h,
            control_scale: cg.g0_norm,
            iterations: cg.iterations,
            converged: cg.converged,
            j_history: cg.j_history,
        })
    }

    /// Both sides of
    /// `|p|^2_{wh^-1} + |y|^2_{wS} + |y_0|^2 / eps
    ///  = Re[E<y_T, p_N> + dt E wS_N |y_T|^2 - <F, p>]`.
    pub fn duality(&self, sol: &HumSolution, input: &BackwardInput) -> DualityReport {
        let dx = self.dx();
        let dt = self.model.dt();
        let n = self.model.n_steps();
        let p = &sol.adjoint;
        let mut wp = field_weighted(p, &self.w_h, true);
        crate::solvers::apply_mask(&mut wp, &self.model.mask);
        wp.get_mut(0, 0).iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        let mut lhs = field_inner(&wp, p, None, dx);
        lhs += self.state_norm_sq(&sol.trajectory) + self.initial_residual(&sol.trajectory) / self.cfg.eps;
        let tree = self.model.tree();
        let first = tree.leaves().start;
        let wn = self.w_state.row(n);
        let mut rhs = 0.0;
        for leaf in tree.leaves() {
            let yt = &input.terminal[leaf - first];
            let pn = p.get(leaf, n);
            rhs += tree.probability(leaf)
                * dx
                * (0..yt.len())
                    .map(|i| (yt[i] * pn[i].conj()).re + dt * wn[i] * yt[i].norm_sqr())
                    .sum::<f64>();
        }
        if let Some(f) = input.source.as_ref() {
            let mut f1 = f.clone();
            f1.get_mut(0, 0).iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
            rhs -= field_inner(&f1, p, None, dx);
        }
        DualityReport {
            lhs,
            rhs,
            defect: (lhs - rhs).abs() / (rhs.abs() + DUALITY_FLOOR),
            converged: sol.converged,
        }
    }
}

struct BackwardQuadratic<'h, 'a> {
    hum: &'h BackwardHum<'a>,
    input: &'h BackwardInput,
}

impl Quadratic for BackwardQuadratic<'_, '_> {
    fn gradient(&self, controls: &ControlSet, with_data: bool) -> Result<(ControlSet, f64)> {
        let zero_input;
        let input = if with_data {
            self.input
        } else {
            zero_input = BackwardInput {
                terminal: self.hum.model.leaf_fields(&vec![Complex64::new(0.0, 0.0); self.hum.model.nx()]),
                source: None,
            };
            &zero_input
        };
        let (g, y, _, _) = self.hum.gradient(input, controls)?;
        Ok((g, if with_data { self.hum.cost(&y, controls).total } else { 0.0 }))
    }

    fn inner(&self, a: &ControlSet, b: &ControlSet) -> f64 {
        self.hum.inner(a, b)
    }

    fn precondition(&self, g: &ControlSet) -> ControlSet {
        ControlSet {
            h: field_weighted(&g.h, &self.hum.w_h, true),
            big_h: None,
        }
    }

    fn zero_controls(&self) -> ControlSet {
        ControlSet::zero_backward(self.hum.model)
    }
}

/// Every term of the forward cost estimate, paired with its data terms.
#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub lhs_terms: Vec<(String, f64)>,
    pub rhs_terms: Vec<(String, f64)>,
    pub lhs_total: f64,
    pub rhs_total: f64,
    pub ratio: f64,
}

impl CostReport {
    fn new(lhs_terms: Vec<(String, f64)>, rhs_terms: Vec<(String, f64)>) -> Self {
        let lhs_total: f64 = lhs_terms.iter().map(|t| t.1).sum();
        let rhs_total: f64 = rhs_terms.iter().map(|t| t.1).sum();
        CostReport {
            lhs_terms,
            rhs_terms,
            lhs_total,
            rhs_total,
            ratio: safe_ratio(lhs_total, rhs_total),
        }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.lhs_terms
            .iter()
            .chain(&self.rhs_terms)
            .find(|t| t.0 == name)
            .map(|t| t.1)
    }
}

/// `a / b`, with `0 / 0 = 0`.
pub fn safe_ratio(a: f64, b: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// LHS: `E int theta^-2 |y|^2`, `theta^-2 l^-3 m^-4 xi^-3 |h|^2` on `G0`,
/// `theta^-2 l^-2 m^-2 xi^-2... |H|^2`; RHS: the weighted `y0` term and
/// `|F|_S^2`, all with the unregularized forward weights.
pub fn cost_report_forward(
    sol: &HumSolution,
    input: &ForwardInput,
    model: &Model,
    ws: &WeightSet,
) -> Result<CostReport> {
    let n = model.n_steps();
    let p = &ws.params;
    let state = weighted_seminorm(&sol.trajectory, ws, STATE_WEIGHT, &Quadrature::times(0, n - 1))?;
    let h = weighted_seminorm(&sol.controls.h, ws, control_h_weight(ws), &Quadrature::times(0, n - 1).masked(&model.mask))?;
    let big_h = match sol.controls.big_h.as_ref() {
        Some(hh) => weighted_seminorm(hh, ws, control_big_h_weight(ws), &Quadrature::times(0, n - 1))?,
        None => 0.0,
    };
    let mut y0_field = model.zeros(Layout::State);
    y0_field.set(0, 0, &input.y0);
    let y0_weight = LogWeight::new(-2.0, 0.0, -p.log_poly(2.0, 3.0) - 2.0 * p.mu * (p.offset() + 1.0));
    let y0_term = weighted_seminorm(&y0_field, ws, y0_weight, &Quadrature::slice(0))?;
    let f_term = match input.source.as_ref() {
        Some(f) => source_norm_sq(f, ws, 0, n - 1, 0)?,
        None => 0.0,
    };
    Ok(CostReport::new(
        vec![("state".into(), state), ("h".into(), h), ("H".into(), big_h)],
        vec![("y0".into(), y0_term), ("F".into(), f_term)],
    ))
}

/// LHS: `Y`, `grad y`, `y`, `h` terms with the mirrored weights; RHS: the
/// weighted terminal term and `|F|_Q^2`.
pub fn cost_report_backward(
    sol: &HumSolution,
    input: &BackwardInput,
    model: &Model,
    ws: &WeightSet,
) -> Result<CostReport> {
    let n = model.n_steps();
    let p = &ws.params;
    let yw = LogWeight::new(-2.0, -2.0, -p.log_poly(2.0, 2.0));
    let big_y = match sol.big_y.as_ref() {
        Some(by) => weighted_seminorm(by, ws, yw, &Quadrature::times(0, n - 1).shifted(1))?,
        None => 0.0,
    };
    let grad = weighted_seminorm(&sol.trajectory, ws, yw, &Quadrature::times(1, n).of_gradient())?;
    let state = weighted_seminorm(&sol.trajectory, ws, STATE_WEIGHT, &Quadrature::times(1, n))?;
    let h = weighted_seminorm(&sol.controls.h, ws, control_h_weight(ws), &Quadrature::times(1, n).masked(&model.mask))?;
    let mut term = model.zeros(Layout::State);
    let first = model.tree().leaves().start;
    for leaf in model.tree().leaves() {
        term.set(leaf, n, &input.terminal[leaf - first]);
    }
    let yt = weighted_seminorm(&term, ws, LogWeight::new(-2.0, 0.0, -p.log_poly(2.0, 2.0)), &Quadrature::slice(n))?;
    let f_term = match input.source.as_ref() {
        Some(f) => source_norm_sq(f, ws, 1, n, 0)?,
        None => 0.0,
    };
    Ok(CostReport::new(
        vec![("Y".into(), big_y), ("grad_y".into(), grad), ("state".into(), state), ("h".into(), h)],
        vec![("yT".into(), yt), ("F".into(), f_term)],
    ))
}

/// `E int theta^-2 l^-3 m^-4 xi^-3 |F|^2` over time indices `k_min..=k_max`.
pub fn source_norm_sq(f: &AdaptedField, ws: &WeightSet, k_min: usize, k_max: usize, shift: usize) -> Result<f64> {
    weighted_seminorm(f, ws, control_h_weight(ws), &Quadrature::times(k_min, k_max).shifted(shift))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{A11Profile, GLCoefficients, SpatialGrid, TimeGrid};
    use crate::tree::build_tree;
    use crate::weights::{build_beta, build_weight_set, Geometry, WeightParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Setup {
        model: Model,
        ws: WeightSet,
        ws_eps: WeightSet,
        wb: WeightSet,
        wb_eps: WeightSet,
    }

    fn params() -> WeightParams {
        WeightParams {
            lambda: 1.0,
            mu: 1.0,
            m: 1,
            horizon: 0.5,
            offset_override: Some(-9.0),
            sigma_override: Some(2.5),
        }
    }

    fn setup(nx: usize, n_steps: usize, depth: usize, eps: f64) -> Setup {
        let space = SpatialGrid::new(0.0, 1.0, nx).unwrap();
        let time = TimeGrid::new(0.5, n_steps).unwrap();
        let tree = build_tree(depth, 0.5).unwrap();
        let coeff = GLCoefficients {
            a: 1.0,
            b: 0.5,
            a11: A11Profile::Modulated { base: 1.0, amplitude: 0.25 },
            s0: 0.5,
        };
        let geometry = Geometry::default();
        let model = Model::new(&space, &time, &tree, &coeff, &geometry).unwrap();
        let beta = build_beta(&geometry, &space).unwrap();
        let p = params();
        let mk = |v| build_weight_set(&beta, &p, &space, &time, v).unwrap();
        Setup {
            model,
            ws: mk(WeightVariant::Forward),
            ws_eps: mk(WeightVariant::ForwardEps(eps)),
            wb: mk(WeightVariant::Backward),
            wb_eps: mk(WeightVariant::BackwardEps(eps)),
        }
    }

    fn cfg(eps: f64) -> PenalizationConfig {
        PenalizationConfig {
            eps,
            cg_tol: 1e-10,
            cg_max_iters: 500,
        }
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> ComplexField {
        (0..n)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    fn rand_field(rng: &mut ChaCha8Rng, f: &mut AdaptedField) {
        for v in f.data.iter_mut() {
            *v = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
    }

    fn forward_input(s: &Setup, seed: u64) -> ForwardInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = s.model.zeros(Layout::Step);
        rand_field(&mut rng, &mut f);
        ForwardInput {
            y0: rand_vec(&mut rng, s.model.nx()),
            source: Some(f),
        }
    }

    fn backward_input(s: &Setup, seed: u64) -> BackwardInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = s.model.zeros(Layout::State);
        rand_field(&mut rng, &mut f);
        BackwardInput {
            terminal: (0..s.model.tree().n_leaves()).map(|_| rand_vec(&mut rng, s.model.nx())).collect(),
            source: Some(f),
        }
    }

    fn rand_controls(s: &Setup, seed: u64, forward: bool) -> ControlSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = if forward {
            ControlSet::zero_forward(&s.model)
        } else {
            ControlSet::zero_backward(&s.model)
        };
        rand_field(&mut rng, &mut c.h);
        c.h.scale(1e-4);
        if let Some(hh) = c.big_h.as_mut() {
            rand_field(&mut rng, hh);
            hh.scale(1e-4);
        }
        c.apply_mask(&s.model.mask);
        if !forward {
            c.h.get_mut(0, 0).iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        }
        c
    }

    #[test]
    fn forward_gradient_matches_central_differences() {
        let s = setup(7, 16, 2, 0.05);
        let hum = ForwardHum::new(&s.model, &s.ws, &s.ws_eps, cfg(0.05)).unwrap();
        let input = forward_input(&s, 1);
        let c = rand_controls(&s, 2, true);
        let d = rand_controls(&s, 3, true);
        let (g, ..) = hum.gradient(&input, &c).unwrap();
        let delta = 1e-5;
        let mut cp = c.clone();
        cp.axpy(delta, &d);
        let mut cm = c.clone();
        cm.axpy(-delta, &d);
        let jp = hum.eval_j(&input, &cp).unwrap().0.total;
        let jm = hum.eval_j(&input, &cm).unwrap().0.total;
        let fd = (jp - jm) / (2.0 * delta);
        let exact = hum.inner(&g, &d);
        assert!((fd - exact).abs() <= 1e-6 * exact.abs(), "fd {fd} exact {exact}");
    }

    #[test]
    fn backward_gradient_matches_central_differences() {
        let s = setup(7, 16, 2, 0.05);
        let hum = BackwardHum::new(&s.model, &s.wb, &s.wb_eps, cfg(0.05)).unwrap();
        let input = backward_input(&s, 4);
        let c = rand_controls(&s, 5, false);
        let d = rand_controls(&s, 6, false);
        let (g, ..) = hum.gradient(&input, &c).unwrap();
        let delta = 1e-5;
        let mut cp = c.clone();
        cp.axpy(delta, &d);
        let mut cm = c.clone();
        cm.axpy(-delta, &d);
        let fd = (hum.eval_j(&input, &cp).unwrap().0.total - hum.eval_j(&input, &cm).unwrap().0.total)
            / (2.0 * delta);
        let exact = hum.inner(&g, &d);
        assert!((fd - exact).abs() <= 1e-6 * exact.abs(), "fd {fd} exact {exact}");
    }

    #[test]
    fn cost_is_exactly_quadratic_along_a_line() {
        let s = setup(7, 16, 2, 0.05);
        let hum = ForwardHum::new(&s.model, &s.ws, &s.ws_eps, cfg(0.05)).unwrap();
        let input = forward_input(&s, 7);
        let c = rand_controls(&s, 8, true);
        let d = rand_controls(&s, 9, true);
        let j = |t: f64| {
            let mut x = c.clone();
            x.axpy(t, &d);
            hum.eval_j(&input, &x).unwrap().0.total
        };
        let (j0, j1, jm, j2) = (j(0.0), j(1.0), j(-1.0), j(2.0));
        let a = 0.5 * (j1 + jm) - j0;
        let b = 0.5 * (j1 - jm);
        assert!((j2 - (j0 + 2.0 * b + 4.0 * a)).abs() < 1e-12 * j2.abs());
    }

    #[test]
    fn zero_data_gives_zero_controls() {
        let s = setup(7, 16, 2, 0.05);
        let hum = ForwardHum::new(&s.model, &s.ws, &s.ws_eps, cfg(0.05)).unwrap();
        let input = ForwardInput {
            y0: vec![Complex64::new(0.0, 0.0); 7],
            source: None,
        };
        let sol = hum.solve(&input).unwrap();
        assert_eq!(sol.iterations, 0);
        assert!(sol.controls.h.max_abs() == 0.0);
        assert_eq!(sol.cost.total, 0.0);
    }

    #[test]
    fn forward_solve_converges_with_small_defects() {
        let s = setup(7, 16, 2, 0.05);
        let hum = ForwardHum::new(&s.model, &s.ws, &s.ws_eps, cfg(0.05)).unwrap();
        let input = forward_input(&s, 10);
        let sol = hum.solve(&input).unwrap();
        assert!(sol.converged);
        assert!(sol.optimality_defect <= 1e-8 * sol.control_scale, "{} {}", sol.optimality_defect, sol.control_scale);
        for w in sol.j_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-300);
        }
        let rel = (sol.j_history.last().unwrap() - sol.cost.total).abs() / sol.cost.total;
        assert!(rel < 1e-8, "tracked J off by {rel}");
        let d = hum.duality(&sol, &input);
        assert!(d.defect < 1e-6, "duality defect {}", d.defect);
    }

    #[test]
    fn backward_solve_converges_with_small_defects() {
        let s = setup(7, 16, 2, 0.05);
        let hum = BackwardHum::new(&s.model, &s.wb, &s.wb_eps, cfg(0.05)).unwrap();
        let input = backward_input(&s, 11);
        let sol = hum.solve(&input).unwrap();
        assert!(sol.converged);
        assert!(sol.optimality_defect <= 1e-8 * sol.control_scale);
        let d = hum.duality(&sol, &input);
        assert!(d.defect < 1e-6, "duality defect {}", d.defect);
    }

    #[test]
    fn smaller_eps_reduces_the_residual() {
        let mut last = f64::INFINITY;
        for eps in [1e-1, 1e-2, 1e-3] {
            let s = setup(7, 16, 2, eps);
            let hum = ForwardHum::new(&s.model, &s.ws, &s.ws_eps, cfg(eps)).unwrap();
            let sol = hum.solve(&forward_input(&s, 12)).unwrap();
            assert!(sol.residual < last);
            last = sol.residual;
        }
    }

    #[test]
    fn mismatched_variants_rejected() {
        let s = setup(7, 16, 2, 0.05);
        assert!(ForwardHum::new(&s.model, &s.wb, &s.ws_eps, cfg(0.05)).is_err());
        assert!(BackwardHum::new(&s.model, &s.wb, &s.ws_eps, cfg(0.05)).is_err());
    }
}
