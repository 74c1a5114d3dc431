//! Picard iteration on the source term for the semilinear problems: each sweep
//! solves the linear penalized problem with source `F_k` and sets
//! `F_{k+1} = f(y_k)` (forward) or `Upsilon(y_k, Y_k)` (backward).

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grid::ComplexField;
use crate::hum::{
    control_h_weight, BackwardHum, BackwardInput, ForwardHum, ForwardInput, HumSolution,
    PenalizationConfig,
};
use crate::nonlinear::NonlinearitySpec;
use crate::norms::{weighted_seminorm, Quadrature};
use crate::solvers::{absorb_diffusion_nonlinearity, Model};
use crate::tree::{AdaptedField, Layout};
use crate::weights::{build_weight_set, BetaProfile, WeightParams, WeightSet, WeightVariant};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardConfig {
    #[serde(default = "default_fp_tol")]
    pub fp_tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
}

fn default_fp_tol() -> f64 {
    1e-6
}

fn default_max_iters() -> usize {
    50
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig {
            fp_tol: default_fp_tol(),
            max_iters: default_max_iters(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PicardTrace {
    /// `|F_{k+1} - F_k|` in the source norm, one entry per sweep.
    pub increments: Vec<f64>,
    /// Ratios of consecutive nonzero increments.
    pub factors: Vec<f64>,
    #[serde(skip)]
    pub final_source: Option<AdaptedField>,
    pub final_source_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl PicardTrace {
    /// Median of the measured factors, 0 when there are none.
    pub fn median_factor(&self) -> f64 {
        let mut f = self.factors.clone();
        if f.is_empty() {
            return 0.0;
        }
        f.sort_by(|a, b| a.total_cmp(b));
        let n = f.len();
        if n % 2 == 1 {
            f[n / 2]
        } else {
            0.5 * (f[n / 2 - 1] + f[n / 2])
        }
    }
}

/// `|F|_S`: forward weights, step layout, times `0..N`.
pub fn source_norm_s(f: &AdaptedField, ws: &WeightSet) -> Result<f64> {
    if ws.variant != WeightVariant::Forward {
        return Err(LabError::Config("the S norm uses forward weights".into()));
    }
    let n = f.lattice.n_steps();
    Ok(weighted_seminorm(f, ws, control_h_weight(ws), &Quadrature::times(0, n - 1))?.sqrt())
}

/// `|F|_Q`: mirrored weights, state layout, times `1..=N`.
pub fn source_norm_q(f: &AdaptedField, ws: &WeightSet) -> Result<f64> {
    if ws.variant != WeightVariant::Backward {
        return Err(LabError::Config("the Q norm uses mirrored weights".into()));
    }
    let n = f.lattice.n_steps();
    Ok(weighted_seminorm(f, ws, control_h_weight(ws), &Quadrature::times(1, n))?.sqrt())
}

/// `f(y)` on the step layout of `y`'s lattice.
pub fn forward_source(y: &AdaptedField, nl: &NonlinearitySpec) -> AdaptedField {
    let mut out = AdaptedField::zeros(&y.lattice, Layout::Step, y.nx);
    for node in 0..y.tree().n_nodes() {
        for k in out.range(node) {
            let v: ComplexField = y.get(node, k).iter().map(|z| nl.drift(*z)).collect();
            out.set(node, k, &v);
        }
    }
    out
}

/// `Y` read at every state slot: the value of the owning node on the step
/// layout, zero where the node owns no step (leaves, or `t = T` on a
/// single-scenario tree).
pub fn martingale_on_state(big_y: &AdaptedField) -> AdaptedField {
    let mut out = AdaptedField::zeros(&big_y.lattice, Layout::State, big_y.nx);
    for node in 0..big_y.tree().n_nodes() {
        for k in big_y.range(node) {
            out.set(node, k, big_y.get(node, k));
        }
    }
    out
}

/// `Upsilon(y, Y)` on the state layout, zero at `t = 0`.
pub fn backward_source(y: &AdaptedField, big_y: &AdaptedField, nl: &NonlinearitySpec) -> AdaptedField {
    let ys = martingale_on_state(big_y);
    let mut out = y.zeros_like();
    for node in 0..y.tree().n_nodes() {
        for k in y.range(node).filter(|k| *k >= 1) {
            let v: ComplexField = y
                .get(node, k)
                .iter()
                .zip(ys.get(node, k))
                .map(|(a, b)| nl.backward_drift(*a, *b))
                .collect();
            out.set(node, k, &v);
        }
    }
    out
}

fn diff_norm(a: &AdaptedField, b: &AdaptedField, norm: &dyn Fn(&AdaptedField) -> Result<f64>) -> Result<f64> {
    let mut d = a.clone();
    d.axpy(-1.0, b);
    norm(&d)
}

fn run_picard(
    zero: AdaptedField,
    pc: &PicardConfig,
    mut solve: impl FnMut(&AdaptedField) -> Result<(HumSolution, AdaptedField)>,
    norm: &dyn Fn(&AdaptedField) -> Result<f64>,
) -> Result<(HumSolution, PicardTrace)> {
    if !(pc.fp_tol > 0.0) || pc.max_iters == 0 {
        return Err(LabError::Config("fp_tol and max_iters must be positive".into()));
    }
    let mut source = zero;
    let mut increments = Vec::new();
    let mut converged = false;
    let mut last;
    loop {
        let (sol, next) = solve(&source)?;
        last = sol;
        let inc = diff_norm(&next, &source, norm)?;
        increments.push(inc);
        let next_norm = norm(&next)?;
        if inc < pc.fp_tol * (1.0 + next_norm) {
            converged = true;
        }
        if converged || increments.len() >= pc.max_iters {
            break;
        }
        source = next;
    }
    let factors = increments
        .windows(2)
        .filter(|w| w[0] > 0.0)
        .map(|w| w[1] / w[0])
        .collect();
    Ok((
        last,
        PicardTrace {
            iterations: increments.len(),
            increments,
            factors,
            final_source_norm: norm(&source)?,
            final_source: Some(source),
            converged,
        },
    ))
}

/// Forward semilinear problem. When `nl` carries a diffusion part the returned
/// solution's `H` is replaced by `H - g(y)`, the control for the system with
/// `g` switched on.
pub fn picard_forward(
    hum: &ForwardHum,
    y0: &[Complex64],
    nl: &NonlinearitySpec,
    pc: &PicardConfig,
) -> Result<(HumSolution, PicardTrace)> {
    nl.validate()?;
    let model = hum.model;
    let norm = |f: &AdaptedField| source_norm_s(f, hum.ws);
    let (mut sol, trace) = run_picard(
        model.zeros(Layout::Step),
        pc,
        |f| {
            let sol = hum.solve(&ForwardInput {
                y0: y0.to_vec(),
                source: Some(f.clone()),
            })?;
            let next = forward_source(&sol.trajectory, nl);
            Ok((sol, next))
        },
        &norm,
    )?;
    if let Some(hh) = sol.controls.big_h.as_ref() {
        sol.controls.big_h = Some(absorb_diffusion_nonlinearity(&sol.trajectory, hh, nl)?);
    }
    Ok((sol, trace))
}

pub fn picard_backward(
    hum: &BackwardHum,
    terminal: &[ComplexField],
    nl: &NonlinearitySpec,
    pc: &PicardConfig,
) -> Result<(HumSolution, PicardTrace)> {
    nl.validate()?;
    let model = hum.model;
    let norm = |f: &AdaptedField| source_norm_q(f, hum.ws);
    run_picard(
        model.zeros(Layout::State),
        pc,
        |f| {
            let sol = hum.solve(&BackwardInput {
                terminal: terminal.to_vec(),
                source: Some(f.clone()),
            })?;
            let big_y = sol.big_y.as_ref().ok_or_else(|| LabError::Internal("missing Y".into()))?;
            let next = backward_source(&sol.trajectory, big_y, nl);
            Ok((sol, next))
        },
        &norm,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    Forward,
    Backward,
}

/// Everything a probe needs to rebuild the weights at each `lambda`.
pub struct ProbeSetup<'a> {
    pub model: &'a Model,
    pub beta: &'a BetaProfile,
    pub params: WeightParams,
    pub cfg: PenalizationConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeRow {
    pub lambda: f64,
    pub mu: f64,
    /// `|E F1 - E F2| / |F1 - F2|` in the source norm.
    pub factor: f64,
    /// Lipschitz constant times the measured state-difference ratio.
    pub bound: f64,
}

/// Random combination of the three lowest sine modes in every slot. Rough
/// white-noise perturbations are damped by the parabolic solve and would
/// understate the factor.
fn random_field(rng: &mut ChaCha8Rng, f: &mut AdaptedField) {
    let nx = f.nx;
    let modes: Vec<Vec<f64>> = (1..=3)
        .map(|m| {
            (1..=nx)
                .map(|j| (m as f64 * std::f64::consts::PI * j as f64 / (nx + 1) as f64).sin())
                .collect()
        })
        .collect();
    for slot in f.data.chunks_mut(nx) {
        let c: Vec<Complex64> = (0..3)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        for (i, v) in slot.iter_mut().enumerate() {
            *v = (0..3).map(|m| c[m] * modes[m][i]).sum();
        }
    }
}

/// One application of the source map to `F1` and `F1 + delta`, for every
/// `lambda` in the list (weights rebuilt, data and perturbation fixed).
pub fn contraction_probe(
    kind: ProblemKind,
    setup: &ProbeSetup,
    nl: &NonlinearitySpec,
    lambdas: &[f64],
) -> Result<Vec<ProbeRow>> {
    if lambdas.is_empty() {
        return Err(LabError::Config("lambda list must be non-empty".into()));
    }
    nl.validate()?;
    let model = setup.model;
    let layout = match kind {
        ProblemKind::Forward => Layout::Step,
        ProblemKind::Backward => Layout::State,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let mut f1 = model.zeros(layout);
    random_field(&mut rng, &mut f1);
    let mut delta = model.zeros(layout);
    random_field(&mut rng, &mut delta);
    let mut f2 = f1.clone();
    f2.axpy(1.0, &delta);
    let data: ComplexField = (0..model.nx())
        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    let op = &model.op;
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let params = WeightParams { lambda, ..setup.params };
        let build = |v| build_weight_set(setup.beta, &params, &op.space, &op.time, v);
        let eps = setup.cfg.eps;
        let (factor, bound) = match kind {
            ProblemKind::Forward => {
                let (ws, ws_eps) = (build(WeightVariant::Forward)?, build(WeightVariant::ForwardEps(eps))?);
                let hum = ForwardHum::new(model, &ws, &ws_eps, setup.cfg)?;
                let run = |f: &AdaptedField| {
                    hum.solve(&ForwardInput { y0: data.clone(), source: Some(f.clone()) })
                        .map(|s| s.trajectory)
                };
                let (y1, y2) = (run(&f1)?, run(&f2)?);
                let num = diff_norm(&forward_source(&y1, nl), &forward_source(&y2, nl), &|f| source_norm_s(f, &ws))?;
                let den = source_norm_s(&delta, &ws)?;
                let mut dy = y1.clone();
                dy.axpy(-1.0, &y2);
                let n = model.n_steps();
                let ydiff = weighted_seminorm(&dy, &ws, control_h_weight(&ws), &Quadrature::times(0, n - 1))?.sqrt();
                (num / den, nl.kappa * ydiff / den)
            }
            ProblemKind::Backward => {
                let (ws, ws_eps) = (build(WeightVariant::Backward)?, build(WeightVariant::BackwardEps(eps))?);
                let hum = BackwardHum::new(model, &ws, &ws_eps, setup.cfg)?;
                let terminal = model.leaf_fields(&data);
                let run = |f: &AdaptedField| -> Result<(AdaptedField, AdaptedField)> {
                    let s = hum.solve(&BackwardInput { terminal: terminal.clone(), source: Some(f.clone()) })?;
                    let by = s.big_y.ok_or_else(|| LabError::Internal("missing Y".into()))?;
                    Ok((s.trajectory, by))
                };
                let ((y1, b1), (y2, b2)) = (run(&f1)?, run(&f2)?);
                let q = |f: &AdaptedField| source_norm_q(f, &ws);
                let num = diff_norm(&backward_source(&y1, &b1, nl), &backward_source(&y2, &b2, nl), &q)?;
                let den = q(&delta)?;
                let dy = diff_norm(&y1, &y2, &q)?;
                let dbig = diff_norm(&martingale_on_state(&b1), &martingale_on_state(&b2), &q)?;
                (num / den, 0.5 * nl.kappa2 * (dy + dbig) / den)
            }
        };
        rows.push(ProbeRow {
            lambda,
            mu: params.mu,
            factor,
            bound,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{A11Profile, GLCoefficients, SpatialGrid, TimeGrid};
    use crate::tree::build_tree;
    use crate::weights::{build_beta, Geometry};

    fn params(lambda: f64) -> WeightParams {
        WeightParams {
            lambda,
            mu: 1.0,
            m: 1,
            horizon: 0.5,
            offset_override: Some(-9.0),
            sigma_override: Some(2.5),
        }
    }

    fn model(nx: usize, n_steps: usize, depth: usize) -> Model {
        let space = SpatialGrid::new(0.0, 1.0, nx).unwrap();
        let time = TimeGrid::new(0.5, n_steps).unwrap();
        let coeff = GLCoefficients {
            a: 1.0,
            b: 0.5,
            a11: A11Profile::Modulated { base: 1.0, amplitude: 0.25 },
            s0: 0.5,
        };
        Model::new(&space, &time, &build_tree(depth, 0.5).unwrap(), &coeff, &Geometry::default()).unwrap()
    }

    fn weights(m: &Model, lambda: f64, v: WeightVariant) -> WeightSet {
        let beta = build_beta(&Geometry::default(), &m.op.space).unwrap();
        build_weight_set(&beta, &params(lambda), &m.op.space, &m.op.time, v).unwrap()
    }

    #[test]
    fn source_norms_match_direct_summation() {
        let m = model(3, 4, 1);
        for (layout, variant, ks) in [
            (Layout::Step, WeightVariant::Forward, 0..=3usize),
            (Layout::State, WeightVariant::Backward, 1..=4usize),
        ] {
            let ws = weights(&m, 2.0, variant);
            let mut f = m.zeros(layout);
            f.data.iter_mut().for_each(|v| *v = Complex64::new(1.0, 0.0));
            let got = match variant {
                WeightVariant::Forward => source_norm_s(&f, &ws).unwrap(),
                _ => source_norm_q(&f, &ws).unwrap(),
            };
            // theta^-2 lambda^-3 mu^-4 xi^-3 summed slot by slot in linear space
            let (lambda, mu) = (2.0f64, 1.0f64);
            let mut direct = 0.0;
            let tree = m.tree();
            for node in 0..tree.n_nodes() {
                for k in f.range(node).filter(|k| ks.contains(k)) {
                    for i in 0..3 {
                        let theta = ws.log_theta_at(k, i).exp();
                        let xi = ws.xi_at(k, i).unwrap();
                        direct += tree.probability(node) * m.dt() * m.h()
                            / (theta * theta * lambda.powi(3) * mu.powi(4) * xi.powi(3));
                    }
                }
            }
            let direct = direct.sqrt();
            assert!((got - direct).abs() <= 1e-12 * direct, "{got} vs {direct}");
            let mut g = f.clone();
            g.scale(-2.5);
            let scaled = match variant {
                WeightVariant::Forward => source_norm_s(&g, &ws).unwrap(),
                _ => source_norm_q(&g, &ws).unwrap(),
            };
            assert!((scaled - 2.5 * got).abs() <= 1e-12 * scaled);
            assert_eq!(source_norm_s(&f.zeros_like(), &weights(&m, 2.0, WeightVariant::Forward)).unwrap(), 0.0);
        }
    }

    fn cfg() -> PenalizationConfig {
        PenalizationConfig { eps: 0.05, cg_tol: 1e-10, cg_max_iters: 500 }
    }

    fn y0(nx: usize) -> ComplexField {
        (1..=nx).map(|j| Complex64::new((j as f64 * 0.7).sin(), 0.3)).collect()
    }

    #[test]
    fn zero_nonlinearity_converges_at_once() {
        let m = model(7, 16, 2);
        let (ws, we) = (weights(&m, 1.0, WeightVariant::Forward), weights(&m, 1.0, WeightVariant::ForwardEps(0.05)));
        let hum = ForwardHum::new(&m, &ws, &we, cfg()).unwrap();
        let (_, trace) = picard_forward(&hum, &y0(7), &NonlinearitySpec::zero(), &PicardConfig::default()).unwrap();
        assert_eq!(trace.iterations, 1);
        assert!(trace.converged);
        assert_eq!(trace.final_source_norm, 0.0);
        let (wb, wbe) = (weights(&m, 1.0, WeightVariant::Backward), weights(&m, 1.0, WeightVariant::BackwardEps(0.05)));
        let bh = BackwardHum::new(&m, &wb, &wbe, cfg()).unwrap();
        let (_, trace) = picard_backward(&bh, &m.leaf_fields(&y0(7)), &NonlinearitySpec::zero(), &PicardConfig::default()).unwrap();
        assert_eq!(trace.iterations, 1);
    }

    #[test]
    fn probe_factor_respects_lipschitz_bound() {
        let m = model(7, 16, 2);
        let beta = build_beta(&Geometry::default(), &m.op.space).unwrap();
        let setup = ProbeSetup { model: &m, beta: &beta, params: params(1.0), cfg: cfg(), seed: 5 };
        for (kind, nl) in [
            (ProblemKind::Forward, NonlinearitySpec { kind: crate::nonlinear::NonlinearityKind::Saturated, kappa: 0.5, kappa1: 0.0, kappa2: 0.0, table: None }),
            (ProblemKind::Backward, NonlinearitySpec { kind: crate::nonlinear::NonlinearityKind::Sinusoidal, kappa: 0.0, kappa1: 0.0, kappa2: 0.5, table: None }),
        ] {
            let rows = contraction_probe(kind, &setup, &nl, &[1.0, 2.0]).unwrap();
            assert_eq!(rows.len(), 2);
            for r in rows {
                assert!(r.factor <= r.bound * (1.0 + 1e-10), "{kind:?}: {} > {}", r.factor, r.bound);
            }
        }
        let zero = contraction_probe(ProblemKind::Forward, &setup, &NonlinearitySpec::zero(), &[1.0]).unwrap();
        assert_eq!(zero[0].factor, 0.0);
    }

    #[test]
    fn linear_forward_iteration_contracts() {
        let m = model(7, 16, 2);
        let (ws, we) = (weights(&m, 1.0, WeightVariant::Forward), weights(&m, 1.0, WeightVariant::ForwardEps(0.05)));
        let hum = ForwardHum::new(&m, &ws, &we, cfg()).unwrap();
        let nl = NonlinearitySpec::linear(0.5, 0.0, 0.0);
        let (_, trace) = picard_forward(&hum, &y0(7), &nl, &PicardConfig::default()).unwrap();
        assert!(trace.converged, "{:?}", trace.increments);
        assert!(trace.median_factor() < 1.0);
    }
}
