//! Both sides of the three Carleman inequalities, evaluated on discrete
//! solutions, and empirical sweeps of their ratio over `(lambda, mu)`.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grid::{ComplexField, TimeGrid};
use crate::hum::safe_ratio;
use crate::nonlinear::NonlinearitySpec;
use crate::norms::{weighted_seminorm, Quadrature};
use crate::solvers::{solve_backward_bsde, solve_forward_random, BackwardData, Model};
use crate::tree::{build_tree, AdaptedField, Lattice, Layout};
use crate::weights::{LogWeight, WeightSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimate {
    /// Backward stochastic equation, forward weights.
    Backward,
    /// Deterministic forward equation, mirrored weights.
    Deterministic,
    /// Random forward equation on the tree, mirrored weights.
    Random,
}

impl Estimate {
    pub fn name(&self) -> &'static str {
        match self {
            Estimate::Backward => "backward",
            Estimate::Deterministic => "deterministic",
            Estimate::Random => "random",
        }
    }

    pub fn uses_mirrored_weights(&self) -> bool {
        !matches!(self, Estimate::Backward)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CarlemanReport {
    pub lhs_terms: Vec<(String, f64)>,
    pub rhs_terms: Vec<(String, f64)>,
    pub lhs_total: f64,
    pub rhs_total: f64,
    pub ratio: f64,
    pub lambda: f64,
    pub mu: f64,
    pub m: u32,
    pub sample: String,
}

impl CarlemanReport {
    fn new(ws: &WeightSet, lhs_terms: Vec<(String, f64)>, rhs_terms: Vec<(String, f64)>) -> Self {
        let lhs_total = lhs_terms.iter().map(|t| t.1).sum();
        let rhs_total = rhs_terms.iter().map(|t| t.1).sum();
        CarlemanReport {
            lhs_terms,
            rhs_terms,
            lhs_total,
            rhs_total,
            ratio: safe_ratio(lhs_total, rhs_total),
            lambda: ws.params.lambda,
            mu: ws.params.mu,
            m: ws.params.m,
            sample: String::new(),
        }
    }

    pub fn with_sample(mut self, sample: impl Into<String>) -> Self {
        self.sample = sample.into();
        self
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.lhs_terms.iter().chain(&self.rhs_terms).find(|t| t.0 == name).map(|t| t.1)
    }
}

/// `l^2 m^3 e^{2 mu (offset + 1)} theta^2` on a single time slice.
fn endpoint_weight(ws: &WeightSet) -> LogWeight {
    let p = &ws.params;
    LogWeight::new(2.0, 0.0, p.log_poly(2.0, 3.0) + 2.0 * p.mu * (p.offset() + 1.0))
}

fn gradient_weight(ws: &WeightSet) -> LogWeight {
    LogWeight::new(2.0, 1.0, ws.params.log_poly(1.0, 2.0))
}

fn cubic_weight(ws: &WeightSet) -> LogWeight {
    LogWeight::new(2.0, 3.0, ws.params.log_poly(3.0, 4.0))
}

fn check_grid(field: &AdaptedField, ws: &WeightSet, layout: Layout, what: &str) -> Result<()> {
    if field.layout != layout || field.nx != ws.nx() || field.lattice.n_steps() + 1 != ws.nt() {
        return Err(LabError::Dimension(format!("{what} does not match the weight grid")));
    }
    Ok(())
}

/// Shared LHS/RHS for solutions on the state layout; `slice` is the time index
/// of the endpoint term.
fn state_terms(
    q: &AdaptedField,
    ws: &WeightSet,
    mask: &[f64],
    slice: usize,
) -> Result<(Vec<(String, f64)>, (String, f64))> {
    let n = q.lattice.n_steps();
    let all = Quadrature::times(0, n - 1);
    let lhs = vec![
        ("endpoint".to_string(), weighted_seminorm(q, ws, endpoint_weight(ws), &Quadrature::slice(slice))?),
        ("gradient".to_string(), weighted_seminorm(q, ws, gradient_weight(ws), &all.of_gradient())?),
        ("state".to_string(), weighted_seminorm(q, ws, cubic_weight(ws), &all)?),
    ];
    let local = weighted_seminorm(q, ws, cubic_weight(ws), &all.masked(mask))?;
    Ok((lhs, ("localized".to_string(), local)))
}

/// Backward estimate for `(z, Z)` driven by `Xi` (state layout, used at times
/// `1..=N`), with forward weights.
pub fn evaluate_backward_estimate(
    z: &AdaptedField,
    big_z: &AdaptedField,
    xi: &AdaptedField,
    ws: &WeightSet,
    mask: &[f64],
) -> Result<CarlemanReport> {
    if ws.variant.is_mirrored() {
        return Err(LabError::Config("backward estimate needs forward weights".into()));
    }
    check_grid(z, ws, Layout::State, "z")?;
    check_grid(big_z, ws, Layout::Step, "Z")?;
    check_grid(xi, ws, Layout::State, "Xi")?;
    let n = z.lattice.n_steps();
    let (lhs, local) = state_terms(z, ws, mask, 0)?;
    let source = weighted_seminorm(xi, ws, LogWeight::new(2.0, 0.0, 0.0), &Quadrature::times(1, n))?;
    let zw = LogWeight::new(2.0, 3.0, ws.params.log_poly(2.0, 2.0));
    let mart = weighted_seminorm(big_z, ws, zw, &Quadrature::times(0, n - 1))?;
    Ok(CarlemanReport::new(
        ws,
        lhs,
        vec![local, ("source".into(), source), ("martingale".into(), mart)],
    ))
}

/// Random-equation estimate for `q` driven by `varpi1` (state layout, used at
/// times `0..N`), with mirrored weights. The endpoint term reads `|q(T)|^2`.
pub fn evaluate_random_estimate(
    q: &AdaptedField,
    varpi1: &AdaptedField,
    ws: &WeightSet,
    mask: &[f64],
) -> Result<CarlemanReport> {
    if !ws.variant.is_mirrored() {
        return Err(LabError::Config("forward-equation estimates need mirrored weights".into()));
    }
    check_grid(q, ws, Layout::State, "q")?;
    check_grid(varpi1, ws, Layout::State, "varpi")?;
    let n = q.lattice.n_steps();
    let (lhs, local) = state_terms(q, ws, mask, n)?;
    let source = weighted_seminorm(varpi1, ws, LogWeight::new(2.0, 0.0, 0.0), &Quadrature::times(0, n - 1))?;
    Ok(CarlemanReport::new(ws, lhs, vec![local, ("source".into(), source)]))
}

/// Deterministic estimate: `q` and `varpi` are indexed by time node `0..=N`.
/// Evaluated as the random estimate on a single-scenario tree.
pub fn evaluate_deterministic_estimate(
    q: &[ComplexField],
    varpi: &[ComplexField],
    ws: &WeightSet,
    mask: &[f64],
) -> Result<CarlemanReport> {
    let n = ws.nt() - 1;
    if q.len() != n + 1 || varpi.len() != n + 1 {
        return Err(LabError::Dimension(format!(
            "expected {} time slices, got {} and {}",
            n + 1,
            q.len(),
            varpi.len()
        )));
    }
    let horizon = ws.params.horizon;
    let lattice = Lattice::new(build_tree(0, horizon)?, TimeGrid::new(horizon, n)?)?;
    let wrap = |slices: &[ComplexField]| -> Result<AdaptedField> {
        let mut f = AdaptedField::zeros(&lattice, Layout::State, ws.nx());
        for (k, s) in slices.iter().enumerate() {
            if s.len() != ws.nx() {
                return Err(LabError::Dimension("slice length differs from the grid".into()));
            }
            f.set(0, k, s);
        }
        Ok(f)
    };
    evaluate_random_estimate(&wrap(q)?, &wrap(varpi)?, ws, mask)
}

/// One row of a sweep table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub mu: f64,
    pub m: u32,
    pub n_samples: usize,
    pub ratio_median: f64,
    pub ratio_max: f64,
    pub flagged: bool,
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs `sample(lambda, mu, rep)` `repetitions` times per cell. Rows come in
/// `mu`-major, `lambda`-minor order; a row is flagged when its max ratio exceeds
/// twice that of the preceding `lambda` at the same `mu`.
pub fn sweep_parameters<F>(
    mut sample: F,
    lambdas: &[f64],
    mus: &[f64],
    m: u32,
    repetitions: usize,
) -> Result<Vec<SweepRow>>
where
    F: FnMut(f64, f64, usize) -> Result<CarlemanReport>,
{
    if lambdas.is_empty() || mus.is_empty() {
        return Err(LabError::Config("sweep lists must be non-empty".into()));
    }
    let mut rows = Vec::with_capacity(lambdas.len() * mus.len());
    for &mu in mus {
        let mut prev_max: Option<f64> = None;
        for &lambda in lambdas {
            let mut ratios = Vec::with_capacity(repetitions);
            for rep in 0..repetitions {
                let r = sample(lambda, mu, rep)?;
                if !r.ratio.is_finite() {
                    return Err(LabError::Saturation {
                        log_weight: f64::INFINITY,
                        context: format!("non-finite Carleman ratio at lambda {lambda}, mu {mu}"),
                    });
                }
                ratios.push(r.ratio);
            }
            let ratio_max = ratios.iter().copied().fold(0.0, f64::max);
            let flagged = prev_max.is_some_and(|p| ratio_max > 2.0 * p);
            prev_max = Some(ratio_max);
            rows.push(SweepRow {
                lambda,
                mu,
                m,
                n_samples: repetitions,
                ratio_median: median(&mut ratios),
                ratio_max,
                flagged,
            });
        }
    }
    Ok(rows)
}

/// Deterministic seed for sample `rep` of a sweep cell.
pub fn sample_seed(base: u64, lambda: f64, mu: f64, rep: usize) -> u64 {
    base ^ lambda.to_bits().rotate_left(7) ^ mu.to_bits().rotate_left(29) ^ (rep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn unit_random(rng: &mut ChaCha8Rng, nx: usize, h: f64) -> ComplexField {
    let v: ComplexField = (0..nx)
        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    normalize(v, h)
}

fn heat_mode(nx: usize, mode: usize, h: f64) -> ComplexField {
    let s = 1.0 / (nx + 1) as f64;
    let v = (1..=nx)
        .map(|j| Complex64::new((mode as f64 * std::f64::consts::PI * j as f64 * s).sin(), 0.0))
        .collect();
    normalize(v, h)
}

fn normalize(v: ComplexField, h: f64) -> ComplexField {
    let n = crate::grid::l2_norm_sq(&v, h).sqrt();
    if n == 0.0 {
        v
    } else {
        v.into_iter().map(|z| z / n).collect()
    }
}

/// Each slot value nonzero with probability 1/4.
fn sparse_source(rng: &mut ChaCha8Rng, f: &mut AdaptedField) {
    for v in f.data.iter_mut() {
        if rng.gen_bool(0.25) {
            *v = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
    }
}

/// Sample families, cycled by repetition index: unit random data, a sparse
/// source with zero data, a heat mode with a sparse source.
fn sample_kind(rep: usize) -> usize {
    rep % 3
}

/// Draws data for `estimate`, solves the matching equation on `model` and
/// evaluates the estimate with `ws`.
pub fn sample_estimate(model: &Model, ws: &WeightSet, estimate: Estimate, seed: u64, rep: usize) -> Result<CarlemanReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nx = model.nx();
    let h = model.h();
    let kind = sample_kind(rep);
    let data = |rng: &mut ChaCha8Rng| match kind {
        0 => unit_random(rng, nx, h),
        1 => vec![Complex64::new(0.0, 0.0); nx],
        _ => heat_mode(nx, 1 + rep / 3 % nx, h),
    };
    let label = ["unit-data", "sparse-source", "heat-mode"][kind];
    let report = match estimate {
        Estimate::Backward => {
            let terminal: Vec<ComplexField> = (0..model.tree().n_leaves()).map(|_| data(&mut rng)).collect();
            let mut xi = model.zeros(Layout::State);
            if kind > 0 {
                sparse_source(&mut rng, &mut xi);
            }
            let (z, big_z) = solve_backward_bsde(
                model,
                &BackwardData {
                    terminal,
                    source: Some(xi.clone()),
                    h: None,
                    nonlinearity: NonlinearitySpec::zero(),
                },
            )?;
            evaluate_backward_estimate(&z, &big_z, &xi, ws, &model.mask)?
        }
        Estimate::Deterministic | Estimate::Random => {
            if estimate == Estimate::Deterministic && model.tree().depth != 0 {
                return Err(LabError::Config("deterministic samples need a depth-0 tree".into()));
            }
            let q0 = data(&mut rng);
            let mut src = model.zeros(Layout::State);
            if kind > 0 {
                sparse_source(&mut rng, &mut src);
            }
            let q = solve_forward_random(model, &q0, Some(&src))?;
            if estimate == Estimate::Deterministic {
                let n = model.n_steps();
                let slices = |f: &AdaptedField| (0..=n).map(|k| f.get(0, k).to_vec()).collect::<Vec<_>>();
                evaluate_deterministic_estimate(&slices(&q), &slices(&src), ws, &model.mask)?
            } else {
                evaluate_random_estimate(&q, &src, ws, &model.mask)?
            }
        }
    };
    Ok(report.with_sample(label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{A11Profile, GLCoefficients, SpatialGrid};
    use crate::weights::{build_beta, build_weight_set, Geometry, WeightParams, WeightVariant};

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

    fn model(depth: usize) -> Model {
        let space = SpatialGrid::new(0.0, 1.0, 15).unwrap();
        let time = TimeGrid::new(0.5, 16).unwrap();
        let coeff = GLCoefficients {
            a: 1.0,
            b: 0.5,
            a11: A11Profile::Constant { value: 1.0 },
            s0: 0.5,
        };
        Model::new(&space, &time, &build_tree(depth, 0.5).unwrap(), &coeff, &Geometry::default()).unwrap()
    }

    fn weights(m: &Model, lambda: f64, variant: WeightVariant) -> WeightSet {
        let g = Geometry::default();
        let beta = build_beta(&g, &m.op.space).unwrap();
        build_weight_set(&beta, &params(lambda), &m.op.space, &m.op.time, variant).unwrap()
    }

    #[test]
    fn zero_data_gives_zero_reports() {
        let m = model(2);
        let ws = weights(&m, 4.0, WeightVariant::Forward);
        let z = m.zeros(Layout::State);
        let r = evaluate_backward_estimate(&z, &m.zeros(Layout::Step), &z, &ws, &m.mask).unwrap();
        assert_eq!((r.lhs_total, r.rhs_total, r.ratio), (0.0, 0.0, 0.0));
        let wb = weights(&m, 4.0, WeightVariant::Backward);
        let r = evaluate_random_estimate(&z, &z, &wb, &m.mask).unwrap();
        assert_eq!(r.ratio, 0.0);
        let slices = vec![vec![Complex64::new(0.0, 0.0); 15]; 17];
        assert_eq!(evaluate_deterministic_estimate(&slices, &slices, &wb, &m.mask).unwrap().ratio, 0.0);
    }

    #[test]
    fn reports_are_homogeneous_of_degree_two() {
        let m = model(2);
        for est in [Estimate::Backward, Estimate::Random] {
            let ws = weights(&m, 4.0, if est == Estimate::Backward { WeightVariant::Forward } else { WeightVariant::Backward });
            let base = sample_estimate(&m, &ws, est, 3, 2).unwrap();
            // scaling all data by c scales the linear solution by c
            let c = 3.0;
            let scaled = match est {
                Estimate::Backward => {
                    let mut r2 = ChaCha8Rng::seed_from_u64(3);
                    let terminal: Vec<ComplexField> = (0..m.tree().n_leaves())
                        .map(|_| heat_mode(15, 1, m.h()).into_iter().map(|v| v * c).collect())
                        .collect();
                    let mut xi = m.zeros(Layout::State);
                    sparse_source(&mut r2, &mut xi);
                    xi.scale(c);
                    let (z, zz) = solve_backward_bsde(
                        &m,
                        &BackwardData { terminal, source: Some(xi.clone()), h: None, nonlinearity: NonlinearitySpec::zero() },
                    )
                    .unwrap();
                    evaluate_backward_estimate(&z, &zz, &xi, &ws, &m.mask).unwrap()
                }
                _ => {
                    let mut r2 = ChaCha8Rng::seed_from_u64(3);
                    let q0: ComplexField = heat_mode(15, 1, m.h()).into_iter().map(|v| v * c).collect();
                    let mut src = m.zeros(Layout::State);
                    sparse_source(&mut r2, &mut src);
                    src.scale(c);
                    let q = solve_forward_random(&m, &q0, Some(&src)).unwrap();
                    evaluate_random_estimate(&q, &src, &ws, &m.mask).unwrap()
                }
            };
            assert!((scaled.lhs_total - c * c * base.lhs_total).abs() <= 1e-12 * scaled.lhs_total);
            assert!((scaled.rhs_total - c * c * base.rhs_total).abs() <= 1e-12 * scaled.rhs_total);
            assert!((scaled.ratio - base.ratio).abs() <= 1e-12 * base.ratio);
        }
    }

    #[test]
    fn degenerate_tree_random_matches_deterministic() {
        let m = model(0);
        let wb = weights(&m, 4.0, WeightVariant::Backward);
        for rep in 0..3 {
            let a = sample_estimate(&m, &wb, Estimate::Random, 9, rep).unwrap();
            let b = sample_estimate(&m, &wb, Estimate::Deterministic, 9, rep).unwrap();
            assert_eq!(a.lhs_total, b.lhs_total);
            assert_eq!(a.rhs_total, b.rhs_total);
        }
    }

    #[test]
    fn sweep_shape_and_zero_cell() {
        let rows = sweep_parameters(
            |l, mu, _| {
                let m = model(1);
                let ws = weights(&m, l, WeightVariant::Forward);
                let z = m.zeros(Layout::State);
                let _ = mu;
                evaluate_backward_estimate(&z, &m.zeros(Layout::Step), &z, &ws, &m.mask)
            },
            &[4.0, 8.0],
            &[1.0],
            1,
            3,
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.ratio_max == 0.0 && !r.flagged));
    }

    #[test]
    fn wrong_variant_rejected() {
        let m = model(1);
        let wb = weights(&m, 4.0, WeightVariant::Backward);
        let z = m.zeros(Layout::State);
        assert!(evaluate_backward_estimate(&z, &m.zeros(Layout::Step), &z, &wb, &m.mask).is_err());
    }
}
