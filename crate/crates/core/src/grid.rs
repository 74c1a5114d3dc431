//! Grids, the discrete Ginzburg-Landau operator and L2 quadrature.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::weights::Geometry;

/// Complex values on the interior spatial nodes.
pub type ComplexField = Vec<Complex64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialGrid {
    pub left: f64,
    pub right: f64,
    pub n_interior: usize,
    pub spacing: f64,
}

impl SpatialGrid {
    pub fn new(left: f64, right: f64, n_interior: usize) -> Result<Self> {
        if n_interior < 3 {
            return Err(LabError::Config(format!(
                "n_interior must be >= 3, got {n_interior}"
            )));
        }
        if !(left < right) || !left.is_finite() || !right.is_finite() {
            return Err(LabError::Config(format!("invalid interval ({left}, {right})")));
        }
        Ok(SpatialGrid {
            left,
            right,
            n_interior,
            spacing: (right - left) / (n_interior + 1) as f64,
        })
    }

    /// Coordinate of node `j` counted from the left boundary (`j = 0`) to the
    /// right boundary (`j = n_interior + 1`).
    pub fn coord(&self, j: usize) -> f64 {
        if j == self.n_interior + 1 {
            self.right
        } else {
            self.left + j as f64 * self.spacing
        }
    }

    /// Interior node coordinates.
    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (1..=self.n_interior).map(move |j| self.coord(j))
    }

    /// Sharp nodal indicator of `G0`.
    pub fn g0_mask(&self, geometry: &Geometry) -> Vec<f64> {
        self.nodes()
            .map(|x| if geometry.in_g0(x) { 1.0 } else { 0.0 })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub horizon: f64,
    pub n_steps: usize,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if n_steps < 4 || n_steps % 4 != 0 {
            return Err(LabError::Config(format!(
                "n_steps must be a positive multiple of 4, got {n_steps}"
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(LabError::Config(format!("invalid horizon {horizon}")));
        }
        Ok(TimeGrid {
            horizon,
            n_steps,
            dt: horizon / n_steps as f64,
        })
    }

    /// `t_k`, exact at `T/4`, `T/2`, `3T/4` and `T`.
    pub fn time(&self, k: usize) -> f64 {
        self.horizon * (k as f64 / self.n_steps as f64)
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(move |k| self.time(k))
    }
}

/// Diffusion coefficient `a11(t, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum A11Profile {
    Constant { value: f64 },
    /// `base + amplitude * sin(pi x) * cos(pi t)`.
    Modulated { base: f64, amplitude: f64 },
}

impl Default for A11Profile {
    fn default() -> Self {
        A11Profile::Constant { value: 1.0 }
    }
}

impl A11Profile {
    pub fn eval(&self, t: f64, x: f64) -> f64 {
        match *self {
            A11Profile::Constant { value } => value,
            A11Profile::Modulated { base, amplitude } => {
                base + amplitude * (std::f64::consts::PI * x).sin() * (std::f64::consts::PI * t).cos()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GLCoefficients {
    pub a: f64,
    pub b: f64,
    #[serde(default)]
    pub a11: A11Profile,
    pub s0: f64,
}

impl Default for GLCoefficients {
    fn default() -> Self {
        GLCoefficients {
            a: 1.0,
            b: 0.5,
            a11: A11Profile::default(),
            s0: 0.5,
        }
    }
}

impl GLCoefficients {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(LabError::Config(format!("a must be positive, got {}", self.a)));
        }
        if !self.b.is_finite() {
            return Err(LabError::Config("b must be finite".into()));
        }
        if !(self.s0 > 0.0) {
            return Err(LabError::Config(format!("s0 must be positive, got {}", self.s0)));
        }
        Ok(())
    }

    /// Midpoint-averaged `a11` on the `n_interior + 1` cell faces at time `t`.
    pub fn face_values(&self, grid: &SpatialGrid, t: f64) -> Result<Vec<f64>> {
        let n = grid.n_interior;
        let mut nodal = Vec::with_capacity(n + 2);
        for j in 0..n + 2 {
            let x = grid.coord(j);
            let v = self.a11.eval(t, x);
            if !(v >= self.s0) {
                return Err(LabError::Ellipticity {
                    value: v,
                    s0: self.s0,
                    t,
                    x,
                });
            }
            nodal.push(v);
        }
        Ok(nodal.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorSign {
    /// `+(a + ib) D`.
    Forward,
    /// `-(a - ib) D`.
    Backward,
}

impl OperatorSign {
    /// Complex factor multiplying `D`.
    pub fn factor(self, coeff: &GLCoefficients) -> Complex64 {
        match self {
            OperatorSign::Forward => Complex64::new(coeff.a, coeff.b),
            OperatorSign::Backward => -Complex64::new(coeff.a, -coeff.b),
        }
    }
}

/// `D(y)` for given face coefficients with zero Dirichlet ghosts.
pub fn apply_flux_laplacian(y: &[Complex64], faces: &[f64], h: f64) -> ComplexField {
    let n = y.len();
    let inv_h2 = 1.0 / (h * h);
    (0..n)
        .map(|i| {
            let left = if i == 0 { Complex64::new(0.0, 0.0) } else { y[i - 1] };
            let right = if i + 1 == n { Complex64::new(0.0, 0.0) } else { y[i + 1] };
            (faces[i + 1] * (right - y[i]) - faces[i] * (y[i] - left)) * inv_h2
        })
        .collect()
}

/// `+(a+ib) D(y)` or `-(a-ib) D(y)` at time `t`.
pub fn apply_gl_operator(
    field: &[Complex64],
    coeff: &GLCoefficients,
    grid: &SpatialGrid,
    t: f64,
    sign: OperatorSign,
) -> Result<ComplexField> {
    check_len(field.len(), grid.n_interior)?;
    let faces = coeff.face_values(grid, t)?;
    let c = sign.factor(coeff);
    Ok(apply_flux_laplacian(field, &faces, grid.spacing)
        .into_iter()
        .map(|v| c * v)
        .collect())
}

/// Solves `(I - dt c D) u = rhs` by complex Thomas elimination.
///
/// The real part of `I - dt c D` is positive definite whenever `Re c > 0`, so
/// every leading minor is nonsingular and elimination without pivoting is safe.
pub fn solve_shifted(
    rhs: &[Complex64],
    faces: &[f64],
    h: f64,
    dt: f64,
    c: Complex64,
) -> Result<ComplexField> {
    let n = rhs.len();
    let s = dt * c / (h * h);
    let mut cprime = vec![Complex64::new(0.0, 0.0); n];
    let mut u = vec![Complex64::new(0.0, 0.0); n];
    let mut prev_c = Complex64::new(0.0, 0.0);
    let mut prev_u = Complex64::new(0.0, 0.0);
    for i in 0..n {
        let diag = 1.0 + s * (faces[i] + faces[i + 1]);
        let lower = if i == 0 { Complex64::new(0.0, 0.0) } else { -s * faces[i] };
        let upper = -s * faces[i + 1];
        let denom = diag - lower * prev_c;
        if denom.norm() < 1e-300 || !denom.is_finite() {
            return Err(LabError::Internal(format!(
                "singular implicit step at row {i}"
            )));
        }
        prev_c = upper / denom;
        prev_u = (rhs[i] - lower * prev_u) / denom;
        cprime[i] = prev_c;
        u[i] = prev_u;
    }
    for i in (0..n.saturating_sub(1)).rev() {
        let next = u[i + 1];
        u[i] -= cprime[i] * next;
    }
    Ok(u)
}

/// One implicit step in the natural time direction of each equation:
/// forward solves `(I - dt (a+ib) D) u = rhs` (advancing in `t`), backward
/// solves `(I - dt (a-ib) D) u = rhs` (marching from `t + dt` to `t`). Both are
/// unconditionally stable and are adjoint to each other.
pub fn implicit_step_solve(
    rhs: &[Complex64],
    coeff: &GLCoefficients,
    grid: &SpatialGrid,
    t: f64,
    dt: f64,
    sign: OperatorSign,
) -> Result<ComplexField> {
    check_len(rhs.len(), grid.n_interior)?;
    if !(dt > 0.0) {
        return Err(LabError::Parameter(format!("dt must be positive, got {dt}")));
    }
    let faces = coeff.face_values(grid, t)?;
    let c = match sign {
        OperatorSign::Forward => Complex64::new(coeff.a, coeff.b),
        OperatorSign::Backward => Complex64::new(coeff.a, -coeff.b),
    };
    solve_shifted(rhs, &faces, grid.spacing, dt, c)
}

/// Face coefficients cached on every time node, with ellipticity checked once.
#[derive(Debug, Clone)]
pub struct GLOperator {
    pub coeff: GLCoefficients,
    pub space: SpatialGrid,
    pub time: TimeGrid,
    faces: Vec<Vec<f64>>,
}

impl GLOperator {
    pub fn new(coeff: &GLCoefficients, space: &SpatialGrid, time: &TimeGrid) -> Result<Self> {
        coeff.validate()?;
        let faces = time
            .times()
            .map(|t| coeff.face_values(space, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(GLOperator {
            coeff: coeff.clone(),
            space: *space,
            time: *time,
            faces,
        })
    }

    pub fn nx(&self) -> usize {
        self.space.n_interior
    }

    pub fn dt(&self) -> f64 {
        self.time.dt
    }

    /// `u = (I - dt (a+ib) D(t_k))^{-1} rhs`.
    pub fn forward_solve(&self, k: usize, rhs: &[Complex64]) -> Result<ComplexField> {
        solve_shifted(
            rhs,
            &self.faces[k],
            self.space.spacing,
            self.time.dt,
            Complex64::new(self.coeff.a, self.coeff.b),
        )
    }

    /// Adjoint of [`GLOperator::forward_solve`]: `(I - dt (a-ib) D(t_k))^{-1} rhs`.
    pub fn adjoint_solve(&self, k: usize, rhs: &[Complex64]) -> Result<ComplexField> {
        solve_shifted(
            rhs,
            &self.faces[k],
            self.space.spacing,
            self.time.dt,
            Complex64::new(self.coeff.a, -self.coeff.b),
        )
    }

    pub fn apply(&self, k: usize, y: &[Complex64], sign: OperatorSign) -> ComplexField {
        let c = sign.factor(&self.coeff);
        apply_flux_laplacian(y, &self.faces[k], self.space.spacing)
            .into_iter()
            .map(|v| c * v)
            .collect()
    }
}

fn check_len(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(LabError::Dimension(format!(
            "field has {got} nodes, grid has {want}"
        )));
    }
    Ok(())
}

/// `h * sum f_i conj(g_i)`.
pub fn l2_inner(f: &[Complex64], g: &[Complex64], grid: &SpatialGrid) -> Result<Complex64> {
    check_len(f.len(), grid.n_interior)?;
    check_len(g.len(), grid.n_interior)?;
    Ok(grid.spacing * f.iter().zip(g).map(|(a, b)| a * b.conj()).sum::<Complex64>())
}

pub fn l2_norm_sq(f: &[Complex64], h: f64) -> f64 {
    h * f.iter().map(|v| v.norm_sqr()).sum::<f64>()
}

/// Centered differences, one-sided at the first and last interior node.
pub fn discrete_gradient(y: &[Complex64], h: f64) -> ComplexField {
    let n = y.len();
    (0..n)
        .map(|i| {
            if i == 0 {
                (y[1] - y[0]) / h
            } else if i + 1 == n {
                (y[n - 1] - y[n - 2]) / h
            } else {
                (y[i + 1] - y[i - 1]) / (2.0 * h)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn sine(grid: &SpatialGrid, k: f64) -> ComplexField {
        grid.nodes().map(|x| c((k * PI * x).sin(), 0.0)).collect()
    }

    fn unit_coeff(b: f64) -> GLCoefficients {
        GLCoefficients {
            a: 1.0,
            b,
            a11: A11Profile::Constant { value: 1.0 },
            s0: 0.5,
        }
    }

    fn pseudo_random(n: usize, seed: u64) -> ComplexField {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    fn laplacian_error(n: usize) -> f64 {
        let grid = SpatialGrid::new(0.0, 1.0, n).unwrap();
        let y = sine(&grid, 1.0);
        let coeff = GLCoefficients { b: 0.0, ..unit_coeff(0.0) };
        let d = apply_gl_operator(&y, &coeff, &grid, 0.0, OperatorSign::Forward).unwrap();
        grid.nodes()
            .zip(&d)
            .map(|(x, v)| (v.re + PI * PI * (PI * x).sin()).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn laplacian_of_sine_is_second_order() {
        let e1 = laplacian_error(15);
        let e2 = laplacian_error(31);
        let e3 = laplacian_error(63);
        assert!(e1 < 0.05);
        assert!(e1 / e2 >= 3.8 && e2 / e3 >= 3.8, "{e1} {e2} {e3}");
    }

    #[test]
    fn zero_maps_to_zero() {
        let grid = SpatialGrid::new(0.0, 1.0, 7).unwrap();
        let z = vec![c(0.0, 0.0); 7];
        let coeff = unit_coeff(0.3);
        assert!(apply_gl_operator(&z, &coeff, &grid, 0.0, OperatorSign::Forward)
            .unwrap()
            .iter()
            .all(|v| *v == c(0.0, 0.0)));
        assert!(implicit_step_solve(&z, &coeff, &grid, 0.0, 0.1, OperatorSign::Forward)
            .unwrap()
            .iter()
            .all(|v| *v == c(0.0, 0.0)));
    }

    #[test]
    fn conjugate_symmetry_and_adjoint_relation() {
        let grid = SpatialGrid::new(0.0, 1.0, 9).unwrap();
        let coeff = GLCoefficients {
            a: 0.7,
            b: 1.3,
            a11: A11Profile::Modulated { base: 1.0, amplitude: 0.3 },
            s0: 0.5,
        };
        let flipped = GLCoefficients { b: -coeff.b, ..coeff.clone() };
        let y = pseudo_random(9, 1);
        let ybar: ComplexField = y.iter().map(|v| v.conj()).collect();
        let lhs = apply_gl_operator(&ybar, &coeff, &grid, 0.2, OperatorSign::Forward).unwrap();
        let rhs = apply_gl_operator(&y, &flipped, &grid, 0.2, OperatorSign::Forward).unwrap();
        for (l, r) in lhs.iter().zip(&rhs) {
            assert!((l - r.conj()).norm() < 1e-12);
        }
        // <L_f u, v> = -<u, L_b v>
        let u = pseudo_random(9, 2);
        let v = pseudo_random(9, 3);
        let lf = apply_gl_operator(&u, &coeff, &grid, 0.2, OperatorSign::Forward).unwrap();
        let lb = apply_gl_operator(&v, &coeff, &grid, 0.2, OperatorSign::Backward).unwrap();
        let a = l2_inner(&lf, &v, &grid).unwrap();
        let b = l2_inner(&u, &lb, &grid).unwrap();
        assert!((a + b).norm() < 1e-10 * a.norm().max(1.0));
    }

    #[test]
    fn dissipativity_of_forward_quadratic_form() {
        let grid = SpatialGrid::new(0.0, 1.0, 17).unwrap();
        let coeff = GLCoefficients {
            a: 0.8,
            b: -2.0,
            a11: A11Profile::Modulated { base: 1.0, amplitude: 0.4 },
            s0: 0.55,
        };
        for seed in 0..20 {
            let y = pseudo_random(17, seed);
            let ly = apply_gl_operator(&y, &coeff, &grid, 0.1, OperatorSign::Forward).unwrap();
            let q = l2_inner(&ly, &y, &grid).unwrap().re;
            // forward differences including both boundary faces
            let mut grad_sq = 0.0;
            let h = grid.spacing;
            for j in 0..=17 {
                let l = if j == 0 { c(0.0, 0.0) } else { y[j - 1] };
                let r = if j == 17 { c(0.0, 0.0) } else { y[j] };
                grad_sq += h * ((r - l) / h).norm_sqr();
            }
            assert!(q <= -coeff.a * coeff.s0 * grad_sq + 1e-10, "{q} vs {grad_sq}");
        }
    }

    #[test]
    fn implicit_step_eigen_identity() {
        let grid = SpatialGrid::new(0.0, 1.0, 15).unwrap();
        let coeff = GLCoefficients { a: 0.9, ..unit_coeff(0.0) };
        let h = grid.spacing;
        let dt = 0.01;
        let lam = 4.0 * (PI * h / 2.0).sin().powi(2) / (h * h);
        let rhs = sine(&grid, 1.0);
        for sign in [OperatorSign::Forward, OperatorSign::Backward] {
            let u = implicit_step_solve(&rhs, &coeff, &grid, 0.0, dt, sign).unwrap();
            for (ui, ri) in u.iter().zip(&rhs) {
                assert!((ui - ri / (1.0 + dt * 0.9 * lam)).norm() < 1e-13);
            }
        }
    }

    #[test]
    fn implicit_step_small_dt_bound() {
        let grid = SpatialGrid::new(0.0, 1.0, 11).unwrap();
        let coeff = unit_coeff(0.7);
        let rhs = pseudo_random(11, 5);
        let lr = apply_gl_operator(&rhs, &coeff, &grid, 0.0, OperatorSign::Forward).unwrap();
        let norm_lr = l2_norm_sq(&lr, grid.spacing).sqrt();
        for dt in [1e-4, 1e-5, 1e-6] {
            let u = implicit_step_solve(&rhs, &coeff, &grid, 0.0, dt, OperatorSign::Forward)
                .unwrap();
            let diff: ComplexField = u.iter().zip(&rhs).map(|(a, b)| a - b).collect();
            assert!(l2_norm_sq(&diff, grid.spacing).sqrt() <= 1.01 * dt * norm_lr);
        }
    }

    #[test]
    fn implicit_step_matches_dense_residual() {
        let grid = SpatialGrid::new(0.0, 1.0, 13).unwrap();
        let coeff = GLCoefficients {
            a: 0.5,
            b: 3.0,
            a11: A11Profile::Modulated { base: 1.2, amplitude: 0.5 },
            s0: 0.6,
        };
        let rhs = pseudo_random(13, 9);
        let dt = 0.05;
        let u = implicit_step_solve(&rhs, &coeff, &grid, 0.3, dt, OperatorSign::Forward).unwrap();
        let lu = apply_gl_operator(&u, &coeff, &grid, 0.3, OperatorSign::Forward).unwrap();
        for i in 0..13 {
            assert!((u[i] - dt * lu[i] - rhs[i]).norm() < 1e-12);
        }
        let w = implicit_step_solve(&rhs, &coeff, &grid, 0.3, dt, OperatorSign::Backward).unwrap();
        let lw = apply_gl_operator(&w, &coeff, &grid, 0.3, OperatorSign::Backward).unwrap();
        for i in 0..13 {
            assert!((w[i] + dt * lw[i] - rhs[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn l2_inner_examples() {
        let grid = SpatialGrid::new(0.0, 1.0, 9).unwrap();
        let ones = vec![c(1.0, 0.0); 9];
        let v = l2_inner(&ones, &ones, &grid).unwrap();
        assert!((v.re - 9.0 * grid.spacing).abs() < 1e-15 && v.im == 0.0);
        let s1 = sine(&grid, 1.0);
        let s2 = sine(&grid, 2.0);
        assert!(l2_inner(&s1, &s2, &grid).unwrap().norm() <= 1e-12);
        let f = pseudo_random(9, 11);
        let g = pseudo_random(9, 12);
        let fg = l2_inner(&f, &g, &grid).unwrap();
        let gf = l2_inner(&g, &f, &grid).unwrap();
        assert!((fg - gf.conj()).norm() < 1e-15);
        assert!(matches!(
            l2_inner(&f[..8], &g, &grid),
            Err(LabError::Dimension(_))
        ));
    }

    #[test]
    fn ellipticity_violation_is_reported() {
        let grid = SpatialGrid::new(0.0, 1.0, 5).unwrap();
        let coeff = GLCoefficients {
            a11: A11Profile::Constant { value: 0.1 },
            ..unit_coeff(0.0)
        };
        let y = vec![c(1.0, 0.0); 5];
        assert!(matches!(
            apply_gl_operator(&y, &coeff, &grid, 0.0, OperatorSign::Forward),
            Err(LabError::Ellipticity { .. })
        ));
    }

    #[test]
    fn time_nodes_hit_quarter_points_exactly() {
        for n in [4, 12, 20, 64, 100] {
            let tg = TimeGrid::new(0.37, n).unwrap();
            assert_eq!(tg.time(n / 4), 0.37 / 4.0);
            assert_eq!(tg.time(n / 2), 0.37 / 2.0);
            assert_eq!(tg.time(3 * n / 4), 0.75 * 0.37);
            assert_eq!(tg.time(n), 0.37);
        }
        assert!(TimeGrid::new(0.5, 6).is_err());
        assert!(SpatialGrid::new(0.0, 1.0, 2).is_err());
    }

    proptest::proptest! {
        #[test]
        fn implicit_step_non_expansive_without_dispersion(
            seed in 0u64..1000,
            dt in 1e-4f64..1.0,
        ) {
            let grid = SpatialGrid::new(0.0, 1.0, 12).unwrap();
            let coeff = GLCoefficients {
                a: 1.0,
                b: 0.0,
                a11: A11Profile::Modulated { base: 1.0, amplitude: 0.5 },
                s0: 0.5,
            };
            let rhs = pseudo_random(12, seed);
            let u = implicit_step_solve(&rhs, &coeff, &grid, 0.25, dt, OperatorSign::Forward).unwrap();
            proptest::prop_assert!(l2_norm_sq(&u, grid.spacing) <= l2_norm_sq(&rhs, grid.spacing) * (1.0 + 1e-14));
        }
    }
}
