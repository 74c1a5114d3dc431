//! Weighted space-time quadrature of adapted fields.

use crate::error::{LabError, Result};
use crate::grid::discrete_gradient;
use crate::tree::AdaptedField;
use crate::weights::{LogWeight, WeightSet, LOG_OVERFLOW};

/// Which slots of a field enter a quadrature and where its weight is sampled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature<'a> {
    /// Inclusive range of time indices.
    pub k_min: usize,
    pub k_max: usize,
    /// Weight evaluated at time index `k + weight_shift`.
    pub weight_shift: usize,
    /// Optional spatial indicator restricting the integral.
    pub mask: Option<&'a [f64]>,
    /// Integrate `|grad f|^2` instead of `|f|^2`.
    pub gradient: bool,
    /// Multiply each slot by `dt` (space-time integral) or not (a single time
    /// slice).
    pub time_integral: bool,
}

impl<'a> Quadrature<'a> {
    pub fn times(k_min: usize, k_max: usize) -> Self {
        Quadrature {
            k_min,
            k_max,
            weight_shift: 0,
            mask: None,
            gradient: false,
            time_integral: true,
        }
    }

    /// A single time slice, without the `dt` factor.
    pub fn slice(k: usize) -> Self {
        Quadrature {
            time_integral: false,
            ..Self::times(k, k)
        }
    }

    pub fn shifted(mut self, shift: usize) -> Self {
        self.weight_shift = shift;
        self
    }

    pub fn masked(mut self, mask: &'a [f64]) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn of_gradient(mut self) -> Self {
        self.gradient = true;
        self
    }
}

/// `E sum_k dt h sum_x w(t_k, x) |f|^2` with `w = exp(c) theta^p xi^q`. Terms
/// are `exp(log w) |f|^2` when the weight is representable, which keeps the
/// norm exactly homogeneous, and `exp(log w + 2 log|f|)` otherwise.
///
/// Slots where the weight is zero (`log w = -inf`) contribute nothing; an
/// infinite weight on a nonzero value, or any term whose exponent exceeds the
/// overflow threshold, is a saturation error.
pub fn weighted_seminorm(
    field: &AdaptedField,
    ws: &WeightSet,
    weight: LogWeight,
    quad: &Quadrature,
) -> Result<f64> {
    if field.nx != ws.nx() || field.lattice.n_steps() + 1 != ws.nt() {
        return Err(LabError::Dimension(
            "field and weight set use different grids".into(),
        ));
    }
    let dt = if quad.time_integral { field.lattice.dt() } else { 1.0 };
    let h = ws.xs.get(1).map_or(1.0, |x1| x1 - ws.xs[0]);
    let mut total = 0.0;
    let mut err = None;
    field.for_each_slot(|_, k, p, values| {
        if err.is_some() || k < quad.k_min || k > quad.k_max {
            return;
        }
        let kw = k + quad.weight_shift;
        let grad;
        let vals: &[num_complex::Complex64] = if quad.gradient {
            grad = discrete_gradient(values, h);
            &grad
        } else {
            values
        };
        let mut slot = 0.0;
        for (i, v) in vals.iter().enumerate() {
            if let Some(m) = quad.mask {
                if m[i] == 0.0 {
                    continue;
                }
            }
            let a2 = v.norm_sqr();
            if a2 == 0.0 {
                continue;
            }
            let lw = ws.log_weight(kw, i, weight);
            if lw == f64::NEG_INFINITY {
                continue;
            }
            let e = lw + a2.ln();
            let term = if lw <= LOG_OVERFLOW { lw.exp() * a2 } else { e.exp() };
            if e > LOG_OVERFLOW || !term.is_finite() {
                err = Some(LabError::Saturation {
                    log_weight: e,
                    context: format!("weighted quadrature at time index {kw}, node {i}"),
                });
                return;
            }
            slot += term * quad.mask.map_or(1.0, |m| m[i]);
        }
        total += p * dt * h * slot;
    });
    match err {
        Some(e) => Err(e),
        None => Ok(total),
    }
}
