//! Globally Lipschitz nonlinearities `f = kappa phi(y)`, `g = kappa1 phi(y)`
//! and `Upsilon(y, Y) = kappa2 phi((y + Y) / 2)`.
//!
//! Every profile `phi` vanishes at zero and is 1-Lipschitz on `C`:
//! `z / (1 + |z|)` has derivative norm `1 / (1 + |z|) <= 1`, the sinusoidal and
//! table profiles act on real and imaginary parts separately with slope at most
//! one. Hence `f` is `kappa`-Lipschitz, `g` is `kappa1`-Lipschitz and
//! `|Upsilon(a1, b1) - Upsilon(a2, b2)| <= kappa2 (|a1 - a2| + |b1 - b2|) / 2`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NonlinearityKind {
    #[default]
    Zero,
    Linear,
    Saturated,
    Sinusoidal,
    CustomTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct NonlinearitySpec {
    #[serde(default)]
    pub kind: NonlinearityKind,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default)]
    pub kappa1: f64,
    #[serde(default)]
    pub kappa2: f64,
    /// Breakpoints `(x, phi(x))` of the custom profile, strictly increasing in
    /// `x`; constant extrapolation outside.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<Vec<(f64, f64)>>,
}

impl NonlinearitySpec {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn linear(kappa: f64, kappa1: f64, kappa2: f64) -> Self {
        NonlinearitySpec {
            kind: NonlinearityKind::Linear,
            kappa,
            kappa1,
            kappa2,
            table: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("kappa", self.kappa), ("kappa1", self.kappa1), ("kappa2", self.kappa2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LabError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        match (self.kind, &self.table) {
            (NonlinearityKind::CustomTable, None) => Err(LabError::Config(
                "custom-table nonlinearity requires a table".into(),
            )),
            (NonlinearityKind::CustomTable, Some(t)) => validate_table(t),
            (_, Some(_)) => Err(LabError::Config(
                "table given for a built-in nonlinearity kind".into(),
            )),
            _ => Ok(()),
        }
    }

    fn phi_real(&self, x: f64) -> f64 {
        match self.kind {
            NonlinearityKind::Sinusoidal => x.sin(),
            NonlinearityKind::CustomTable => interp(self.table.as_deref().unwrap_or(&[]), x),
            _ => unreachable!("phi_real only used by componentwise profiles"),
        }
    }

    /// The unit-Lipschitz profile.
    pub fn phi(&self, z: Complex64) -> Complex64 {
        match self.kind {
            NonlinearityKind::Zero => Complex64::new(0.0, 0.0),
            NonlinearityKind::Linear => z,
            NonlinearityKind::Saturated => z / (1.0 + z.norm()),
            NonlinearityKind::Sinusoidal | NonlinearityKind::CustomTable => {
                Complex64::new(self.phi_real(z.re), self.phi_real(z.im))
            }
        }
    }

    pub fn is_zero(&self, constant: f64) -> bool {
        self.kind == NonlinearityKind::Zero || constant == 0.0
    }

    pub fn drift(&self, y: Complex64) -> Complex64 {
        self.kappa * self.phi(y)
    }

    pub fn diffusion(&self, y: Complex64) -> Complex64 {
        self.kappa1 * self.phi(y)
    }

    pub fn backward_drift(&self, y: Complex64, big_y: Complex64) -> Complex64 {
        self.kappa2 * self.phi(0.5 * (y + big_y))
    }

    pub fn has_drift(&self) -> bool {
        !self.is_zero(self.kappa)
    }

    pub fn has_diffusion(&self) -> bool {
        !self.is_zero(self.kappa1)
    }

    pub fn has_backward_drift(&self) -> bool {
        !self.is_zero(self.kappa2)
    }
}

fn validate_table(t: &[(f64, f64)]) -> Result<()> {
    if t.len() < 2 {
        return Err(LabError::Config("table needs at least two breakpoints".into()));
    }
    if t.iter().any(|(x, v)| !x.is_finite() || !v.is_finite()) {
        return Err(LabError::Config("table entries must be finite".into()));
    }
    for w in t.windows(2) {
        if !(w[1].0 > w[0].0) {
            return Err(LabError::Config("table abscissae must increase strictly".into()));
        }
        let slope = (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
        if slope.abs() > 1.0 + 1e-12 {
            return Err(LabError::Config(format!(
                "table slope {slope} exceeds 1 (the declared constants would not be Lipschitz bounds)"
            )));
        }
    }
    if interp(t, 0.0).abs() > 1e-14 {
        return Err(LabError::Config("table profile must vanish at 0".into()));
    }
    Ok(())
}

fn interp(t: &[(f64, f64)], x: f64) -> f64 {
    if x <= t[0].0 {
        return t[0].1;
    }
    if x >= t[t.len() - 1].0 {
        return t[t.len() - 1].1;
    }
    let i = t.partition_point(|(xi, _)| *xi <= x) - 1;
    let (x0, v0) = t[i];
    let (x1, v1) = t[i + 1];
    v0 + (v1 - v0) * (x - x0) / (x1 - x0)
}
