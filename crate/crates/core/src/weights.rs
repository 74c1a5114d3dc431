//! Carleman weight functions.
//!
//! The spatial profile `beta`, the time profiles `gamma` (singular at `t = T`)
//! and its mirror (singular at `t = 0`), their epsilon-regularized variants, and
//! the composites `alpha`, `phi = gamma * alpha`, `xi = gamma * exp(mu (off + beta))`
//! and `theta = exp(lambda * phi)`.
//!
//! Everything is stored in log form. `theta` lives in `(0, 1)` and underflows
//! long before the interesting regime, while `xi` overflows for the untempered
//! exponents, so callers combine `log theta`, `log xi` and the polynomial
//! prefactors additively and exponentiate once (see [`LogWeight`]).

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grid::{SpatialGrid, TimeGrid};

/// Largest exponent accepted before `exp` is considered saturated.
pub const LOG_OVERFLOW: f64 = 700.0;

/// Interval geometry of the 1D domain `G`, the control region `G0` and the
/// inner region `G'` where `beta` is allowed to be flat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Geometry {
    pub domain_left: f64,
    pub domain_right: f64,
    pub g0_left: f64,
    pub g0_right: f64,
    pub gp_left: f64,
    pub gp_right: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            domain_left: 0.0,
            domain_right: 1.0,
            g0_left: 0.3,
            g0_right: 0.7,
            gp_left: 0.4,
            gp_right: 0.6,
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.domain_left,
            self.domain_right,
            self.g0_left,
            self.g0_right,
            self.gp_left,
            self.gp_right,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(LabError::Config("geometry endpoints must be finite".into()));
        }
        if !(self.domain_left < self.gp_left
            && self.gp_left < self.gp_right
            && self.gp_right < self.domain_right)
        {
            return Err(LabError::Config(
                "G' must lie strictly inside G (domain_left < gp_left < gp_right < domain_right)"
                    .into(),
            ));
        }
        if !(self.g0_left < self.gp_left && self.gp_right < self.g0_right) {
            return Err(LabError::Config(
                "G' must be compactly contained in G0 (g0_left < gp_left, gp_right < g0_right)"
                    .into(),
            ));
        }
        if !(self.domain_left <= self.g0_left && self.g0_right <= self.domain_right) {
            return Err(LabError::Config("G0 must be contained in G".into()));
        }
        Ok(())
    }

    pub fn in_g0(&self, x: f64) -> bool {
        x > self.g0_left && x < self.g0_right
    }

    pub fn in_closed_gp(&self, x: f64) -> bool {
        x >= self.gp_left && x <= self.gp_right
    }

    /// Stationary point of `beta`.
    pub fn beta_peak(&self) -> f64 {
        0.5 * (self.gp_left + self.gp_right)
    }
}

/// Spatial profile sampled on the interior nodes of a [`SpatialGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct BetaProfile {
    pub geometry: Geometry,
    pub values: Vec<f64>,
    pub gradient: Vec<f64>,
    /// Infimum of `|beta'|` over `G \ closure(G')`.
    pub alpha0: f64,
}

/// Two quadratic halves joined at the peak: `1 - ((x - p) / (p - L))^2` on the
/// left and `1 - ((x - p) / (R - p))^2` on the right. For a peak at the domain
/// midpoint this is the plain `c (x - L)(R - x)`.
fn beta_at(geometry: &Geometry, x: f64) -> (f64, f64) {
    let p = geometry.beta_peak();
    let half = if x <= p {
        p - geometry.domain_left
    } else {
        geometry.domain_right - p
    };
    let s = (x - p) / half;
    (1.0 - s * s, -2.0 * s / half)
}

pub fn build_beta(geometry: &Geometry, grid: &SpatialGrid) -> Result<BetaProfile> {
    geometry.validate()?;
    if (grid.left - geometry.domain_left).abs() > 1e-12
        || (grid.right - geometry.domain_right).abs() > 1e-12
    {
        return Err(LabError::Config(
            "spatial grid does not cover the geometry's domain".into(),
        ));
    }
    let (values, gradient): (Vec<f64>, Vec<f64>) =
        grid.nodes().map(|x| beta_at(geometry, x)).unzip();
    // |beta'| grows linearly away from the peak, so its infimum outside G' sits
    // on the nearer endpoint of G'.
    let alpha0 = beta_at(geometry, geometry.gp_left)
        .1
        .abs()
        .min(beta_at(geometry, geometry.gp_right).1.abs());
    if !(alpha0 > 0.0) {
        return Err(LabError::Construction(format!(
            "alpha0 = {alpha0} is not positive"
        )));
    }
    for (x, &dv) in grid.nodes().zip(&gradient) {
        if !geometry.in_closed_gp(x) && dv.abs() < alpha0 * (1.0 - 1e-12) {
            return Err(LabError::Construction(format!(
                "|beta'({x})| = {} below alpha0 = {alpha0}",
                dv.abs()
            )));
        }
    }
    Ok(BetaProfile {
        geometry: *geometry,
        values,
        gradient,
        alpha0,
    })
}

/// Carleman parameters. `offset_override` replaces the exponent offset `6m`
/// and `sigma_override` replaces the derived `sigma`; both exist for tempered
/// experiments and default to the untempered forms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightParams {
    pub lambda: f64,
    pub mu: f64,
    pub m: u32,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(default)]
    pub offset_override: Option<f64>,
    #[serde(default)]
    pub sigma_override: Option<f64>,
}

impl Default for WeightParams {
    fn default() -> Self {
        WeightParams {
            lambda: 4.0,
            mu: 2.0,
            m: 1,
            horizon: 0.5,
            offset_override: None,
            sigma_override: None,
        }
    }
}

impl WeightParams {
    pub fn offset(&self) -> f64 {
        self.offset_override.unwrap_or(6.0 * self.m as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 1.0) {
            return Err(LabError::Parameter(format!(
                "lambda must be >= 1, got {}",
                self.lambda
            )));
        }
        if !(self.mu >= 1.0) {
            return Err(LabError::Parameter(format!("mu must be >= 1, got {}", self.mu)));
        }
        if self.m < 1 {
            return Err(LabError::Parameter("m must be >= 1".into()));
        }
        if !(self.horizon > 0.0 && self.horizon < 1.0) {
            return Err(LabError::Parameter("T must lie in (0,1)".into()));
        }
        if let Some(off) = self.offset_override {
            if !off.is_finite() {
                return Err(LabError::Parameter("offset_override must be finite".into()));
            }
        }
        sigma_of(self).map(|_| ())
    }

    /// `ln(lambda^a mu^b)`.
    pub fn log_poly(&self, lambda_pow: f64, mu_pow: f64) -> f64 {
        lambda_pow * self.lambda.ln() + mu_pow * self.mu.ln()
    }
}

/// `sigma = lambda mu^2 exp(mu (offset - 4))`, required to be at least 2.
pub fn sigma_of(params: &WeightParams) -> Result<f64> {
    let sigma = match params.sigma_override {
        Some(s) => s,
        None => params.lambda * params.mu * params.mu * (params.mu * (params.offset() - 4.0)).exp(),
    };
    if !(sigma >= 2.0) {
        return Err(LabError::Parameter(format!("sigma = {sigma} must be >= 2")));
    }
    Ok(sigma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightVariant {
    /// Singular at `t = T`.
    Forward,
    /// Mirrored, singular at `t = 0`.
    Backward,
    ForwardEps(f64),
    BackwardEps(f64),
}

impl WeightVariant {
    pub fn is_mirrored(&self) -> bool {
        matches!(self, WeightVariant::Backward | WeightVariant::BackwardEps(_))
    }

    pub fn eps(&self) -> Option<f64> {
        match *self {
            WeightVariant::ForwardEps(e) | WeightVariant::BackwardEps(e) => Some(e),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WeightVariant::Forward => "forward",
            WeightVariant::Backward => "backward",
            WeightVariant::ForwardEps(_) => "forward_eps",
            WeightVariant::BackwardEps(_) => "backward_eps",
        }
    }
}

/// Which closed-form piece of the forward profile a time falls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaPiece {
    Decay,
    Flat,
    Bridge,
    BlowUp,
}

/// Forward time profile with a quintic Hermite bridge on `[T/2, 3T/4)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaProfile {
    pub horizon: f64,
    pub m: u32,
    pub sigma: f64,
    coeffs: [f64; 3],
}

impl GammaProfile {
    pub fn new(params: &WeightParams) -> Result<Self> {
        params.validate()?;
        let sigma = sigma_of(params)?;
        let t = params.horizon;
        let m = params.m as f64;
        let w = t / 4.0;
        let g1 = w.powf(-m);
        let rise = g1 - 1.0;
        let d1 = w * m * w.powf(-m - 1.0);
        let d2 = w * w * m * (m + 1.0) * w.powf(-m - 2.0);
        let coeffs = [
            10.0 * rise - 4.0 * d1 + 0.5 * d2,
            -15.0 * rise + 7.0 * d1 - d2,
            6.0 * rise - 3.0 * d1 + 0.5 * d2,
        ];
        Ok(GammaProfile {
            horizon: t,
            m: params.m,
            sigma,
            coeffs,
        })
    }

    pub fn piece(&self, t: f64) -> GammaPiece {
        let tt = self.horizon;
        if t < tt / 4.0 {
            GammaPiece::Decay
        } else if t < tt / 2.0 {
            GammaPiece::Flat
        } else if t < 0.75 * tt {
            GammaPiece::Bridge
        } else {
            GammaPiece::BlowUp
        }
    }

    /// Value, first and second derivative of a given piece's closed form at `t`
    /// (the piece formula is evaluated even outside its interval, which is how
    /// one-sided junction limits are taken).
    pub fn piece_derivs(&self, piece: GammaPiece, t: f64) -> (f64, f64, f64) {
        let tt = self.horizon;
        let m = self.m as f64;
        match piece {
            GammaPiece::Decay => {
                let base = 1.0 - 4.0 * t / tt;
                let s = self.sigma;
                let k = 4.0 / tt;
                (
                    1.0 + base.powf(s),
                    -k * s * base.powf(s - 1.0),
                    k * k * s * (s - 1.0) * base.powf(s - 2.0),
                )
            }
            GammaPiece::Flat => (1.0, 0.0, 0.0),
            GammaPiece::Bridge => {
                let w = tt / 4.0;
                let s = (t - tt / 2.0) / w;
                let [c0, c1, c2] = self.coeffs;
                let q = s.powi(3) * (c0 + c1 * s + c2 * s * s);
                let dq = s * s * (3.0 * c0 + 4.0 * c1 * s + 5.0 * c2 * s * s);
                let ddq = s * (6.0 * c0 + 12.0 * c1 * s + 20.0 * c2 * s * s);
                (1.0 + q, dq / w, ddq / (w * w))
            }
            GammaPiece::BlowUp => {
                let r = tt - t;
                (
                    r.powf(-m),
                    m * r.powf(-m - 1.0),
                    m * (m + 1.0) * r.powf(-m - 2.0),
                )
            }
        }
    }

    /// Unregularized forward profile. Errors at the blow-up endpoint.
    pub fn forward(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0 && t <= self.horizon) {
            return Err(LabError::Domain(format!(
                "t = {t} outside [0, {}]",
                self.horizon
            )));
        }
        if t >= self.horizon {
            return Err(LabError::Domain(format!(
                "gamma is infinite at t = T = {}",
                self.horizon
            )));
        }
        Ok(self.piece_derivs(self.piece(t), t).0)
    }

    fn forward_eps(&self, t: f64, eps: f64) -> Result<f64> {
        let tt = self.horizon;
        if t < tt / 4.0 {
            self.forward(t)
        } else if t < tt / 2.0 + eps {
            Ok(1.0)
        } else {
            self.forward((t - eps).max(0.0))
        }
    }

    pub fn eval(&self, t: f64, variant: WeightVariant) -> Result<f64> {
        let tt = self.horizon;
        if !(t >= 0.0 && t <= tt) {
            return Err(LabError::Domain(format!("t = {t} outside [0, {tt}]")));
        }
        if let Some(eps) = variant.eps() {
            if !(eps > 0.0 && eps < tt / 2.0) {
                return Err(LabError::Parameter(format!(
                    "regularization eps = {eps} must lie in (0, T/2)"
                )));
            }
        }
        match variant {
            WeightVariant::Forward => self.forward(t),
            WeightVariant::Backward => self.forward(tt - t),
            WeightVariant::ForwardEps(eps) => self.forward_eps(t, eps),
            WeightVariant::BackwardEps(eps) => self.forward_eps(tt - t, eps),
        }
    }
}

/// Forward or mirrored time profile at `t`.
pub fn gamma_eval(t: f64, params: &WeightParams, variant: WeightVariant) -> Result<f64> {
    GammaProfile::new(params)?.eval(t, variant)
}

/// Exponents of a composite weight `exp(log_const) * theta^theta_pow * xi^xi_pow`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogWeight {
    pub theta_pow: f64,
    pub xi_pow: f64,
    pub log_const: f64,
}

impl LogWeight {
    pub const ONE: LogWeight = LogWeight {
        theta_pow: 0.0,
        xi_pow: 0.0,
        log_const: 0.0,
    };

    pub fn new(theta_pow: f64, xi_pow: f64, log_const: f64) -> Self {
        LogWeight {
            theta_pow,
            xi_pow,
            log_const,
        }
    }
}

/// Weight tables on the full (time node, interior space node) grid.
#[derive(Debug, Clone)]
pub struct WeightSet {
    pub variant: WeightVariant,
    pub params: WeightParams,
    pub sigma: f64,
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    /// `gamma` per time node; `+inf` at the singular endpoint.
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `mu (offset + beta)` per space node.
    pub log_xi_space: Vec<f64>,
    /// Row-major `[time][space]`.
    pub phi: Vec<f64>,
    pub log_theta: Vec<f64>,
    pub log_xi: Vec<f64>,
}

pub fn build_weight_set(
    beta: &BetaProfile,
    params: &WeightParams,
    space: &SpatialGrid,
    time: &TimeGrid,
    variant: WeightVariant,
) -> Result<WeightSet> {
    let profile = GammaProfile::new(params)?;
    if beta.values.len() != space.n_interior {
        return Err(LabError::Dimension(format!(
            "beta has {} nodes, grid has {}",
            beta.values.len(),
            space.n_interior
        )));
    }
    if (time.horizon - params.horizon).abs() > 1e-14 {
        return Err(LabError::Dimension(format!(
            "time grid horizon {} differs from weight horizon {}",
            time.horizon, params.horizon
        )));
    }
    let mu = params.mu;
    let off = params.offset();
    let log_xi_space: Vec<f64> = beta.values.iter().map(|b| mu * (off + b)).collect();
    // alpha = e^{mu(off+beta)} - mu e^{mu(off+6)} = -e^{mu(off+6)} (mu - e^{mu(beta-6)}),
    // kept in factored form so the paper-exact magnitudes do not lose the sign.
    let alpha: Vec<f64> = beta
        .values
        .iter()
        .map(|b| -(mu * (off + 6.0)).exp() * (mu - (mu * (b - 6.0)).exp()))
        .collect();
    if let Some(a) = alpha.iter().find(|a| !(**a < 0.0)) {
        return Err(LabError::Construction(format!("alpha = {a} is not negative")));
    }
    let times: Vec<f64> = time.times().collect();
    let mut gamma = Vec::with_capacity(times.len());
    for &t in &times {
        match profile.eval(t, variant) {
            Ok(g) => gamma.push(g),
            Err(LabError::Domain(_)) => gamma.push(f64::INFINITY),
            Err(e) => return Err(e),
        }
    }
    let nx = alpha.len();
    let mut phi = Vec::with_capacity(times.len() * nx);
    let mut log_theta = Vec::with_capacity(times.len() * nx);
    let mut log_xi = Vec::with_capacity(times.len() * nx);
    for &g in &gamma {
        for i in 0..nx {
            if g.is_finite() {
                phi.push(g * alpha[i]);
                log_theta.push(params.lambda * g * alpha[i]);
                log_xi.push(g.ln() + log_xi_space[i]);
            } else {
                phi.push(f64::NEG_INFINITY);
                log_theta.push(f64::NEG_INFINITY);
                log_xi.push(f64::INFINITY);
            }
        }
    }
    Ok(WeightSet {
        variant,
        params: *params,
        sigma: profile.sigma,
        times,
        xs: space.nodes().collect(),
        gamma,
        alpha,
        log_xi_space,
        phi,
        log_theta,
        log_xi,
    })
}

impl WeightSet {
    pub fn nt(&self) -> usize {
        self.times.len()
    }

    pub fn nx(&self) -> usize {
        self.xs.len()
    }

    pub fn is_singular(&self, k: usize) -> bool {
        !self.gamma[k].is_finite()
    }

    pub fn log_theta_at(&self, k: usize, i: usize) -> f64 {
        self.log_theta[k * self.nx() + i]
    }

    pub fn log_xi_at(&self, k: usize, i: usize) -> f64 {
        self.log_xi[k * self.nx() + i]
    }

    pub fn phi_at(&self, k: usize, i: usize) -> f64 {
        self.phi[k * self.nx() + i]
    }

    /// `xi` itself, or a saturation error when it does not fit in an `f64`.
    pub fn xi_at(&self, k: usize, i: usize) -> Result<f64> {
        exp_checked(self.log_xi_at(k, i), "xi")
    }

    /// Log of `exp(c) theta^p xi^q` at a node. At the singular endpoint `theta`
    /// vanishes faster than any power of `xi` grows, so the sign of the theta
    /// exponent decides between `-inf` and `+inf`.
    pub fn log_weight(&self, k: usize, i: usize, w: LogWeight) -> f64 {
        if self.is_singular(k) {
            let dominant = if w.theta_pow != 0.0 {
                -w.theta_pow
            } else {
                w.xi_pow
            };
            return if dominant > 0.0 {
                f64::INFINITY
            } else if dominant < 0.0 {
                f64::NEG_INFINITY
            } else {
                w.log_const
            };
        }
        let mut v = w.log_const;
        if w.theta_pow != 0.0 {
            v += w.theta_pow * self.log_theta_at(k, i);
        }
        if w.xi_pow != 0.0 {
            v += w.xi_pow * self.log_xi_at(k, i);
        }
        v
    }

    /// Weight table exponentiated once, row-major `[time][space]`.
    pub fn weight_table(&self, w: LogWeight, context: &str) -> Result<Vec<f64>> {
        let nx = self.nx();
        let mut out = Vec::with_capacity(self.nt() * nx);
        for k in 0..self.nt() {
            for i in 0..nx {
                out.push(exp_checked(self.log_weight(k, i, w), context)?);
            }
        }
        Ok(out)
    }
}

/// `exp(v)`, failing with a saturation diagnostic instead of returning `inf`.
pub fn exp_checked(v: f64, context: &str) -> Result<f64> {
    if v > LOG_OVERFLOW || v.is_nan() {
        return Err(LabError::Saturation {
            log_weight: v,
            context: context.to_string(),
        });
    }
    Ok(v.exp())
}

#[derive(Debug, Clone, Serialize)]
pub struct JunctionResidual {
    pub at: f64,
    pub order: u8,
    pub left: f64,
    pub right: f64,
    pub relative: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct WeightDiagnostics {
    pub junctions: Vec<JunctionResidual>,
    pub max_junction_residual: f64,
    /// Minimum of `log xi`, so positivity is checkable without underflow.
    pub min_log_xi: f64,
    pub max_alpha: f64,
    pub max_log_theta: f64,
    pub bridge_monotone: bool,
}

/// One-sided analytic limits of the profile at each junction, bridge
/// monotonicity on a fine sample, and the sign invariants of the tables.
pub fn verify_weight_set(ws: &WeightSet, params: &WeightParams) -> Result<WeightDiagnostics> {
    let profile = GammaProfile::new(params)?;
    let tt = params.horizon;
    // Junctions of the forward profile; the mirrored variants are reflections
    // of the same closed forms, so their residuals coincide.
    let mut pairs = vec![
        (tt / 4.0, GammaPiece::Decay, GammaPiece::Flat, 0.0),
        (tt / 2.0, GammaPiece::Flat, GammaPiece::Bridge, 0.0),
        (0.75 * tt, GammaPiece::Bridge, GammaPiece::BlowUp, 0.0),
    ];
    if let Some(eps) = ws.variant.eps() {
        // gamma(t - eps) glued to the flat piece at T/2 + eps.
        pairs.push((tt / 2.0 + eps, GammaPiece::Flat, GammaPiece::Bridge, eps));
    }
    let mut junctions = Vec::new();
    for (at, lp, rp, shift) in pairs {
        let l = profile.piece_derivs(lp, at);
        let r = profile.piece_derivs(rp, at - shift);
        for (order, (lv, rv)) in [(0u8, (l.0, r.0)), (1, (l.1, r.1)), (2, (l.2, r.2))] {
            let scale = 1.0_f64.max(lv.abs()).max(rv.abs());
            junctions.push(JunctionResidual {
                at,
                order,
                left: lv,
                right: rv,
                relative: (lv - rv).abs() / scale,
            });
        }
    }
    let max_junction_residual = junctions.iter().map(|j| j.relative).fold(0.0, f64::max);
    let samples = 4096;
    let mut bridge_monotone = true;
    let mut prev = f64::NEG_INFINITY;
    for s in 0..=samples {
        let t = tt / 2.0 + (tt / 4.0) * s as f64 / samples as f64;
        let v = profile.piece_derivs(GammaPiece::Bridge, t).0;
        if v < prev {
            bridge_monotone = false;
        }
        prev = v;
    }
    Ok(WeightDiagnostics {
        junctions,
        max_junction_residual,
        min_log_xi: ws.log_xi.iter().copied().fold(f64::INFINITY, f64::min),
        max_alpha: ws.alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        max_log_theta: ws.log_theta.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        bridge_monotone,
    })
}
