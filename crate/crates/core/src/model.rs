//! Multiscale and homogenized model families.
//!
//! The multiscale diffusion is
//!
//! ```text
//! dX = [f0(X) + f1(X/eps)/eps] dt + sigma(X) dW
//! ```
//!
//! with `f1` periodic, and its homogenization limit is `dX = b(X) dt + sigma_bar(X) dW`.
//! The Langevin instance has `f0(x) = -alpha x`, `f1(y) = -sin(y)` and constant
//! diffusion `sqrt(2 sigma)`; its limit is the Ornstein-Uhlenbeck process with
//! drift `-alpha K x` and diffusion `sqrt(2 sigma K)`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::quadrature::QuadratureGrid;

/// Pure scalar coefficient function.
pub type Evaluator = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Wraps a closure as an [`Evaluator`].
pub fn evaluator<F>(f: F) -> Evaluator
where
    F: Fn(f64) -> f64 + Send + Sync + 'static,
{
    Arc::new(f)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    GeneralMultiscale,
    LangevinExample,
}

#[derive(Clone)]
enum Coefficients {
    Langevin {
        alpha: f64,
        sigma: f64,
    },
    General {
        f0: Evaluator,
        f1: Evaluator,
        sigma: Evaluator,
        period: f64,
        fast_free: bool,
    },
}

/// Coefficients of the multiscale SDE at a fixed scale `eps`.
#[derive(Clone)]
pub struct ModelSpec {
    coeffs: Coefficients,
    eps: f64,
    x0: f64,
    half_width: f64,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("ModelSpec");
        d.field("kind", &self.kind()).field("eps", &self.eps).field("x0", &self.x0);
        if let Coefficients::Langevin { alpha, sigma } = self.coeffs {
            d.field("alpha", &alpha).field("sigma", &sigma);
        }
        d.finish()
    }
}

/// Default tail level of the Gaussian envelope at the truncation boundary.
pub const TRUNCATION_ENVELOPE: f64 = 1e-14;

/// Default `S` of the dissipativity condition used to size the working domain.
pub const DEFAULT_DISSIPATIVITY_RADIUS: f64 = 1.0;

const PERIODICITY_TOL: f64 = 1e-12;

fn positive(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::InvalidParameter(format!("{name} must be finite and > 0, got {v}")))
    }
}

impl ModelSpec {
    /// Overdamped Langevin instance `dX = [-alpha X - sin(X/eps)/eps] dt + sqrt(2 sigma) dW`.
    pub fn langevin(alpha: f64, sigma: f64, eps: f64) -> Result<Self> {
        positive("alpha", alpha)?;
        positive("sigma", sigma)?;
        positive("eps", eps)?;
        Ok(Self {
            coeffs: Coefficients::Langevin { alpha, sigma },
            eps,
            x0: 0.0,
            half_width: langevin_working_half_width(alpha, sigma, DEFAULT_DISSIPATIVITY_RADIUS),
        })
    }

    /// General model with a periodic fast drift of the given period.
    ///
    /// Periodicity of `f1` is verified on sampled points.
    pub fn general(
        f0: Evaluator,
        f1: Evaluator,
        sigma: Evaluator,
        period: f64,
        eps: f64,
    ) -> Result<Self> {
        positive("eps", eps)?;
        positive("period", period)?;
        check_periodic(&f1, period)?;
        Ok(Self {
            coeffs: Coefficients::General {
                f0,
                f1,
                sigma,
                period,
                fast_free: false,
            },
            eps,
            x0: 0.0,
            half_width: 10.0,
        })
    }

    /// Model with no fast term, `dX = f0(X) dt + sigma(X) dW`. `eps` is set to 1.
    pub fn without_fast_term(f0: Evaluator, sigma: Evaluator) -> Self {
        Self {
            coeffs: Coefficients::General {
                f0,
                f1: evaluator(|_| 0.0),
                sigma,
                period: 1.0,
                fast_free: true,
            },
            eps: 1.0,
            x0: 0.0,
            half_width: 10.0,
        }
    }

    /// The homogenized diffusion viewed as a model without fast term.
    pub fn from_homogenized(h: &HomogenizedSpec) -> Self {
        let mut spec = Self::without_fast_term(h.b.clone(), h.sigma_bar.clone());
        if let Some((alpha, sigma)) = h.langevin {
            spec.half_width = langevin_working_half_width(alpha, sigma, DEFAULT_DISSIPATIVITY_RADIUS);
        }
        spec
    }

    pub fn with_x0(mut self, x0: f64) -> Self {
        self.x0 = x0;
        self
    }

    /// Overrides the half-width `L` of the working domain `[-L, L]`.
    pub fn with_half_width(mut self, half_width: f64) -> Self {
        self.half_width = half_width;
        self
    }

    pub fn kind(&self) -> ModelKind {
        match self.coeffs {
            Coefficients::Langevin { .. } => ModelKind::LangevinExample,
            Coefficients::General { .. } => ModelKind::GeneralMultiscale,
        }
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    /// `(alpha, sigma)` for the Langevin instance.
    pub fn langevin_params(&self) -> Option<(f64, f64)> {
        match self.coeffs {
            Coefficients::Langevin { alpha, sigma } => Some((alpha, sigma)),
            Coefficients::General { .. } => None,
        }
    }

    /// Period of the fast drift in the fast variable `y = x / eps`.
    pub fn period(&self) -> f64 {
        match &self.coeffs {
            Coefficients::Langevin { .. } => 2.0 * PI,
            Coefficients::General { period, .. } => *period,
        }
    }

    pub fn has_fast_term(&self) -> bool {
        match &self.coeffs {
            Coefficients::Langevin { .. } => true,
            Coefficients::General { fast_free, .. } => !fast_free,
        }
    }

    /// Copy of this model at another scale.
    pub fn at_eps(&self, eps: f64) -> Result<Self> {
        positive("eps", eps)?;
        let mut out = self.clone();
        out.eps = eps;
        Ok(out)
    }

    pub fn slow_drift(&self, x: f64) -> f64 {
        match &self.coeffs {
            Coefficients::Langevin { alpha, .. } => -alpha * x,
            Coefficients::General { f0, .. } => f0(x),
        }
    }

    pub fn fast_drift(&self, y: f64) -> f64 {
        match &self.coeffs {
            Coefficients::Langevin { .. } => -y.sin(),
            Coefficients::General { f1, fast_free, .. } => {
                if *fast_free {
                    0.0
                } else {
                    f1(y)
                }
            }
        }
    }

    /// Full drift `f0(x) + f1(x/eps)/eps` without finiteness checks.
    #[inline]
    pub fn drift(&self, x: f64) -> f64 {
        match &self.coeffs {
            Coefficients::Langevin { alpha, .. } => -alpha * x - (x / self.eps).sin() / self.eps,
            Coefficients::General {
                f0, f1, fast_free, ..
            } => {
                if *fast_free {
                    f0(x)
                } else {
                    f0(x) + f1(x / self.eps) / self.eps
                }
            }
        }
    }

    /// Drift with overflow detection.
    pub fn drift_eps(&self, x: f64) -> Result<f64> {
        let v = self.drift(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                x,
                what: "drift".into(),
            })
        }
    }

    #[inline]
    pub fn diffusion(&self, x: f64) -> f64 {
        match &self.coeffs {
            Coefficients::Langevin { sigma, .. } => (2.0 * sigma).sqrt(),
            Coefficients::General { sigma, .. } => sigma(x),
        }
    }

    /// Half-width of the quadrature domain on which the slow Gaussian envelope
    /// `exp(-alpha x^2 / (2 sigma))` drops below `envelope`. Only the Langevin
    /// instance has a known envelope; general models use their working domain.
    pub fn truncation_half_width(&self, envelope: f64) -> f64 {
        match self.langevin_params() {
            Some((alpha, sigma)) => (2.0 * sigma / alpha * (1.0 / envelope).ln()).sqrt(),
            None => self.half_width,
        }
    }

    /// Sweeps the diffusion coefficient over `grid` and returns its bounds `(a, A)`.
    pub fn check_assumption_c(&self, grid: &QuadratureGrid) -> Result<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &x in grid.nodes() {
            let s = self.diffusion(x);
            if !s.is_finite() {
                return Err(Error::NonFinite {
                    x,
                    what: "diffusion".into(),
                });
            }
            lo = lo.min(s);
            hi = hi.max(s);
        }
        if lo <= 0.0 {
            return Err(Error::AssumptionViolated(format!(
                "diffusion coefficient must be bounded below by a > 0, found min {lo}"
            )));
        }
        Ok((lo, hi))
    }

    /// Constant diffusion value if `sigma` is constant on sampled points of the working domain.
    pub fn constant_diffusion(&self) -> Option<f64> {
        let s0 = self.diffusion(0.0);
        let l = self.half_width;
        let n = 257;
        let constant = (0..n).all(|i| {
            let x = -l + 2.0 * l * i as f64 / (n - 1) as f64;
            (self.diffusion(x) - s0).abs() <= 1e-14 * s0.abs().max(1.0)
        });
        constant.then_some(s0)
    }
}

/// `max(S + 5, 6 sqrt(sigma / alpha))`.
pub fn langevin_working_half_width(alpha: f64, sigma: f64, s: f64) -> f64 {
    (s + 5.0).max(6.0 * (sigma / alpha).sqrt())
}

fn check_periodic(f1: &Evaluator, period: f64) -> Result<()> {
    let n = 97;
    for i in 0..n {
        let y = -3.0 * period + 6.0 * period * i as f64 / (n - 1) as f64 + 0.123_456_7;
        let a = f1(y);
        let b = f1(y + period);
        if !a.is_finite() || (b - a).abs() > PERIODICITY_TOL * (1.0 + a.abs()) {
            return Err(Error::InvalidParameter(format!(
                "fast drift is not {period}-periodic at y = {y}: {a} vs {b}"
            )));
        }
    }
    Ok(())
}

/// Coefficients of the homogenized limit.
#[derive(Clone)]
pub struct HomogenizedSpec {
    b: Evaluator,
    sigma_bar: Evaluator,
    k: f64,
    langevin: Option<(f64, f64)>,
}

impl fmt::Debug for HomogenizedSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HomogenizedSpec")
            .field("k", &self.k)
            .field("langevin", &self.langevin)
            .finish()
    }
}

impl HomogenizedSpec {
    /// Limit of the Langevin instance: drift `-alpha K x`, diffusion `sqrt(2 sigma K)`.
    pub fn langevin(alpha: f64, sigma: f64, k: f64) -> Result<Self> {
        positive("alpha", alpha)?;
        positive("sigma", sigma)?;
        if !(k > 0.0 && k <= 1.0) {
            return Err(Error::InvalidParameter(format!("K must lie in (0, 1], got {k}")));
        }
        let theta = alpha * k;
        let diff = (2.0 * sigma * k).sqrt();
        Ok(Self {
            b: evaluator(move |x| -theta * x),
            sigma_bar: evaluator(move |_| diff),
            k,
            langevin: Some((alpha, sigma)),
        })
    }

    /// Ornstein-Uhlenbeck limit parametrized directly by `theta` and the
    /// effective variance parameter `sigma_eff` (diffusion `sqrt(2 sigma_eff)`).
    pub fn ornstein_uhlenbeck(theta: f64, sigma_eff: f64) -> Result<Self> {
        // alpha = theta, sigma = sigma_eff with K = 1 gives the same coefficients
        Self::langevin(theta, sigma_eff, 1.0)
    }

    pub fn general(b: Evaluator, sigma_bar: Evaluator) -> Self {
        Self {
            b,
            sigma_bar,
            k: 1.0,
            langevin: None,
        }
    }

    /// Limit of a gradient-type model with constant diffusion: `b = K f0`, `sigma_bar = sqrt(K) sigma`.
    pub fn from_cell(spec: &ModelSpec, k: f64) -> Result<Self> {
        if let Some((alpha, sigma)) = spec.langevin_params() {
            return Self::langevin(alpha, sigma, k);
        }
        let s = spec.constant_diffusion().ok_or_else(|| {
            Error::AssumptionViolated("homogenization requires a constant diffusion coefficient".into())
        })?;
        let f0 = spec.clone();
        let sk = k.sqrt() * s;
        Ok(Self {
            b: evaluator(move |x| k * f0.slow_drift(x)),
            sigma_bar: evaluator(move |_| sk),
            k,
            langevin: None,
        })
    }

    #[inline]
    pub fn b(&self, x: f64) -> f64 {
        (self.b)(x)
    }

    #[inline]
    pub fn sigma_bar(&self, x: f64) -> f64 {
        (self.sigma_bar)(x)
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    /// `theta = alpha K` (Langevin instance only).
    pub fn theta(&self) -> Option<f64> {
        self.langevin.map(|(alpha, _)| alpha * self.k)
    }

    /// `sigma_eff = sigma K` (Langevin instance only).
    pub fn sigma_eff(&self) -> Option<f64> {
        self.langevin.map(|(_, sigma)| sigma * self.k)
    }

    pub fn langevin_params(&self) -> Option<(f64, f64)> {
        self.langevin
    }
}

/// Outcome of the dissipativity sweep `sign(y) b(y) / sigma_bar(y)^2 <= -gamma` for `|y| > S`.
#[derive(Clone, Debug)]
pub struct CltAssumptionReport {
    pub holds: bool,
    pub checked_nodes: usize,
    /// Nodes where the inequality fails.
    pub violations: Vec<f64>,
}

pub fn check_assumption_clt(
    homog: &HomogenizedSpec,
    s: f64,
    gamma: f64,
    grid: &QuadratureGrid,
) -> Result<CltAssumptionReport> {
    positive("S", s)?;
    positive("gamma", gamma)?;
    let mut checked = 0;
    let mut violations = Vec::new();
    for &y in grid.nodes().iter().filter(|y| y.abs() > s) {
        checked += 1;
        let sb = homog.sigma_bar(y);
        let v = y.signum() * homog.b(y) / (sb * sb);
        if !(v <= -gamma) {
            violations.push(y);
        }
    }
    if checked == 0 {
        return Err(Error::InvalidParameter(format!(
            "grid [{}, {}] has no nodes with |y| > {s}",
            grid.lower(),
            grid.upper()
        )));
    }
    Ok(CltAssumptionReport {
        holds: violations.is_empty(),
        checked_nodes: checked,
        violations,
    })
}

/// How the Euler-Maruyama step is tied to the scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DtRule {
    /// `dt = eps^2 / divisor`.
    EpsSquaredOver(f64),
    Fixed(f64),
}

impl DtRule {
    pub fn dt(&self, eps: f64) -> f64 {
        match *self {
            DtRule::EpsSquaredOver(d) => eps * eps / d,
            DtRule::Fixed(dt) => dt,
        }
    }
}

impl Default for DtRule {
    fn default() -> Self {
        DtRule::EpsSquaredOver(20.0)
    }
}

/// Coupled schedule `T_eps = C eps^(-eta)` over a decreasing list of scales.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub eps_values: Vec<f64>,
    pub horizon_constant: f64,
    pub horizon_exponent: f64,
    pub dt_rule: DtRule,
}

impl ScheduleConfig {
    pub fn new(eps_values: Vec<f64>, horizon_constant: f64, horizon_exponent: f64) -> Self {
        Self {
            eps_values,
            horizon_constant,
            horizon_exponent,
            dt_rule: DtRule::default(),
        }
    }

    pub fn with_dt_rule(mut self, rule: DtRule) -> Self {
        self.dt_rule = rule;
        self
    }

    pub fn horizon(&self, eps: f64) -> f64 {
        self.horizon_constant * eps.powf(-self.horizon_exponent)
    }

    pub fn horizons(&self) -> Vec<f64> {
        self.eps_values.iter().map(|&e| self.horizon(e)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps_values.is_empty() {
            return Err(Error::InvalidParameter("eps schedule is empty".into()));
        }
        for &e in &self.eps_values {
            positive("eps", e)?;
        }
        if self.eps_values.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidParameter("eps schedule must be strictly decreasing".into()));
        }
        positive("horizon constant", self.horizon_constant)?;
        if !(self.horizon_exponent > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "horizon exponent must be > 0 for a coupled limit, got {}",
                self.horizon_exponent
            )));
        }
        let t = self.horizons();
        if t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter("horizons must increase as eps decreases".into()));
        }
        Ok(())
    }
}

/// A model parametrized by the scale `eps`.
#[derive(Clone)]
pub struct ModelFamily(Arc<dyn Fn(f64) -> Result<ModelSpec> + Send + Sync>);

impl ModelFamily {
    pub fn new<F>(f: F) -> Self
    where
        F: Fn(f64) -> Result<ModelSpec> + Send + Sync + 'static,
    {
        Self(Arc::new(f))
    }

    pub fn langevin(alpha: f64, sigma: f64, x0: f64) -> Self {
        Self::new(move |eps| Ok(ModelSpec::langevin(alpha, sigma, eps)?.with_x0(x0)))
    }

    pub fn at(&self, eps: f64) -> Result<ModelSpec> {
        (self.0)(eps)
    }
}

impl fmt::Debug for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ModelFamily(..)")
    }
}
