//! Closed-form and quadrature-defined quantities of the multiscale model and
//! its homogenized limit: cell constants, invariant densities, scale functions,
//! speed densities, characteristic values and exit/hitting-time expectations.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::{HomogenizedSpec, ModelSpec};
use crate::quadrature::{periodic_mean, QuadratureGrid};

/// Minimum number of nodes per period of an oscillatory integrand.
pub const NODES_PER_PERIOD: usize = 20;

/// Default tolerance for smooth quadratures.
pub const SMOOTH_TOL: f64 = 1e-10;

/// Default tolerance for normalizations.
pub const NORMALIZATION_TOL: f64 = 1e-8;

/// Period-averaged constants of the cell problem and the density normalizations.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct CellConstants {
    pub z_plus: f64,
    pub z_minus: f64,
    pub k: f64,
    /// Normalization of the multiscale density kernel.
    pub z_eps: f64,
    /// Normalization of the limit density kernel.
    pub z: f64,
}

/// `sum_m (x/2)^(2m) / (m!)^2`, the period average of `exp(x cos y)`.
pub fn bessel_series(inv_sigma: f64, tol: f64) -> f64 {
    let q = 0.25 * inv_sigma * inv_sigma;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut m = 0.0;
    while term > tol * sum {
        m += 1.0;
        term *= q / (m * m);
        sum += term;
    }
    sum
}

/// Period averages `Z+-` of `exp(+-2 P / s^2)` where `P` is the fast potential.
fn period_averages(spec: &ModelSpec, tol: f64) -> Result<(f64, f64)> {
    if !spec.has_fast_term() {
        return Ok((1.0, 1.0));
    }
    if let Some((_, sigma)) = spec.langevin_params() {
        let zp = periodic_mean(|y| (y.cos() / sigma).exp(), 2.0 * PI, tol)?;
        let zm = periodic_mean(|y| (-y.cos() / sigma).exp(), 2.0 * PI, tol)?;
        return Ok((zp, zm));
    }
    let s = spec.constant_diffusion().ok_or_else(|| {
        Error::AssumptionViolated("cell problem is only supported for constant diffusion".into())
    })?;
    let period = spec.period();
    let mut n = 1024usize;
    let mut prev: Option<(f64, f64)> = None;
    while n <= 1 << 22 {
        // P(y) = int_0^y f1 by the periodic four-point cell rule
        let h = period / n as f64;
        let f1: Vec<f64> = (0..n).map(|i| spec.fast_drift(i as f64 * h)).collect();
        let at = |i: isize| f1[i.rem_euclid(n as isize) as usize];
        let mut p = vec![0.0; n + 1];
        for i in 0..n {
            let j = i as isize;
            let cell = h / 24.0 * (13.0 * (at(j) + at(j + 1)) - (at(j - 1) + at(j + 2)));
            p[i + 1] = p[i] + cell;
        }
        if p[n].abs() > 1e-8 * (1.0 + f1.iter().fold(0.0f64, |a, v| a.max(v.abs())) * period) {
            return Err(Error::AssumptionViolated(format!(
                "fast drift must have zero mean over a period (integral {})",
                p[n]
            )));
        }
        let c = 2.0 / (s * s);
        let zp = p[..n].iter().map(|v| (c * v).exp()).sum::<f64>() / n as f64;
        let zm = p[..n].iter().map(|v| (-c * v).exp()).sum::<f64>() / n as f64;
        if let Some((a, b)) = prev {
            let change = (zp - a).abs().max((zm - b).abs());
            if change <= tol * zp.max(zm) {
                return Ok((zp, zm));
            }
        }
        prev = Some((zp, zm));
        n *= 2;
    }
    let (a, _) = prev.unwrap_or((f64::NAN, f64::NAN));
    Err(Error::QuadratureNonConvergence { change: a, tol })
}

/// Unnormalized invariant-density kernels `(multiscale, limit)` at the grid nodes.
///
/// The Langevin instance uses `exp(-alpha x^2/(2 sigma) + cos(x/eps)/sigma)` and
/// `exp(-alpha x^2/(2 sigma))`; general models use `s(x)^-2 exp(int_0^x 2b/s^2)`.
fn density_kernels(spec: &ModelSpec, homog: &HomogenizedSpec, grid: &QuadratureGrid) -> Result<(Vec<f64>, Vec<f64>)> {
    if let (Some((alpha, sigma)), Some(_)) = (spec.langevin_params(), homog.langevin_params()) {
        let eps = spec.eps();
        let c = alpha / (2.0 * sigma);
        let mu = grid.eval(|x| (-c * x * x).exp());
        let mu_eps = grid.eval(|x| (-c * x * x + (x / eps).cos() / sigma).exp());
        return Ok((mu_eps, mu));
    }
    let generic = |drift: &dyn Fn(f64) -> f64, diff: &dyn Fn(f64) -> f64| -> Result<Vec<f64>> {
        let q = grid.eval(|x| {
            let s = diff(x);
            2.0 * drift(x) / (s * s)
        });
        let iq = grid.anchored_cumulative(&q, 0.0)?;
        let out: Vec<f64> = grid
            .nodes()
            .iter()
            .zip(&iq)
            .map(|(&x, i)| {
                let s = diff(x);
                i.exp() / (s * s)
            })
            .collect();
        if let Some((j, _)) = out.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                x: grid.nodes()[j],
                what: "density kernel".into(),
            });
        }
        Ok(out)
    };
    let mu_eps = generic(&|x| spec.drift(x), &|x| spec.diffusion(x))?;
    let mu = generic(&|x| homog.b(x), &|x| homog.sigma_bar(x))?;
    Ok((mu_eps, mu))
}

fn fast_period(spec: &ModelSpec) -> Option<f64> {
    spec.has_fast_term().then(|| spec.period() * spec.eps())
}

/// Refines `grid` until it carries at least [`NODES_PER_PERIOD`] nodes per fast period.
pub fn resolve_fast_scale(spec: &ModelSpec, grid: &QuadratureGrid) -> Result<QuadratureGrid> {
    let mut g = grid.clone();
    if let Some(p) = fast_period(spec) {
        while g.max_gap() > p / NODES_PER_PERIOD as f64 {
            g = g.refined()?;
        }
    }
    Ok(g)
}

/// Cell constants for `spec`, with `Z` and `Z_eps` integrated on `grid`
/// (refined by halving until two successive values agree to `tol`).
pub fn compute_cell_constants(spec: &ModelSpec, grid: &QuadratureGrid, tol: f64) -> Result<CellConstants> {
    let (z_plus, z_minus) = period_averages(spec, tol)?;
    let k = 1.0 / (z_plus * z_minus);
    let homog = HomogenizedSpec::from_cell(spec, k)?;

    let mut g = resolve_fast_scale(spec, grid)?;
    let integrals = |g: &QuadratureGrid| -> Result<(f64, f64)> {
        let (ke, kl) = density_kernels(spec, &homog, g)?;
        Ok((g.integrate(&ke), g.integrate(&kl)))
    };
    let mut prev = integrals(&g)?;
    let mut change = f64::INFINITY;
    for _ in 0..6 {
        g = g.refined()?;
        let cur = integrals(&g)?;
        change = ((cur.0 - prev.0) / cur.0).abs().max(((cur.1 - prev.1) / cur.1).abs());
        prev = cur;
        if change <= tol {
            return Ok(CellConstants {
                z_plus,
                z_minus,
                k,
                z_eps: cur.0,
                z: cur.1,
            });
        }
    }
    Err(Error::QuadratureNonConvergence { change, tol })
}

/// Invariant densities of the multiscale model and of its limit on a common grid.
#[derive(Clone, Debug)]
pub struct DensityTable {
    pub grid: Arc<QuadratureGrid>,
    pub eps: f64,
    /// Fast period `period * eps`, if the model has a fast term.
    pub fast_period: Option<f64>,
    pub mu_eps: Vec<f64>,
    pub mu: Vec<f64>,
    /// Grid normalizations of the two kernels.
    pub z_eps: f64,
    pub z: f64,
    /// `c_mu`, `C_mu` with `c_mu mu <= mu_eps <= C_mu mu`.
    pub sandwich_lo: f64,
    pub sandwich_hi: f64,
    /// Drift and squared diffusion at the nodes, multiscale side.
    pub drift_eps: Vec<f64>,
    pub diff_sq_eps: Vec<f64>,
    /// Drift and squared diffusion at the nodes, limit side.
    pub drift: Vec<f64>,
    pub diff_sq: Vec<f64>,
}

/// Which of the two invariant densities a quantity refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Side {
    Multiscale,
    Limit,
}

impl DensityTable {
    pub fn density(&self, side: Side) -> &[f64] {
        match side {
            Side::Multiscale => &self.mu_eps,
            Side::Limit => &self.mu,
        }
    }

    pub fn drift_at_nodes(&self, side: Side) -> &[f64] {
        match side {
            Side::Multiscale => &self.drift_eps,
            Side::Limit => &self.drift,
        }
    }

    pub fn diffusion_sq(&self, side: Side) -> &[f64] {
        match side {
            Side::Multiscale => &self.diff_sq_eps,
            Side::Limit => &self.diff_sq,
        }
    }

    /// `int phi dmu` on the grid.
    pub fn expectation<F: Fn(f64) -> f64>(&self, side: Side, phi: F) -> f64 {
        let d = self.density(side);
        self.grid
            .nodes()
            .iter()
            .zip(self.grid.weights())
            .zip(d)
            .map(|((&x, w), m)| w * m * phi(x))
            .sum()
    }
}

pub fn invariant_density(spec: &ModelSpec, homog: &HomogenizedSpec, grid: &QuadratureGrid) -> Result<DensityTable> {
    let (ke, kl) = density_kernels(spec, homog, grid)?;
    let z_eps = grid.integrate(&ke);
    let z = grid.integrate(&kl);
    if !(z_eps > 0.0 && z > 0.0 && z_eps.is_finite() && z.is_finite()) {
        return Err(Error::Truncation(format!("density normalizations are degenerate: {z_eps}, {z}")));
    }
    let mu_eps: Vec<f64> = ke.iter().map(|v| v / z_eps).collect();
    let mu: Vec<f64> = kl.iter().map(|v| v / z).collect();

    // mass outside the grid is certified by the boundary values
    let width = grid.upper() - grid.lower();
    let n = grid.len();
    for (name, d) in [("mu_eps", &mu_eps), ("mu", &mu)] {
        let edge = d[0].max(d[n - 1]) * width;
        if edge > NORMALIZATION_TOL {
            return Err(Error::Truncation(format!(
                "{name} carries boundary mass {edge:e} on [{}, {}]",
                grid.lower(),
                grid.upper()
            )));
        }
    }

    let (sandwich_lo, sandwich_hi) = match spec.langevin_params() {
        Some((_, sigma)) if homog.langevin_params().is_some() => {
            let r = z / z_eps;
            (r * (-1.0 / sigma).exp(), r * (1.0 / sigma).exp())
        }
        _ => {
            let mut lo = f64::INFINITY;
            let mut hi: f64 = 0.0;
            for (a, b) in mu_eps.iter().zip(&mu) {
                if *b > 0.0 {
                    lo = lo.min(a / b);
                    hi = hi.max(a / b);
                }
            }
            (lo, hi)
        }
    };

    Ok(DensityTable {
        eps: spec.eps(),
        fast_period: fast_period(spec),
        drift_eps: grid.eval(|x| spec.drift(x)),
        diff_sq_eps: grid.eval(|x| spec.diffusion(x).powi(2)),
        drift: grid.eval(|x| homog.b(x)),
        diff_sq: grid.eval(|x| homog.sigma_bar(x).powi(2)),
        grid: Arc::new(grid.clone()),
        mu_eps,
        mu,
        z_eps,
        z,
        sandwich_lo,
        sandwich_hi,
    })
}

/// Scale function, speed density and related constants of one diffusion.
#[derive(Clone, Debug)]
pub struct ScaleBranch {
    pub grid: Arc<QuadratureGrid>,
    pub drift: Vec<f64>,
    pub diff_sq: Vec<f64>,
    /// `f'(x) = exp(-int_0^x 2b/s^2)`.
    pub fprime: Vec<f64>,
    /// `f(x) = int_0^x f'`.
    pub f: Vec<f64>,
    /// `rho(f(x))^2 = 1 / (s(x)^2 f'(x)^2)`.
    pub rho_sq: Vec<f64>,
    /// Speed density in original coordinates, `1 / (s^2 f')`.
    pub speed: Vec<f64>,
    /// `C_rho = int rho^2 = int 1/(s^2 f') dx`.
    pub c_rho: f64,
}

impl ScaleBranch {
    pub fn build<B, S>(grid: Arc<QuadratureGrid>, drift: B, diffusion: S) -> Result<Self>
    where
        B: Fn(f64) -> f64,
        S: Fn(f64) -> f64,
    {
        let drift_v = grid.eval(&drift);
        let diff_sq: Vec<f64> = grid.eval(|x| diffusion(x).powi(2));
        let q: Vec<f64> = drift_v.iter().zip(&diff_sq).map(|(b, s2)| 2.0 * b / s2).collect();
        let iq = grid.anchored_cumulative(&q, 0.0)?;
        let fprime: Vec<f64> = iq.iter().map(|v| (-v).exp()).collect();
        if let Some(j) = fprime.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::NonFinite {
                x: grid.nodes()[j],
                what: "scale derivative".into(),
            });
        }
        let f = grid.anchored_cumulative(&fprime, 0.0)?;
        if let Some(j) = f.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::NonMonotone { x: grid.nodes()[j] });
        }
        let speed: Vec<f64> = fprime.iter().zip(&diff_sq).map(|(fp, s2)| 1.0 / (s2 * fp)).collect();
        let rho_sq = speed.iter().zip(&fprime).map(|(m, fp)| m / fp).collect();
        let c_rho = grid.integrate(&speed);
        if !(c_rho > 0.0 && c_rho.is_finite()) {
            return Err(Error::AssumptionViolated(format!("speed normalization C_rho = {c_rho}")));
        }
        Ok(Self {
            grid,
            drift: drift_v,
            diff_sq,
            fprime,
            f,
            rho_sq,
            speed,
            c_rho,
        })
    }

    /// Maximum over interior nodes of `|b f' + (s^2/2) f''| / (f' (1 + |b|))`,
    /// with `f''` from central differences of the tabulated `f'` (five-point on
    /// uniform grids, three-point otherwise).
    pub fn harmonicity_residual(&self) -> f64 {
        let x = self.grid.nodes();
        let fp = &self.fprime;
        let n = x.len();
        let residual = |i: usize, d2: f64| {
            let b = self.drift[i];
            (b * fp[i] + 0.5 * self.diff_sq[i] * d2).abs() / (fp[i] * (1.0 + b.abs()))
        };
        match self.grid.uniform_spacing() {
            Some(h) if n >= 5 => (2..n - 2)
                .map(|i| {
                    let d2 = (8.0 * (fp[i + 1] - fp[i - 1]) - (fp[i + 2] - fp[i - 2])) / (12.0 * h);
                    residual(i, d2)
                })
                .fold(0.0, f64::max),
            _ => (1..n.saturating_sub(1))
                .map(|i| {
                    let hm = x[i] - x[i - 1];
                    let hp = x[i + 1] - x[i];
                    let d2 = (hm * hm * fp[i + 1] - hp * hp * fp[i - 1] + (hp * hp - hm * hm) * fp[i])
                        / (hp * hm * (hp + hm));
                    residual(i, d2)
                })
                .fold(0.0, f64::max),
        }
    }

    /// Transformed coordinate range `[f(lower), f(upper)]`.
    pub fn range(&self) -> (f64, f64) {
        (self.f[0], self.f[self.f.len() - 1])
    }

    /// `g = f^-1` by monotone linear interpolation.
    pub fn inverse(&self, xi: f64) -> Result<f64> {
        let (lo, hi) = self.range();
        if !(lo..=hi).contains(&xi) {
            return Err(Error::Truncation(format!(
                "transformed point {xi} outside tabulated range [{lo}, {hi}]"
            )));
        }
        let x = self.grid.nodes();
        let j = self.f.partition_point(|&v| v <= xi);
        if j == 0 {
            return Ok(x[0]);
        }
        if j >= x.len() {
            return Ok(x[x.len() - 1]);
        }
        let t = (xi - self.f[j - 1]) / (self.f[j] - self.f[j - 1]);
        Ok(x[j - 1] + t * (x[j] - x[j - 1]))
    }

    /// `f(x)` by interpolation.
    pub fn forward(&self, x: f64) -> f64 {
        self.grid.interpolate(&self.f, x)
    }

    /// Estimate of `int_{upper}^inf` (or `int_{-inf}^{lower}`) of the speed density
    /// from its decay over the outermost nodes: `envelope / log-slope`, the Mills
    /// bound for a Gaussian-type tail.
    fn tail_estimate(&self, upper_end: bool) -> Result<f64> {
        let n = self.speed.len();
        let w = (n / 50).max(4);
        let idx: Vec<usize> = if upper_end { (n - w..n).collect() } else { (0..w).rev().collect() };
        let half = w / 2;
        let x = self.grid.nodes();
        let peak = |ids: &[usize]| {
            ids.iter()
                .map(|&i| (self.speed[i], x[i]))
                .fold((0.0f64, 0.0f64), |a, b| if b.0 > a.0 { b } else { a })
        };
        let (inner, x_in) = peak(&idx[..half]);
        let (outer, x_out) = peak(&idx[half..]);
        let dist = (x_out - x_in).abs();
        if !(inner > outer && outer > 0.0 && dist > 0.0) {
            return Err(Error::Truncation("speed density does not decay at the grid boundary".into()));
        }
        let slope = (inner.ln() - outer.ln()) / dist;
        Ok(outer / slope)
    }
}

/// Scale tables of the multiscale model and of its limit on a common grid.
#[derive(Clone, Debug)]
pub struct ScaleTable {
    pub grid: Arc<QuadratureGrid>,
    pub multiscale: ScaleBranch,
    pub limit: ScaleBranch,
}

impl ScaleTable {
    /// `(min, max)` of `f'_eps / f'` over the nodes.
    pub fn fprime_ratio_bounds(&self) -> (f64, f64) {
        self.multiscale
            .fprime
            .iter()
            .zip(&self.limit.fprime)
            .map(|(a, b)| a / b)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r), hi.max(r)))
    }
}

pub fn scale_tables(spec: &ModelSpec, homog: &HomogenizedSpec, grid: &QuadratureGrid) -> Result<ScaleTable> {
    let grid = Arc::new(grid.clone());
    let multiscale = ScaleBranch::build(grid.clone(), |x| spec.drift(x), |x| spec.diffusion(x))?;
    let limit = ScaleBranch::build(grid.clone(), |x| homog.b(x), |x| homog.sigma_bar(x))?;
    Ok(ScaleTable {
        grid,
        multiscale,
        limit,
    })
}

/// Harmonicity residual of the scale function of `spec` on `grid`.
pub fn harmonicity_residual(spec: &ModelSpec, grid: &QuadratureGrid) -> Result<f64> {
    let branch = ScaleBranch::build(Arc::new(grid.clone()), |x| spec.drift(x), |x| spec.diffusion(x))?;
    Ok(branch.harmonicity_residual())
}

/// Expected exit time from `(a, b)` of the transformed process started at `x`
/// (all three in transformed coordinates).
pub fn expected_exit_time(a: f64, b: f64, x: f64, table: &ScaleBranch) -> Result<f64> {
    if !(a < b) || !(a..=b).contains(&x) {
        return Err(Error::InvalidParameter(format!("need a <= x <= b with a < b, got a={a}, x={x}, b={b}")));
    }
    let (ua, ub, ux) = (table.inverse(a)?, table.inverse(b)?, table.inverse(x)?);
    let g = &table.grid;
    let upper: Vec<f64> = table.f.iter().zip(&table.speed).map(|(f, m)| 2.0 * (b - f) * m).collect();
    let lower: Vec<f64> = table.f.iter().zip(&table.speed).map(|(f, m)| 2.0 * (f - a) * m).collect();
    let i_up = g.trapezoid_between(&upper, ux, ub);
    let i_lo = g.trapezoid_between(&lower, ua, ux);
    Ok((x - a) / (b - a) * i_up + (b - x) / (b - a) * i_lo)
}

/// Expected hitting time of level `y` for the transformed process started at `x`
/// (both in transformed coordinates). The tail integral beyond the grid is
/// estimated from the decay envelope; if that estimate exceeds 1% of the result
/// the grid is reported as too small.
pub fn expected_hitting_time(x: f64, y: f64, table: &ScaleBranch) -> Result<f64> {
    if x == y {
        return Ok(0.0);
    }
    let (ux, uy) = (table.inverse(x)?, table.inverse(y)?);
    let g = &table.grid;
    let (tail, near) = if y < x {
        let tail = g.trapezoid_between(&table.speed, ux, g.upper());
        let trunc = table.tail_estimate(true)?;
        let w: Vec<f64> = table.f.iter().zip(&table.speed).map(|(f, m)| (f - y) * m).collect();
        ((tail, trunc), g.trapezoid_between(&w, uy, ux))
    } else {
        let tail = g.trapezoid_between(&table.speed, g.lower(), ux);
        let trunc = table.tail_estimate(false)?;
        let w: Vec<f64> = table.f.iter().zip(&table.speed).map(|(f, m)| (y - f) * m).collect();
        ((tail, trunc), g.trapezoid_between(&w, ux, uy))
    };
    let d = (x - y).abs();
    let value = 2.0 * d * (tail.0 + tail.1) + 2.0 * near;
    if 2.0 * d * tail.1 > 0.01 * value {
        return Err(Error::Truncation(format!(
            "tail estimate {:e} exceeds 1% of the hitting time {value:e}",
            2.0 * d * tail.1
        )));
    }
    Ok(value)
}

/// Characteristic function of the limit density at frequency 1: `exp(-sigma_eff / (2 theta))`.
pub fn char_fn_mu(theta: f64, sigma_eff: f64) -> f64 {
    (-sigma_eff / (2.0 * theta)).exp()
}

/// `int e^{ix} mu_eps(x) dx` by quadrature.
pub fn char_fn_mu_eps(table: &DensityTable) -> Result<Complex64> {
    if let Some(p) = table.fast_period {
        let gap = table.grid.max_gap();
        if gap > p / NODES_PER_PERIOD as f64 {
            return Err(Error::Aliasing {
                spacing: gap,
                period: p,
                min_nodes: NODES_PER_PERIOD,
            });
        }
    }
    Ok(Complex64::new(
        table.expectation(Side::Multiscale, f64::cos),
        table.expectation(Side::Multiscale, f64::sin),
    ))
}

/// `int e^{ix} mu(x) dx` by quadrature.
pub fn char_fn_mu_quadrature(table: &DensityTable) -> Complex64 {
    Complex64::new(table.expectation(Side::Limit, f64::cos), table.expectation(Side::Limit, f64::sin))
}

/// Writes `x, mu, mu_eps, f, f_eps, rho_sq, rho_eps_sq` rows for plotting.
pub fn write_tables_csv<W: Write>(density: &DensityTable, scale: &ScaleTable, mut out: W) -> Result<()> {
    if density.grid.len() != scale.grid.len() {
        return Err(Error::InvalidParameter("density and scale tables use different grids".into()));
    }
    writeln!(out, "x,mu,mu_eps,f,f_eps,rho_sq,rho_eps_sq")?;
    for (i, x) in density.grid.nodes().iter().enumerate() {
        writeln!(
            out,
            "{x:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            density.mu[i],
            density.mu_eps[i],
            scale.limit.f[i],
            scale.multiscale.f[i],
            scale.limit.rho_sq[i],
            scale.multiscale.rho_sq[i]
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::evaluator;

    fn langevin(alpha: f64, sigma: f64, eps: f64) -> (ModelSpec, HomogenizedSpec, QuadratureGrid) {
        let spec = ModelSpec::langevin(alpha, sigma, eps).unwrap();
        let k = 1.0 / bessel_series(1.0 / sigma, 1e-17).powi(2);
        let homog = HomogenizedSpec::langevin(alpha, sigma, k).unwrap();
        let l = spec.truncation_half_width(1e-14);
        let h = (eps * eps / 10.0).min(1e-3);
        (spec, homog, QuadratureGrid::symmetric_simpson(l, h).unwrap())
    }

    /// Partial sums of `sum (x/2)^(2m)/(m!)^2` in a straightforward loop.
    fn series_oracle(x: f64) -> f64 {
        let mut s = 0.0;
        let mut fact = 1.0;
        for m in 0..40 {
            if m > 0 {
                fact *= m as f64;
            }
            s += (x / 2.0).powi(2 * m) / (fact * fact);
        }
        s
    }

    #[test]
    fn bessel_series_values() {
        assert_eq!(bessel_series(0.0, 1e-15), 1.0);
        assert!((bessel_series(1.0, 1e-16) - 1.266_065_877_752_008_4).abs() < 1e-15);
        for x in [0.5, 1.0, 2.0, 4.0] {
            assert!((bessel_series(x, 1e-17) - series_oracle(x)).abs() < 1e-13 * series_oracle(x));
        }
    }

    #[test]
    fn cell_constants_match_series() {
        for sigma in [0.5, 1.0, 2.0] {
            let (spec, _, grid) = langevin(1.0, sigma, 0.2);
            let c = compute_cell_constants(&spec, &grid, 1e-12).unwrap();
            let s = bessel_series(1.0 / sigma, 1e-14);
            assert!((c.z_plus - s).abs() < 1e-10, "sigma {sigma}: {} vs {s}", c.z_plus);
            assert!((c.z_minus - s).abs() < 1e-10);
            assert!(c.z_plus >= 1.0 && c.z_minus >= 1.0);
            assert!(c.k > 0.0 && c.k <= 1.0);
        }
        // 1/I0(1)^2 and 1/I0(2)^2 with 30-digit arithmetic
        let (spec, _, grid) = langevin(1.0, 1.0, 0.2);
        let c = compute_cell_constants(&spec, &grid, 1e-12).unwrap();
        assert!((c.k - 0.623_860_360_432_069_2).abs() < 1e-12);
        let (spec, _, grid) = langevin(1.0, 0.5, 0.2);
        let c = compute_cell_constants(&spec, &grid, 1e-12).unwrap();
        assert!((c.k - 0.192_436_878_491_672_7).abs() < 1e-12);
        assert!((c.z - (2.0 * PI).sqrt() * 0.5f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn no_fast_term_gives_unit_k() {
        let spec = ModelSpec::without_fast_term(evaluator(|x| -x), evaluator(|_| 2f64.sqrt()));
        let grid = QuadratureGrid::symmetric_simpson(9.0, 0.01).unwrap();
        let c = compute_cell_constants(&spec, &grid, 1e-12).unwrap();
        assert_eq!((c.z_plus, c.z_minus, c.k), (1.0, 1.0, 1.0));
        assert!((c.z_eps - c.z).abs() < 1e-14);
    }

    #[test]
    fn general_fast_drift_reproduces_langevin_k() {
        // f1(y) = -sin(2 pi y) with period 1 and s^2 = 2 sigma
        let sigma: f64 = 1.0;
        let spec = ModelSpec::general(
            evaluator(|x| -x),
            evaluator(|y| -(2.0 * PI * y).sin()),
            evaluator(move |_| (2.0f64 * sigma).sqrt()),
            1.0,
            0.1,
        )
        .unwrap()
        .with_half_width(9.0);
        let grid = QuadratureGrid::symmetric_simpson(9.0, 0.01).unwrap();
        let c = compute_cell_constants(&spec, &grid, 1e-10).unwrap();
        // P(y) = (cos(2 pi y) - 1)/(2 pi): Z+- Z-+ = I0(1/(2 pi sigma))^2
        let s = bessel_series(1.0 / (2.0 * PI * sigma), 1e-16);
        assert!((c.k - 1.0 / (s * s)).abs() < 1e-9, "{} vs {}", c.k, 1.0 / (s * s));
    }

    #[test]
    fn densities_normalize_and_sandwich() {
        let (spec, homog, grid) = langevin(1.0, 1.0, 0.1);
        let d = invariant_density(&spec, &homog, &grid).unwrap();
        for side in [Side::Multiscale, Side::Limit] {
            assert!((grid.integrate(d.density(side)) - 1.0).abs() < 1e-8);
            assert!(d.density(side).iter().all(|&v| v >= 0.0));
        }
        let k0 = grid.index_of(0.0).unwrap();
        assert!((d.mu[k0] - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-10);
        let m2 = d.expectation(Side::Limit, |x| x * x);
        assert!((m2 - 1.0).abs() < 1e-8);
        for (a, b) in d.mu_eps.iter().zip(&d.mu) {
            assert!(*a >= d.sandwich_lo * b * (1.0 - 1e-12));
            assert!(*a <= d.sandwich_hi * b * (1.0 + 1e-12));
        }
        // cos(x/eps) = 0 at x = eps pi/2: ratio is Z/Z_eps
        let x = 0.1 * PI / 2.0;
        let ratio = ((-x * x / 2.0 + (x / 0.1).cos()).exp() / d.z_eps) / ((-x * x / 2.0f64).exp() / d.z);
        assert!((ratio - d.z / d.z_eps).abs() < 1e-14);
    }

    #[test]
    fn truncated_domain_is_detected() {
        let (spec, homog, _) = langevin(1.0, 1.0, 0.2);
        let grid = QuadratureGrid::symmetric_simpson(3.0, 0.001).unwrap();
        assert!(matches!(invariant_density(&spec, &homog, &grid), Err(Error::Truncation(_))));
    }

    #[test]
    fn scale_functions_of_langevin() {
        let (spec, homog, grid) = langevin(1.0, 1.0, 0.2);
        let t = scale_tables(&spec, &homog, &grid).unwrap();
        let k0 = grid.index_of(0.0).unwrap();
        assert_eq!(t.limit.fprime[k0], 1.0);
        assert_eq!(t.limit.f[k0], 0.0);
        for (i, &x) in grid.nodes().iter().enumerate().step_by(97) {
            let exact = (x * x / 2.0).exp();
            assert!((t.limit.fprime[i] / exact - 1.0).abs() < 1e-12, "x={x}");
            let exact_eps = exact * ((1.0 - (x / 0.2).cos()) / 1.0).exp();
            assert!((t.multiscale.fprime[i] / exact_eps - 1.0).abs() < 1e-5, "x={x}");
        }
        let (lo, hi) = t.fprime_ratio_bounds();
        assert!(lo >= 1.0 - 1e-6 && hi <= 2f64.exp() * (1.0 + 1e-5), "{lo} {hi}");
        assert!(t.multiscale.f.windows(2).all(|w| w[1] > w[0]));

        // C_rho = int exp(-x^2/2) / (2K) dx = sqrt(2 pi) / (2K)
        let want = (2.0 * PI).sqrt() / (2.0 * homog.k());
        assert!((t.limit.c_rho - want).abs() < 1e-9 * want);
        assert!(t.multiscale.c_rho.is_finite() && t.multiscale.c_rho > 0.0);
    }

    #[test]
    fn speed_normalization_without_fast_term() {
        let spec = ModelSpec::langevin(1.0, 1.0, 0.2).unwrap();
        let homog = HomogenizedSpec::langevin(1.0, 1.0, 1.0).unwrap();
        let grid = QuadratureGrid::symmetric_simpson(9.0, 1e-3).unwrap();
        let t = scale_tables(&spec, &homog, &grid).unwrap();
        assert!((t.limit.c_rho - (2.0 * PI).sqrt() / 2.0).abs() < 1e-10);
    }

    #[test]
    fn harmonicity_of_simple_models() {
        let grid = QuadratureGrid::symmetric_simpson(5.0, 0.01).unwrap();
        let bm = ModelSpec::without_fast_term(evaluator(|_| 0.0), evaluator(|_| 1.3));
        assert_eq!(harmonicity_residual(&bm, &grid).unwrap(), 0.0);

        let k = 0.623_860_360_432_069_2;
        let ou = ModelSpec::from_homogenized(&HomogenizedSpec::langevin(1.0, 1.0, k).unwrap());
        let grid = QuadratureGrid::symmetric_simpson(8.0, 1e-3).unwrap();
        let r = harmonicity_residual(&ou, &grid).unwrap();
        assert!(r <= 1e-6, "{r}");
    }

    #[test]
    fn harmonicity_at_fast_scale_and_order() {
        let eps = 0.2;
        let spec = ModelSpec::langevin(1.0, 1.0, eps).unwrap();
        let l = spec.truncation_half_width(1e-14);
        let h = eps * eps / 10.0;
        let r1 = harmonicity_residual(&spec, &QuadratureGrid::symmetric_simpson(l, h).unwrap()).unwrap();
        let r2 = harmonicity_residual(&spec, &QuadratureGrid::symmetric_simpson(l, h / 2.0).unwrap()).unwrap();
        assert!(r1 <= 1e-4, "{r1}");
        let order = (r1 / r2).log2();
        assert!(order >= 1.8, "observed order {order}");
    }

    #[test]
    fn exit_time_examples() {
        let grid = QuadratureGrid::symmetric_simpson(3.0, 1e-3).unwrap();
        let bm = ModelSpec::without_fast_term(evaluator(|_| 0.0), evaluator(|_| 1.0));
        let t = ScaleBranch::build(Arc::new(grid), |x| bm.drift(x), |x| bm.diffusion(x)).unwrap();
        assert!((expected_exit_time(-1.0, 1.0, 0.0, &t).unwrap() - 1.0).abs() < 1e-10);
        assert_eq!(expected_exit_time(-1.0, 1.0, -1.0, &t).unwrap(), 0.0);
        assert_eq!(expected_exit_time(-1.0, 1.0, 1.0, &t).unwrap(), 0.0);
        // (x - a)(b - x) for Brownian motion
        let v = expected_exit_time(-1.0, 2.0, 0.5, &t).unwrap();
        assert!((v - 1.5 * 1.5).abs() < 1e-9);
        assert!(expected_exit_time(-1.0, 1.0, 1.5, &t).is_err());

        // symmetric speed density: both halves agree at the midpoint
        let (spec, homog, grid) = langevin(1.0, 1.0, 0.2);
        let st = scale_tables(&spec, &homog, &grid).unwrap();
        let b = st.limit.forward(1.0);
        let v = expected_exit_time(-b, b, 0.0, &st.limit).unwrap();
        let w: Vec<f64> = st.limit.f.iter().zip(&st.limit.speed).map(|(f, m)| 2.0 * (b - f) * m).collect();
        let half = grid.trapezoid_between(&w, 0.0, st.limit.inverse(b).unwrap());
        assert!((v - half).abs() < 1e-12 * v);
    }

    #[test]
    fn hitting_time_bound_and_identity() {
        let (spec, homog, grid) = langevin(1.0, 1.0, 0.2);
        let st = scale_tables(&spec, &homog, &grid).unwrap();
        assert_eq!(expected_hitting_time(0.3, 0.3, &st.multiscale).unwrap(), 0.0);
        for (x0, y0) in [(1.0, 0.0), (0.0, 1.0), (-0.5, 1.5), (2.0, -1.0)] {
            for br in [&st.limit, &st.multiscale] {
                let (x, y) = (br.forward(x0), br.forward(y0));
                let v = expected_hitting_time(x, y, br).unwrap();
                assert!(v > 0.0);
                assert!(v <= 4.0 * br.c_rho * (x - y).abs());
            }
        }
    }

    #[test]
    fn char_fn_limits_and_quadrature() {
        assert!((char_fn_mu(1.0, 2.0) - (-1.0f64).exp()).abs() < 1e-16);
        assert!((char_fn_mu(1e12, 1.0) - 1.0).abs() < 1e-11);
        let (spec, homog, grid) = langevin(1.0, 1.0, 0.2);
        let d = invariant_density(&spec, &homog, &grid).unwrap();
        let k = homog.k();
        let q = char_fn_mu_quadrature(&d);
        assert!((char_fn_mu(k, k) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((q.re - char_fn_mu(k, k)).abs() < 1e-8);
        assert!(q.im.abs() < 1e-14);
        let c = char_fn_mu_eps(&d).unwrap();
        assert!(c.im.abs() <= 1e-10);
    }

    #[test]
    fn char_fn_aliasing_guard() {
        let spec = ModelSpec::langevin(1.0, 1.0, 0.05).unwrap();
        let homog = HomogenizedSpec::langevin(1.0, 1.0, 0.6).unwrap();
        let grid = QuadratureGrid::symmetric_simpson(9.0, 0.05).unwrap();
        let d = invariant_density(&spec, &homog, &grid).unwrap();
        assert!(matches!(char_fn_mu_eps(&d), Err(Error::Aliasing { .. })));
    }

    #[test]
    fn no_fast_term_char_fn_equals_limit() {
        let spec = ModelSpec::without_fast_term(evaluator(|x| -0.7 * x), evaluator(|_| 1.2));
        let homog = HomogenizedSpec::general(evaluator(|x| -0.7 * x), evaluator(|_| 1.2));
        let grid = QuadratureGrid::symmetric_simpson(10.0, 1e-3).unwrap();
        let d = invariant_density(&spec, &homog, &grid).unwrap();
        let a = char_fn_mu_eps(&d).unwrap();
        let b = char_fn_mu_quadrature(&d);
        assert!((a - b).norm() < 1e-14);
        // variance s^2/(2 theta) = 1.44/1.4
        assert!((a.re - (-1.44 / 2.8f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let (spec, homog, _) = langevin(1.0, 1.0, 0.2);
        let grid = QuadratureGrid::symmetric_simpson(9.0, 0.05).unwrap();
        let d = invariant_density(&spec, &homog, &grid).unwrap();
        let s = scale_tables(&spec, &homog, &grid).unwrap();
        let mut buf = Vec::new();
        write_tables_csv(&d, &s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "x,mu,mu_eps,f,f_eps,rho_sq,rho_eps_sq");
        assert_eq!(lines.count(), grid.len());
    }
}
