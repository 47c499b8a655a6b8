//! One-dimensional Poisson equation `-A Phi = h` by the explicit double-integral
//! formula, and the asymptotic variances `int s^2 Phi'^2 dmu`.

use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use serde::Serialize;

use crate::analytic::{DensityTable, Side};
use crate::error::{Error, Result};
use crate::quadrature::QuadratureGrid;

/// Largest tolerated `|H(upper)|`.
pub const CENTERING_TOL: f64 = 1e-6;

/// Dirichlet-form mismatch limit, relative to `1 + tau^2`.
pub const DIRICHLET_TOL: f64 = 1e-5;

/// One real channel of a centered test function, tabulated at the grid nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Channel {
    pub values: Vec<f64>,
    pub subtracted_mean: f64,
    pub sup_norm: f64,
}

/// A test function centered against one of the invariant densities. Complex
/// tests carry a real and an imaginary channel.
#[derive(Clone, Debug, PartialEq)]
pub struct CenteredTest {
    pub side: Side,
    pub channels: Vec<Channel>,
}

impl CenteredTest {
    pub fn subtracted_mean(&self) -> Complex64 {
        Complex64::new(
            self.channels[0].subtracted_mean,
            self.channels.get(1).map_or(0.0, |c| c.subtracted_mean),
        )
    }

    pub fn is_complex(&self) -> bool {
        self.channels.len() == 2
    }
}

fn center_channel(values: Vec<f64>, density: &DensityTable, side: Side) -> Channel {
    let g = &density.grid;
    let mu = density.density(side);
    let mass = g.integrate(mu);
    let weighted: Vec<f64> = values.iter().zip(mu).map(|(h, m)| h * m).collect();
    let mean = g.integrate(&weighted) / mass;
    let values: Vec<f64> = values.into_iter().map(|h| h - mean).collect();
    let sup_norm = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Channel {
        values,
        subtracted_mean: mean,
        sup_norm,
    }
}

/// Subtracts `int h dmu` so that the centered test integrates to zero.
pub fn center_test<F: Fn(f64) -> f64>(h: F, density: &DensityTable, side: Side) -> CenteredTest {
    CenteredTest {
        side,
        channels: vec![center_channel(density.grid.eval(h), density, side)],
    }
}

/// Complex test, centered channel-wise.
pub fn center_complex_test<F: Fn(f64) -> Complex64>(h: F, density: &DensityTable, side: Side) -> CenteredTest {
    let v: Vec<Complex64> = density.grid.eval_complex(h);
    let re = v.iter().map(|z| z.re).collect();
    let im = v.iter().map(|z| z.im).collect();
    CenteredTest {
        side,
        channels: vec![center_channel(re, density, side), center_channel(im, density, side)],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChannelSolution {
    pub phi: Vec<f64>,
    pub phi_prime: Vec<f64>,
    pub tau_sq: f64,
    pub dirichlet_gap: f64,
}

#[derive(Clone, Debug)]
pub struct PoissonSolution {
    pub grid: Arc<QuadratureGrid>,
    pub side: Side,
    pub channels: Vec<ChannelSolution>,
    /// Sum of the channel variances.
    pub tau_sq: f64,
    /// Largest channel mismatch.
    pub dirichlet_gap: f64,
}

impl PoissonSolution {
    pub fn phi(&self) -> &[f64] {
        &self.channels[0].phi
    }

    pub fn phi_prime(&self) -> &[f64] {
        &self.channels[0].phi_prime
    }

    pub fn max_abs_phi_prime(&self) -> f64 {
        self.channels
            .iter()
            .flat_map(|c| c.phi_prime.iter())
            .fold(0.0f64, |a, v| a.max(v.abs()))
    }

    pub fn summary(&self) -> PoissonSummary {
        PoissonSummary {
            tau_sq: self.tau_sq,
            dirichlet_gap: self.dirichlet_gap,
            channel_tau_sq: self.channels.iter().map(|c| c.tau_sq).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PoissonSummary {
    pub tau_sq: f64,
    pub dirichlet_gap: f64,
    pub channel_tau_sq: Vec<f64>,
}

/// `H(y) = int_lower^y h mu` for `y <= 0` and `-int_y^upper h mu` for `y > 0`.
/// Both agree when `h` is centered; the split keeps each tail accurate
/// where `mu` is small. Returns `(H, H(upper))` with `H(upper)` from the left sum.
fn inner_integral(grid: &QuadratureGrid, weighted: &[f64]) -> (Vec<f64>, f64) {
    let cells = grid.cell_integrals(weighted);
    let x = grid.nodes();
    let n = x.len();
    let mut left = vec![0.0; n];
    for i in 1..n {
        left[i] = left[i - 1] + cells[i - 1];
    }
    let mut right = vec![0.0; n];
    for i in (0..n - 1).rev() {
        right[i] = right[i + 1] + cells[i];
    }
    let h = (0..n).map(|i| if x[i] <= 0.0 { left[i] } else { -right[i] }).collect();
    (h, left[n - 1])
}

fn solve_channel(ch: &Channel, density: &DensityTable, side: Side) -> Result<ChannelSolution> {
    let g = &density.grid;
    let mu = density.density(side);
    let s2 = density.diffusion_sq(side);
    let weighted: Vec<f64> = ch.values.iter().zip(mu).map(|(h, m)| h * m).collect();
    let (big_h, h_upper) = inner_integral(g, &weighted);
    if h_upper.abs() > CENTERING_TOL {
        return Err(Error::CenteringDrift { drift: h_upper.abs() });
    }
    let phi_prime: Vec<f64> = big_h
        .iter()
        .zip(s2)
        .zip(mu)
        .map(|((h, s2), m)| if *m > 0.0 { -2.0 * h / (s2 * m) } else { 0.0 })
        .collect();
    if let Some(j) = phi_prime.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            x: g.nodes()[j],
            what: "Phi'".into(),
        });
    }
    let phi = g.anchored_cumulative(&phi_prime, 0.0)?;
    let (tau_sq, dirichlet_gap) = channel_variance(g, &phi, &phi_prime, &ch.values, mu, s2);
    Ok(ChannelSolution {
        phi,
        phi_prime,
        tau_sq,
        dirichlet_gap,
    })
}

/// `(int s^2 Phi'^2 mu, |int (s^2/2) Phi'^2 mu - int Phi h mu|)`.
fn channel_variance(g: &QuadratureGrid, phi: &[f64], phi_prime: &[f64], h: &[f64], mu: &[f64], s2: &[f64]) -> (f64, f64) {
    let energy: Vec<f64> = phi_prime.iter().zip(s2).zip(mu).map(|((p, s), m)| s * p * p * m).collect();
    let tau_sq = g.integrate(&energy);
    let cross: Vec<f64> = phi.iter().zip(h).zip(mu).map(|((p, h), m)| p * h * m).collect();
    (tau_sq, (0.5 * tau_sq - g.integrate(&cross)).abs())
}

/// Solves `-A Phi = h` for each channel of a test centered against `density`.
pub fn solve_poisson(test: &CenteredTest, density: &DensityTable) -> Result<PoissonSolution> {
    for ch in &test.channels {
        if ch.values.len() != density.grid.len() {
            return Err(Error::InvalidParameter("test tabulated on a different grid".into()));
        }
    }
    let channels = test
        .channels
        .iter()
        .map(|ch| solve_channel(ch, density, test.side))
        .collect::<Result<Vec<_>>>()?;
    let sol = PoissonSolution {
        grid: density.grid.clone(),
        side: test.side,
        tau_sq: channels.iter().map(|c| c.tau_sq).sum(),
        dirichlet_gap: channels.iter().map(|c| c.dirichlet_gap).fold(0.0, f64::max),
        channels,
    };
    for c in &sol.channels {
        if c.dirichlet_gap > DIRICHLET_TOL * (1.0 + c.tau_sq) {
            return Err(Error::DirichletGap {
                gap: c.dirichlet_gap,
                limit: DIRICHLET_TOL * (1.0 + c.tau_sq),
            });
        }
    }
    Ok(sol)
}

/// Recomputes `tau^2` (summed over channels) from a solution and the density it
/// was built on, failing if the Dirichlet-form identity is violated.
pub fn asymptotic_variance(sol: &PoissonSolution, test: &CenteredTest, density: &DensityTable) -> Result<f64> {
    if sol.grid.len() != density.grid.len() || test.channels.len() != sol.channels.len() {
        return Err(Error::InvalidParameter("solution, test and density do not match".into()));
    }
    let mu = density.density(sol.side);
    let s2 = density.diffusion_sq(sol.side);
    let mut total = 0.0;
    for (c, t) in sol.channels.iter().zip(&test.channels) {
        let (tau, gap) = channel_variance(&density.grid, &c.phi, &c.phi_prime, &t.values, mu, s2);
        let limit = DIRICHLET_TOL * (1.0 + tau);
        if gap > limit {
            return Err(Error::DirichletGap { gap, limit });
        }
        total += tau;
    }
    Ok(total)
}

/// Largest `|-(b Phi' + (s^2/2) Phi'') - h| / sup|h|` over interior nodes,
/// with `Phi''` from central differences of `Phi'`.
pub fn poisson_residual(sol: &PoissonSolution, test: &CenteredTest, density: &DensityTable) -> f64 {
    let g = &density.grid;
    let b = density.drift_at_nodes(sol.side);
    let s2 = density.diffusion_sq(sol.side);
    let x = g.nodes();
    let n = x.len();
    let mut worst: f64 = 0.0;
    for (c, t) in sol.channels.iter().zip(&test.channels) {
        if t.sup_norm == 0.0 {
            continue;
        }
        let p = &c.phi_prime;
        let second = |i: usize| match g.uniform_spacing() {
            Some(h) => (8.0 * (p[i + 1] - p[i - 1]) - (p[i + 2] - p[i - 2])) / (12.0 * h),
            None => {
                let hm = x[i] - x[i - 1];
                let hp = x[i + 1] - x[i];
                (hm * hm * p[i + 1] - hp * hp * p[i - 1] + (hp * hp - hm * hm) * p[i]) / (hp * hm * (hp + hm))
            }
        };
        for i in 2..n.saturating_sub(2) {
            let lhs = -(b[i] * p[i] + 0.5 * s2[i] * second(i));
            worst = worst.max((lhs - t.values[i]).abs() / t.sup_norm);
        }
    }
    worst
}

/// `x, Phi, Phi_prime` rows (plus imaginary columns for complex tests).
pub fn write_solution_csv<W: Write>(sol: &PoissonSolution, mut out: W) -> Result<()> {
    let complex = sol.channels.len() == 2;
    if complex {
        writeln!(out, "x,Phi,Phi_prime,Phi_im,Phi_prime_im")?;
    } else {
        writeln!(out, "x,Phi,Phi_prime")?;
    }
    for (i, x) in sol.grid.nodes().iter().enumerate() {
        let c = &sol.channels[0];
        write!(out, "{x:.17e},{:.17e},{:.17e}", c.phi[i], c.phi_prime[i])?;
        if complex {
            let c = &sol.channels[1];
            write!(out, ",{:.17e},{:.17e}", c.phi[i], c.phi_prime[i])?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn write_summary_json<W: Write>(sol: &PoissonSolution, out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, &sol.summary())?;
    Ok(())
}
