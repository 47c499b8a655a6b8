//! Fixed quadrature grids shared by every analytic table.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    CompositeSimpson,
    GaussLegendrePanels { order: usize },
}

/// Ordered nodes with positive weights on `[lower, upper]`.
#[derive(Clone, Debug)]
pub struct QuadratureGrid {
    lower: f64,
    upper: f64,
    scheme: Scheme,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureGrid {
    /// Composite Simpson rule with `n_nodes` (odd, >= 3) equispaced nodes.
    pub fn simpson(lower: f64, upper: f64, n_nodes: usize) -> Result<Self> {
        if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
            return Err(Error::InvalidParameter(format!("need lower < upper, got [{lower}, {upper}]")));
        }
        if n_nodes < 3 || n_nodes.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "Simpson needs an odd node count >= 3, got {n_nodes}"
            )));
        }
        let h = (upper - lower) / (n_nodes - 1) as f64;
        let nodes = (0..n_nodes)
            .map(|i| if i == n_nodes - 1 { upper } else { lower + i as f64 * h })
            .collect();
        Ok(Self {
            lower,
            upper,
            scheme: Scheme::CompositeSimpson,
            nodes,
            weights: simpson_weights(n_nodes, h),
        })
    }

    /// Simpson grid on `[-m h, m h]` with `h <= max_spacing` and `m h >= half_width`.
    ///
    /// Nodes are `(i - m) h`, so the grid is exactly symmetric and contains 0.
    pub fn symmetric_simpson(half_width: f64, max_spacing: f64) -> Result<Self> {
        if !(half_width > 0.0 && max_spacing > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "half width and spacing must be > 0 (got {half_width}, {max_spacing})"
            )));
        }
        let m = (half_width / max_spacing).ceil().max(1.0) as usize;
        Self::symmetric_with_intervals(m, half_width / m as f64)
    }

    fn symmetric_with_intervals(m: usize, h: f64) -> Result<Self> {
        let n = 2 * m + 1;
        if n > 50_000_001 {
            return Err(Error::InvalidParameter(format!("grid with {n} nodes is too large")));
        }
        let nodes: Vec<f64> = (0..n).map(|i| (i as f64 - m as f64) * h).collect();
        Ok(Self {
            lower: nodes[0],
            upper: nodes[n - 1],
            scheme: Scheme::CompositeSimpson,
            nodes,
            weights: simpson_weights(n, h),
        })
    }

    /// `panels` equal panels, each carrying an `order`-point Gauss-Legendre rule.
    pub fn gauss_legendre(lower: f64, upper: f64, panels: usize, order: usize) -> Result<Self> {
        if !(lower < upper) || panels == 0 || order < 1 {
            return Err(Error::InvalidParameter("invalid Gauss-Legendre panel layout".into()));
        }
        let (xs, ws) = gauss_legendre_rule(order);
        let width = (upper - lower) / panels as f64;
        let mut nodes = Vec::with_capacity(panels * order);
        let mut weights = Vec::with_capacity(panels * order);
        for p in 0..panels {
            let a = lower + p as f64 * width;
            let mid = a + 0.5 * width;
            for (x, w) in xs.iter().zip(&ws) {
                nodes.push(mid + 0.5 * width * x);
                weights.push(0.5 * width * w);
            }
        }
        Ok(Self {
            lower,
            upper,
            scheme: Scheme::GaussLegendrePanels { order },
            nodes,
            weights,
        })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Spacing of an equispaced grid.
    pub fn uniform_spacing(&self) -> Option<f64> {
        match self.scheme {
            Scheme::CompositeSimpson => Some((self.upper - self.lower) / (self.len() - 1) as f64),
            Scheme::GaussLegendrePanels { .. } => None,
        }
    }

    /// Largest distance between consecutive nodes.
    pub fn max_gap(&self) -> f64 {
        self.nodes.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    /// Index of a node located exactly at `x`.
    pub fn index_of(&self, x: f64) -> Option<usize> {
        self.nodes.binary_search_by(|n| n.total_cmp(&x)).ok()
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }

    pub fn integrate_fn<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, w)| w * f(x)).sum()
    }

    pub fn eval<F: Fn(f64) -> f64>(&self, f: F) -> Vec<f64> {
        self.nodes.iter().map(|&x| f(x)).collect()
    }

    pub fn eval_complex<F: Fn(f64) -> Complex64>(&self, f: F) -> Vec<Complex64> {
        self.nodes.iter().map(|&x| f(x)).collect()
    }

    /// `C_i = int_{x_0}^{x_i} v` by the trapezoid rule along the nodes.
    pub fn cumulative_trapezoid(&self, values: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(values.len());
        let mut acc = 0.0;
        out.push(0.0);
        for i in 1..values.len() {
            acc += 0.5 * (values[i] + values[i - 1]) * (self.nodes[i] - self.nodes[i - 1]);
            out.push(acc);
        }
        out
    }

    /// `R_i = int_{x_i}^{x_last} v`, accumulated from the upper end.
    pub fn reverse_cumulative_trapezoid(&self, values: &[f64]) -> Vec<f64> {
        let n = values.len();
        let mut out = vec![0.0; n];
        let mut acc = 0.0;
        for i in (0..n.saturating_sub(1)).rev() {
            acc += 0.5 * (values[i] + values[i + 1]) * (self.nodes[i + 1] - self.nodes[i]);
            out[i] = acc;
        }
        out
    }

    /// Integrals over each cell `[x_i, x_{i+1}]`. Uniform grids with at least four
    /// nodes use the cubic through the four surrounding nodes (fourth order); other
    /// grids use the trapezoid rule.
    pub fn cell_integrals(&self, values: &[f64]) -> Vec<f64> {
        let n = values.len();
        let x = &self.nodes;
        match self.uniform_spacing() {
            Some(h) if n >= 4 => {
                let edge = |a: f64, b: f64, c: f64, d: f64| h / 24.0 * (9.0 * a + 19.0 * b - 5.0 * c + d);
                (0..n - 1)
                    .map(|i| {
                        if i == 0 {
                            edge(values[0], values[1], values[2], values[3])
                        } else if i == n - 2 {
                            edge(values[n - 1], values[n - 2], values[n - 3], values[n - 4])
                        } else {
                            h / 24.0 * (13.0 * (values[i] + values[i + 1]) - (values[i - 1] + values[i + 2]))
                        }
                    })
                    .collect()
            }
            _ => (0..n - 1)
                .map(|i| 0.5 * (values[i] + values[i + 1]) * (x[i + 1] - x[i]))
                .collect(),
        }
    }

    /// Cumulative integral anchored at `x = anchor`: `A_i = int_anchor^{x_i} v`,
    /// built from [`Self::cell_integrals`].
    pub fn anchored_cumulative(&self, values: &[f64], anchor: f64) -> Result<Vec<f64>> {
        if !(self.lower..=self.upper).contains(&anchor) {
            return Err(Error::InvalidParameter(format!(
                "anchor {anchor} outside [{}, {}]",
                self.lower, self.upper
            )));
        }
        let cells = self.cell_integrals(values);
        let n = values.len();
        let mut out = vec![0.0; n];
        if let Some(k) = self.index_of(anchor) {
            // accumulate outward from the anchor node so the anchor value is exactly 0
            for i in k + 1..n {
                out[i] = out[i - 1] + cells[i - 1];
            }
            for i in (0..k).rev() {
                out[i] = out[i + 1] - cells[i];
            }
            return Ok(out);
        }
        for i in 1..n {
            out[i] = out[i - 1] + cells[i - 1];
        }
        let shift = self.interpolate(&out, anchor);
        Ok(out.into_iter().map(|v| v - shift).collect())
    }

    /// Piecewise-linear interpolation of nodal values, clamped at the ends.
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        let n = self.nodes.len();
        if x <= self.nodes[0] {
            return values[0];
        }
        if x >= self.nodes[n - 1] {
            return values[n - 1];
        }
        let j = self.nodes.partition_point(|&v| v <= x);
        let (x0, x1) = (self.nodes[j - 1], self.nodes[j]);
        let t = (x - x0) / (x1 - x0);
        values[j - 1] + t * (values[j] - values[j - 1])
    }

    /// `int_a^b v` for `a <= b` inside the grid, by the trapezoid rule on the
    /// linear interpolant (partial cells at both ends).
    pub fn trapezoid_between(&self, values: &[f64], a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        let a = a.max(self.lower);
        let b = b.min(self.upper);
        if b <= a {
            return 0.0;
        }
        let ia = self.nodes.partition_point(|&v| v <= a);
        let ib = self.nodes.partition_point(|&v| v < b);
        let va = self.interpolate(values, a);
        let vb = self.interpolate(values, b);
        if ia >= ib {
            return 0.5 * (va + vb) * (b - a);
        }
        let mut acc = 0.5 * (va + values[ia]) * (self.nodes[ia] - a);
        for i in ia + 1..ib {
            acc += 0.5 * (values[i] + values[i - 1]) * (self.nodes[i] - self.nodes[i - 1]);
        }
        acc + 0.5 * (values[ib - 1] + vb) * (b - self.nodes[ib - 1])
    }

    /// Grid with halved spacing (Simpson) or doubled panel count (Gauss-Legendre).
    pub fn refined(&self) -> Result<Self> {
        match self.scheme {
            Scheme::CompositeSimpson => {
                let symmetric = self.lower == -self.upper && self.index_of(0.0).is_some();
                if symmetric {
                    let m = (self.len() - 1) / 2;
                    Self::symmetric_with_intervals(2 * m, self.upper / (2 * m) as f64)
                } else {
                    Self::simpson(self.lower, self.upper, 2 * self.len() - 1)
                }
            }
            Scheme::GaussLegendrePanels { order } => {
                let panels = self.len() / order;
                Self::gauss_legendre(self.lower, self.upper, 2 * panels, order)
            }
        }
    }
}

fn simpson_weights(n: usize, h: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let c = if i == 0 || i == n - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            c * h / 3.0
        })
        .collect()
}

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        xs[i] = -x;
        xs[n - 1 - i] = x;
        ws[i] = w;
        ws[n - 1 - i] = w;
    }
    (xs, ws)
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Mean of a `period`-periodic function over one period by the equispaced
/// (periodic trapezoid) rule, doubling the node count until two successive
/// values differ by less than `tol`.
pub fn periodic_mean<F: Fn(f64) -> f64>(f: F, period: f64, tol: f64) -> Result<f64> {
    let mut n = 16usize;
    let mean = |n: usize| (0..n).map(|i| f(period * i as f64 / n as f64)).sum::<f64>() / n as f64;
    let mut prev = mean(n);
    let mut change = f64::INFINITY;
    while n < 1 << 22 {
        n *= 2;
        let cur = mean(n);
        change = (cur - prev).abs();
        if change <= tol * cur.abs().max(1.0) {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(Error::QuadratureNonConvergence { change, tol })
}
