//! Experiment configuration, orchestration and file emission.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::analytic::{
    bessel_series, char_fn_mu, char_fn_mu_eps, compute_cell_constants, expected_hitting_time, invariant_density,
    scale_tables, write_tables_csv, DensityTable, Side,
};
use crate::error::{Error, Result};
use crate::estimator::{
    consistency_experiment, delta_method_scale, inverse_char, normality_experiment, EstimateRecord, EstimatorConfig,
};
use crate::model::{
    check_assumption_clt, DtRule, HomogenizedSpec, ModelFamily, ModelSpec, ScheduleConfig, TRUNCATION_ENVELOPE,
};
use crate::poisson::{center_test, poisson_residual, solve_poisson, write_solution_csv, write_summary_json};
use crate::quadrature::QuadratureGrid;
use crate::sdesim::{
    endpoint_tail_statistic, first_passage, replicate_map, simulate_replicates, Observable, PathSimConfig,
};
use crate::stats::{ks_critical_value, ks_statistic_normal, mean_and_se, median, Histogram};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    #[default]
    Coeff,
    Met,
    Clt,
    Estimate,
    Tail,
    Poisson,
    Hitting,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::Coeff,
        ExperimentKind::Met,
        ExperimentKind::Clt,
        ExperimentKind::Estimate,
        ExperimentKind::Tail,
        ExperimentKind::Poisson,
        ExperimentKind::Hitting,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Coeff => "coeff",
            ExperimentKind::Met => "met",
            ExperimentKind::Clt => "clt",
            ExperimentKind::Estimate => "estimate",
            ExperimentKind::Tail => "tail",
            ExperimentKind::Poisson => "poisson",
            ExperimentKind::Hitting => "hitting",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub alpha: f64,
    pub sigma: f64,
    pub x0: f64,
    pub eps: Vec<f64>,
    /// Radius `S` beyond which the dissipativity condition is checked.
    pub dissipativity_radius: f64,
    pub gamma: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            sigma: 1.0,
            x0: 0.0,
            eps: vec![0.2, 0.1, 0.05],
            dissipativity_radius: 1.0,
            gamma: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(rename = "C")]
    pub c: f64,
    pub eta: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { c: 1.0, eta: 1.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    /// `dt = eps^2 / dt_divisor` unless `dt` is given.
    pub dt_divisor: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    pub n_replicates: usize,
    pub base_seed: u64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            dt_divisor: 20.0,
            dt: None,
            n_replicates: 50,
            base_seed: 0,
            workers: 0,
        }
    }
}

impl SimulationSection {
    pub fn dt_rule(&self) -> DtRule {
        match self.dt {
            Some(dt) => DtRule::Fixed(dt),
            None => DtRule::EpsSquaredOver(self.dt_divisor),
        }
    }

    pub fn worker_count(&self) -> Option<usize> {
        (self.workers > 0).then_some(self.workers)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureSection {
    /// Half-width `L`; defaults to where the Gaussian envelope drops below 1e-14.
    #[serde(rename = "L", skip_serializing_if = "Option::is_none")]
    pub half_width: Option<f64>,
    /// Fixed node count (odd); overrides the spacing rule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_nodes: Option<usize>,
    /// Spacing `min(eps^2 / spacing_divisor, max_spacing)`.
    pub spacing_divisor: f64,
    pub max_spacing: f64,
    pub tol: f64,
}

impl Default for QuadratureSection {
    fn default() -> Self {
        Self {
            half_width: None,
            n_nodes: None,
            spacing_divisor: 10.0,
            max_spacing: 1e-3,
            tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub directory: String,
    /// Any of `json`, `csv`, `dat`.
    pub formats: Vec<String>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: "out".into(),
            formats: vec!["json".into(), "csv".into(), "dat".into()],
        }
    }
}

/// Pass/fail thresholds; defaults are the acceptance values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub k_agreement: f64,
    pub met_final_mse: f64,
    pub clt_ks: f64,
    pub consistency_median: f64,
    pub normality_ks: f64,
    pub delta_fd_rel: f64,
    pub tail_final: f64,
    pub dirichlet_rel: f64,
    pub phi_prime_variation: f64,
    pub hitting_se: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            k_agreement: 1e-8,
            met_final_mse: 0.01,
            clt_ks: 0.12,
            consistency_median: 0.15,
            normality_ks: 0.12,
            delta_fd_rel: 1e-5,
            tail_final: 0.05,
            dirichlet_rel: 1e-5,
            phi_prime_variation: 0.2,
            hitting_se: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetSection {
    /// `cos`, `sin`, `indicator(a, b)` or `const(c)`.
    pub test_functions: Vec<String>,
}

impl Default for MetSection {
    fn default() -> Self {
        Self {
            test_functions: vec!["cos".into(), "indicator(-1, 1)".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CltSection {
    /// Fixed horizon; the schedule is used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    pub n_replicates: usize,
    pub bins: usize,
    pub hist_lo: f64,
    pub hist_hi: f64,
}

impl Default for CltSection {
    fn default() -> Self {
        Self {
            horizon: None,
            n_replicates: 200,
            bins: 30,
            hist_lo: -4.0,
            hist_hi: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateSection {
    pub consistency_replicates: usize,
    /// Scale of the normality run; the last schedule value when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normality_eps: Option<f64>,
    pub normality_horizon: f64,
    /// 0 skips the normality run.
    pub normality_replicates: usize,
    pub theta_min: f64,
    pub theta_max: f64,
    pub projection_floor: f64,
}

impl Default for EstimateSection {
    fn default() -> Self {
        Self {
            consistency_replicates: 20,
            normality_eps: None,
            normality_horizon: 400.0,
            normality_replicates: 200,
            theta_min: crate::estimator::DEFAULT_THETA_MIN,
            theta_max: crate::estimator::DEFAULT_THETA_MAX,
            projection_floor: crate::estimator::DEFAULT_PROJECTION_FLOOR,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TailSection {
    pub delta: f64,
    pub n_replicates: usize,
}

impl Default for TailSection {
    fn default() -> Self {
        Self {
            delta: 0.5,
            n_replicates: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HittingModel {
    /// Homogenized Ornstein-Uhlenbeck limit.
    #[default]
    Limit,
    /// Multiscale model at the first scale of the list.
    Multiscale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HittingSection {
    pub model: HittingModel,
    pub start: f64,
    pub target: f64,
    pub n_replicates: usize,
    pub dt: f64,
    pub horizon: f64,
}

impl Default for HittingSection {
    fn default() -> Self {
        Self {
            model: HittingModel::Limit,
            start: 1.0,
            target: 0.0,
            n_replicates: 2000,
            dt: 2e-5,
            horizon: 60.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub simulation: SimulationSection,
    pub quadrature: QuadratureSection,
    pub output: OutputSection,
    pub thresholds: Thresholds,
    pub met: MetSection,
    pub clt: CltSection,
    pub estimate: EstimateSection,
    pub tail: TailSection,
    pub hitting: HittingSection,
}

fn require_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be finite and > 0, got {v}")))
    }
}

fn require_count(name: &str, n: usize) -> Result<()> {
    if n > 0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be at least 1")))
    }
}

/// Parses `cos`, `sin`, `indicator(a, b)` and `const(c)`.
pub fn parse_observable(s: &str) -> Result<Observable> {
    let t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    let args = |prefix: &str| -> Option<Vec<f64>> {
        let inner = t.strip_prefix(prefix)?.strip_prefix('(')?.strip_suffix(')')?;
        inner.split(',').map(|a| a.parse().ok()).collect()
    };
    match t.as_str() {
        "cos" => return Ok(Observable::Cos),
        "sin" => return Ok(Observable::Sin),
        _ => {}
    }
    if let Some(v) = args("indicator") {
        if let [lo, hi] = v[..] {
            if lo < hi {
                return Ok(Observable::Indicator { lo, hi });
            }
        }
    }
    if let Some(v) = args("const") {
        if let [c] = v[..] {
            return Ok(Observable::Constant(c));
        }
    }
    Err(Error::Config(format!("unrecognized test function {s:?}")))
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig::new(self.model.eps.clone(), self.schedule.c, self.schedule.eta)
            .with_dt_rule(self.simulation.dt_rule())
    }

    pub fn estimator_config(&self, sigma_eff: f64) -> EstimatorConfig {
        EstimatorConfig {
            sigma_eff,
            theta_min: self.estimate.theta_min,
            theta_max: self.estimate.theta_max,
            projection_floor: self.estimate.projection_floor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        require_positive("model.alpha", m.alpha)?;
        require_positive("model.sigma", m.sigma)?;
        require_positive("model.dissipativity_radius", m.dissipativity_radius)?;
        require_positive("model.gamma", m.gamma)?;
        if !m.x0.is_finite() {
            return Err(Error::Config("model.x0 must be finite".into()));
        }
        if m.eps.is_empty() {
            return Err(Error::Config("model.eps must be nonempty".into()));
        }
        for &e in &m.eps {
            require_positive("model.eps", e)?;
        }
        if m.eps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("model.eps must be strictly decreasing".into()));
        }
        require_positive("schedule.C", self.schedule.c)?;
        if !self.schedule.eta.is_finite() {
            return Err(Error::Config("schedule.eta must be finite".into()));
        }
        let s = &self.simulation;
        require_positive("simulation.dt_divisor", s.dt_divisor)?;
        if let Some(dt) = s.dt {
            require_positive("simulation.dt", dt)?;
        }
        let q = &self.quadrature;
        if let Some(l) = q.half_width {
            require_positive("quadrature.L", l)?;
        }
        if let Some(n) = q.n_nodes {
            if n < 3 || n.is_multiple_of(2) {
                return Err(Error::Config(format!("quadrature.n_nodes must be odd and >= 3, got {n}")));
            }
        }
        require_positive("quadrature.spacing_divisor", q.spacing_divisor)?;
        require_positive("quadrature.max_spacing", q.max_spacing)?;
        require_positive("quadrature.tol", q.tol)?;
        for f in &self.output.formats {
            if !["json", "csv", "dat"].contains(&f.as_str()) {
                return Err(Error::Config(format!("unknown output format {f:?}")));
            }
        }
        let t = &self.thresholds;
        for (name, v) in [
            ("k_agreement", t.k_agreement),
            ("met_final_mse", t.met_final_mse),
            ("clt_ks", t.clt_ks),
            ("consistency_median", t.consistency_median),
            ("normality_ks", t.normality_ks),
            ("delta_fd_rel", t.delta_fd_rel),
            ("tail_final", t.tail_final),
            ("dirichlet_rel", t.dirichlet_rel),
            ("phi_prime_variation", t.phi_prime_variation),
            ("hitting_se", t.hitting_se),
        ] {
            require_positive(&format!("thresholds.{name}"), v)?;
        }
        match self.experiment {
            ExperimentKind::Coeff | ExperimentKind::Poisson => {}
            ExperimentKind::Met => {
                require_count("simulation.n_replicates", s.n_replicates)?;
                if self.met.test_functions.is_empty() {
                    return Err(Error::Config("met.test_functions must be nonempty".into()));
                }
                for f in &self.met.test_functions {
                    parse_observable(f)?;
                }
                self.schedule().validate().map_err(|e| Error::Config(e.to_string()))?;
            }
            ExperimentKind::Clt => {
                require_count("clt.n_replicates", self.clt.n_replicates)?;
                require_count("clt.bins", self.clt.bins)?;
                if !(self.clt.hist_lo < self.clt.hist_hi) {
                    return Err(Error::Config("clt.hist_lo must be below clt.hist_hi".into()));
                }
                match self.clt.horizon {
                    Some(h) => require_positive("clt.horizon", h)?,
                    None => self.schedule().validate().map_err(|e| Error::Config(e.to_string()))?,
                }
            }
            ExperimentKind::Estimate => {
                let e = &self.estimate;
                require_count("estimate.consistency_replicates", e.consistency_replicates)?;
                require_positive("estimate.normality_horizon", e.normality_horizon)?;
                if let Some(x) = e.normality_eps {
                    require_positive("estimate.normality_eps", x)?;
                }
                self.estimator_config(1.0).validate().map_err(|e| Error::Config(e.to_string()))?;
            }
            ExperimentKind::Tail => {
                require_count("tail.n_replicates", self.tail.n_replicates)?;
                require_positive("tail.delta", self.tail.delta)?;
                self.schedule().validate().map_err(|e| Error::Config(e.to_string()))?;
            }
            ExperimentKind::Hitting => {
                let h = &self.hitting;
                require_count("hitting.n_replicates", h.n_replicates)?;
                require_positive("hitting.dt", h.dt)?;
                require_positive("hitting.horizon", h.horizon)?;
                if h.start == h.target || !h.start.is_finite() || !h.target.is_finite() {
                    return Err(Error::Config("hitting.start and hitting.target must differ".into()));
                }
            }
        }
        Ok(())
    }
}

/// One threshold decision.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Decision {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    /// `"<="` or `">="`.
    pub rule: String,
    pub passed: bool,
}

impl Decision {
    fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            rule: "<=".into(),
            passed: value <= threshold,
        }
    }

    /// Records the number of violations of an ordering property against 0.
    fn ordering(name: impl Into<String>, violations: usize) -> Self {
        Self::at_most(name, violations as f64, 0.0)
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {} {} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.rule,
            self.threshold
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpsRow {
    pub eps: f64,
    pub horizon: Option<f64>,
    pub n_replicates: usize,
    pub values: BTreeMap<String, f64>,
}

impl EpsRow {
    fn new(eps: f64, horizon: Option<f64>, n_replicates: usize) -> Self {
        Self {
            eps,
            horizon,
            n_replicates,
            values: BTreeMap::new(),
        }
    }

    fn with(mut self, key: &str, v: f64) -> Self {
        self.values.insert(key.into(), v);
        self
    }
}

/// Whitespace-separated columns for plotting.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlotData {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub experiment: ExperimentKind,
    pub config: ExperimentConfig,
    pub config_toml: String,
    pub rows: Vec<EpsRow>,
    pub decisions: Vec<Decision>,
    pub passed: bool,
    /// Euler steps actually taken.
    pub steps: u64,
    /// `sum ceil(T/dt)` over replicates with a fixed horizon.
    pub expected_steps: u64,
    pub wall_clock_seconds: f64,
    pub details: serde_json::Value,
    pub plots: Vec<PlotData>,
    /// Extra named files (tables, solutions, per-replicate records).
    #[serde(skip)]
    pub files: Vec<(String, String)>,
}

impl ExperimentReport {
    pub fn empty(config: ExperimentConfig) -> Result<Self> {
        Ok(Self {
            experiment: config.experiment,
            config_toml: config.to_toml_string()?,
            config,
            rows: Vec::new(),
            decisions: Vec::new(),
            passed: true,
            steps: 0,
            expected_steps: 0,
            wall_clock_seconds: 0.0,
            details: serde_json::Value::Null,
            plots: Vec::new(),
            files: Vec::new(),
        })
    }

    fn finish(&mut self) {
        self.passed = self.decisions.iter().all(|d| d.passed);
    }

    /// `eps,horizon,n_replicates,<value keys>` rows; identical inputs give identical bytes.
    pub fn summary_csv(&self) -> String {
        let keys: Vec<&String> = self.rows.first().map(|r| r.values.keys().collect()).unwrap_or_default();
        let mut out = String::from("eps,horizon,n_replicates");
        for k in &keys {
            out.push(',');
            out.push_str(k);
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{}",
                r.eps,
                r.horizon.map(|h| h.to_string()).unwrap_or_default(),
                r.n_replicates
            ));
            for k in &keys {
                out.push(',');
                if let Some(v) = r.values.get(*k) {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

struct Context {
    k: f64,
    k_quadrature: f64,
    homog: HomogenizedSpec,
}

impl Context {
    fn theta0(&self) -> f64 {
        self.homog.theta().unwrap_or(f64::NAN)
    }

    fn sigma_eff(&self) -> f64 {
        self.homog.sigma_eff().unwrap_or(f64::NAN)
    }
}

fn model_at(cfg: &ExperimentConfig, eps: f64) -> Result<ModelSpec> {
    let m = &cfg.model;
    let mut spec = ModelSpec::langevin(m.alpha, m.sigma, eps)?.with_x0(m.x0);
    if let Some(l) = cfg.quadrature.half_width {
        let w = spec.half_width().max(l);
        spec = spec.with_half_width(w);
    }
    Ok(spec)
}

fn grid_for(cfg: &ExperimentConfig, spec: &ModelSpec) -> Result<QuadratureGrid> {
    let q = &cfg.quadrature;
    let l = q.half_width.unwrap_or_else(|| spec.truncation_half_width(TRUNCATION_ENVELOPE));
    match q.n_nodes {
        Some(n) => QuadratureGrid::symmetric_simpson(l, 2.0 * l / (n - 1) as f64),
        None => {
            let e = spec.eps();
            QuadratureGrid::symmetric_simpson(l, (e * e / q.spacing_divisor).min(q.max_spacing))
        }
    }
}

fn context(cfg: &ExperimentConfig) -> Result<Context> {
    let m = &cfg.model;
    let spec = model_at(cfg, m.eps[0])?;
    let grid = grid_for(cfg, &spec)?;
    let cell = compute_cell_constants(&spec, &grid, cfg.quadrature.tol)?;
    let series = bessel_series(1.0 / m.sigma, 1e-17);
    let k = 1.0 / (series * series);
    Ok(Context {
        k,
        k_quadrature: cell.k,
        homog: HomogenizedSpec::langevin(m.alpha, m.sigma, k)?,
    })
}

fn check_assumptions(cfg: &ExperimentConfig, ctx: &Context, spec: &ModelSpec, grid: &QuadratureGrid) -> Result<()> {
    spec.check_assumption_c(grid)?;
    let r = check_assumption_clt(&ctx.homog, cfg.model.dissipativity_radius, cfg.model.gamma, grid)?;
    if !r.holds {
        return Err(Error::AssumptionViolated(format!(
            "dissipativity fails at {} of {} nodes beyond S = {} (first at y = {})",
            r.violations.len(),
            r.checked_nodes,
            cfg.model.dissipativity_radius,
            r.violations[0]
        )));
    }
    Ok(())
}

/// Runs the configured experiment.
pub fn run(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let start = Instant::now();
    let ctx = context(config)?;
    let mut report = ExperimentReport::empty(config.clone())?;
    match config.experiment {
        ExperimentKind::Coeff => run_coeff(config, &ctx, &mut report)?,
        ExperimentKind::Met => run_met(config, &ctx, &mut report)?,
        ExperimentKind::Clt => run_clt(config, &ctx, &mut report)?,
        ExperimentKind::Estimate => run_estimate(config, &ctx, &mut report)?,
        ExperimentKind::Tail => run_tail(config, &ctx, &mut report)?,
        ExperimentKind::Poisson => run_poisson(config, &ctx, &mut report)?,
        ExperimentKind::Hitting => run_hitting(config, &ctx, &mut report)?,
    }
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    report.finish();
    Ok(report)
}

fn density_at(cfg: &ExperimentConfig, ctx: &Context, eps: f64) -> Result<(ModelSpec, DensityTable)> {
    let spec = model_at(cfg, eps)?;
    let grid = grid_for(cfg, &spec)?;
    let d = invariant_density(&spec, &ctx.homog, &grid)?;
    Ok((spec, d))
}

fn run_coeff(cfg: &ExperimentConfig, ctx: &Context, report: &mut ExperimentReport) -> Result<()> {
    let char_limit = char_fn_mu(ctx.theta0(), ctx.sigma_eff());
    let mut z_plus = f64::NAN;
    for &eps in &cfg.model.eps {
        let spec = model_at(cfg, eps)?;
        let grid = grid_for(cfg, &spec)?;
        let cell = compute_cell_constants(&spec, &grid, cfg.quadrature.tol)?;
        z_plus = cell.z_plus;
        let d = invariant_density(&spec, &ctx.homog, &grid)?;
        let s = scale_tables(&spec, &ctx.homog, &grid)?;
        let c = char_fn_mu_eps(&d)?;
        report.rows.push(
            EpsRow::new(eps, None, 0)
                .with("k_quadrature", cell.k)
                .with("z_eps", cell.z_eps)
                .with("z", cell.z)
                .with("sandwich_lo", d.sandwich_lo)
                .with("sandwich_hi", d.sandwich_hi)
                .with("char_eps_re", c.re)
                .with("char_eps_im", c.im)
                .with("char_gap", (c - Complex64::new(char_limit, 0.0)).norm())
                .with("c_rho_eps", s.multiscale.c_rho)
                .with("c_rho", s.limit.c_rho)
                .with("harmonicity_residual", s.multiscale.harmonicity_residual()),
        );
        let mut csv = Vec::new();
        write_tables_csv(&d, &s, &mut csv)?;
        report
            .files
            .push((format!("tables_eps_{eps}.csv"), String::from_utf8_lossy(&csv).into_owned()));
    }
    report.decisions.push(Decision::at_most(
        "K quadrature vs series",
        (ctx.k_quadrature - ctx.k).abs(),
        cfg.thresholds.k_agreement,
    ));
    report.details = serde_json::json!({
        "K": ctx.k,
        "K_quadrature": ctx.k_quadrature,
        "Z_plus": z_plus,
        "theta": ctx.theta0(),
        "sigma_eff": ctx.sigma_eff(),
        "char_fn_mu": char_limit,
    });
    report.plots.push(PlotData {
        name: "char_gap_vs_eps".into(),
        columns: vec!["eps".into(), "char_gap".into()],
        rows: report.rows.iter().map(|r| vec![r.eps, r.values["char_gap"]]).collect(),
    });
    Ok(())
}

fn observable_name(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect::<String>()
        .trim_matches('_')
        .replace("__", "_")
}

fn run_met(cfg: &ExperimentConfig, ctx: &Context, report: &mut ExperimentReport) -> Result<()> {
    let schedule = cfg.schedule();
    let tests: Vec<Observable> = cfg.met.test_functions.iter().map(|s| parse_observable(s)).collect::<Result<_>>()?;
    let names: Vec<String> = cfg.met.test_functions.iter().map(|s| observable_name(s)).collect();
    let n = cfg.simulation.n_replicates;
    let mut primary = Vec::new();
    for &eps in &schedule.eps_values {
        let (spec, d) = density_at(cfg, ctx, eps)?;
        check_assumptions(cfg, ctx, &spec, &d.grid)?;
        let refs: Vec<f64> = tests
            .iter()
            .map(|t| match t {
                Observable::Constant(c) => *c,
                t => d.expectation(Side::Multiscale, |x| t.eval(x)),
            })
            .collect();
        let horizon = schedule.horizon(eps);
        let accs = simulate_replicates(
            &spec,
            schedule.dt_rule,
            horizon,
            cfg.simulation.base_seed,
            n,
            &tests,
            cfg.simulation.worker_count(),
        )?;
        let dt = schedule.dt_rule.dt(eps);
        report.steps += accs.iter().map(|a| a.steps).sum::<u64>();
        report.expected_steps += n as u64 * PathSimConfig::new(dt, horizon, 0, 0).n_steps();
        let mut row = EpsRow::new(eps, Some(horizon), n);
        for (j, name) in names.iter().enumerate() {
            let mse = accs.iter().map(|a| (a.averages()[j] - refs[j]).powi(2)).sum::<f64>() / n as f64;
            row = row.with(&format!("mse_{name}"), mse).with(&format!("ref_{name}"), refs[j]);
            if j == 0 {
                primary.push(mse);
            }
        }
        report.rows.push(row);
    }
    let violations = primary.windows(2).filter(|w| !(w[1] < w[0])).count();
    report
        .decisions
        .push(Decision::ordering(format!("mse_{} strictly decreasing", names[0]), violations));
    report.decisions.push(Decision::at_most(
        format!("mse_{} at final eps", names[0]),
        *primary.last().expect("nonempty schedule"),
        cfg.thresholds.met_final_mse,
    ));
    report.plots.push(PlotData {
        name: "met_l2_error".into(),
        columns: vec!["eps".into(), format!("mse_{}", names[0])],
        rows: schedule.eps_values.iter().zip(&primary).map(|(e, m)| vec![*e, *m]).collect(),
    });
    Ok(())
}

fn histogram_plot(name: &str, values: &[f64], cfg: &CltSection) -> PlotData {
    let h = Histogram::new(values, cfg.bins, cfg.hist_lo, cfg.hist_hi);
    PlotData {
        name: name.into(),
        columns: vec!["center".into(), "density".into(), "count".into()],
        rows: h
            .centers()
            .into_iter()
            .zip(h.densities())
            .zip(&h.counts)
            .map(|((c, d), n)| vec![c, d, *n as f64])
            .collect(),
    }
}

fn run_clt(cfg: &ExperimentConfig, ctx: &Context, report: &mut ExperimentReport) -> Result<()> {
    let schedule = cfg.schedule();
    let n = cfg.clt.n_replicates;
    let mut last: Option<(Vec<f64>, f64)> = None;
    for &eps in &cfg.model.eps {
        let (spec, d) = density_at(cfg, ctx, eps)?;
        check_assumptions(cfg, ctx, &spec, &d.grid)?;
        let test = center_test(f64::cos, &d, Side::Multiscale);
        let sol = solve_poisson(&test, &d)?;
        let tau = sol.tau_sq.sqrt();
        let mean = test.channels[0].subtracted_mean;
        let horizon = cfg.clt.horizon.unwrap_or_else(|| schedule.horizon(eps));
        let accs = simulate_replicates(
            &spec,
            schedule.dt_rule,
            horizon,
            cfg.simulation.base_seed,
            n,
            &[Observable::Cos],
            cfg.simulation.worker_count(),
        )?;
        report.steps += accs.iter().map(|a| a.steps).sum::<u64>();
        report.expected_steps += n as u64 * PathSimConfig::new(schedule.dt_rule.dt(eps), horizon, 0, 0).n_steps();
        let z: Vec<f64> = accs
            .iter()
            .map(|a| horizon.sqrt() * (a.averages()[0] - mean) / tau)
            .collect();
        let ks = ks_statistic_normal(&z);
        let (m, se) = mean_and_se(&z);
        report.rows.push(
            EpsRow::new(eps, Some(horizon), n)
                .with("tau_eps", tau)
                .with("mean_cos", mean)
                .with("ks", ks)
                .with("ks_critical_05", ks_critical_value(n))
                .with("mean_z", m)
                .with("sd_z", se * (n as f64).sqrt()),
        );
        last = Some((z, ks));
    }
    let (z, ks) = last.expect("nonempty eps list");
    report
        .decisions
        .push(Decision::at_most("KS of standardized averages at final eps", ks, cfg.thresholds.clt_ks));
    report.plots.push(histogram_plot("clt_histogram", &z, &cfg.clt));
    Ok(())
}

fn records_csv(records: &[EstimateRecord]) -> String {
    let mut out = String::from("eps,T,seed,re_c,im_c,theta_hat,std_error,boundary_flag\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.eps,
            r.horizon,
            r.seed,
            r.re_c,
            r.im_c,
            r.theta_hat,
            r.standardized_error.map(|v| v.to_string()).unwrap_or_default(),
            r.boundary_flag.as_str()
        ));
    }
    out
}

fn run_estimate(cfg: &ExperimentConfig, ctx: &Context, report: &mut ExperimentReport) -> Result<()> {
    let theta0 = ctx.theta0();
    let est = cfg.estimator_config(ctx.sigma_eff());
    let schedule = cfg.schedule();
    let family = ModelFamily::langevin(cfg.model.alpha, cfg.model.sigma, cfg.model.x0);
    let n = cfg.estimate.consistency_replicates;
    let workers = cfg.simulation.worker_count();
    let cons = consistency_experiment(&family, &schedule, &est, theta0, n, cfg.simulation.base_seed, workers)?;
    report.decisions.push(Decision::ordering(
        "schedule couples T to eps (eta > 0)",
        usize::from(!cons.valid_schedule),
    ));
    for row in &cons.rows {
        let steps = PathSimConfig::new(schedule.dt_rule.dt(row.eps), row.horizon, 0, 0).n_steps();
        report.steps += steps * row.n as u64;
        report.expected_steps += steps * row.n as u64;
        report.rows.push(
            EpsRow::new(row.eps, Some(row.horizon), row.n)
                .with("median_rel_error", row.median_rel_error)
                .with("boundary_count", row.boundary_count as f64),
        );
    }
    if let Some(last) = cons.rows.last() {
        report.decisions.push(Decision::at_most(
            "median relative error at final eps",
            last.median_rel_error,
            cfg.thresholds.consistency_median,
        ));
        let violations = cons
            .rows
            .windows(2)
            .filter(|w| w[1].median_rel_error > w[0].median_rel_error)
            .count();
        report.decisions.push(Decision::ordering("median errors nonincreasing", violations));
    }
    let mut records = cons.records;

    let v0 = char_fn_mu(theta0, est.sigma_eff);
    let h = 1e-6;
    let fd = (inverse_char(v0 + h, est.sigma_eff) - inverse_char(v0 - h, est.sigma_eff)) / (2.0 * h);
    let scale = delta_method_scale(theta0, &est);
    report.decisions.push(Decision::at_most(
        "delta-method scale vs finite difference (relative)",
        (fd - scale).abs() / scale,
        cfg.thresholds.delta_fd_rel,
    ));
    let mut details = serde_json::json!({
        "theta0": theta0,
        "sigma_eff": est.sigma_eff,
        "delta_method_scale": scale,
        "finite_difference_scale": fd,
    });

    let n_norm = cfg.estimate.normality_replicates;
    if n_norm > 0 {
        let eps = cfg.estimate.normality_eps.unwrap_or(*cfg.model.eps.last().expect("nonempty"));
        let (spec, d) = density_at(cfg, ctx, eps)?;
        check_assumptions(cfg, ctx, &spec, &d.grid)?;
        let tau = solve_poisson(&center_test(f64::cos, &d, Side::Limit), &d)?.tau_sq.sqrt();
        let horizon = cfg.estimate.normality_horizon;
        let rep = normality_experiment(
            &spec,
            horizon,
            n_norm,
            tau,
            theta0,
            &est,
            schedule.dt_rule,
            cfg.simulation.base_seed,
            workers,
        )?;
        let steps = PathSimConfig::new(schedule.dt_rule.dt(eps), horizon, 0, 0).n_steps() * n_norm as u64;
        report.steps += steps;
        report.expected_steps += steps;
        report.decisions.push(Decision::at_most(
            "KS of standardized estimator errors",
            rep.ks_statistic,
            cfg.thresholds.normality_ks,
        ));
        let z = rep.standardized_errors();
        report.plots.push(histogram_plot("estimator_histogram", &z, &cfg.clt));
        details["normality"] = serde_json::json!({
            "eps": eps,
            "horizon": horizon,
            "tau": tau,
            "ks": rep.ks_statistic,
            "ks_critical_05": rep.ks_critical_05,
            "degenerate": rep.degenerate,
            "boundary_count": rep.boundary_count,
        });
        records.extend(rep.records);
    }
    report.details = details;
    report.plots.push(PlotData {
        name: "median_error_vs_eps".into(),
        columns: vec!["eps".into(), "median_rel_error".into()],
        rows: cons.rows.iter().map(|r| vec![r.eps, r.median_rel_error]).collect(),
    });
    report.files.push(("estimates.csv".into(), records_csv(&records)));
    Ok(())
}

fn run_tail(cfg: &ExperimentConfig, ctx: &Context, report: &mut ExperimentReport) -> Result<()> {
    let schedule = cfg.schedule();
    let spec = model_at(cfg, cfg.model.eps[0])?;
    let grid = grid_for(cfg, &spec)?;
    check_assumptions(cfg, ctx, &spec, &grid)?;
    let n = cfg.tail.n_replicates;
    let fractions = endpoint_tail_statistic(
        &spec,
        &schedule,
        cfg.tail.delta,
        n,
        cfg.simulation.base_seed,
        cfg.simulation.worker_count(),
    )?;
    for f in &fractions {
        let steps = PathSimConfig::new(schedule.dt_rule.dt(f.eps), f.horizon, 0, 0).n_steps() * n as u64;
        report.steps += steps;
        report.expected_steps += steps;
        report.rows.push(
            EpsRow::new(f.eps, Some(f.horizon), n)
                .with("exceedances", f.exceedances as f64)
                .with("fraction", f.fraction),
        );
    }
    let violations = fractions.windows(2).filter(|w| w[1].fraction > w[0].fraction).count();
    report.decisions.push(Decision::ordering("exceedance fractions nonincreasing", violations));
    report.decisions.push(Decision::at_most(
        "exceedance fraction at final eps",
        fractions.last().expect("nonempty").fraction,
        cfg.thresholds.tail_final,
    ));
    report.plots.push(PlotData {
        name: "exceedance_vs_eps".into(),
        columns: vec!["eps".into(), "fraction".into()],
        rows: fractions.iter().map(|f| vec![f.eps, f.fraction]).collect(),
    });
    Ok(())
}

fn run_poisson(cfg: &ExperimentConfig, ctx: &Context, report: &mut ExperimentReport) -> Result<()> {
    let mut maxima = Vec::new();
    let mut finest: Option<DensityTable> = None;
    let mut gap_failures = Vec::new();
    for &eps in &cfg.model.eps {
        let (_, d) = density_at(cfg, ctx, eps)?;
        let test = center_test(f64::cos, &d, Side::Multiscale);
        let sol = match solve_poisson(&test, &d) {
            Ok(s) => s,
            Err(Error::DirichletGap { gap, .. }) => {
                gap_failures.push(gap);
                continue;
            }
            Err(e) => return Err(e),
        };
        let rel_gap = sol.dirichlet_gap / (1.0 + sol.tau_sq);
        maxima.push(sol.max_abs_phi_prime());
        report.rows.push(
            EpsRow::new(eps, None, 0)
                .with("tau_sq", sol.tau_sq)
                .with("dirichlet_gap", sol.dirichlet_gap)
                .with("relative_gap", rel_gap)
                .with("residual", poisson_residual(&sol, &test, &d))
                .with("max_abs_phi_prime", sol.max_abs_phi_prime()),
        );
        report
            .decisions
            .push(Decision::at_most(format!("relative Dirichlet gap at eps {eps}"), rel_gap, cfg.thresholds.dirichlet_rel));
        let mut csv = Vec::new();
        write_solution_csv(&sol, &mut csv)?;
        report
            .files
            .push((format!("poisson_eps_{eps}.csv"), String::from_utf8_lossy(&csv).into_owned()));
        let mut js = Vec::new();
        write_summary_json(&sol, &mut js)?;
        report
            .files
            .push((format!("poisson_eps_{eps}.json"), String::from_utf8_lossy(&js).into_owned()));
        finest = Some(d);
    }
    for gap in gap_failures {
        report.decisions.push(Decision::at_most("Dirichlet gap (solve rejected)", gap, 0.0));
    }
    if let Some(d) = finest {
        let test = center_test(f64::cos, &d, Side::Limit);
        let sol = solve_poisson(&test, &d)?;
        let rel_gap = sol.dirichlet_gap / (1.0 + sol.tau_sq);
        report
            .decisions
            .push(Decision::at_most("relative Dirichlet gap of the limit solve", rel_gap, cfg.thresholds.dirichlet_rel));
        report.details = serde_json::json!({
            "limit_tau_sq": sol.tau_sq,
            "limit_dirichlet_gap": sol.dirichlet_gap,
            "limit_max_abs_phi_prime": sol.max_abs_phi_prime(),
        });
    }
    if maxima.len() >= 2 {
        let lo = maxima.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = maxima.iter().cloned().fold(0.0, f64::max);
        report.decisions.push(Decision::at_most(
            "variation of max|Phi'_eps| across eps",
            (hi - lo) / lo,
            cfg.thresholds.phi_prime_variation,
        ));
    }
    report.plots.push(PlotData {
        name: "tau_sq_vs_eps".into(),
        columns: vec!["eps".into(), "tau_sq".into()],
        rows: report.rows.iter().map(|r| vec![r.eps, r.values["tau_sq"]]).collect(),
    });
    Ok(())
}

fn run_hitting(cfg: &ExperimentConfig, ctx: &Context, report: &mut ExperimentReport) -> Result<()> {
    let h = &cfg.hitting;
    let eps = cfg.model.eps[0];
    let multiscale = model_at(cfg, eps)?;
    let grid = grid_for(cfg, &multiscale)?;
    let tables = scale_tables(&multiscale, &ctx.homog, &grid)?;
    let (spec, branch) = match h.model {
        HittingModel::Limit => (ModelSpec::from_homogenized(&ctx.homog), &tables.limit),
        HittingModel::Multiscale => (multiscale.clone(), &tables.multiscale),
    };
    let spec = spec.with_x0(h.start);
    let analytic = expected_hitting_time(branch.forward(h.start), branch.forward(h.target), branch)?;
    let seed = cfg.simulation.base_seed;
    let recs = replicate_map(h.n_replicates, cfg.simulation.worker_count(), |r| {
        first_passage(&spec, &PathSimConfig::new(h.dt, h.horizon, seed, r), h.target)
    })?;
    report.steps = recs.iter().map(|r| r.steps).sum();
    report.expected_steps = report.steps;
    let times: Vec<f64> = recs.iter().filter_map(|r| r.hit_time).collect();
    let censored = recs.len() - times.len();
    let (mean, se) = mean_and_se(&times);
    report.rows.push(
        EpsRow::new(if h.model == HittingModel::Multiscale { eps } else { 0.0 }, Some(h.horizon), h.n_replicates)
            .with("analytic", analytic)
            .with("mc_mean", mean)
            .with("mc_se", se)
            .with("censored", censored as f64)
            .with("median", median(&times)),
    );
    report.decisions.push(Decision::at_most(
        "|MC mean - analytic| in standard errors",
        (mean - analytic).abs() / se,
        cfg.thresholds.hitting_se,
    ));
    report.details = serde_json::json!({
        "analytic": analytic,
        "mc_mean": mean,
        "mc_se": se,
        "censored": censored,
    });
    Ok(())
}

/// Writes `report.json`, `summary.csv` and the `.dat` plot files according to
/// `formats`; extra tables are written with the `csv` format.
pub fn emit(report: &ExperimentReport, dir: &Path, formats: &[String]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let want = |f: &str| formats.iter().any(|x| x == f);
    let mut written = Vec::new();
    let mut put = |name: &str, contents: &[u8]| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, contents)?;
        written.push(p);
        Ok(())
    };
    if want("json") {
        put("report.json", serde_json::to_string_pretty(report)?.as_bytes())?;
    }
    if want("csv") {
        put("summary.csv", report.summary_csv().as_bytes())?;
        for (name, contents) in &report.files {
            put(name, contents.as_bytes())?;
        }
    }
    if want("dat") {
        for p in &report.plots {
            let mut s = format!("# {}\n", p.columns.join(" "));
            for row in &p.rows {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                s.push_str(&cells.join(" "));
                s.push('\n');
            }
            put(&format!("{}.dat", p.name), s.as_bytes())?;
        }
    }
    Ok(written)
}
