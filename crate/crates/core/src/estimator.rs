//! Minimum-distance drift estimator based on the time-averaged characteristic
//! value `T^-1 int e^{iX_t} dt`, with its delta-method normalization and the
//! consistency and normality experiments.

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ModelFamily, ModelSpec, ScheduleConfig};
use crate::sdesim::{simulate_replicates, ErgodicAccumulator};
use crate::stats::{is_degenerate, ks_critical_value, ks_statistic_normal, median};

pub const DEFAULT_THETA_MIN: f64 = 0.01;
pub const DEFAULT_THETA_MAX: f64 = 10.0;
pub const DEFAULT_PROJECTION_FLOOR: f64 = 1e-6;

/// Smallest replicate count for a normality run.
pub const MIN_NORMALITY_REPLICATES: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EstimatorConfig {
    pub sigma_eff: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    pub projection_floor: f64,
}

impl EstimatorConfig {
    pub fn new(sigma_eff: f64) -> Self {
        Self {
            sigma_eff,
            theta_min: DEFAULT_THETA_MIN,
            theta_max: DEFAULT_THETA_MAX,
            projection_floor: DEFAULT_PROJECTION_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_eff > 0.0 && self.sigma_eff.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma_eff must be > 0, got {}", self.sigma_eff)));
        }
        if !(0.0 < self.theta_min && self.theta_min < self.theta_max && self.theta_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < theta_min < theta_max, got [{}, {}]",
                self.theta_min, self.theta_max
            )));
        }
        if !(0.0 < self.projection_floor && self.projection_floor < 0.5) {
            return Err(Error::InvalidParameter(format!(
                "projection floor must lie in (0, 0.5), got {}",
                self.projection_floor
            )));
        }
        Ok(())
    }
}

/// Where the estimate was clamped, if anywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryFlag {
    Interior,
    /// `Re c_hat` clamped to the projection floor or ceiling.
    Projection,
    ThetaMin,
    ThetaMax,
}

impl BoundaryFlag {
    pub fn is_boundary(self) -> bool {
        self != BoundaryFlag::Interior
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BoundaryFlag::Interior => "interior",
            BoundaryFlag::Projection => "projection",
            BoundaryFlag::ThetaMin => "theta_min",
            BoundaryFlag::ThetaMax => "theta_max",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub theta_hat: f64,
    pub flag: BoundaryFlag,
}

/// `g(v) = -sigma_eff / (2 log v)`, the inverse of `theta -> exp(-sigma_eff / (2 theta))`.
pub fn inverse_char(v: f64, sigma_eff: f64) -> f64 {
    -sigma_eff / (2.0 * v.ln())
}

/// Minimizes `|c_hat - exp(-sigma_eff/(2 theta))|` over `theta` in `[theta_min, theta_max]`.
pub fn mde_estimate(c_hat: Complex64, cfg: &EstimatorConfig) -> Estimate {
    let d = cfg.projection_floor;
    let mut flag = BoundaryFlag::Interior;
    let mut r = c_hat.re;
    if !(r >= d && r <= 1.0 - d) {
        flag = BoundaryFlag::Projection;
        r = if r.is_nan() { d } else { r.clamp(d, 1.0 - d) };
    }
    let theta = inverse_char(r, cfg.sigma_eff);
    if theta < cfg.theta_min {
        return Estimate {
            theta_hat: cfg.theta_min,
            flag: BoundaryFlag::ThetaMin,
        };
    }
    if theta > cfg.theta_max {
        return Estimate {
            theta_hat: cfg.theta_max,
            flag: BoundaryFlag::ThetaMax,
        };
    }
    Estimate { theta_hat: theta, flag }
}

/// `|g'(v0)| = 2 theta0^2 exp(sigma_eff / (2 theta0)) / sigma_eff` at `v0 = exp(-sigma_eff/(2 theta0))`.
pub fn delta_method_scale(theta0: f64, cfg: &EstimatorConfig) -> f64 {
    2.0 * theta0 * theta0 * (cfg.sigma_eff / (2.0 * theta0)).exp() / cfg.sigma_eff
}

/// Asymptotic standard deviation `|g'(v0)| tau` of `sqrt(T) (theta_hat - theta0)`.
pub fn delta_method_std(theta0: f64, cfg: &EstimatorConfig, tau: f64) -> f64 {
    delta_method_scale(theta0, cfg) * tau
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimateRecord {
    pub eps: f64,
    pub horizon: f64,
    pub seed: u64,
    pub replicate_id: u64,
    pub re_c: f64,
    pub im_c: f64,
    pub theta_hat: f64,
    /// `sqrt(T) (theta_hat - theta0) / std`, when a scale is available.
    pub standardized_error: Option<f64>,
    pub boundary_flag: BoundaryFlag,
}

impl EstimateRecord {
    pub fn new(eps: f64, horizon: f64, seed: u64, replicate_id: u64, c_hat: Complex64, cfg: &EstimatorConfig) -> Self {
        let e = mde_estimate(c_hat, cfg);
        Self {
            eps,
            horizon,
            seed,
            replicate_id,
            re_c: c_hat.re,
            im_c: c_hat.im,
            theta_hat: e.theta_hat,
            standardized_error: None,
            boundary_flag: e.flag,
        }
    }

    pub fn standardize(mut self, theta0: f64, std: f64) -> Self {
        self.standardized_error = Some(self.horizon.sqrt() * (self.theta_hat - theta0) / std);
        self
    }

    pub fn relative_error(&self, theta0: f64) -> f64 {
        (self.theta_hat - theta0).abs() / theta0
    }
}

/// Records from completed accumulators of replicates `0..n`.
pub fn records_from_accumulators(
    accs: &[ErgodicAccumulator],
    eps: f64,
    horizon: f64,
    seed: u64,
    cfg: &EstimatorConfig,
) -> Vec<EstimateRecord> {
    accs.iter()
        .enumerate()
        .map(|(r, a)| EstimateRecord::new(eps, horizon, seed, r as u64, a.complex_average(), cfg))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsistencyRow {
    pub eps: f64,
    pub horizon: f64,
    pub n: usize,
    pub median_rel_error: f64,
    pub boundary_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsistencyReport {
    /// False when the schedule does not couple `T` to `eps` (`eta <= 0`);
    /// nothing is simulated in that case.
    pub valid_schedule: bool,
    pub rows: Vec<ConsistencyRow>,
    /// Median errors are nonincreasing along the schedule.
    pub nonincreasing: bool,
    pub records: Vec<EstimateRecord>,
}

/// Per-scale medians of `|theta_hat - theta0| / theta0`, grouped in the order given.
pub fn summarize_consistency(groups: Vec<Vec<EstimateRecord>>, theta0: f64) -> ConsistencyReport {
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for g in groups {
        let errs: Vec<f64> = g.iter().map(|r| r.relative_error(theta0)).collect();
        if let Some(first) = g.first() {
            rows.push(ConsistencyRow {
                eps: first.eps,
                horizon: first.horizon,
                n: g.len(),
                median_rel_error: median(&errs),
                boundary_count: g.iter().filter(|r| r.boundary_flag.is_boundary()).count(),
            });
        }
        records.extend(g);
    }
    let nonincreasing = rows.windows(2).all(|w| w[1].median_rel_error <= w[0].median_rel_error);
    ConsistencyReport {
        valid_schedule: true,
        rows,
        nonincreasing,
        records,
    }
}

/// Estimates `theta` along the schedule with `n_replicates` paths per scale.
/// Replicate `r` uses stream `r` of `seed` at every scale.
pub fn consistency_experiment(
    family: &ModelFamily,
    schedule: &ScheduleConfig,
    cfg: &EstimatorConfig,
    theta0: f64,
    n_replicates: usize,
    seed: u64,
    workers: Option<usize>,
) -> Result<ConsistencyReport> {
    cfg.validate()?;
    if !(schedule.horizon_exponent > 0.0) {
        return Ok(ConsistencyReport {
            valid_schedule: false,
            rows: Vec::new(),
            nonincreasing: false,
            records: Vec::new(),
        });
    }
    schedule.validate()?;
    let mut groups = Vec::new();
    for &eps in &schedule.eps_values {
        let spec = family.at(eps)?;
        let horizon = schedule.horizon(eps);
        let accs = simulate_replicates(&spec, schedule.dt_rule, horizon, seed, n_replicates, &[], workers)?;
        groups.push(records_from_accumulators(&accs, eps, horizon, seed, cfg));
    }
    Ok(summarize_consistency(groups, theta0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NormalityReport {
    pub eps: f64,
    pub horizon: f64,
    pub n: usize,
    pub scale: f64,
    pub ks_statistic: f64,
    pub ks_critical_05: f64,
    /// All standardized errors coincide; the KS value is not informative.
    pub degenerate: bool,
    pub boundary_count: usize,
    pub records: Vec<EstimateRecord>,
}

impl NormalityReport {
    pub fn standardized_errors(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.standardized_error).collect()
    }
}

/// KS comparison of standardized errors `sqrt(T)(theta_hat - theta0) / (|g'(v0)| tau)`
/// with N(0, 1).
pub fn summarize_normality(
    records: Vec<EstimateRecord>,
    theta0: f64,
    tau: f64,
    cfg: &EstimatorConfig,
) -> Result<NormalityReport> {
    if records.len() < MIN_NORMALITY_REPLICATES {
        return Err(Error::Underpowered {
            got: records.len(),
            need: MIN_NORMALITY_REPLICATES,
        });
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("tau must be > 0, got {tau}")));
    }
    let scale = delta_method_std(theta0, cfg, tau);
    let (eps, horizon) = (records[0].eps, records[0].horizon);
    let records: Vec<EstimateRecord> = records.into_iter().map(|r| r.standardize(theta0, scale)).collect();
    let z: Vec<f64> = records.iter().filter_map(|r| r.standardized_error).collect();
    Ok(NormalityReport {
        eps,
        horizon,
        n: z.len(),
        scale,
        ks_statistic: ks_statistic_normal(&z),
        ks_critical_05: ks_critical_value(z.len()),
        degenerate: is_degenerate(&z),
        boundary_count: records.iter().filter(|r| r.boundary_flag.is_boundary()).count(),
        records,
    })
}

/// Simulates `n_replicates` paths at one scale and horizon and tests the
/// standardized estimator errors for normality.
#[allow(clippy::too_many_arguments)]
pub fn normality_experiment(
    spec: &ModelSpec,
    horizon: f64,
    n_replicates: usize,
    tau: f64,
    theta0: f64,
    cfg: &EstimatorConfig,
    rule: crate::model::DtRule,
    seed: u64,
    workers: Option<usize>,
) -> Result<NormalityReport> {
    cfg.validate()?;
    if n_replicates < MIN_NORMALITY_REPLICATES {
        return Err(Error::Underpowered {
            got: n_replicates,
            need: MIN_NORMALITY_REPLICATES,
        });
    }
    let accs = simulate_replicates(spec, rule, horizon, seed, n_replicates, &[], workers)?;
    let records = records_from_accumulators(&accs, spec.eps(), horizon, seed, cfg);
    summarize_normality(records, theta0, tau, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::char_fn_mu;
    use crate::model::{evaluator, DtRule};
    use proptest::prelude::*;

    const K1: f64 = 0.623_860_360_432_069_2;

    #[test]
    fn closed_form_examples() {
        let cfg = EstimatorConfig::new(2.0);
        let e = mde_estimate(Complex64::new((-1.0f64).exp(), 0.0), &cfg);
        assert!((e.theta_hat - 1.0).abs() < 1e-15);
        assert_eq!(e.flag, BoundaryFlag::Interior);

        let cfg = EstimatorConfig::new(0.6238);
        let e = mde_estimate(Complex64::new(0.55, 0.02), &cfg);
        // -0.6238 / (2 ln 0.55), 30-digit arithmetic
        assert!((e.theta_hat - 0.521_714_112_050_244_8).abs() < 1e-15);
    }

    #[test]
    fn boundary_flags() {
        let cfg = EstimatorConfig::new(K1);
        // Re c clamped to 1e-6 still maps inside [0.01, 10]
        let e = mde_estimate(Complex64::new(-0.3, 0.0), &cfg);
        assert_eq!(e.flag, BoundaryFlag::Projection);
        assert!((e.theta_hat - inverse_char(1e-6, K1)).abs() < 1e-15);
        assert_eq!(mde_estimate(Complex64::new(f64::NAN, 0.0), &cfg).flag, BoundaryFlag::Projection);
        assert_eq!(mde_estimate(Complex64::new(1.0, 0.0), &cfg).flag, BoundaryFlag::ThetaMax);
        let e = mde_estimate(Complex64::new(0.999_999_9, 0.0), &cfg);
        assert_eq!((e.theta_hat, e.flag), (cfg.theta_max, BoundaryFlag::ThetaMax));
        let small = EstimatorConfig::new(0.1);
        let e = mde_estimate(Complex64::new(1e-3, 0.0), &small);
        assert_eq!((e.theta_hat, e.flag), (small.theta_min, BoundaryFlag::ThetaMin));
    }

    #[test]
    fn delta_method_examples() {
        let cfg = EstimatorConfig::new(1.2);
        assert_eq!(delta_method_std(0.6, &cfg, 0.0), 0.0);
        // sigma_eff = 2 theta0: |g'(v0)| = theta0 e
        assert!((delta_method_scale(0.6, &cfg) - 0.6 * std::f64::consts::E).abs() < 1e-14);
        for theta0 in [0.2, K1, 1.5, 4.0] {
            let cfg = EstimatorConfig::new(K1);
            let v0 = char_fn_mu(theta0, K1);
            let h = 1e-6;
            let fd = (inverse_char(v0 + h, K1) - inverse_char(v0 - h, K1)) / (2.0 * h);
            let exact = delta_method_scale(theta0, &cfg);
            assert!((fd - exact).abs() <= 1e-5 * exact, "theta0 {theta0}: {fd} vs {exact}");
        }
    }

    #[test]
    fn pipeline_identity_on_exact_values() {
        let cfg = EstimatorConfig::new(K1);
        let c = Complex64::new(char_fn_mu(K1, K1), 0.0);
        let groups = [0.2, 0.1, 0.05]
            .iter()
            .map(|&eps| (0..5).map(|r| EstimateRecord::new(eps, 1.0, 0, r, c, &cfg)).collect())
            .collect();
        let rep = summarize_consistency(groups, K1);
        assert!(rep.rows.iter().all(|r| r.median_rel_error < 1e-14));
        assert!(rep.nonincreasing);
    }

    #[test]
    fn invalid_schedule_is_marked() {
        let cfg = EstimatorConfig::new(K1);
        let schedule = ScheduleConfig::new(vec![0.2, 0.1], 10.0, 0.0);
        let rep = consistency_experiment(&ModelFamily::langevin(1.0, 1.0, 0.0), &schedule, &cfg, K1, 4, 0, None).unwrap();
        assert!(!rep.valid_schedule);
        assert!(rep.records.is_empty());
    }

    #[test]
    fn frozen_dynamics_normality_is_degenerate() {
        let frozen = ModelSpec::without_fast_term(evaluator(|_| 0.0), evaluator(|_| 0.0)).with_x0(0.0);
        let cfg = EstimatorConfig::new(0.5);
        let rep = normality_experiment(&frozen, 1.0, 60, 0.3, 0.5, &cfg, DtRule::Fixed(0.01), 0, Some(2)).unwrap();
        // X = 0 gives c_hat = 1 and the same clamped estimate for every replicate
        assert!(rep.degenerate);
        assert_eq!(rep.boundary_count, 60);
        assert!(matches!(
            normality_experiment(&frozen, 1.0, 10, 0.3, 0.5, &cfg, DtRule::Fixed(0.01), 0, None),
            Err(Error::Underpowered { got: 10, need: 50 })
        ));
    }

    #[test]
    fn zero_errors_give_half_ks() {
        let cfg = EstimatorConfig::new(K1);
        let c = Complex64::new(char_fn_mu(K1, K1), 0.0);
        let recs: Vec<EstimateRecord> = (0..60).map(|r| EstimateRecord::new(0.05, 400.0, 0, r, c, &cfg)).collect();
        let rep = summarize_normality(recs, K1, 0.55, &cfg).unwrap();
        assert!(rep.degenerate);
        assert!((rep.ks_statistic - 0.5).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(EstimatorConfig::new(0.6).validate().is_ok());
        assert!(EstimatorConfig::new(-1.0).validate().is_err());
        let mut c = EstimatorConfig::new(0.6);
        c.projection_floor = 0.5;
        assert!(c.validate().is_err());
        c.projection_floor = 1e-6;
        c.theta_min = 20.0;
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn inversion_identity(theta in 0.02f64..9.9, sigma_eff in 0.05f64..3.0) {
            let cfg = EstimatorConfig::new(sigma_eff);
            let v = char_fn_mu(theta, sigma_eff);
            prop_assume!(v > cfg.projection_floor && v < 1.0 - cfg.projection_floor);
            let e = mde_estimate(Complex64::new(v, 0.0), &cfg);
            prop_assert!((e.theta_hat - theta).abs() <= 1e-12 * theta.max(1.0), "{} vs {}", e.theta_hat, theta);
        }

        #[test]
        fn monotone_in_real_part(a in 0.01f64..0.98, da in 1e-4f64..0.01) {
            let cfg = EstimatorConfig::new(K1);
            let lo = mde_estimate(Complex64::new(a, 0.0), &cfg);
            let hi = mde_estimate(Complex64::new(a + da, 0.0), &cfg);
            if !lo.flag.is_boundary() && !hi.flag.is_boundary() {
                prop_assert!(hi.theta_hat > lo.theta_hat);
            }
        }

        #[test]
        fn projection_is_optimal(re in 0.05f64..0.95, im in -0.5f64..0.5) {
            let cfg = EstimatorConfig::new(K1);
            let c = Complex64::new(re, im);
            let e = mde_estimate(c, &cfg);
            let dist = |t: f64| (c - Complex64::new(char_fn_mu(t, K1), 0.0)).norm();
            let best = dist(e.theta_hat);
            for k in 0..1000 {
                let t = cfg.theta_min + (cfg.theta_max - cfg.theta_min) * k as f64 / 999.0;
                prop_assert!(best <= dist(t) + 1e-12);
            }
        }
    }
}
