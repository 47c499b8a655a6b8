//! Euler-Maruyama simulation of the multiscale SDE with streaming time averages,
//! first-passage times and endpoint statistics.

use std::fmt;
use std::io::{Read, Write};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{DtRule, Evaluator, ModelSpec, ScheduleConfig};

/// Steps per time unit are bounded so that `T / dt <= 2^40`.
pub const MAX_STEPS: u64 = 1 << 40;

/// The state is declared blown up beyond `BLOW_UP_FACTOR * L`.
pub const BLOW_UP_FACTOR: f64 = 10.0;

pub const PATH_MAGIC: &[u8; 8] = b"MSPATH01";

#[derive(Clone, Debug, PartialEq)]
pub struct PathSimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    pub replicate_id: u64,
    pub store_path: bool,
}

impl PathSimConfig {
    pub fn new(dt: f64, horizon: f64, seed: u64, replicate_id: u64) -> Self {
        Self {
            dt,
            horizon,
            seed,
            replicate_id,
            store_path: false,
        }
    }

    /// Step from `rule` at the model's scale.
    pub fn for_model(spec: &ModelSpec, rule: DtRule, horizon: f64, seed: u64, replicate_id: u64) -> Self {
        Self::new(rule.dt(spec.eps()), horizon, seed, replicate_id)
    }

    pub fn with_path(mut self) -> Self {
        self.store_path = true;
        self
    }

    /// `ceil(T / dt)`, ignoring a ceiling caused by rounding in the division.
    pub fn n_steps(&self) -> u64 {
        let r = self.horizon / self.dt;
        let n = (r - 1e-9 * r.max(1.0)).ceil();
        (n as u64).max(1)
    }

    /// Step actually used: `T / n_steps`, so that the horizon is hit exactly.
    pub fn effective_dt(&self) -> f64 {
        self.horizon / self.n_steps() as f64
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) || !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "dt and T must be finite and > 0, got dt={}, T={}",
                self.dt, self.horizon
            )));
        }
        let limit = spec.eps() * spec.eps() / 20.0;
        if self.dt > limit * (1.0 + 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "dt = {} exceeds eps^2/20 = {limit} at eps = {}",
                self.dt,
                spec.eps()
            )));
        }
        if self.horizon / self.dt > MAX_STEPS as f64 {
            return Err(Error::InvalidParameter(format!(
                "T/dt = {:e} exceeds 2^40",
                self.horizon / self.dt
            )));
        }
        Ok(())
    }
}

/// Standard normals from the replicate's own ChaCha stream: key from `seed`,
/// stream number `replicate_id`.
pub struct NormalStream {
    rng: ChaCha8Rng,
}

impl NormalStream {
    pub fn new(seed: u64, replicate_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(replicate_id);
        Self { rng }
    }

    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }
}

/// Real test function evaluated along the path.
#[derive(Clone)]
pub enum Observable {
    Cos,
    Sin,
    /// Indicator of `[lo, hi)`.
    Indicator { lo: f64, hi: f64 },
    Constant(f64),
    Custom(Evaluator),
}

impl Observable {
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Observable::Cos => x.cos(),
            Observable::Sin => x.sin(),
            Observable::Indicator { lo, hi } => {
                if (*lo..*hi).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            }
            Observable::Constant(c) => *c,
            Observable::Custom(f) => f(x),
        }
    }
}

impl fmt::Debug for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Observable::Cos => f.write_str("Cos"),
            Observable::Sin => f.write_str("Sin"),
            Observable::Indicator { lo, hi } => write!(f, "Indicator[{lo}, {hi})"),
            Observable::Constant(c) => write!(f, "Constant({c})"),
            Observable::Custom(_) => f.write_str("Custom"),
        }
    }
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Compensated {
    sum: f64,
    carry: f64,
}

impl Compensated {
    #[inline]
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Left-endpoint Riemann sums of the registered test functions and of `e^{iX}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ErgodicAccumulator {
    pub dt: f64,
    pub steps: u64,
    pub last_state: f64,
    sums: Vec<Compensated>,
    re: Compensated,
    im: Compensated,
    pub path: Option<Vec<f64>>,
}

impl ErgodicAccumulator {
    fn new(n_tests: usize, dt: f64, x0: f64) -> Self {
        Self {
            dt,
            steps: 0,
            last_state: x0,
            sums: vec![Compensated::default(); n_tests],
            re: Compensated::default(),
            im: Compensated::default(),
            path: None,
        }
    }

    pub fn elapsed(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    /// `int_0^t phi(X_s) ds` for each test function.
    pub fn sum_real(&self) -> Vec<f64> {
        self.sums.iter().map(|s| s.value() * self.dt).collect()
    }

    /// `int_0^t e^{iX_s} ds`.
    pub fn sum_complex(&self) -> Complex64 {
        Complex64::new(self.re.value(), self.im.value()) * self.dt
    }

    /// `t^-1 int_0^t phi(X_s) ds` for each test function.
    pub fn averages(&self) -> Vec<f64> {
        self.sums.iter().map(|s| s.value() / self.steps as f64).collect()
    }

    /// `t^-1 int_0^t e^{iX_s} ds`.
    pub fn complex_average(&self) -> Complex64 {
        Complex64::new(self.re.value(), self.im.value()) / self.steps as f64
    }
}

#[inline]
fn em_step(spec: &ModelSpec, x: f64, dt: f64, sqrt_dt: f64, z: f64) -> f64 {
    x + spec.drift(x) * dt + spec.diffusion(x) * sqrt_dt * z
}

fn blow_up(cfg: &PathSimConfig, step: u64, x: f64) -> Error {
    Error::BlowUp {
        replicate: cfg.replicate_id,
        step,
        state: if x.is_nan() { f64::INFINITY } else { x.abs() },
    }
}

/// Runs one Euler-Maruyama path of length `T` from `spec.x0()` and accumulates
/// time averages of `tests` and of `e^{iX}`.
pub fn simulate_accumulate(spec: &ModelSpec, cfg: &PathSimConfig, tests: &[Observable]) -> Result<ErgodicAccumulator> {
    cfg.validate(spec)?;
    let n = cfg.n_steps();
    let dt = cfg.effective_dt();
    let sqrt_dt = dt.sqrt();
    let bound = BLOW_UP_FACTOR * spec.half_width();
    let mut rng = NormalStream::new(cfg.seed, cfg.replicate_id);
    let mut acc = ErgodicAccumulator::new(tests.len(), dt, spec.x0());
    let mut path = cfg.store_path.then(|| {
        let mut p = Vec::with_capacity(n as usize + 1);
        p.push(spec.x0());
        p
    });
    let mut x = spec.x0();
    for k in 0..n {
        for (s, t) in acc.sums.iter_mut().zip(tests) {
            s.add(t.eval(x));
        }
        let (sin, cos) = x.sin_cos();
        acc.re.add(cos);
        acc.im.add(sin);
        x = em_step(spec, x, dt, sqrt_dt, rng.next_normal());
        if !(x.abs() <= bound) {
            return Err(blow_up(cfg, k + 1, x));
        }
        if let Some(p) = path.as_mut() {
            p.push(x);
        }
    }
    acc.steps = n;
    acc.last_state = x;
    acc.path = path;
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FirstPassageRecord {
    pub target: f64,
    /// `None` if the path did not reach the target by `T`.
    pub hit_time: Option<f64>,
    /// Euler steps taken.
    pub steps: u64,
}

impl FirstPassageRecord {
    pub fn censored(&self) -> bool {
        self.hit_time.is_none()
    }
}

/// First time the path reaches `target`, linearly interpolated within the step
/// in which `X - target` changes sign.
pub fn first_passage(spec: &ModelSpec, cfg: &PathSimConfig, target: f64) -> Result<FirstPassageRecord> {
    cfg.validate(spec)?;
    let l = spec.half_width();
    if !(-l..=l).contains(&target) {
        return Err(Error::InvalidParameter(format!("target {target} outside the working domain [-{l}, {l}]")));
    }
    let mut x = spec.x0();
    if x == target {
        return Ok(FirstPassageRecord {
            target,
            hit_time: Some(0.0),
            steps: 0,
        });
    }
    let n = cfg.n_steps();
    let dt = cfg.effective_dt();
    let sqrt_dt = dt.sqrt();
    let bound = BLOW_UP_FACTOR * l;
    let mut rng = NormalStream::new(cfg.seed, cfg.replicate_id);
    for k in 0..n {
        let next = em_step(spec, x, dt, sqrt_dt, rng.next_normal());
        if !(next.abs() <= bound) {
            return Err(blow_up(cfg, k + 1, next));
        }
        if (x - target) * (next - target) <= 0.0 {
            let frac = (target - x) / (next - x);
            return Ok(FirstPassageRecord {
                target,
                hit_time: Some((k as f64 + frac) * dt),
                steps: k + 1,
            });
        }
        x = next;
    }
    Ok(FirstPassageRecord {
        target,
        hit_time: None,
        steps: n,
    })
}

/// Runs `f(replicate_id)` for `0..n` in parallel, keeping replicate order.
/// `workers = None` uses the global pool.
pub fn replicate_map<T, F>(n: usize, workers: Option<usize>, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    let run = || (0..n as u64).into_par_iter().map(&f).collect::<Result<Vec<T>>>();
    match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}

/// Accumulators of replicates `0..n` at one scale, in replicate order.
pub fn simulate_replicates(
    spec: &ModelSpec,
    rule: DtRule,
    horizon: f64,
    seed: u64,
    n: usize,
    tests: &[Observable],
    workers: Option<usize>,
) -> Result<Vec<ErgodicAccumulator>> {
    replicate_map(n, workers, |r| {
        simulate_accumulate(spec, &PathSimConfig::for_model(spec, rule, horizon, seed, r), tests)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TailFraction {
    pub eps: f64,
    pub horizon: f64,
    pub exceedances: usize,
    pub replicates: usize,
    pub fraction: f64,
}

/// For each scale of the schedule, the fraction of replicates with
/// `|X(T_eps)| / sqrt(T_eps) > delta`.
pub fn endpoint_tail_statistic(
    spec: &ModelSpec,
    schedule: &ScheduleConfig,
    delta: f64,
    n_replicates: usize,
    seed: u64,
    workers: Option<usize>,
) -> Result<Vec<TailFraction>> {
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter(format!("delta must be > 0, got {delta}")));
    }
    schedule.validate()?;
    let mut out = Vec::with_capacity(schedule.eps_values.len());
    for &eps in &schedule.eps_values {
        let model = spec.at_eps(eps)?;
        let horizon = schedule.horizon(eps);
        let ends: Vec<f64> = simulate_replicates(&model, schedule.dt_rule, horizon, seed, n_replicates, &[], workers)?
            .iter()
            .map(|a| a.last_state)
            .collect();
        let scale = horizon.sqrt();
        let exceedances = ends.iter().filter(|x| x.abs() / scale > delta).count();
        out.push(TailFraction {
            eps,
            horizon,
            exceedances,
            replicates: n_replicates,
            fraction: exceedances as f64 / n_replicates.max(1) as f64,
        });
    }
    Ok(out)
}

/// Writes `path` (states `x_0..x_n`) with the `MSPATH01` header and step count `n`.
pub fn write_path<W: Write>(path: &[f64], mut out: W) -> Result<()> {
    if path.is_empty() {
        return Err(Error::InvalidParameter("empty path".into()));
    }
    out.write_all(PATH_MAGIC)?;
    out.write_all(&((path.len() - 1) as u64).to_le_bytes())?;
    for v in path {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_path<R: Read>(mut input: R) -> Result<Vec<f64>> {
    let mut header = [0u8; 16];
    input.read_exact(&mut header)?;
    if &header[..8] != PATH_MAGIC {
        return Err(Error::InvalidParameter("not an MSPATH01 file".into()));
    }
    let steps = u64::from_le_bytes(header[8..].try_into().expect("8-byte slice"));
    let mut out = Vec::with_capacity(steps as usize + 1);
    let mut buf = [0u8; 8];
    for _ in 0..=steps {
        input.read_exact(&mut buf)?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}

/// One CSV row per replicate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccumulatorSummary {
    pub replicate_id: u64,
    pub seed: u64,
    pub eps: f64,
    pub horizon: f64,
    pub dt: f64,
    pub steps: u64,
    pub last_state: f64,
    pub re_c: f64,
    pub im_c: f64,
    pub averages: Vec<f64>,
}

impl AccumulatorSummary {
    pub fn new(spec: &ModelSpec, cfg: &PathSimConfig, acc: &ErgodicAccumulator) -> Self {
        let c = acc.complex_average();
        Self {
            replicate_id: cfg.replicate_id,
            seed: cfg.seed,
            eps: spec.eps(),
            horizon: cfg.horizon,
            dt: acc.dt,
            steps: acc.steps,
            last_state: acc.last_state,
            re_c: c.re,
            im_c: c.im,
            averages: acc.averages(),
        }
    }
}

pub fn write_summary_csv<W: Write>(rows: &[AccumulatorSummary], mut out: W) -> Result<()> {
    let n_avg = rows.first().map_or(0, |r| r.averages.len());
    write!(out, "replicate_id,seed,eps,T,dt,steps,last_state,re_c,im_c")?;
    for j in 0..n_avg {
        write!(out, ",avg_{j}")?;
    }
    writeln!(out)?;
    for r in rows {
        write!(
            out,
            "{},{},{},{},{:e},{},{:.17e},{:.17e},{:.17e}",
            r.replicate_id, r.seed, r.eps, r.horizon, r.dt, r.steps, r.last_state, r.re_c, r.im_c
        )?;
        for a in &r.averages {
            write!(out, ",{a:.17e}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{evaluator, HomogenizedSpec};
    use proptest::prelude::*;

    fn frozen(x0: f64) -> ModelSpec {
        ModelSpec::without_fast_term(evaluator(|_| 0.0), evaluator(|_| 0.0)).with_x0(x0)
    }

    #[test]
    fn step_count_hits_horizon() {
        let cfg = PathSimConfig::new(0.1, 1.0, 0, 0);
        assert_eq!(cfg.n_steps(), 10);
        let cfg = PathSimConfig::new(0.3, 1.0, 0, 0);
        assert_eq!(cfg.n_steps(), 4);
        assert!((cfg.effective_dt() * 4.0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn config_rules() {
        let spec = ModelSpec::langevin(1.0, 1.0, 0.1).unwrap();
        assert!(PathSimConfig::new(0.01, 1.0, 0, 0).validate(&spec).is_err());
        assert!(PathSimConfig::new(0.0005, 1.0, 0, 0).validate(&spec).is_ok());
        assert!(PathSimConfig::new(1e-12, 1e3, 0, 0).validate(&spec).is_err());
        assert!(PathSimConfig::new(-1.0, 1.0, 0, 0).validate(&spec).is_err());
    }

    #[test]
    fn constant_and_frozen_averages() {
        let spec = ModelSpec::langevin(1.0, 1.0, 0.2).unwrap();
        let cfg = PathSimConfig::new(0.002, 5.0, 7, 3);
        let acc = simulate_accumulate(&spec, &cfg, &[Observable::Constant(1.5), Observable::Constant(0.3)]).unwrap();
        assert_eq!(acc.averages()[0], 1.5);
        assert!((acc.averages()[1] - 0.3).abs() <= f64::EPSILON * 0.3);

        let spec = frozen(0.7);
        let cfg = PathSimConfig::new(0.01, 2.0, 1, 0);
        let acc = simulate_accumulate(&spec, &cfg, &[Observable::Cos]).unwrap();
        assert_eq!(acc.last_state, 0.7);
        assert!((acc.averages()[0] - 0.7f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn determinism_and_stream_separation() {
        let spec = ModelSpec::langevin(1.0, 1.0, 0.2).unwrap();
        let cfg = PathSimConfig::new(0.002, 2.0, 42, 5).with_path();
        let a = simulate_accumulate(&spec, &cfg, &[Observable::Cos]).unwrap();
        let b = simulate_accumulate(&spec, &cfg, &[Observable::Cos]).unwrap();
        assert_eq!(a, b);
        let other = PathSimConfig::new(0.002, 2.0, 42, 6);
        let c = simulate_accumulate(&spec, &other, &[Observable::Cos]).unwrap();
        assert_ne!(a.last_state, c.last_state);
    }

    #[test]
    fn streams_are_uncorrelated() {
        let n = 100_000;
        let mut a = NormalStream::new(11, 0);
        let mut b = NormalStream::new(11, 1);
        let xs: Vec<f64> = (0..n).map(|_| a.next_normal()).collect();
        let ys: Vec<f64> = (0..n).map(|_| b.next_normal()).collect();
        let mx = xs.iter().sum::<f64>() / n as f64;
        let my = ys.iter().sum::<f64>() / n as f64;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (x, y) in xs.iter().zip(&ys) {
            sxy += (x - mx) * (y - my);
            sxx += (x - mx) * (x - mx);
            syy += (y - my) * (y - my);
        }
        let r = sxy / (sxx * syy).sqrt();
        assert!(r.abs() < 4.0 / (n as f64).sqrt(), "r = {r}");
    }

    #[test]
    fn blow_up_is_reported() {
        let spec = ModelSpec::without_fast_term(evaluator(|x| 40.0 * x), evaluator(|_| 1.0))
            .with_x0(1.0)
            .with_half_width(5.0);
        let cfg = PathSimConfig::new(0.05, 10.0, 0, 9);
        match simulate_accumulate(&spec, &cfg, &[]) {
            Err(Error::BlowUp { replicate, .. }) => assert_eq!(replicate, 9),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn first_passage_cases() {
        let spec = ModelSpec::langevin(1.0, 1.0, 0.2).unwrap().with_x0(0.5);
        let cfg = PathSimConfig::new(0.002, 1.0, 0, 0);
        assert_eq!(first_passage(&spec, &cfg, 0.5).unwrap().hit_time, Some(0.0));
        assert!(first_passage(&spec, &cfg, 100.0).is_err());

        // dx = -x dt from 1: crosses 1/2 at ln 2
        let ode = ModelSpec::without_fast_term(evaluator(|x| -x), evaluator(|_| 0.0)).with_x0(1.0);
        let dt = 0.01;
        let rec = first_passage(&ode, &PathSimConfig::new(dt, 5.0, 0, 0), 0.5).unwrap();
        assert!((rec.hit_time.unwrap() - 2f64.ln()).abs() <= dt);

        let rec = first_passage(&ode, &PathSimConfig::new(dt, 0.5, 0, 0), 0.5).unwrap();
        assert!(rec.censored());
    }

    #[test]
    fn ou_second_moment() {
        // X_T ~ N(0, sigma_eff/theta (1 - e^{-2 theta T})) from x0 = 0
        let h = HomogenizedSpec::ornstein_uhlenbeck(0.8, 0.5).unwrap();
        let spec = ModelSpec::from_homogenized(&h);
        let t = 10.0;
        let ends = replicate_map(1000, None, |r| {
            Ok(simulate_accumulate(&spec, &PathSimConfig::new(0.005, t, 2024, r), &[])?.last_state)
        })
        .unwrap();
        let sq: Vec<f64> = ends.iter().map(|x| x * x).collect();
        let m = sq.iter().sum::<f64>() / sq.len() as f64;
        let sd = (sq.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (sq.len() - 1) as f64).sqrt();
        let se = sd / (sq.len() as f64).sqrt();
        let want = 0.5 / 0.8 * (1.0 - (-2.0 * 0.8 * t).exp());
        assert!((m - want).abs() <= 3.0 * se, "{m} vs {want} (se {se})");
    }

    #[test]
    fn tail_statistic_trivial_cases() {
        let schedule = ScheduleConfig::new(vec![0.2, 0.1], 1.0, 1.0);
        let f = endpoint_tail_statistic(&frozen(0.0), &schedule, 0.1, 10, 0, Some(2)).unwrap();
        assert!(f.iter().all(|r| r.fraction == 0.0));
        let spec = ModelSpec::langevin(1.0, 1.0, 0.2).unwrap();
        let f = endpoint_tail_statistic(&spec, &schedule, 1e9, 10, 0, Some(2)).unwrap();
        assert!(f.iter().all(|r| r.fraction == 0.0));
        assert!(endpoint_tail_statistic(&spec, &schedule, 0.0, 10, 0, None).is_err());
    }

    #[test]
    fn path_round_trip_and_header() {
        let spec = ModelSpec::langevin(1.0, 1.0, 0.2).unwrap();
        let cfg = PathSimConfig::new(0.002, 0.1, 3, 0).with_path();
        let acc = simulate_accumulate(&spec, &cfg, &[]).unwrap();
        let path = acc.path.unwrap();
        assert_eq!(path.len() as u64, acc.steps + 1);
        let mut buf = Vec::new();
        write_path(&path, &mut buf).unwrap();
        assert_eq!(&buf[..8], b"MSPATH01");
        assert_eq!(buf.len(), 16 + 8 * path.len());
        assert_eq!(read_path(&buf[..]).unwrap(), path);
        assert!(read_path(&b"NOTAPATH\0\0\0\0\0\0\0\0"[..]).is_err());
    }

    #[test]
    fn summary_csv_rows() {
        let spec = ModelSpec::langevin(1.0, 1.0, 0.2).unwrap();
        let cfg = PathSimConfig::new(0.002, 0.1, 3, 0);
        let acc = simulate_accumulate(&spec, &cfg, &[Observable::Cos]).unwrap();
        let mut buf = Vec::new();
        write_summary_csv(&[AccumulatorSummary::new(&spec, &cfg, &acc)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("replicate_id,seed,eps,T,dt,steps,last_state,re_c,im_c,avg_0\n"));
        assert_eq!(text.lines().count(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn complex_sum_bounded_by_elapsed(seed in 0u64..1000, rep in 0u64..64, x0 in -2.0f64..2.0) {
            let spec = ModelSpec::langevin(1.0, 1.0, 0.3).unwrap().with_x0(x0);
            let cfg = PathSimConfig::new(0.0045, 0.5, seed, rep);
            let acc = simulate_accumulate(&spec, &cfg, &[Observable::Indicator { lo: -1.0, hi: 1.0 }]).unwrap();
            prop_assert!(acc.sum_complex().norm() <= acc.elapsed() * (1.0 + 1e-15));
            prop_assert!((acc.elapsed() - 0.5).abs() < 1e-12);
            let a = acc.averages()[0];
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
