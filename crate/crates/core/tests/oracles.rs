use msdiff::analytic::{bessel_series, char_fn_mu_eps, invariant_density};
use msdiff::harness::{emit, run, ExperimentConfig, ExperimentKind};
use msdiff::model::{HomogenizedSpec, ModelSpec, TRUNCATION_ENVELOPE};
use msdiff::quadrature::QuadratureGrid;
use proptest::prelude::*;

/// Modified Bessel function `I_n(x)` by its power series.
fn bessel_i(n: u32, x: f64) -> f64 {
    let mut term = (x / 2.0).powi(n as i32) / (1..=n).map(f64::from).product::<f64>();
    let mut sum = term;
    for m in 1..200 {
        term *= (x / 2.0).powi(2) / (m as f64 * (m + n) as f64);
        sum += term;
        if term < 1e-18 * sum {
            break;
        }
    }
    sum
}

/// `E[exp(iX)]` under `exp(-alpha x^2 / (2 sigma) + cos(x / eps) / sigma)`, expanding
/// `exp(cos(y) / sigma) = sum_n I_n(1 / sigma) exp(i n y)` against the Gaussian factor.
fn jacobi_anger(alpha: f64, sigma: f64, eps: f64) -> f64 {
    let s2 = sigma / alpha;
    let gauss = |k: f64| (-k * k * s2 / 2.0).exp();
    let (mut num, mut den) = (0.0, 0.0);
    for n in -60i32..=60 {
        let w = bessel_i(n.unsigned_abs(), 1.0 / sigma);
        let k = n as f64 / eps;
        num += w * gauss(k + 1.0);
        den += w * gauss(k);
    }
    num / den
}

#[test]
fn multiscale_char_value_matches_jacobi_anger_series() {
    for (alpha, sigma, eps) in [(1.0, 1.0, 0.7), (1.0, 1.0, 0.5), (0.8, 1.3, 0.4), (1.5, 0.7, 0.6)] {
        let spec = ModelSpec::langevin(alpha, sigma, eps).unwrap();
        let k = 1.0 / bessel_series(1.0 / sigma, 1e-17).powi(2);
        let homog = HomogenizedSpec::langevin(alpha, sigma, k).unwrap();
        let l = spec.truncation_half_width(TRUNCATION_ENVELOPE);
        let grid = QuadratureGrid::symmetric_simpson(l, (eps * eps / 10.0).min(1e-3)).unwrap();
        let c = char_fn_mu_eps(&invariant_density(&spec, &homog, &grid).unwrap()).unwrap();
        let want = jacobi_anger(alpha, sigma, eps);
        assert!((c.re - want).abs() < 1e-10, "eps {eps}: {} vs {want}", c.re);
        assert!(c.im.abs() < 1e-12);
    }
}

#[test]
fn bessel_oracle_agrees_with_library_series() {
    for x in [0.5, 1.0, 2.0, 4.0] {
        assert!((bessel_i(0, x) - bessel_series(x, 1e-17)).abs() < 1e-14 * bessel_i(0, x));
    }
}

#[test]
fn repeated_met_runs_emit_identical_summaries() {
    let mut cfg = ExperimentConfig {
        experiment: ExperimentKind::Met,
        ..Default::default()
    };
    cfg.model.eps = vec![0.4, 0.3, 0.25];
    cfg.simulation.n_replicates = 6;
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for (i, workers) in [1, 3].into_iter().enumerate() {
        cfg.simulation.workers = workers;
        let out = dir.path().join(i.to_string());
        emit(&run(&cfg).unwrap(), &out, &["csv".to_owned()]).unwrap();
        bytes.push(std::fs::read(out.join("summary.csv")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_echo_round_trips(
        alpha in 0.01f64..10.0,
        sigma in 0.01f64..10.0,
        first in 0.05f64..1.0,
        ratio in 0.1f64..0.9,
        c in 0.1f64..10.0,
        eta in -2.0f64..3.0,
        n in 1usize..1000,
        seed in any::<u64>(),
        dt in proptest::option::of(1e-6f64..1e-2),
        kind in 0usize..7,
    ) {
        let mut cfg = ExperimentConfig {
            experiment: ExperimentKind::ALL[kind],
            ..Default::default()
        };
        cfg.model.alpha = alpha;
        cfg.model.sigma = sigma;
        cfg.model.eps = vec![first, first * ratio];
        cfg.schedule.c = c;
        cfg.schedule.eta = eta;
        cfg.simulation.n_replicates = n;
        cfg.simulation.base_seed = seed;
        cfg.simulation.dt = dt;
        let text = cfg.to_toml_string().unwrap();
        prop_assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }
}
