use linkedcausal::estimators::{DrawConfig, EstimatorKind, Target};
use linkedcausal::inference::Pipeline;
use linkedcausal::nuisance::expit;
use linkedcausal::sim::{normal_expectation, run_monte_carlo, DgmSpec, McConfig, McIntervals, Scenario};
use linkedcausal::{parallel, streams};
use linkedcausal::inference::CiMethod;

fn config(n: usize, reps: usize, b: usize) -> McConfig {
    let mut cfg = McConfig::new(DgmSpec::continuous(n), Scenario::I, reps, 31);
    cfg.intervals = McIntervals {
        tr: CiMethod::Plugin,
        others: CiMethod::Bootstrap,
        b,
        level: 0.95,
    };
    cfg
}

#[test]
fn monte_carlo_ignores_thread_count() {
    let cfg = config(400, 6, 8);
    let one = parallel::with_threads(1, || run_monte_carlo(&cfg).unwrap());
    let eight = parallel::with_threads(8, || run_monte_carlo(&cfg).unwrap());
    assert_eq!(serde_json::to_string(&one).unwrap(), serde_json::to_string(&eight).unwrap());
}

#[test]
fn no_dropped_bootstrap_replicates_on_the_designs() {
    for dgm in [DgmSpec::continuous(1000), DgmSpec::binary(1000)] {
        let ds = dgm.generate(&mut streams::seeded(8));
        let target = if dgm.family == linkedcausal::OutcomeFamily::Binary { Target::Crr } else { Target::Ate };
        let pipe = Pipeline::new(Scenario::I.model_spec(), EstimatorKind::ALL.to_vec(), target, DrawConfig::new(20, 2));
        let draws = pipe.bootstrap(&ds, 50, 5).unwrap();
        assert_eq!(draws.dropped, 0);
        assert_eq!(draws.values.len(), 50);
    }
}

#[test]
fn spread_shrinks_at_root_n() {
    let small = run_monte_carlo(&config(1000, 200, 0)).unwrap();
    let large = run_monte_carlo(&config(4000, 200, 0)).unwrap();
    for (a, b) in small.summaries.iter().zip(&large.summaries) {
        let ratio = a.sd / b.sd;
        assert!((1.6..=2.5).contains(&ratio), "{}: sd ratio {ratio}", a.method);
    }
}

#[test]
fn scenario_one_coverage_at_moderate_n() {
    for n in [1000, 5000] {
        let res = run_monte_carlo(&config(n, 200, 100)).unwrap();
        for s in &res.summaries {
            let cp = s.cp.unwrap();
            assert!((90.0..=99.0).contains(&cp), "n = {n}, {}: cp {cp}", s.method);
        }
    }
}

#[test]
fn delta_matches_linear_closed_form() {
    let dgm = DgmSpec::continuous(1);
    let fit = dgm.true_fit();
    let x = [0.7];
    for d in [100usize, 10_000] {
        for z in [false, true] {
            let m = dgm.covariate_mean[0] + dgm.covariate_mean[1] * x[0];
            let exact = fit.outcome_at(z, &x, &[m]);
            let slope = fit.outcome_at(z, &x, &[m + 1.0]) - exact;
            let sigma = slope.abs() * dgm.covariate_sd;
            let misses = (0..200u64)
                .filter(|&s| {
                    let got = fit.delta_pair(&x, d, &mut streams::stream(s, 0)).get(z);
                    (got - exact).abs() > 5.0 * sigma / (d as f64).sqrt()
                })
                .count();
            assert!(misses <= 2, "D = {d}: {misses} misses");
        }
    }
}

#[test]
fn binary_delta_matches_quadrature() {
    let dgm = DgmSpec::binary(1);
    let fit = dgm.true_fit();
    for x in [-1.0, 0.3, 1.5] {
        let m = dgm.covariate_mean[0] + dgm.covariate_mean[1] * x;
        let pair = fit.delta_pair(&[x], 100_000, &mut streams::stream(4, 0));
        for z in [false, true] {
            let eta = |v: f64| fit.outcome_linear_predictor(z, &[x], &[v]);
            let oracle = normal_expectation(|v| expit(eta(v)), m, dgm.covariate_sd, 96);
            assert!((pair.get(z) - oracle).abs() < 5e-3, "x = {x}, z = {z}");
        }
    }
}
