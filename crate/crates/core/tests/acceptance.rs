use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use linkedcausal::design::{self, CostSpec, Correction, GammaEstimates, GRID_POINTS};
use linkedcausal::estimators::{self, DrawConfig, EstimatorKind, Predictions, Target};
use linkedcausal::inference::{self, CiMethod, Pipeline};
use linkedcausal::nuisance::{expit, fit_linear, fit_logistic};
use linkedcausal::sim::{normal_expectation, run_monte_carlo, DgmSpec, McConfig, McIntervals, McResult, Scenario};
use linkedcausal::{parallel, streams, NuisanceFit};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

type Outcome = Result<String, String>;

const SEED: u64 = 20240601;
const SCENARIOS: [Scenario; 5] = [Scenario::I, Scenario::Ii, Scenario::Iii, Scenario::Iv, Scenario::V];

/// Reference bias ×100 at n = 10000, columns ipw, om, impute, tr.
const CONTINUOUS_BIAS: [[f64; 4]; 5] = [
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 158.0, 163.0, 0.0],
    [118.0, 0.0, 43.0, 0.0],
    [163.0, 40.0, 0.0, 0.0],
    [163.0, 163.0, 163.0, 164.0],
];
const CONTINUOUS_CP: [[f64; 4]; 5] = [
    [96.0, 95.0, 94.0, 94.0],
    [96.0, 0.0, 0.0, 94.0],
    [0.0, 95.0, 0.0, 96.0],
    [0.0, 0.0, 94.0, 95.0],
    [0.0, 0.0, 0.0, 0.0],
];
const BINARY_BIAS: [[f64; 4]; 5] = [
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 78.0, 55.0, 0.0],
    [73.0, 0.0, 65.0, 0.0],
    [78.0, -43.0, 0.0, 0.0],
    [78.0, 54.0, 55.0, 46.0],
];

fn table_runs(dgm: DgmSpec, b: usize) -> Result<Vec<McResult>, String> {
    SCENARIOS
        .iter()
        .map(|&sc| {
            let mut cfg = McConfig::new(dgm.clone(), sc, 200, SEED);
            cfg.intervals = McIntervals {
                tr: CiMethod::Plugin,
                others: CiMethod::Bootstrap,
                b,
                level: 0.95,
            };
            run_monte_carlo(&cfg).map_err(|e| format!("scenario {sc}: {e}"))
        })
        .collect()
}

fn cell_report(fails: Vec<String>, checked: usize) -> Outcome {
    if fails.is_empty() {
        Ok(format!("{checked} cells within tolerance"))
    } else {
        Err(fails.join("; "))
    }
}

fn continuous_table() -> Outcome {
    let runs = table_runs(DgmSpec::continuous(10_000), 100)?;
    let mut fails = Vec::new();
    let mut checked = 0;
    for (i, res) in runs.iter().enumerate() {
        for (j, s) in res.summaries.iter().enumerate() {
            let want = CONTINUOUS_BIAS[i][j];
            let tol = if want.abs() >= 40.0 { 15.0 } else { 3.0 };
            checked += 1;
            if (s.bias_x100() - want).abs() > tol {
                fails.push(format!("{} {} bias {:.1} vs {want}", SCENARIOS[i], s.method, s.bias_x100()));
            }
            let want_cp = CONTINUOUS_CP[i][j];
            if want_cp >= 90.0 || want_cp <= 5.0 {
                checked += 1;
                match s.cp {
                    Some(cp) if (cp - want_cp).abs() <= 6.0 => {}
                    cp => fails.push(format!("{} {} cp {cp:?} vs {want_cp}", SCENARIOS[i], s.method)),
                }
            }
        }
    }
    cell_report(fails, checked)
}

fn binary_table() -> Outcome {
    let runs = table_runs(DgmSpec::binary(10_000), 0)?;
    let mut fails = Vec::new();
    let mut checked = 0;
    for (i, res) in runs.iter().enumerate() {
        for (j, s) in res.summaries.iter().enumerate() {
            let want = BINARY_BIAS[i][j];
            let bias = s.bias_x100();
            if s.method == EstimatorKind::Tr && i < 4 {
                checked += 1;
                if bias.abs() > 6.0 {
                    fails.push(format!("{} tr bias {bias:.1}", SCENARIOS[i]));
                }
            } else if want.abs() >= 40.0 {
                checked += 1;
                if (bias - want).abs() > 15.0 {
                    fails.push(format!("{} {} bias {bias:.1} vs {want}", SCENARIOS[i], s.method));
                }
            }
        }
    }
    cell_report(fails, checked)
}

fn triple_robustness() -> Outcome {
    let ds = DgmSpec::continuous(50_000).generate(&mut streams::seeded(SEED));
    let kinds = EstimatorKind::TABLE.to_vec();
    let mut lines = Vec::new();
    for sc in [Scenario::I, Scenario::Ii, Scenario::Iii, Scenario::Iv] {
        let pipe = Pipeline::new(sc.model_spec(), kinds.clone(), Target::Ate, DrawConfig::new(100, SEED));
        let est = pipe.run(&ds, SEED).map_err(|e| e.to_string())?;
        let tr = est[3] - 2.5;
        if tr.abs() >= 0.05 {
            return Err(format!("scenario {sc}: tr error {tr:.4}"));
        }
        let worst = est[..3].iter().map(|v| (v - 2.5).abs()).fold(0.0, f64::max);
        if sc != Scenario::I && worst <= 0.3 {
            return Err(format!("scenario {sc}: no single-strategy estimator off by more than 0.3"));
        }
        lines.push(format!("{sc}: tr {tr:+.4}"));
    }
    Ok(lines.join(", "))
}

fn influence_checks() -> Outcome {
    let dgm = DgmSpec::continuous(1_000_000);
    let ds = dgm.generate(&mut streams::seeded(SEED));
    let pred = Predictions::new(&ds, &dgm.true_fit(), Some(DrawConfig::new(100, SEED))).map_err(|e| e.to_string())?;
    let terms = estimators::eif_terms(&pred).map_err(|e| e.to_string())?;
    let psi: Vec<f64> = terms.phi1.iter().zip(&terms.phi0).map(|(a, b)| a - b - dgm.true_ate()).collect();
    let n = psi.len() as f64;
    let mean = psi.iter().sum::<f64>() / n;
    let se = (psi.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt();
    if mean.abs() > 3.0 * se {
        return Err(format!("influence mean {mean:.2e} exceeds 3 se ({se:.2e})"));
    }
    let ds = DgmSpec::continuous(10_000).generate(&mut streams::seeded(SEED + 1));
    let spec = Scenario::I.model_spec();
    let fit = NuisanceFit::fit(&ds, &spec).map_err(|e| e.to_string())?;
    let rep = inference::eif_variance(&ds, &fit, DrawConfig::new(100, SEED), Target::Ate, 0.95).map_err(|e| e.to_string())?;
    if (rep.se - 0.04).abs() > 0.3 * 0.04 {
        return Err(format!("plug-in se {:.4} not within 30% of 0.04", rep.se));
    }
    Ok(format!("mean {mean:.2e} (se {se:.2e}), plug-in se {:.4}", rep.se))
}

fn design_oracle() -> Outcome {
    let mut rng = streams::seeded(SEED);
    let mut nonpositive = 0;
    let mut unit = 0;
    for k in 0..100 {
        let g1 = if k % 5 == 0 { -rng.random::<f64>() * 5.0 } else { rng.random::<f64>() * 20.0 };
        let g2 = rng.random::<f64>() * 20.0;
        let c1 = 0.1 + rng.random::<f64>() * 10.0;
        let c2 = 0.1 + rng.random::<f64>() * 10.0;
        let c = CostSpec::new(500.0 * (c1 + c2), c1, c2).map_err(|e| e.to_string())?;
        let s = design::optimal_allocation(&GammaEstimates::new(g1, g2), &c).map_err(|e| e.to_string())?;
        let step = (1.0 - s.rho_min) / (GRID_POINTS - 1) as f64;
        let grid = s.grid_minimizer().rho;
        if (grid - s.rho_star).abs() > step + 1e-12 {
            return Err(format!("draw {k}: closed form {} vs grid {grid}", s.rho_star));
        }
        if g1 <= 0.0 {
            nonpositive += 1;
        }
        if g1 <= 0.0 || g2 * c1 >= g1 * c2 {
            unit += 1;
            if s.rho_star != 1.0 {
                return Err(format!("draw {k}: boundary branch gave {}", s.rho_star));
            }
        }
    }
    Ok(format!("100 draws, {nonpositive} with non-positive first gamma, {unit} on the boundary"))
}

fn log_likelihood(x: &DMatrix<f64>, y: &[f64], b: &[f64]) -> f64 {
    (0..x.nrows())
        .map(|i| {
            let eta: f64 = (0..x.ncols()).map(|j| x[(i, j)] * b[j]).sum();
            y[i] * eta - eta.exp().ln_1p()
        })
        .sum()
}

/// Cyclic coordinate ascent, each coordinate solved by bisection on its score.
fn brute_force_logistic(x: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
    let p = x.ncols();
    let mut b = vec![0.0; p];
    let score = |b: &[f64], j: usize| -> f64 {
        (0..x.nrows())
            .map(|i| {
                let eta: f64 = (0..p).map(|k| x[(i, k)] * b[k]).sum();
                x[(i, j)] * (y[i] - 1.0 / (1.0 + (-eta).exp()))
            })
            .sum()
    };
    for _ in 0..5000 {
        let mut moved = 0.0f64;
        for j in 0..p {
            let old = b[j];
            let (mut lo, mut hi) = (old - 20.0, old + 20.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                b[j] = mid;
                if score(&b, j) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo < 1e-15 {
                    break;
                }
            }
            b[j] = 0.5 * (lo + hi);
            moved = moved.max((b[j] - old).abs());
        }
        if moved < 1e-13 {
            break;
        }
    }
    b
}

fn kernel_oracles() -> Outcome {
    let mut rng = streams::seeded(SEED);
    let mut worst_logit = 0.0f64;
    for k in 0..20 {
        let n = 60 + 10 * k;
        let x = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() * 2.0 - 1.0 });
        let y: Vec<f64> = (0..n)
            .map(|i| f64::from(rng.random::<f64>() < expit(0.2 + 0.8 * x[(i, 1)] - 0.6 * x[(i, 2)])))
            .collect();
        let fit = fit_logistic(&x, &y).map_err(|e| format!("logistic problem {k}: {e}"))?;
        let oracle = brute_force_logistic(&x, &y);
        if log_likelihood(&x, &y, &oracle) > log_likelihood(&x, &y, &fit.coef) + 1e-9 {
            return Err(format!("logistic problem {k}: oracle found a higher likelihood"));
        }
        let gap = fit.coef.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_logit = worst_logit.max(gap);
    }
    if worst_logit > 1e-6 {
        return Err(format!("logistic gap {worst_logit:.2e}"));
    }

    let mut worst_ols = 0.0f64;
    for k in 0..20 {
        let n = 30 + 5 * k;
        let x = DMatrix::from_fn(n, 4, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() * 4.0 - 2.0 });
        let y: Vec<f64> = (0..n).map(|i| 1.0 + x[(i, 1)] - 2.0 * x[(i, 3)] + rng.random::<f64>()).collect();
        let fit = fit_linear(&x, &y).map_err(|e| e.to_string())?;
        let xtx = x.transpose() * &x;
        let xty = x.transpose() * DVector::from_vec(y);
        let normal = xtx.cholesky().ok_or("normal equations not positive definite")?.solve(&xty);
        let gap = fit.coef.iter().zip(normal.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_ols = worst_ols.max(gap);
    }
    if worst_ols > 1e-10 {
        return Err(format!("ols gap {worst_ols:.2e}"));
    }

    let dgm = DgmSpec::continuous(1);
    let fit = dgm.true_fit();
    let x = [0.4];
    let m = dgm.covariate_mean[0] + dgm.covariate_mean[1] * x[0];
    let exact = fit.outcome_at(true, &x, &[m]);
    let rmse = |d: usize| {
        let sq: f64 = (0..400u64)
            .map(|s| (fit.delta_pair(&x, d, &mut streams::stream(s, 1)).get(true) - exact).powi(2))
            .sum();
        (sq / 400.0).sqrt()
    };
    let ratio = rmse(100) / rmse(10_000);
    if !(8.0..=12.5).contains(&ratio) {
        return Err(format!("delta error ratio between D = 100 and D = 10000 is {ratio:.2}"));
    }

    let dgm = DgmSpec::binary(1);
    let fit = dgm.true_fit();
    let mut worst_quad = 0.0f64;
    for xv in [-1.5, -0.2, 0.9] {
        let m = dgm.covariate_mean[0] + dgm.covariate_mean[1] * xv;
        let pair = fit.delta_pair(&[xv], 100_000, &mut streams::stream(SEED, 2));
        for z in [false, true] {
            let oracle = normal_expectation(|v| expit(fit.outcome_linear_predictor(z, &[xv], &[v])), m, dgm.covariate_sd, 96);
            worst_quad = worst_quad.max((pair.get(z) - oracle).abs());
        }
    }
    if worst_quad > 5e-3 {
        return Err(format!("binary delta off quadrature by {worst_quad:.2e}"));
    }
    Ok(format!(
        "logistic {worst_logit:.1e}, ols {worst_ols:.1e}, delta rate ratio {ratio:.2}, quadrature {worst_quad:.1e}"
    ))
}

fn fingerprint() -> Vec<String> {
    let dgm = DgmSpec::continuous(2000);
    let ds = dgm.generate(&mut streams::seeded(SEED));
    let mut csv = Vec::new();
    ds.write_csv(&mut csv).unwrap();
    let spec = Scenario::I.model_spec();
    let fit = NuisanceFit::fit(&ds, &spec).unwrap();
    let pred = Predictions::new(&ds, &fit, Some(DrawConfig::new(50, SEED))).unwrap();
    let pipe = Pipeline::new(spec, EstimatorKind::ALL.to_vec(), Target::Ate, DrawConfig::new(20, SEED));
    let boot = pipe.bootstrap(&ds, 20, SEED).unwrap();
    let mut cfg = McConfig::new(DgmSpec::binary(500), Scenario::Iii, 4, SEED);
    cfg.intervals.b = 5;
    let mc = run_monte_carlo(&cfg).unwrap();
    let gammas = design::estimate_gammas(&ds, &fit, DrawConfig::new(50, SEED), Correction::Full).unwrap();
    vec![
        String::from_utf8(csv).unwrap(),
        format!("{pred:?}"),
        format!("{boot:?}"),
        serde_json::to_string(&mc).unwrap(),
        serde_json::to_string(&gammas).unwrap(),
    ]
}

fn thread_determinism() -> Outcome {
    let one = parallel::with_threads(1, fingerprint);
    let eight = parallel::with_threads(8, fingerprint);
    let names = ["generate", "predictions", "bootstrap", "monte carlo", "design gammas"];
    let differing: Vec<&str> = names.iter().zip(one.iter().zip(&eight)).filter(|(_, (a, b))| a != b).map(|(n, _)| *n).collect();
    if differing.is_empty() {
        Ok(format!("{} entry points identical", names.len()))
    } else {
        Err(format!("thread count changes {}", differing.join(", ")))
    }
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, fn() -> Outcome); 7] = [
        ("ac1", "continuous table at n = 10000", continuous_table),
        ("ac2", "binary table at n = 10000", binary_table),
        ("ac3", "triple robustness at n = 50000", triple_robustness),
        ("ac4", "influence function mean and plug-in se", influence_checks),
        ("ac5", "design closed form against grid", design_oracle),
        ("ac6", "numerical kernel oracles", kernel_oracles),
        ("ac7", "thread count determinism", thread_determinism),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| id.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
