use linkedcausal::design::*;
use linkedcausal::estimators::DrawConfig;
use linkedcausal::sim::{DgmSpec, Scenario};
use linkedcausal::streams;
use linkedcausal::NuisanceFit;

fn random_linkage(n: usize) -> DgmSpec {
    let mut dgm = DgmSpec::continuous(n);
    dgm.selection = [0.0, 0.0];
    dgm
}

#[test]
fn pilot_gammas_match_long_run_moments() {
    let big = random_linkage(1_000_000);
    let ds = big.generate(&mut streams::seeded(11));
    let oracle = estimate_gammas(&ds, &big.true_fit(), DrawConfig::new(20, 5), Correction::Off).unwrap();

    let small = random_linkage(20_000);
    let pilot = small.generate(&mut streams::seeded(12));
    let fit = NuisanceFit::fit(&pilot, &Scenario::I.model_spec()).unwrap();
    let g = estimate_gammas(&pilot, &fit, DrawConfig::new(100, 6), Correction::Full).unwrap();
    eprintln!("oracle {oracle:?}\npilot {g:?}");
    assert!(g.corrected);
    assert!((g.gamma1 - oracle.gamma1).abs() <= 0.1 * oracle.gamma1.abs());
    assert!((g.gamma2 - oracle.gamma2).abs() <= 0.1 * oracle.gamma2.abs());
}

#[test]
fn pilot_solution_agrees_with_its_curve() {
    let pilot = random_linkage(5_000).generate(&mut streams::seeded(3));
    let fit = NuisanceFit::fit(&pilot, &Scenario::I.model_spec()).unwrap();
    let g = estimate_gammas(&pilot, &fit, DrawConfig::new(50, 1), Correction::Full).unwrap();
    assert!(g.gamma2 >= 0.0);
    let c = CostSpec::new(10_000.0, 1.0, 4.0).unwrap();
    let s = optimal_allocation(&g, &c).unwrap();
    let step = (1.0 - s.rho_min) / (GRID_POINTS - 1) as f64;
    assert!((s.grid_minimizer().rho - s.rho_star).abs() <= step + 1e-12);
    assert!((s.n_star - c.total / (c.first_phase + s.rho_star * c.second_phase)).abs() < 1e-9);
}
