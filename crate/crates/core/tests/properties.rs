//! Statistical properties checked at desk scale.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use survey_mhde::designs::{draw_sample, simulate_population};
use survey_mhde::mhde;
use survey_mhde::robustness::{
    alpha_curve, empirical_influence, empirical_influence_mle, linear_regime_epsilon, ContamDensity,
};
use survey_mhde::simlab::{self, Estimator, ScenarioConfig};
use survey_mhde::*;

fn gamma0() -> Theta {
    Family::Gamma.theta(2.0, 35_000.0).unwrap()
}

fn scenario(file: &str) -> ScenarioConfig {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    ScenarioConfig::from_path(&root.join(file)).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Relative error on the free scale, so both coordinates count alike.
fn rel_err(t: &Theta, t0: &Theta) -> f64 {
    ((t[0] / t0[0] - 1.0).powi(2) + (t[1] / t0[1] - 1.0).powi(2)).sqrt()
}

#[test]
fn mhde_error_shrinks_with_sample_size() {
    let t0 = gamma0();
    let opts = MhdeOptions::default();
    let mut medians = Vec::new();
    for (k, n) in [250usize, 1000, 4000].into_iter().enumerate() {
        let spec = DesignSpec::new(DesignKind::SrsWor, 40 * n, 0.025);
        let errs = (0..50u64)
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(300 + 100 * k as u64 + s);
                let pop = simulate_population(Family::Gamma, &t0, spec.population_size, 0.0, &mut rng).unwrap();
                let smp = draw_sample(&pop, &spec, &mut rng).unwrap();
                rel_err(&mhde::fit(&smp, Family::Gamma, &opts).unwrap().theta_hat, &t0)
            })
            .collect();
        medians.push(median(errs));
    }
    assert!(medians.windows(2).all(|w| w[1] < w[0]), "{medians:?}");
}

#[test]
fn mhde_is_nearly_as_efficient_as_mle_on_clean_data() {
    let t0 = gamma0();
    let opts = MhdeOptions::default();
    let (mut se_h, mut se_m) = ([0.0; 2], [0.0; 2]);
    for s in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + s);
        let smp = SurveySample::equal_weights(Family::Gamma.sample(&t0, 1000, &mut rng)).unwrap();
        let h = mhde::fit(&smp, Family::Gamma, &opts).unwrap().theta_hat;
        let m = smp.weighted_mle(Family::Gamma).unwrap();
        for j in 0..2 {
            se_h[j] += (h[j] / t0[j] - 1.0).powi(2);
            se_m[j] += (m[j] / t0[j] - 1.0).powi(2);
        }
    }
    for j in 0..2 {
        let ratio = (se_h[j] / se_m[j]).sqrt();
        assert!((0.9..=1.3).contains(&ratio), "parameter {j}: RMSE ratio {ratio}");
    }
}

#[test]
fn mhde_influence_flattens_while_mle_keeps_growing() {
    let t0 = gamma0();
    let opts = MhdeOptions::default();
    let ps = [0.9, 0.99, 0.999, 0.9999, 0.99999, 0.999999, 0.9999999];
    let eps = 0.1;
    let (mut h_norm, mut m_norm) = (Vec::new(), Vec::new());
    for p in ps {
        let h = ContamDensity::point_mass(Family::Gamma.quantile(&t0, p));
        let e = empirical_influence(Family::Gamma, &t0, h, eps, &opts).unwrap();
        let m = empirical_influence_mle(Family::Gamma, &t0, h, eps).unwrap();
        h_norm.push(e[0].hypot(e[1] / t0[1] * t0[0]));
        m_norm.push(m[0].hypot(m[1] / t0[1] * t0[0]));
    }
    let k = ps.len();
    assert!(h_norm.iter().all(|v| v.is_finite()));
    assert!(h_norm[k - 1] / h_norm[k - 2] < 2.0, "{h_norm:?}");
    // Past the bulk the MHDE influence redescends.
    assert!(h_norm[k - 1] < h_norm[2], "{h_norm:?}");
    assert!(m_norm.windows(2).skip(1).all(|w| w[1] > w[0]), "{m_norm:?}");
}

#[test]
fn alpha_curve_starts_at_theta0() {
    let t0 = gamma0();
    let z = Family::Gamma.quantile(&t0, 0.999);
    let c = alpha_curve(
        Family::Gamma,
        &t0,
        ContamDensity::point_mass(z),
        &[0.0, 0.05],
        &MhdeOptions::default(),
    )
    .unwrap();
    assert!(c[0].mhde_converged);
    assert!(rel_err(&Theta::new(Family::Gamma, c[0].mhde).unwrap(), &t0) < 1e-6);
    let h = ContamDensity::point_mass(z);
    assert!(linear_regime_epsilon(Family::Gamma, &t0, &h) <= 1e-3);
}

#[test]
fn contaminated_scenario_separates_the_estimators() {
    let mut cfg = scenario("gamma_contaminated.cfg");
    cfg.replications = 20;
    cfg.design.n_grid = vec![100_000];
    cfg.design.alpha = 0.01;
    let res = simlab::run_scenario(&cfg).unwrap();
    let mhde = res.cell(100_000, Estimator::Mhde, 1).unwrap();
    let mle = res.cell(100_000, Estimator::Mle, 1).unwrap();
    assert!(
        mle.rel_bias.abs() >= 3.0 * mhde.rel_bias.abs(),
        "mle {}, mhde {}",
        mle.rel_bias,
        mhde.rel_bias
    );
    assert!(mhde.rel_bias.abs() < 0.05);
}

#[test]
fn clean_cells_have_comparable_rmse_and_consistent_algebra() {
    let mut cfg = scenario("gamma_srswor.cfg");
    cfg.replications = 100;
    let res = simlab::run_scenario(&cfg).unwrap();
    for c in &res.cells {
        assert!(c.rel_rmse * c.rel_rmse >= c.rel_bias * c.rel_bias);
        assert_eq!(c.failures, 0);
    }
    for j in 0..2 {
        let ratio = |n: usize| {
            res.cell(n, Estimator::Mhde, j).unwrap().rel_rmse / res.cell(n, Estimator::Mle, j).unwrap().rel_rmse
        };
        let (small, large) = (ratio(100_000), ratio(1_000_000));
        assert!((0.9..=1.5).contains(&large), "parameter {j}, n = 1000: {large}");
        // At n = 100 kernel smoothing shrinks the MHDE below the MLE's RMSE
        // (shape ratio ≈ 0.88), so only the upper bound is meaningful there.
        assert!(small <= 1.5, "parameter {j}, n = 100: {small}");
    }
}

#[test]
fn ht_normalizer_concentrates_under_pps() {
    let t0 = gamma0();
    let spec = DesignSpec {
        rho_yz: 0.5,
        ..DesignSpec::new(DesignKind::PoissonPps, 20_000, 0.02)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let pop = simulate_population(Family::Gamma, &t0, spec.population_size, spec.rho_yz, &mut rng).unwrap();
    let r = 500;
    let mut mean = 0.0;
    let mut n_v = 0.0;
    for _ in 0..r {
        let s = draw_sample(&pop, &spec, &mut rng).unwrap();
        mean += s.weight.iter().sum::<f64>() / spec.population_size as f64;
        n_v += survey_mhde::designs::effective_sizes_from_sample(&s).unwrap().n_v_eff;
    }
    mean /= r as f64;
    n_v /= r as f64;
    let tol = 4.0 / (r as f64 * n_v).sqrt();
    assert!((mean - 1.0).abs() < tol, "mean S = {mean}, tol {tol}");
}
