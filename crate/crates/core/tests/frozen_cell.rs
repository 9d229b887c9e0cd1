mod common;

use common::{lin1, scalar_model};
use mvmd_core::frozen::*;
use mvmd_core::measure::{wasserstein2_1d, MeasureMoments, ParticleCloud};
use mvmd_core::sde::{PathGrid, RngPlan, TimeGrid};
use mvmd_core::Sequential;

fn at_one() -> (Vec<f64>, MeasureMoments) {
    (vec![1.0], MeasureMoments::dirac(&[1.0]))
}

fn chains(chains: usize, seed: u64) -> FrozenConfig {
    FrozenConfig {
        horizon: 200.0,
        dt: 1e-3,
        burn_in: 20.0,
        thinning: 100,
        chains,
        seed,
        ..FrozenConfig::default()
    }
}

#[test]
fn frozen_mean_approaches_stationary_mean() {
    let (x, mu) = at_one();
    let grid = TimeGrid::new(400.0, 1e-2).unwrap();
    let p = simulate_frozen(&lin1(), &x, &mu, &[0.0], &grid, &RngPlan::new(3)).unwrap();
    let tail: Vec<f64> = p.component(0)[2000..].to_vec();
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    // time average over [20, 400] of an OU with rate 2 and variance 1/4:
    // variance of the average ≈ 2·(1/4)·(1/2)/380
    let se = (0.25f64 / 380.0).sqrt();
    assert!((mean - 0.5).abs() < 2.0 * se, "{mean}");
    assert_eq!(p, simulate_frozen(&lin1(), &x, &mu, &[0.0], &grid, &RngPlan::new(3)).unwrap());
}

#[test]
fn lin1_invariant_law() {
    let (x, mu) = at_one();
    let inv = estimate_invariant_measure(&lin1(), &x, &mu, &chains(256, 1), &Sequential).unwrap();
    assert!((inv.mean[0] - 0.5).abs() < 0.01, "{}", inv.mean[0]);
    assert!((inv.variance[0] - 0.25).abs() < 0.02 * 0.25 * 2.0, "{}", inv.variance[0]);
    let rate = inv.mixing_rate.unwrap();
    assert!((rate / inv.kappa_rate.unwrap() - 1.0).abs() < 0.15, "{rate}");
    assert!(inv.ess > 1e4);
}

#[test]
fn seeds_agree_within_errors() {
    let (x, mu) = at_one();
    let a = estimate_invariant_measure(&lin1(), &x, &mu, &chains(32, 10), &Sequential).unwrap();
    let b = estimate_invariant_measure(&lin1(), &x, &mu, &chains(32, 11), &Sequential).unwrap();
    let combined = (a.mean_se[0].powi(2) + b.mean_se[0].powi(2)).sqrt();
    assert!((a.mean[0] - b.mean[0]).abs() < 3.0 * combined);
}

#[test]
fn initialization_free() {
    let (x, mu) = at_one();
    let mut near = chains(16, 5);
    near.y0 = Some(vec![0.0]);
    let mut far = chains(16, 6);
    far.y0 = Some(vec![50.0]);
    let a = estimate_invariant_measure(&lin1(), &x, &mu, &near, &Sequential).unwrap();
    let b = estimate_invariant_measure(&lin1(), &x, &mu, &far, &Sequential).unwrap();
    let w = wasserstein2_1d(&a.cloud, &b.cloud).unwrap();
    // W2 between two samples of the same law is dominated by the mean gap
    // and the quantile noise; both are of the order of the standard errors.
    let combined = (a.mean_se[0].powi(2) + b.mean_se[0].powi(2)).sqrt();
    assert!(w < 3.0 * combined + 0.02, "{w} vs {combined}");
}

#[test]
fn lin1_averaged_drift() {
    let (x, mu) = at_one();
    let m = lin1();
    let inv = estimate_invariant_measure(&m, &x, &mu, &chains(64, 2), &Sequential).unwrap();
    let e = averaged_drift(&m, &x, &mu, &inv).unwrap();
    assert!((e.value[0] + 0.25).abs() < 3.0 * e.se[0].max(1e-3), "{:?}", e);

    let centered = scalar_model("y0 - 0.5*x0", "1", "x0 - 2*y0", "1", 4.0);
    let c = averaged_drift(&centered, &x, &mu, &inv).unwrap();
    assert!(c.value[0].abs() < 2.0 * c.se[0] + 1e-12, "{:?}", c);

    let cfg = FrozenConfig {
        horizon: 40.0,
        dt: 0.01,
        burn_in: 5.0,
        chains: 16,
        antithetic: true,
        ..FrozenConfig::default()
    };
    let s = averaged_drift_at(&m, &x, &mu, &cfg, &Sequential).unwrap();
    assert!((s.value[0] + 0.25).abs() < 1e-6, "{:?}", s);
}

fn poisson(replicas: usize, seed: u64) -> PoissonConfig {
    PoissonConfig {
        replicas,
        dt: 1e-3,
        seed,
        ..PoissonConfig::default()
    }
}

#[test]
fn lin1_poisson_cell() {
    let (x, mu) = at_one();
    let m = lin1();
    let inv = estimate_invariant_measure(&m, &x, &mu, &chains(64, 2), &Sequential).unwrap();
    let phi = solve_poisson_phi(&m, &x, &mu, &[1.0], &poisson(2000, 4), &inv, &Sequential).unwrap();
    let tol = (2.0 * phi.se[0]).max(0.02 * 0.25);
    assert!((phi.value[0] - 0.25).abs() < tol, "{:?}", phi);

    let at_mean = solve_poisson_phi(&m, &x, &mu, &[0.5], &poisson(2000, 5), &inv, &Sequential).unwrap();
    assert!(at_mean.value[0].abs() < 2.0 * at_mean.se[0], "{:?}", at_mean);

    let flat = scalar_model("-x0", "1", "x0 - 2*y0", "1", 4.0);
    let zero = solve_poisson_phi(&flat, &x, &mu, &[1.0], &poisson(100, 5), &inv, &Sequential).unwrap();
    assert_eq!(zero.value[0], 0.0);
}

#[test]
fn poisson_centering_and_linear_growth() {
    let (x, mu) = at_one();
    let m = lin1();
    let inv = estimate_invariant_measure(&m, &x, &mu, &chains(64, 2), &Sequential).unwrap();
    // ν-average of b − b̄ vanishes
    let bbar = averaged_drift(&m, &x, &mu, &inv).unwrap();
    let (centred, se) = inv.average(1, |y, o| o[0] = m.eval_b(&x, y, &mu).unwrap()[0] - bbar.value[0]);
    assert!(centred[0].abs() <= 2.0 * se[0] + 1e-12);

    let ys = [-4.0, -2.0, 0.0, 2.0, 4.0];
    let (mut ny, mut phi) = (Vec::new(), Vec::new());
    for (i, y) in ys.iter().enumerate() {
        let s = solve_poisson_phi(&m, &x, &mu, &[*y], &poisson(200, 20 + i as u64), &inv, &Sequential).unwrap();
        ny.push(y.abs());
        phi.push(s.value[0].abs());
        assert!(s.growth_constant.is_finite());
    }
    let fit = mvmd_core::stats::fit_line(&ny, &phi).unwrap();
    assert!(fit.slope.is_finite() && fit.intercept.is_finite());
    assert!(fit.slope < 1.0, "{fit:?}");
}

#[test]
fn lin1_grad_phi_g() {
    let (x, mu) = at_one();
    let cfg = GradConfig {
        fd_step: 1e-2,
        poisson: poisson(200, 6),
    };
    let mut values = Vec::new();
    for y in [-3.0, -1.0, 0.0, 1.0, 3.0] {
        let g = grad_y_phi_g(&lin1(), &x, &mu, &[y], &cfg, &Sequential).unwrap();
        assert!((g.value[0] - 0.5).abs() < 0.03 * 0.5, "{:?}", g);
        values.push(g.value[0]);
    }
    let spread = values.iter().cloned().fold(f64::MIN, f64::max) - values.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread < 1e-3);

    let flat = scalar_model("-x0", "1", "x0 - 2*y0", "1", 4.0);
    assert_eq!(grad_y_phi_g(&flat, &x, &mu, &[1.0], &cfg, &Sequential).unwrap().value, [0.0]);
}

#[test]
fn lin1_rate_operators() {
    let m = lin1();
    let grid = TimeGrid::new(1.0, 0.01).unwrap();
    let xbar = PathGrid::from_fn(grid, 1, |t, o| o[0] = (-t / 4.0).exp());
    let cfg = QConfig { stride: 50, samples: 4, ..QConfig::default() };
    let q1 = assemble_q(&m, &xbar, Regime::One, &cfg, &Sequential).unwrap();
    let q2 = assemble_q(&m, &xbar, Regime::Two { gamma: 1.0 }, &cfg, &Sequential).unwrap();
    for k in 0..grid.nodes() {
        assert_eq!(q1.q(k), [1.0]);
        assert!((q2.q(k)[0] - 1.25).abs() < 0.03 * 1.25, "{}", q2.q(k)[0]);
    }
    assert!(q2.min_gap_eigenvalue(&q1).unwrap() >= -1e-8);
    assert_eq!(q2.regime(), Regime::Two { gamma: 1.0 });
}

#[test]
fn dirac_cloud_has_no_spread() {
    let c = ParticleCloud::from_scalars(vec![0.0; 4]).unwrap();
    assert_eq!(c.moments().variance()[0], 0.0);
}
