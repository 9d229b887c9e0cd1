mod common;

use common::{lin1, scalar_model};
use mvmd_core::experiments::*;
use mvmd_core::frozen::{RateOperator, Regime};
use mvmd_core::multiscale::default_lambda;
use mvmd_core::rate::LinearizedDrift;
use mvmd_core::sde::{PathGrid, TimeGrid};
use mvmd_core::Sequential;

#[test]
fn sweep_schedules() {
    let s = SweepSpec::new(SweepParam::Delta, 0.1, 0.1, 3, 4).unwrap();
    let v = s.values();
    assert!((v[2] - 1e-3).abs() < 1e-15);
    assert!(s.check_fit().is_ok());
    assert!(SweepSpec::new(SweepParam::Epsilon, 0.1, 1.0, 3, 4).is_err());
    assert!(SweepSpec::new(SweepParam::Dt, 0.1, 0.5, 2, 4).unwrap().check_fit().is_err());
}

#[test]
fn slope_fit_statuses() {
    let exact: Vec<SweepPoint> = [1e-3, 1e-2, 1e-1]
        .iter()
        .map(|&p| SweepPoint { param: p, value: 3.0 * p * p, se: 0.0 })
        .collect();
    let f = SlopeFit::fit(exact);
    assert_eq!(f.status, FitStatus::Fitted);
    assert!((f.slope - 2.0).abs() < 1e-12);
    assert!(f.within(2.0, 1e-6));

    let noisy: Vec<SweepPoint> = [(1.0, 1.0), (2.0, 0.1), (3.0, 5.0), (4.0, 0.2)]
        .iter()
        .map(|&(p, v)| SweepPoint { param: p, value: v, se: 0.0 })
        .collect();
    let f = SlopeFit::fit(noisy);
    assert_eq!(f.status, FitStatus::Inconclusive);
    assert!(!f.within(f.slope, 1.0));

    let bad = vec![
        SweepPoint { param: 1.0, value: 1.0, se: 0.0 },
        SweepPoint { param: 2.0, value: f64::NAN, se: 0.0 },
        SweepPoint { param: 3.0, value: 1.0, se: 0.0 },
    ];
    assert_eq!(SlopeFit::fit(bad).status, FitStatus::NonFinite);
}

#[test]
fn stiff_grid_respects_the_guard() {
    for eps in [1e-2, 3e-3, 7e-5] {
        let g = stiff_grid(1.0, eps).unwrap();
        assert!(g.dt() <= eps / 10.0 * (1.0 + 1e-12));
        assert!((g.horizon() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn lambda_schedules() {
    let d = [1e-1, 1e-2, 1e-3, 1e-4];
    assert!(lambda_schedule(&d, default_lambda).consistent);
    assert!(!lambda_schedule(&d, f64::sqrt).consistent);
    assert!(!lambda_schedule(&d, |_| 1.0).consistent);
}

#[test]
fn averaging_error_shrinks_linearly() {
    let pts = [(2e-2, 2e-2), (6e-3, 6e-3), (2e-3, 2e-3)];
    let cfg = StudyConfig::scalar(1.0, 32, 8, 3, 1.0);
    let f = averaging_study(&lin1(), &pts, &cfg, &Sequential).unwrap();
    assert!(f.within(1.0, 0.3), "{f:?}");
}

#[test]
fn deterministic_models_skip_the_fit() {
    let m = scalar_model("-x0 + y0", "0", "x0 - 2*y0", "0", 4.0);
    let cfg = StudyConfig::scalar(0.5, 4, 2, 1, 1.0);
    let f = averaging_study(&m, &[(0.1, 0.1), (0.05, 0.05), (0.02, 0.02)], &cfg, &Sequential).unwrap();
    assert_eq!(f.status, FitStatus::Skipped);
    assert_eq!(f.points.len(), 3);
}

#[test]
fn averaging_study_guards_and_aborts() {
    let cfg = StudyConfig::scalar(1.0, 0, 8, 3, 1.0);
    assert!(averaging_study(&lin1(), &[(0.1, 0.1)], &cfg, &Sequential).is_err());
    let wild = scalar_model("x0*x0*x0*x0", "1", "x0 - 2*y0", "1", 4.0);
    let cfg = StudyConfig::scalar(2.0, 8, 2, 1, 3.0);
    let f = averaging_study(&wild, &[(0.1, 0.1), (0.05, 0.05)], &cfg, &Sequential).unwrap();
    assert_eq!(f.status, FitStatus::Aborted);
    assert!(f.note.is_some());
}

#[test]
fn zero_control_moments_match_the_free_run() {
    let pts = [(1e-2, 0.1), (1e-3, 0.1)];
    let cfg = StudyConfig::scalar(0.5, 16, 4, 5, 1.0);
    let s = moment_study(&lin1(), &pts, &[0.0], &[0.0], &cfg, &Sequential).unwrap();
    for p in &s.points {
        assert_eq!(p.fast_sup, p.fast_sup_free);
    }
}

#[test]
fn controlled_moments_scale() {
    // γ = 1 throughout, so the fast control term stays of order one
    let pts = [(0.1, 0.1), (0.03, 0.03), (0.01, 0.01)];
    let mut cfg = StudyConfig::scalar(1.0, 32, 8, 7, 1.0);
    cfg.regime = Regime::Two { gamma: 1.0 };
    let s = moment_study(&lin1(), &pts, &[1.0], &[1.0], &cfg, &Sequential).unwrap();
    assert!(s.deviation_sup.slope.abs() <= 0.3, "{:?}", s.deviation_sup);
    // never faster than 1/ε
    assert!(s.fast_sup.slope >= -1.3, "{:?}", s.fast_sup);
    assert!(s.slow_sup.slope.abs() <= 0.3, "{:?}", s.slow_sup);
    for p in &s.points {
        assert!(p.fast_integral.0.is_finite() && p.fast_integral.0 < 10.0);
    }
}

#[test]
fn slow_process_is_half_holder_in_mean_square() {
    let cfg = RegularityConfig {
        delta: 0.1,
        epsilon: 1e-3,
        windows: vec![0.01, 0.02, 0.05, 0.1],
        h1: vec![1.0],
        h2: vec![0.0],
        study: StudyConfig::scalar(1.0, 64, 2, 11, 1.0),
    };
    let f = time_regularity(&lin1(), &cfg, &Sequential).unwrap();
    assert!(f.within(1.0, 0.2), "{f:?}");
}

fn lin1_xbar(dt: f64) -> PathGrid {
    PathGrid::from_fn(TimeGrid::new(1.0, dt).unwrap(), 1, |t, o| o[0] = (-t / 4.0).exp())
}

#[test]
fn khasminskii_constant_test_function_has_no_gap() {
    let cfg = KhasminskiiConfig { replicas: 4, ..Default::default() };
    let r = khasminskii_check(&lin1(), &lin1_xbar(1e-3), &|t, _| 1.0 + t, &[1e-2, 1e-3], &cfg, &Sequential).unwrap();
    for p in &r.fit.points {
        assert!(p.value < 1e-12, "{p:?}");
    }
    assert_eq!(r.fit.status, FitStatus::Skipped);
}

#[test]
fn khasminskii_gap_and_profile() {
    let cfg = KhasminskiiConfig { replicas: 16, seed: 2, ..Default::default() };
    let m = lin1();
    let xbar = lin1_xbar(1e-3);
    let r = khasminskii_check(&m, &xbar, &|_, y| y[0].tanh(), &[1e-2, 1e-3, 1e-4], &cfg, &Sequential).unwrap();
    assert!(r.monotone, "{:?}", r.fit.points);
    assert!((r.windows[0] - 1e-2f64.cbrt()).abs() < 1e-3);

    // at dt = ε/10 the scheme's own stationary variance is 1/3.6, not 1/4
    let fine = KhasminskiiConfig { resolution: 100.0, ..cfg };
    let sq = khasminskii_check(&m, &xbar, &|_, y| y[0] * y[0], &[1e-4], &fine, &Sequential).unwrap();
    for p in &sq.profiles {
        let x = (-p.t_mid / 4.0).exp();
        let exact = 0.25 + x * x / 4.0;
        assert!((p.empirical - exact).abs() < 0.05 * exact, "{p:?} vs {exact}");
        assert!((p.reference - exact).abs() < 0.05 * exact, "{p:?} vs {exact}");
    }
}

fn targets(regime: Regime) -> (RateOperator, LinearizedDrift) {
    let g = TimeGrid::new(1.0, 1e-3).unwrap();
    let q = match regime {
        Regime::One => 1.0,
        Regime::Two { .. } => 1.25,
    };
    (
        RateOperator::constant(g, 1, regime, &[q], "analytic").unwrap(),
        LinearizedDrift::constant(g, 1, &[-0.5]),
    )
}

#[test]
fn mdp_full_event_and_unusable_points() {
    let (q, lin) = targets(Regime::One);
    let cfg = MdpConfig::scalar(0.0, 2, 50, 1, 1.0);
    let r = mdp_probe(&lin1(), Regime::One, &[0.1], &q, &lin, &cfg, &Sequential).unwrap();
    assert_eq!(r.points[0].p_hat, 1.0);
    assert_eq!(r.points[0].rate_estimate, Some(0.0));
    assert_eq!(r.infimum, 0.0);

    let cfg = MdpConfig::scalar(10.0, 2, 50, 1, 1.0);
    let r = mdp_probe(&lin1(), Regime::One, &[0.1], &q, &lin, &cfg, &Sequential).unwrap();
    assert!(!r.points[0].usable);
    assert_eq!(r.points[0].rate_estimate, None);
    assert!(r.final_estimate().is_none());
}

#[test]
fn mdp_regime_two_rate_is_lower() {
    let cfg = MdpConfig::scalar(1.0, 20, 1000, 4, 1.0);
    let (q1, l1) = targets(Regime::One);
    let two = Regime::Two { gamma: 1.0 };
    let (q2, l2) = targets(two);
    let r1 = mdp_probe(&lin1(), Regime::One, &[0.05], &q1, &l1, &cfg, &Sequential).unwrap();
    let r2 = mdp_probe(&lin1(), two, &[0.05], &q2, &l2, &cfg, &Sequential).unwrap();
    assert!((r1.infimum - 0.790988).abs() < 1e-3);
    assert!(r2.infimum < r1.infimum);
    let (a, b) = (r1.final_estimate().unwrap(), r2.final_estimate().unwrap());
    assert!(b < a, "regime 2 {b} vs regime 1 {a}");
    let g1 = r1.points[0].gaussian_rate.unwrap();
    assert!((a - g1).abs() < 0.15 * g1, "{a} vs Gaussian {g1}");
}
