//! Acceptance run on the linear test model. Prints one line per criterion
//! and exits non-zero when any fails. Criteria ids given as arguments
//! restrict the run, e.g. `cargo test --test acceptance -- A1 A6`.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use mvmd::config;
use mvmd::io::Format;
use mvmd::{run_campaign, validated_model, CampaignOptions, RayonExecutor};
use mvmd_core::dsl::CoefficientModel;
use mvmd_core::experiments::{averaging_study, constant_control, mdp_probe, stiff_grid, MdpConfig, StudyConfig};
use mvmd_core::frozen::{
    assemble_q, estimate_invariant_measure, grad_y_phi_g, solve_poisson_phi, FrozenConfig, GradConfig, PoissonConfig,
    QConfig, RateOperator, Regime,
};
use mvmd_core::measure::{wasserstein1_hist, Histogram1d, MeasureMoments};
use mvmd_core::multiscale::{
    controlled_fast_gap, default_lambda, default_window, gaussian_slots, occupation_measure, run_ensemble,
    solve_averaged_ode, AveragedOdeConfig, AxisSpec, BinSpec, MultiscaleConfig, Snapshot,
};
use mvmd_core::rate::{
    endpoint_rate_infimum, integrate_feedback, linearize_drift, optimal_controls, rate_functional, sigma_along,
    solve_skeleton, FastGrid, LinearizeConfig, RatePath, RateReport,
};
use mvmd_core::sde::{PathGrid, TimeGrid};
use mvmd_core::{stats, Sequential};

const LIN1: &str = r#"
[model]
n = 1
m = 1
d1 = 1
d2 = 1
b0 = "-x0 + y0 + 0.25*mu.mean0"
sigma00 = "1"
f0 = "x0 - 2*y0"
g00 = "1"
"#;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

struct Env {
    model: CoefficientModel,
    exec: RayonExecutor,
}

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

fn unit_grid() -> TimeGrid {
    TimeGrid::new(1.0, 1e-3).unwrap()
}

fn xbar(env: &Env, grid: &TimeGrid) -> PathGrid {
    solve_averaged_ode(&env.model, &[1.0], grid, &AveragedOdeConfig::default(), &env.exec)
        .unwrap()
        .path
}

fn a1(env: &Env) -> Verdict {
    let start = Instant::now();
    let cfg = FrozenConfig {
        horizon: 200.0,
        dt: 1e-3,
        burn_in: 20.0,
        thinning: 100,
        chains: 512,
        seed: 1,
        ..FrozenConfig::default()
    };
    let inv = estimate_invariant_measure(&env.model, &[1.0], &MeasureMoments::dirac(&[1.0]), &cfg, &env.exec).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (mean, var) = (inv.mean[0], inv.variance[0]);
    verdict(
        rel(mean, 0.5) <= 0.01 && rel(var, 0.25) <= 0.02 && secs < 10.0,
        format!("mean {mean:.5} (0.5 ±1%), variance {var:.5} (0.25 ±2%), {secs:.1} s (< 10 s)"),
    )
}

fn a2(env: &Env) -> Verdict {
    let sums = [1e-2, 3e-3, 1e-3, 3e-4, 1e-4];
    let points: Vec<(f64, f64)> = sums.iter().map(|s| (s / 2.0, s / 2.0)).collect();
    let cfg = StudyConfig::scalar(1.0, 128, 64, 2, 1.0);
    let start = Instant::now();
    let fit = averaging_study(&env.model, &points, &cfg, &env.exec).unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        fit.within(1.0, 0.3) && fit.r2 >= 0.9 && secs < 600.0,
        format!(
            "slope {:.3} (1 ± 0.3), R² {:.3} (≥ 0.9), {:?}, {secs:.0} s (< 600 s)",
            fit.slope, fit.r2, fit.status
        ),
    )
}

fn a3(env: &Env) -> Verdict {
    let start = Instant::now();
    let (x, mu) = ([1.0], MeasureMoments::dirac(&[1.0]));
    let frozen = FrozenConfig {
        horizon: 200.0,
        dt: 1e-3,
        burn_in: 20.0,
        thinning: 100,
        chains: 64,
        seed: 3,
        ..FrozenConfig::default()
    };
    let inv = estimate_invariant_measure(&env.model, &x, &mu, &frozen, &env.exec).unwrap();
    let pc = PoissonConfig {
        replicas: 2000,
        dt: 1e-3,
        seed: 4,
        ..PoissonConfig::default()
    };
    let phi = solve_poisson_phi(&env.model, &x, &mu, &[1.0], &pc, &inv, &env.exec).unwrap();
    let gc = GradConfig {
        fd_step: 1e-2,
        poisson: PoissonConfig { replicas: 200, seed: 5, ..pc.clone() },
    };
    let grad = grad_y_phi_g(&env.model, &x, &mu, &[1.0], &gc, &env.exec).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (v, se, g) = (phi.value[0], phi.se[0], grad.value[0]);
    let tol = (2.0 * se).max(0.02 * 0.25);
    verdict(
        (v - 0.25).abs() <= tol && rel(g, 0.5) <= 0.03 && secs < 60.0,
        format!("Φ {v:.5} ± {se:.5} (0.25 within {tol:.4}), ∂yΦ·g {g:.5} (0.5 ±3%), {secs:.1} s (< 60 s)"),
    )
}

fn a4(env: &Env) -> Verdict {
    let grid = TimeGrid::new(1.0, 0.01).unwrap();
    let xb = xbar(env, &grid);
    let q1 = assemble_q(&env.model, &xb, Regime::One, &QConfig::default(), &env.exec).unwrap();
    let q2 = assemble_q(&env.model, &xb, Regime::Two { gamma: 1.0 }, &QConfig::default(), &env.exec).unwrap();
    let exact = (0..grid.nodes()).all(|k| q1.q(k) == [1.0]);
    let worst = (0..grid.nodes()).map(|k| rel(q2.q(k)[0], 1.25)).fold(0.0, f64::max);
    let gap = q2.min_gap_eigenvalue(&q1).unwrap();
    verdict(
        exact && worst <= 0.03 && gap >= 0.0,
        format!("Q1 ≡ 1: {exact}, worst |Q2 − 1.25|/1.25 {worst:.4} (≤ 0.03), min eig(Q2 − Q1) {gap:.4} (≥ 0)"),
    )
}

fn a5(env: &Env) -> Verdict {
    let g = unit_grid();
    let xb = xbar(env, &g);
    let lin = linearize_drift(&env.model, &xb, &LinearizeConfig::default(), &env.exec).unwrap();
    let sigma = sigma_along(&env.model, &xb).unwrap();
    let z = solve_skeleton(&lin, &sigma, &PathGrid::from_fn(g, 1, |_, o| o[0] = 1.0)).unwrap().phi.last()[0];

    let line = RatePath::new(PathGrid::from_fn(g, 1, |t, o| o[0] = t)).unwrap();
    let q1 = assemble_q(&env.model, &xb, Regime::One, &QConfig::default(), &env.exec).unwrap();
    // regime 2 at 1e-3 needs Q2 sharper than its Monte Carlo estimate; A4 covers the estimate
    let q2 = RateOperator::constant(g, 1, Regime::Two { gamma: 1.0 }, &[1.25], "analytic").unwrap();
    let r1 = RateReport::new(&q1, rate_functional(&line, &q1, &lin).unwrap());
    let r2 = RateReport::new(&q2, rate_functional(&line, &q2, &lin).unwrap());

    let x0 = MeasureMoments::dirac(&[1.0]);
    let gc = GradConfig {
        poisson: PoissonConfig {
            replicas: 200,
            dt: 1e-3,
            seed: 6,
            ..PoissonConfig::default()
        },
        ..GradConfig::default()
    };
    let dphig_value = grad_y_phi_g(&env.model, &[1.0], &x0, &[0.0], &gc, &env.exec).unwrap().value[0];
    let dphig = move |_: usize, _: &[f64], o: &mut [f64]| o[0] = dphig_value;
    let pts: Vec<f64> = (0..9).map(|i| 0.5 - 1.0 + 0.25 * i as f64).collect();
    let w: Vec<f64> = pts.iter().map(|y| (-2.0 * (y - 0.5) * (y - 0.5)).exp()).collect();
    let s: f64 = w.iter().sum();
    let ys = FastGrid {
        m: 1,
        points: pts,
        weights: w.iter().map(|v| v / s).collect::<Vec<_>>().repeat(g.nodes()),
    };
    let mut round_trip = 0.0f64;
    let mut feedback = 0.0f64;
    for (q, r, gamma) in [(&q1, &r1, 0.0), (&q2, &r2, 1.0)] {
        let c = optimal_controls(&line, q, &lin, &sigma, &dphig, 1, &ys).unwrap();
        round_trip = round_trip.max(rel(c.energy(), r.value));
        let back = integrate_feedback(&c, &lin, &sigma, &dphig, gamma).unwrap();
        feedback = feedback.max(back.sup_distance(&line.phi).unwrap());
    }
    verdict(
        (z - 0.786939).abs() <= 1e-3
            && (r1.value - 0.7916667).abs() <= 1e-3
            && (r2.value - 0.6333333).abs() <= 1e-3
            && round_trip <= 0.01,
        format!(
            "Z_1 {z:.6} (0.786939 ± 1e-3), I₁ {:.6} (0.7916667 ± 1e-3, Q {}), I₂ {:.6} (0.6333333 ± 1e-3, Q {}), \
             energy/rate gap {:.2e} (≤ 1%), feedback sup error {feedback:.1e}",
            r1.value, r1.q_source, r2.value, r2.q_source, round_trip
        ),
    )
}

fn a6(env: &Env) -> Verdict {
    let g = unit_grid();
    let xb = xbar(env, &g);
    let lin = linearize_drift(&env.model, &xb, &LinearizeConfig::default(), &env.exec).unwrap();
    let q1 = assemble_q(&env.model, &xb, Regime::One, &QConfig::default(), &env.exec).unwrap();
    let base = endpoint_rate_infimum(&[1.0], &q1, &lin).unwrap();
    let scaling = [0.5, 2.0, 3.0]
        .iter()
        .map(|c| {
            let v = endpoint_rate_infimum(&[*c], &q1, &lin).unwrap().value;
            (v / (c * c) - base.value).abs()
        })
        .fold(0.0, f64::max);
    verdict(
        (base.value - 0.790988).abs() <= 1e-3 && scaling <= 1e-9,
        format!(
            "infimum {:.6} (0.790988 ± 1e-3), quadratic scaling error {scaling:.1e} (≤ 1e-9)",
            base.value
        ),
    )
}

fn a7(env: &Env) -> Verdict {
    let start = Instant::now();
    let g = unit_grid();
    let xb = xbar(env, &g);
    let lin = linearize_drift(&env.model, &xb, &LinearizeConfig::default(), &env.exec).unwrap();
    let q1 = assemble_q(&env.model, &xb, Regime::One, &QConfig::default(), &env.exec).unwrap();
    let cfg = MdpConfig::scalar(1.0, 100, 1000, 7, 1.0);
    let rep = mdp_probe(&env.model, Regime::One, &[1e-1, 1e-2, 1e-3], &q1, &lin, &cfg, &env.exec).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let seq: Vec<String> = rep
        .points
        .iter()
        .map(|p| match p.rate_estimate {
            Some(r) => format!("{r:.3}"),
            None => "unusable".into(),
        })
        .collect();
    let last = rep.final_estimate();
    let in_range = last.is_some_and(|v| (0.55..=1.05).contains(&v));
    verdict(
        rep.decreasing && in_range && secs < 1800.0,
        format!(
            "rates [{}] decreasing {}, final in [0.55, 1.05]: {in_range}, infimum {:.4}, Gaussian reference at δ=1e-3 {}, {secs:.0} s (< 1800 s)",
            seq.join(", "),
            rep.decreasing,
            rep.infimum,
            rep.points.last().and_then(|p| p.gaussian_rate).map(|v| format!("{v:.3}")).unwrap_or("-".into()),
        ),
    )
}

fn a8(env: &Env) -> Verdict {
    let deltas = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3];
    let mut points = Vec::new();
    for &delta in &deltas {
        let epsilon = delta;
        let lambda = default_lambda(delta);
        let grid = stiff_grid(1.0, epsilon).unwrap();
        let control = constant_control(grid, &[1.0], &[1.0]).unwrap();
        let values: Vec<f64> = mvmd_core::Executor::map(&env.exec, 8, |r| {
            let mc = MultiscaleConfig {
                replica: r as u64,
                ..MultiscaleConfig::scalar(delta, epsilon, Regime::Two { gamma: 1.0 }, 128, grid, 8, 1.0)
            };
            controlled_fast_gap(&env.model, &mc, &control, &Sequential).unwrap().0
        });
        let (value, se) = stats::mean_se(&values);
        points.push(mvmd_core::experiments::SweepPoint {
            param: epsilon * lambda * lambda / delta,
            value,
            se,
        });
    }
    let fit = mvmd_core::experiments::SlopeFit::fit(points);
    verdict(
        fit.within(1.0, 0.5),
        format!("slope vs ελ²/δ {:.3} (1 ± 0.5), R² {:.3}", fit.slope, fit.r2),
    )
}

/// Mean W1 distance per time bin between the particle-averaged y-marginal
/// and the stationary law N(X̄/2, 1/4), with the worst mass defect.
fn occupation_distance(env: &Env, delta: f64) -> (f64, f64) {
    let (horizon, time_bins, particles) = (1.0, 5, 64);
    let epsilon = delta;
    let base = stiff_grid(horizon, epsilon).unwrap();
    let dt = base.dt();
    let inner = (default_window(epsilon) / dt).round().max(1.0) as usize;
    let steps = base.steps() + inner;
    let grid = TimeGrid::with_steps(steps as f64 * dt, steps).unwrap();
    let control = constant_control(grid, &[1.0], &[1.0]).unwrap();
    let mc = MultiscaleConfig::scalar(delta, epsilon, Regime::Two { gamma: 1.0 }, particles, grid, 9, 1.0);
    let mut fast: Vec<PathGrid> = (0..particles).map(|_| PathGrid::zeros(grid, 1)).collect();
    run_ensemble(
        &env.model,
        &mc,
        Some(&control),
        false,
        &mut |s: &Snapshot<'_>| {
            for (f, p) in fast.iter_mut().zip(s.particles) {
                f.set(s.k, p.yh());
            }
        },
        &env.exec,
    )
    .unwrap();
    let axis = AxisSpec::new(-2.5, 3.5, 60).unwrap();
    let unit = AxisSpec::new(0.5, 1.5, 1).unwrap();
    let spec = BinSpec {
        h1: vec![unit],
        h2: vec![unit],
        y: vec![axis],
        time_bins,
    };
    let occ: Vec<_> = fast
        .iter()
        .map(|f| occupation_measure(&control, f, horizon, inner as f64 * dt, &spec).unwrap())
        .collect();
    let defect = occ.iter().map(|o| (o.total() - horizon).abs()).fold(0.0, f64::max);
    let mut total = 0.0;
    for b in 0..time_bins {
        let mut avg = vec![0.0; axis.slots()];
        for o in &occ {
            for (a, v) in avg.iter_mut().zip(&o.y_marginal(b, 0).normalized().mass) {
                *a += v / particles as f64;
            }
        }
        let t_mid = (b as f64 + 0.5) * horizon / time_bins as f64;
        let nu = gaussian_slots(&axis, (-t_mid / 4.0).exp() / 2.0, 0.5);
        let h = Histogram1d::new(axis.lo - axis.width(), axis.width(), avg).unwrap();
        total += wasserstein1_hist(&h, &nu.normalized()).unwrap();
    }
    (total / time_bins as f64, defect)
}

fn a9(env: &Env) -> Verdict {
    let (coarse, d1) = occupation_distance(env, 1e-1);
    let (fine, d2) = occupation_distance(env, 1e-3);
    let defect = d1.max(d2);
    verdict(
        defect <= 1e-9 && fine * 2.0 <= coarse,
        format!("mass defect {defect:.1e} (≤ 1e-9), W1 at δ=1e-1 {coarse:.4}, at δ=1e-3 {fine:.4} (ratio {:.2} ≥ 2)", coarse / fine),
    )
}

fn untimed(m: &mvmd::Manifest) -> serde_json::Value {
    let mut v = serde_json::to_value(m).unwrap();
    v.as_object_mut().unwrap().remove("wall_clock_s");
    v.as_object_mut().unwrap().remove("threads");
    for s in v["studies"].as_array_mut().unwrap() {
        s.as_object_mut().unwrap().remove("wall_clock_s");
    }
    v
}

fn a10(_env: &Env) -> Verdict {
    let campaign = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/campaign_quick.toml");
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &str, threads: usize, seed: Option<u64>| {
        let out = tmp.path().join(dir);
        let opts = CampaignOptions {
            seed,
            out_dir: out.clone(),
            threads,
            format: Format::Csv,
        };
        let m = run_campaign(&campaign, &opts).unwrap();
        let mut files: Vec<(String, Vec<u8>)> = m
            .outputs
            .iter()
            .map(|f| (f.clone(), std::fs::read(out.join(f)).unwrap()))
            .collect();
        files.sort();
        (m, files)
    };
    let (m1, a) = run("one", 1, None);
    let (m2, b) = run("two", 2, None);
    let (m3, c) = run("replay", 1, Some(m1.seed));
    let manifests = untimed(&m1) == untimed(&m2) && untimed(&m1) == untimed(&m3);
    verdict(
        a == b && a == c && manifests && !a.is_empty(),
        format!(
            "{} studies, {} artifacts: 1 vs 2 threads identical {}, replay from manifest seed identical {}, \
             manifests equal up to timing and threads {manifests}",
            m1.studies.len(),
            a.len(),
            a == b,
            a == c
        ),
    )
}

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let cfg = config::parse(LIN1).expect("LIN1 config parses");
    let (model, _) = validated_model(&cfg).expect("LIN1 validates");
    let env = Env {
        model,
        exec: RayonExecutor::new(0).expect("thread pool"),
    };
    let criteria: [(&str, fn(&Env) -> Verdict); 10] = [
        ("A1", a1),
        ("A2", a2),
        ("A3", a3),
        ("A4", a4),
        ("A5", a5),
        ("A6", a6),
        ("A7", a7),
        ("A8", a8),
        ("A9", a9),
        ("A10", a10),
    ];
    let mut failed = Vec::new();
    for (id, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let start = Instant::now();
        let v = check(&env);
        let mark = if v.passed { "PASS" } else { "FAIL" };
        println!("{id:<4}{mark}  {}  [{:.1} s]", v.detail, start.elapsed().as_secs_f64());
        if !v.passed {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
