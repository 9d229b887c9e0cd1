//! Experiment campaigns: every `[study.*]` of a config file runs in file
//! order against the validated model, writes its artifacts and reports
//! the tolerance gates it declares.

use std::path::{Path, PathBuf};
use std::time::Instant;

use mvmd_core::dsl::{parse_expr, CoefficientModel, Program, VarContext};
use mvmd_core::experiments::{
    averaging_study, constant_control, khasminskii_check, mdp_probe, moment_study, resolved_grid, stiff_grid,
    time_regularity, FitStatus, KhasminskiiConfig, MdpConfig, RegularityConfig, SlopeFit, StudyConfig, SweepPoint,
};
use mvmd_core::frozen::{assemble_q, QConfig, RateOperator, Regime};
use mvmd_core::measure::{wasserstein1_hist, Histogram1d, MeasureMoments};
use mvmd_core::multiscale::{
    controlled_fast_gap, default_lambda, default_window, occupation_measure, reference_marginals, run_ensemble,
    solve_averaged_ode, AveragedOdeConfig, AxisSpec, BinSpec, MultiscaleConfig, Snapshot,
};
use mvmd_core::rate::{linearize_drift, LinearizeConfig, LinearizedDrift};
use mvmd_core::sde::{PathGrid, TimeGrid};
use mvmd_core::{stats, Error, Sequential};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{self, Config, StudyKind, StudySection};
use crate::io::{self, Format, LongRow};
use crate::par::RayonExecutor;
use crate::{validated_model, RunError};

#[derive(Debug, Clone)]
pub struct CampaignOptions {
    /// Overrides the top-level `seed` of the config.
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    /// Worker threads; 0 picks the machine default.
    pub threads: usize,
    pub format: Format,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Gate {
    pub name: String,
    pub passed: bool,
    pub observed: Option<f64>,
    pub expected: String,
}

impl Gate {
    fn new(name: &str, passed: bool, observed: Option<f64>, expected: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            observed,
            expected: expected.into(),
        }
    }

    fn slope(name: &str, fit: &SlopeFit, target: f64, tol: f64) -> Self {
        let expected = format!("slope {target} ± {tol}, R² ≥ 0.9");
        Self::new(name, fit.within(target, tol), fit.slope.is_finite().then_some(fit.slope), expected)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRecord {
    pub name: String,
    pub kind: String,
    pub seed: u64,
    pub sweep: String,
    pub outputs: Vec<String>,
    pub gates: Vec<Gate>,
    pub passed: bool,
    /// Set when a divergence stopped the study early.
    pub divergence: Option<String>,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub config: String,
    pub config_sha256: String,
    pub seed: u64,
    pub threads: usize,
    pub format: String,
    pub model_constants: mvmd_core::dsl::ModelConstants,
    pub studies: Vec<StudyRecord>,
    pub outputs: Vec<String>,
    pub passed: bool,
    pub diverged: bool,
    pub wall_clock_s: f64,
}

impl Manifest {
    /// 0 when every gate passed, 4 after a divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.diverged {
            4
        } else if self.passed {
            0
        } else {
            1
        }
    }
}

/// Seed of a study without an explicit `seed` key, stable under
/// reordering of the config file.
pub fn study_seed(campaign: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(campaign.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

struct Output {
    /// `(statistic, rows)`; each becomes `<study>.<statistic>.<ext>`.
    stats: Vec<(String, Vec<SweepPoint>)>,
    report: serde_json::Value,
    gates: Vec<Gate>,
    divergence: Option<String>,
}

/// Shared inputs of every study in a campaign.
struct Context<'a> {
    model: &'a CoefficientModel,
    cfg: &'a Config,
    horizon: f64,
    dt: f64,
    exec: &'a RayonExecutor,
}

pub fn run_campaign(path: &Path, opts: &CampaignOptions) -> Result<Manifest, RunError> {
    let start = Instant::now();
    let text = std::fs::read(path).map_err(|e| RunError::Config(format!("{}: cannot read: {e}", path.display())))?;
    let cfg = config::parse(std::str::from_utf8(&text).map_err(|_| RunError::Config("config is not UTF-8".into()))?)?;
    let (model, report) = validated_model(&cfg)?;
    let seed = opts.seed.or(cfg.seed).unwrap_or(0);
    let exec = RayonExecutor::new(opts.threads).map_err(|e| RunError::Runtime(format!("thread pool: {e}")))?;
    let (horizon, dt) = match (&cfg.studies[..], cfg.grid) {
        ([], g) => g.map(|g| (g.horizon, g.dt)).unwrap_or((1.0, 1e-3)),
        (_, _) => {
            let g = cfg.grid()?;
            cfg.regime()?;
            (g.horizon, g.dt)
        }
    };
    let ctx = Context {
        model: &model,
        cfg: &cfg,
        horizon,
        dt,
        exec: &exec,
    };

    let mut records = Vec::new();
    let mut outputs = Vec::new();
    let mut all_rows = Vec::new();
    for study in &cfg.studies {
        let t0 = Instant::now();
        let sseed = study.seed.unwrap_or_else(|| study_seed(seed, &study.name));
        let out = run_study(&ctx, study, sseed)?;
        let mut files = Vec::new();
        for (stat, points) in &out.stats {
            let label = format!("{}.{stat}", study.name);
            let rows: Vec<LongRow> = points
                .iter()
                .map(|p| LongRow {
                    study: label.clone(),
                    param: p.param,
                    value: p.value,
                    se: p.se,
                })
                .collect();
            let name = format!("{label}.{}", opts.format.ext());
            let body = match opts.format {
                Format::Csv => io::long_csv(&rows),
                Format::Json => io::json(&rows),
            };
            io::write(&opts.out_dir, &name, &body)?;
            files.push(name);
            all_rows.extend(rows);
        }
        let report_name = format!("{}.report.json", study.name);
        io::write(&opts.out_dir, &report_name, &io::json(&out.report))?;
        files.push(report_name);
        outputs.extend(files.iter().cloned());
        records.push(StudyRecord {
            name: study.name.clone(),
            kind: study.kind.name().into(),
            seed: sseed,
            sweep: study.sweep.clone(),
            outputs: files,
            passed: out.divergence.is_none() && out.gates.iter().all(|g| g.passed),
            gates: out.gates,
            divergence: out.divergence,
            wall_clock_s: t0.elapsed().as_secs_f64(),
        });
    }
    io::write(&opts.out_dir, "studies.csv", &io::long_csv(&all_rows))?;
    outputs.push("studies.csv".into());

    let manifest = Manifest {
        config: path.display().to_string(),
        config_sha256: hex::encode(Sha256::digest(&text)),
        seed,
        threads: mvmd_core::Executor::workers(&exec),
        format: opts.format.ext().into(),
        model_constants: report.constants(),
        passed: records.iter().all(|r| r.passed),
        diverged: records.iter().any(|r| r.divergence.is_some()),
        studies: records,
        outputs,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    io::write(&opts.out_dir, "manifest.json", &io::json(&manifest))?;
    Ok(manifest)
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::EnsembleDiverged { .. } | Error::Diverged { .. } | Error::NonFinite { .. })
}

fn divergence_of(fit: &SlopeFit) -> Option<String> {
    (fit.status == FitStatus::Aborted).then(|| fit.note.clone().unwrap_or_default())
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable report")
}

fn run_study(ctx: &Context<'_>, study: &StudySection, seed: u64) -> Result<Output, RunError> {
    let sweep = ctx
        .cfg
        .sweep(&study.sweep)
        .ok_or_else(|| RunError::Config(format!("study.{}.sweep: no such sweep", study.name)))?;
    let regime = ctx.cfg.regime()?;
    let values = sweep.values();
    let base = |particles: Option<usize>| StudyConfig {
        horizon: ctx.horizon,
        particles: particles.unwrap_or(regime.particles),
        replicas: sweep.replicas,
        seed,
        x0: regime.x0.clone(),
        y0: regime.y0.clone(),
        regime: Regime::One,
        ode: AveragedOdeConfig::default(),
    };
    let caught = |r: mvmd_core::Result<Output>| -> Result<Output, RunError> {
        match r {
            Ok(o) => Ok(o),
            Err(e) if is_divergence(&e) => Ok(Output {
                stats: Vec::new(),
                report: serde_json::json!({ "divergence": e.to_string() }),
                gates: Vec::new(),
                divergence: Some(e.to_string()),
            }),
            Err(e) => Err(e.into()),
        }
    };
    match &study.kind {
        StudyKind::Averaging {
            epsilon_ratio,
            particles,
            slope,
            tolerance,
        } => {
            sweep.check_fit()?;
            let points: Vec<(f64, f64)> = values.iter().map(|d| (epsilon_ratio * d, *d)).collect();
            let fit = averaging_study(ctx.model, &points, &base(*particles), ctx.exec)?;
            let mut gates = Vec::new();
            if fit.status != FitStatus::Skipped {
                gates.push(Gate::slope("averaging_slope", &fit, *slope, *tolerance));
            }
            Ok(Output {
                stats: vec![("sup_error".into(), fit.points.clone())],
                report: to_value(&fit),
                divergence: divergence_of(&fit),
                gates,
            })
        }
        StudyKind::Moments {
            epsilon_ratio,
            particles,
            h1,
            h2,
            deviation_tolerance,
            fast_bound,
        } => {
            sweep.check_fit()?;
            let points: Vec<(f64, f64)> = values.iter().map(|d| (epsilon_ratio * d, *d)).collect();
            let m = moment_study(ctx.model, &points, h1, h2, &base(*particles), ctx.exec)?;
            let flat = |name: &str, fit: &SlopeFit| {
                Gate::new(
                    name,
                    fit.slope.is_finite() && fit.slope.abs() <= *deviation_tolerance,
                    fit.slope.is_finite().then_some(fit.slope),
                    format!("|slope| ≤ {deviation_tolerance}"),
                )
            };
            let gates = vec![
                flat("deviation_flat", &m.deviation_sup),
                Gate::new(
                    "fast_sup_bound",
                    m.fast_sup.slope.is_finite() && m.fast_sup.slope >= -fast_bound,
                    m.fast_sup.slope.is_finite().then_some(m.fast_sup.slope),
                    format!("slope ≥ −{fast_bound}"),
                ),
            ];
            let col = |x: fn(&mvmd_core::experiments::MomentPoint) -> f64,
                       y: fn(&mvmd_core::experiments::MomentPoint) -> (f64, f64)| {
                m.points
                    .iter()
                    .map(|p| SweepPoint {
                        param: x(p),
                        value: y(p).0,
                        se: y(p).1,
                    })
                    .collect::<Vec<_>>()
            };
            Ok(Output {
                stats: vec![
                    ("slow_sup".into(), col(|p| p.delta, |p| p.slow_sup)),
                    ("fast_sup".into(), col(|p| p.epsilon, |p| p.fast_sup)),
                    ("fast_sup_free".into(), col(|p| p.epsilon, |p| p.fast_sup_free)),
                    ("fast_integral".into(), col(|p| p.epsilon, |p| p.fast_integral)),
                    ("deviation_sup".into(), col(|p| p.delta, |p| p.deviation_sup)),
                ],
                report: to_value(&m),
                divergence: m.note.clone(),
                gates,
            })
        }
        StudyKind::Regularity {
            particles,
            h1,
            h2,
            slope,
            tolerance,
        } => caught((|| {
            sweep.check_fit()?;
            let rc = RegularityConfig {
                delta: regime.delta,
                epsilon: regime.epsilon,
                windows: values.clone(),
                h1: h1.clone(),
                h2: h2.clone(),
                study: base(*particles),
            };
            let fit = time_regularity(ctx.model, &rc, ctx.exec)?;
            Ok(Output {
                stats: vec![("increment".into(), fit.points.clone())],
                gates: vec![Gate::slope("regularity_slope", &fit, *slope, *tolerance)],
                report: to_value(&fit),
                divergence: None,
            })
        })()),
        StudyKind::Khasminskii {
            test,
            resolution,
            time_bins,
        } => {
            let d = ctx.model.dims();
            let expr = parse_expr(test, VarContext::full(d.n, d.m))
                .map_err(|e| RunError::Config(format!("study.{}.test: {e}", study.name)))?;
            let prog = Program::compile(&expr);
            caught((|| {
                let grid = TimeGrid::new(ctx.horizon, ctx.dt)?;
                let xbar = solve_averaged_ode(ctx.model, &regime.x0, &grid, &AveragedOdeConfig::default(), ctx.exec)?.path;
                let f = |t: f64, y: &[f64]| {
                    let mut x = vec![0.0; d.n];
                    xbar.interpolate(t, &mut x);
                    prog.run(&x, y, &MeasureMoments::dirac(&x))
                };
                let kc = KhasminskiiConfig {
                    horizon: ctx.horizon,
                    replicas: sweep.replicas.max(2),
                    seed,
                    y0: regime.y0.clone(),
                    time_bins: *time_bins,
                    resolution: *resolution,
                    ..KhasminskiiConfig::default()
                };
                let rep = khasminskii_check(ctx.model, &xbar, &f, &values, &kc, ctx.exec)?;
                Ok(Output {
                    stats: vec![("gap".into(), rep.fit.points.clone())],
                    gates: vec![Gate::new(
                        "gap_monotone",
                        rep.monotone || rep.fit.status == FitStatus::Skipped,
                        None,
                        "gap decreases with ε",
                    )],
                    divergence: divergence_of(&rep.fit),
                    report: to_value(&rep),
                })
            })())
        }
        StudyKind::Mdp {
            radius,
            systems,
            particles,
            epsilon_ratio,
            analytic_q,
            analytic_a,
            interval,
            require_decreasing,
        } => caught((|| {
            let n = ctx.model.dims().n;
            let grid = TimeGrid::new(ctx.horizon, ctx.dt)?;
            let xbar = || -> mvmd_core::Result<PathGrid> {
                Ok(solve_averaged_ode(ctx.model, &regime.x0, &grid, &AveragedOdeConfig::default(), ctx.exec)?.path)
            };
            let estimated = if analytic_q.is_none() || analytic_a.is_none() {
                Some(xbar()?)
            } else {
                None
            };
            let q = match analytic_q {
                Some(q) => RateOperator::constant(grid, n, regime.regime, q, "analytic")?,
                None => assemble_q(ctx.model, estimated.as_ref().unwrap(), regime.regime, &QConfig::default(), ctx.exec)?,
            };
            let lin = match analytic_a {
                Some(a) => LinearizedDrift::constant(grid, n, a),
                None => linearize_drift(ctx.model, estimated.as_ref().unwrap(), &LinearizeConfig::default(), ctx.exec)?,
            };
            let mc = MdpConfig {
                horizon: ctx.horizon,
                radius: *radius,
                systems: *systems,
                particles: particles.unwrap_or(regime.particles),
                seed,
                x0: regime.x0.clone(),
                y0: regime.y0.clone(),
                epsilon_ratio: *epsilon_ratio,
                min_exceedances: 50,
                ode: AveragedOdeConfig::default(),
            };
            let rep = mdp_probe(ctx.model, regime.regime, &values, &q, &lin, &mc, ctx.exec)?;
            let mut gates = Vec::new();
            let last = rep.final_estimate();
            if let Some((lo, hi)) = interval {
                gates.push(Gate::new(
                    "final_rate_interval",
                    last.is_some_and(|v| v >= *lo && v <= *hi),
                    last,
                    format!("[{lo}, {hi}]"),
                ));
            }
            if *require_decreasing {
                gates.push(Gate::new("rate_decreasing", rep.decreasing, None, "strictly decreasing in δ"));
            }
            let usable = |f: fn(&mvmd_core::experiments::MdpPoint) -> Option<(f64, f64)>| {
                rep.points
                    .iter()
                    .filter_map(|p| {
                        f(p).map(|(value, se)| SweepPoint {
                            param: p.delta,
                            value,
                            se,
                        })
                    })
                    .collect::<Vec<_>>()
            };
            Ok(Output {
                stats: vec![
                    ("p_hat".into(), usable(|p| Some((p.p_hat, p.p_se)))),
                    (
                        "rate_estimate".into(),
                        usable(|p| p.rate_estimate.map(|r| (r, p.rate_se.unwrap_or(f64::NAN)))),
                    ),
                ],
                report: serde_json::json!({
                    "probe": to_value(&rep),
                    "Q_source": q.source(),
                    "final_estimate": last,
                }),
                gates,
                divergence: None,
            })
        })()),
        StudyKind::Gap {
            particles,
            h1,
            h2,
            slope,
            tolerance,
        } => caught((|| {
            sweep.check_fit()?;
            let ratio = regime.epsilon / regime.delta;
            let mut points = Vec::new();
            for &delta in &values {
                let epsilon = match regime.regime {
                    Regime::Two { gamma } => gamma * delta,
                    Regime::One => ratio * delta,
                };
                let lambda = regime.lambda.unwrap_or_else(|| default_lambda(delta));
                let grid = stiff_grid(ctx.horizon, epsilon)?;
                let control = constant_control(grid, h1, h2)?;
                let reps: Vec<f64> = ctx
                    .exec_map(sweep.replicas, |r| {
                        let mc = MultiscaleConfig {
                            delta,
                            epsilon,
                            lambda,
                            regime: regime.regime,
                            particles: particles.unwrap_or(regime.particles),
                            grid,
                            seed,
                            replica: r as u64,
                            x0: regime.x0.clone(),
                            y0: regime.y0.clone(),
                        };
                        controlled_fast_gap(ctx.model, &mc, &control, &Sequential).map(|g| g.0)
                    })
                    .into_iter()
                    .collect::<mvmd_core::Result<_>>()?;
                let (value, se) = stats::mean_se(&reps);
                points.push(SweepPoint {
                    param: epsilon * lambda * lambda / delta,
                    value,
                    se,
                });
            }
            let fit = SlopeFit::fit(points);
            Ok(Output {
                stats: vec![("fast_gap".into(), fit.points.clone())],
                gates: vec![Gate::slope("gap_slope", &fit, *slope, *tolerance)],
                report: to_value(&fit),
                divergence: None,
            })
        })()),
        StudyKind::Occupation {
            epsilon_ratio,
            particles,
            h1,
            h2,
            y_range,
            bins,
            time_bins,
            factor,
        } => caught((|| {
            let oc = OccupationRun {
                h1,
                h2,
                axis: AxisSpec::new(y_range.0, y_range.1, *bins)?,
                time_bins: *time_bins,
                particles: particles.unwrap_or(regime.particles),
                seed,
            };
            let grid = TimeGrid::new(ctx.horizon, ctx.dt)?;
            let xbar = solve_averaged_ode(ctx.model, &regime.x0, &grid, &AveragedOdeConfig::default(), ctx.exec)?.path;
            let nu: Vec<Vec<Histogram1d>> = (0..ctx.model.dims().m)
                .map(|j| reference_marginals(ctx.model, &xbar, *time_bins, j, &oc.axis, &KhasminskiiConfig::default().reference, ctx.exec))
                .collect::<mvmd_core::Result<_>>()?;
            let mut w1 = Vec::new();
            let mut mass_gap = 0.0f64;
            for &delta in &values {
                let r = oc.run(ctx, delta, epsilon_ratio * delta, &regime.x0, &regime.y0, &nu)?;
                mass_gap = mass_gap.max(r.1);
                w1.push(r.0);
            }
            let first = w1.first().map(|p| p.value).unwrap_or(f64::NAN);
            let last = w1.last().map(|p| p.value).unwrap_or(f64::NAN);
            Ok(Output {
                gates: vec![
                    Gate::new("total_mass", mass_gap <= 1e-9, Some(mass_gap), "|mass − T| ≤ 1e-9"),
                    Gate::new(
                        "marginal_contraction",
                        last * factor <= first,
                        Some(first / last),
                        format!("first/last W1 ≥ {factor}"),
                    ),
                ],
                report: serde_json::json!({ "w1": to_value(&w1), "max_mass_gap": mass_gap }),
                stats: vec![("w1".into(), w1)],
                divergence: None,
            })
        })()),
    }
}

impl Context<'_> {
    fn exec_map<T: Send, F: Fn(usize) -> T + Sync + Send>(&self, n: usize, f: F) -> Vec<T> {
        mvmd_core::Executor::map(self.exec, n, f)
    }
}

struct OccupationRun<'a> {
    h1: &'a [f64],
    h2: &'a [f64],
    axis: AxisSpec,
    time_bins: usize,
    particles: usize,
    seed: u64,
}

impl OccupationRun<'_> {
    /// Mean over time bins and fast coordinates of the W1 distance between
    /// the particle-averaged `y`-marginal and `nu`, with the largest
    /// deviation of any particle's total mass from the horizon.
    fn run(
        &self,
        ctx: &Context<'_>,
        delta: f64,
        epsilon: f64,
        x0: &[f64],
        y0: &[f64],
        nu: &[Vec<Histogram1d>],
    ) -> mvmd_core::Result<(SweepPoint, f64)> {
        let m = ctx.model.dims().m;
        let base = resolved_grid(ctx.horizon, epsilon, 10.0)?;
        let dt = base.dt();
        let inner = (default_window(epsilon) / dt).round().max(1.0) as usize;
        let steps = base.steps() + inner;
        let grid = TimeGrid::with_steps(steps as f64 * dt, steps)?;
        let control = constant_control(grid, self.h1, self.h2)?;
        let mc = MultiscaleConfig {
            delta,
            epsilon,
            lambda: default_lambda(delta),
            regime: Regime::One,
            particles: self.particles,
            grid,
            seed: self.seed,
            replica: 0,
            x0: x0.to_vec(),
            y0: y0.to_vec(),
        };
        let mut fast: Vec<PathGrid> = (0..self.particles).map(|_| PathGrid::zeros(grid, m)).collect();
        run_ensemble(
            ctx.model,
            &mc,
            Some(&control),
            false,
            &mut |s: &Snapshot<'_>| {
                for (f, p) in fast.iter_mut().zip(s.particles) {
                    f.set(s.k, p.yh());
                }
            },
            ctx.exec,
        )?;
        let spec = BinSpec {
            h1: self.h1.iter().map(|v| AxisSpec::new(v - 0.5, v + 0.5, 1)).collect::<mvmd_core::Result<_>>()?,
            h2: self.h2.iter().map(|v| AxisSpec::new(v - 0.5, v + 0.5, 1)).collect::<mvmd_core::Result<_>>()?,
            y: vec![self.axis; m],
            time_bins: self.time_bins,
        };
        let window = inner as f64 * dt;
        let occ: Vec<_> = ctx.exec_map(self.particles, |i| occupation_measure(&control, &fast[i], ctx.horizon, window, &spec));
        let occ = occ.into_iter().collect::<mvmd_core::Result<Vec<_>>>()?;
        let mass_gap = occ.iter().map(|o| (o.total() - ctx.horizon).abs()).fold(0.0, f64::max);
        let mut dists = Vec::new();
        for b in 0..self.time_bins {
            for (j, nu_j) in nu.iter().enumerate() {
                let mut avg = vec![0.0; self.axis.slots()];
                for o in &occ {
                    for (a, v) in avg.iter_mut().zip(&o.y_marginal(b, j).normalized().mass) {
                        *a += v / self.particles as f64;
                    }
                }
                let h = Histogram1d::new(self.axis.lo - self.axis.width(), self.axis.width(), avg)?;
                dists.push(wasserstein1_hist(&h, &nu_j[b].normalized())?);
            }
        }
        let (value, se) = stats::mean_se(&dists);
        Ok((
            SweepPoint {
                param: delta,
                value,
                se,
            },
            mass_gap,
        ))
    }
}
