//! The single-shot subcommands of the CLI. Each reads a model file, runs
//! one kernel operation and writes its artifacts under the output
//! directory.

use std::path::{Path, PathBuf};

use mvmd_core::dsl::validate_model;
use mvmd_core::experiments::constant_control;
use mvmd_core::frozen::{
    assemble_q, averaged_drift, estimate_invariant_measure, grad_y_phi_g, solve_poisson_phi, FrozenConfig, GradConfig,
    PoissonConfig, QConfig, Regime,
};
use mvmd_core::measure::{MeasureMoments, ParticleCloud};
use mvmd_core::multiscale::{
    default_lambda, default_window, empirical_slots, occupation_measure, run_ensemble, solve_averaged_ode,
    AveragedOdeConfig, AxisSpec, BinSpec, MultiscaleConfig, Snapshot,
};
use mvmd_core::rate::{
    endpoint_rate_infimum, linearize_drift, optimal_controls, rate_functional, sigma_along, solve_skeleton, FastGrid,
    LinearizeConfig, RatePath, RateReport,
};
use mvmd_core::sde::{PathGrid, TimeGrid};
use serde::Serialize;

use crate::config::{self, Config};
use crate::io::{self, Format};
use crate::par::RayonExecutor;
use crate::{validated_model, RunError};

/// Flags shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Globals {
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub threads: usize,
    pub format: Format,
}

/// Files written and the exit code the command asks for.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub outputs: Vec<PathBuf>,
    pub exit: i32,
}

struct Session {
    cfg: Config,
    model: mvmd_core::dsl::CoefficientModel,
    seed: u64,
    exec: RayonExecutor,
    g: Globals,
    out: Outcome,
}

impl Session {
    fn open(path: &Path, g: &Globals) -> Result<Self, RunError> {
        let cfg = config::load(path)?;
        let (model, _) = validated_model(&cfg)?;
        let exec = RayonExecutor::new(g.threads).map_err(|e| RunError::Runtime(format!("thread pool: {e}")))?;
        Ok(Self {
            seed: g.seed.or(cfg.seed).unwrap_or(0),
            cfg,
            model,
            exec,
            g: g.clone(),
            out: Outcome::default(),
        })
    }

    fn write(&mut self, name: &str, body: &str) -> Result<(), RunError> {
        let p = io::write(&self.g.out_dir, name, body)?;
        self.out.outputs.push(p);
        Ok(())
    }

    /// Writes `stem.csv` or `stem.json` according to `--format`.
    fn emit<T: Serialize + ?Sized>(&mut self, stem: &str, csv: impl FnOnce() -> String, json: &T) -> Result<(), RunError> {
        match self.g.format {
            Format::Csv => self.write(&format!("{stem}.csv"), &csv()),
            Format::Json => self.write(&format!("{stem}.json"), &io::json(json)),
        }
    }

    fn x0(&self, x: Option<Vec<f64>>) -> Result<Vec<f64>, RunError> {
        let n = self.model.dims().n;
        let x = x
            .or_else(|| self.cfg.regime.as_ref().map(|r| r.x0.clone()))
            .unwrap_or_else(|| vec![0.0; n]);
        if x.len() != n {
            return Err(RunError::Config(format!("--x needs {n} values, got {}", x.len())));
        }
        Ok(x)
    }

    fn grid(&self) -> Result<TimeGrid, RunError> {
        let g = self.cfg.grid()?;
        Ok(TimeGrid::new(g.horizon, g.dt)?)
    }

    fn xbar(&self, grid: &TimeGrid) -> Result<mvmd_core::multiscale::AveragedPath, RunError> {
        let x0 = self.x0(None)?;
        let mut ode = AveragedOdeConfig::default();
        ode.frozen.seed = self.seed;
        Ok(solve_averaged_ode(&self.model, &x0, grid, &ode, &self.exec)?)
    }

    fn frozen(&self) -> FrozenConfig {
        FrozenConfig {
            seed: self.seed,
            ..FrozenConfig::default()
        }
    }
}

fn path_json(p: &PathGrid) -> serde_json::Value {
    let g = *p.grid();
    serde_json::json!({
        "t": (0..g.nodes()).map(|k| g.t(k)).collect::<Vec<_>>(),
        "values": (0..g.nodes()).map(|k| p.at(k).to_vec()).collect::<Vec<_>>(),
    })
}

fn cloud_json(c: &ParticleCloud) -> Vec<Vec<f64>> {
    c.points().map(|p| p.to_vec()).collect()
}

/// Runs the validation probes alone; a rejection exits with code 3 after
/// the report is written.
pub fn validate(path: &Path, g: &Globals) -> Result<Outcome, RunError> {
    let cfg = config::load(path)?;
    let model = mvmd_core::dsl::CoefficientModel::from_sources(&cfg.model.sources)
        .map_err(|e| RunError::Config(format!("model: {e}")))?;
    let report = validate_model(&model, &cfg.model.probe)?;
    let p = io::write(&g.out_dir, "validation.json", &io::json(&report))?;
    Ok(Outcome {
        outputs: vec![p],
        exit: if report.accepted { 0 } else { 3 },
    })
}

#[derive(Serialize)]
struct AverageReport {
    x: Vec<f64>,
    mean: Vec<f64>,
    variance: Vec<f64>,
    mean_se: Vec<f64>,
    ess: f64,
    chains: usize,
    per_chain: usize,
    mixing_rate: Option<f64>,
    kappa_rate: Option<f64>,
    bbar: Vec<f64>,
    bbar_se: Vec<f64>,
}

/// Invariant law of the frozen equation at `x` with `b̄`, and the
/// averaged path when a `[grid]` section is present.
pub fn average(path: &Path, g: &Globals, x: Option<Vec<f64>>, bins: usize) -> Result<Outcome, RunError> {
    let mut s = Session::open(path, g)?;
    let x = s.x0(x)?;
    let mu = MeasureMoments::dirac(&x);
    let inv = estimate_invariant_measure(&s.model, &x, &mu, &s.frozen(), &s.exec)?;
    let b = averaged_drift(&s.model, &x, &mu, &inv)?;
    let report = AverageReport {
        x: x.clone(),
        mean: inv.mean.clone(),
        variance: inv.variance.clone(),
        mean_se: inv.mean_se.clone(),
        ess: inv.ess,
        chains: inv.chains,
        per_chain: inv.per_chain,
        mixing_rate: inv.mixing_rate,
        kappa_rate: inv.kappa_rate,
        bbar: b.value,
        bbar_se: b.se,
    };
    s.write("invariant.json", &io::json(&report))?;
    s.emit("cloud", || io::cloud_csv(&inv.cloud), &cloud_json(&inv.cloud))?;
    for j in 0..inv.cloud.dim() {
        let sd = inv.variance[j].sqrt().max(1e-12);
        let axis = AxisSpec::new(inv.mean[j] - 4.0 * sd, inv.mean[j] + 4.0 * sd, bins)?;
        let h = empirical_slots(&axis, &inv.cloud.coordinate(j));
        s.emit(&format!("histogram_y{j}"), || io::histogram_csv(&h), &h)?;
    }
    if s.cfg.grid.is_some() {
        let grid = s.grid()?;
        let avg = s.xbar(&grid)?;
        s.emit("xbar", || io::path_csv(&avg.path), &path_json(&avg.path))?;
        s.emit("bbar", || io::path_csv(&avg.drift), &path_json(&avg.drift))?;
    }
    Ok(s.out)
}

#[derive(Serialize)]
struct GradReport {
    x: Vec<f64>,
    y: Vec<f64>,
    /// Row-major `n × d2`.
    value: Vec<f64>,
    #[serde(rename = "SE")]
    se: Vec<f64>,
}

/// `Φ(x, δ_x, y)` and `∂yΦ·g` at one fast state.
pub fn poisson(path: &Path, g: &Globals, x: Option<Vec<f64>>, y: Vec<f64>, tol: f64, replicas: usize) -> Result<Outcome, RunError> {
    let mut s = Session::open(path, g)?;
    let x = s.x0(x)?;
    let m = s.model.dims().m;
    if y.len() != m {
        return Err(RunError::Config(format!("--y needs {m} values, got {}", y.len())));
    }
    let mu = MeasureMoments::dirac(&x);
    let inv = estimate_invariant_measure(&s.model, &x, &mu, &s.frozen(), &s.exec)?;
    let cfg = PoissonConfig {
        tol,
        replicas,
        seed: s.seed,
        ..PoissonConfig::default()
    };
    let phi = solve_poisson_phi(&s.model, &x, &mu, &y, &cfg, &inv, &s.exec)?;
    s.write("poisson.json", &io::poisson_json(&phi))?;
    let grad = grad_y_phi_g(
        &s.model,
        &x,
        &mu,
        &y,
        &GradConfig {
            poisson: cfg,
            ..GradConfig::default()
        },
        &s.exec,
    )?;
    s.write(
        "grad.json",
        &io::json(&GradReport {
            x,
            y,
            value: grad.value,
            se: grad.se,
        }),
    )?;
    Ok(s.out)
}

#[derive(Serialize)]
struct EndpointReport {
    z: Vec<f64>,
    value: f64,
    gramian: Vec<f64>,
    adjoint_residual: f64,
}

/// Rate operator along `X̄`, the rate of the straight path to `z`, the
/// endpoint infimum and its feedback controls on sampled fast states.
pub fn rate(path: &Path, g: &Globals, z: Option<Vec<f64>>, y_points: usize) -> Result<Outcome, RunError> {
    let mut s = Session::open(path, g)?;
    let regime = s.cfg.regime()?.regime;
    let d = s.model.dims();
    let z = z.unwrap_or_else(|| vec![1.0; d.n]);
    if z.len() != d.n {
        return Err(RunError::Config(format!("--z needs {} values, got {}", d.n, z.len())));
    }
    let grid = s.grid()?;
    let xbar = s.xbar(&grid)?.path;
    let mut qc = QConfig::default();
    qc.frozen.seed = s.seed;
    qc.grad.poisson.seed = s.seed;
    let q = assemble_q(&s.model, &xbar, regime, &qc, &s.exec)?;
    let mut lc = LinearizeConfig::default();
    lc.frozen.seed = s.seed;
    let lin = linearize_drift(&s.model, &xbar, &lc, &s.exec)?;
    let sigma = sigma_along(&s.model, &xbar)?;
    s.emit("q", || io::rate_operator_csv(&q), &q)?;
    let a = PathGrid::from_values(grid, d.n * d.n, lin.a.clone())?;
    s.emit("linearization", || io::path_csv(&a), &path_json(&a))?;

    let horizon = grid.horizon();
    let line = RatePath::new(PathGrid::from_fn(grid, d.n, |t, o| {
        for (v, zi) in o.iter_mut().zip(&z) {
            *v = zi * t / horizon;
        }
    }))?;
    let value = rate_functional(&line, &q, &lin)?;
    s.write("rate.json", &io::json(&RateReport::new(&q, value)))?;

    let end = endpoint_rate_infimum(&z, &q, &lin)?;
    s.write(
        "endpoint.json",
        &io::json(&EndpointReport {
            z: z.clone(),
            value: end.value,
            gramian: end.gramian.clone(),
            adjoint_residual: end.adjoint_residual,
        }),
    )?;

    // ν̂ at X̄_0 stands in by evenly spaced cloud samples
    let x0 = xbar.at(0).to_vec();
    let inv = estimate_invariant_measure(&s.model, &x0, &MeasureMoments::dirac(&x0), &s.frozen(), &s.exec)?;
    let count = y_points.clamp(1, inv.cloud.len());
    let pick: Vec<usize> = (0..count).map(|i| i * inv.cloud.len() / count).collect();
    let ys = FastGrid {
        m: d.m,
        points: pick.iter().flat_map(|&i| inv.cloud.point(i).to_vec()).collect(),
        weights: vec![1.0 / count as f64; grid.nodes() * count],
    };
    let table = dphig_table(&s, &xbar, &ys, regime, qc.stride)?;
    let lookup = |k: usize, y: &[f64], out: &mut [f64]| {
        let i = (0..ys.count()).find(|&i| ys.point(i) == y).unwrap_or(0);
        let node = (k / qc.stride.max(1)).min(table.len() - 1);
        out.copy_from_slice(&table[node][i]);
    };
    let opt = RatePath::new(end.path.clone())?;
    let controls = optimal_controls(&opt, &q, &lin, &sigma, &lookup, d.d2, &ys)?;
    s.emit("controls", || io::controls_csv(&controls), &controls)?;
    s.emit("endpoint_path", || io::path_csv(&end.path), &path_json(&end.path))?;
    Ok(s.out)
}

/// `∂yΦ_g` at every `stride`-th node and fast point; zeros in regime 1.
fn dphig_table(
    s: &Session,
    xbar: &PathGrid,
    ys: &FastGrid,
    regime: Regime,
    stride: usize,
) -> Result<Vec<Vec<Vec<f64>>>, RunError> {
    let d = s.model.dims();
    let nodes: Vec<usize> = (0..xbar.grid().nodes()).step_by(stride.max(1)).collect();
    if matches!(regime, Regime::One) {
        return Ok(vec![vec![vec![0.0; d.n * d.d2]; ys.count()]; nodes.len()]);
    }
    let gc = GradConfig {
        poisson: PoissonConfig {
            replicas: 64,
            dt: 0.01,
            seed: s.seed,
            ..PoissonConfig::default()
        },
        ..GradConfig::default()
    };
    nodes
        .iter()
        .map(|&k| {
            let x = xbar.at(k);
            (0..ys.count())
                .map(|i| Ok(grad_y_phi_g(&s.model, x, &MeasureMoments::dirac(x), ys.point(i), &gc, &s.exec)?.value))
                .collect()
        })
        .collect()
}

/// Skeleton `z^h` under a constant control `h¹`.
pub fn skeleton(path: &Path, g: &Globals, h1: Vec<f64>) -> Result<Outcome, RunError> {
    let mut s = Session::open(path, g)?;
    let d = s.model.dims();
    if h1.len() != d.d1 {
        return Err(RunError::Config(format!("--h1 needs {} values, got {}", d.d1, h1.len())));
    }
    let grid = s.grid()?;
    let xbar = s.xbar(&grid)?.path;
    let mut lc = LinearizeConfig::default();
    lc.frozen.seed = s.seed;
    let lin = linearize_drift(&s.model, &xbar, &lc, &s.exec)?;
    let sigma = sigma_along(&s.model, &xbar)?;
    let control = PathGrid::from_fn(grid, d.d1, |_, o| o.copy_from_slice(&h1));
    let z = solve_skeleton(&lin, &sigma, &control)?;
    s.emit("skeleton", || io::path_csv(&z.phi), &path_json(&z.phi))?;
    Ok(s.out)
}

fn multiscale_config(s: &Session, grid: TimeGrid) -> Result<MultiscaleConfig, RunError> {
    let r = s.cfg.regime()?;
    Ok(MultiscaleConfig {
        delta: r.delta,
        epsilon: r.epsilon,
        lambda: r.lambda.unwrap_or_else(|| default_lambda(r.delta)),
        regime: r.regime,
        particles: r.particles,
        grid,
        seed: s.seed,
        replica: 0,
        x0: r.x0.clone(),
        y0: r.y0.clone(),
    })
}

fn mean_path(paths: &[PathGrid]) -> PathGrid {
    let g = *paths[0].grid();
    let count = paths.len() as f64;
    let mut out = PathGrid::zeros(g, paths[0].dim());
    for k in 0..g.nodes() {
        let row = out.at_mut(k);
        for p in paths {
            for (a, v) in row.iter_mut().zip(p.at(k)) {
                *a += v / count;
            }
        }
    }
    out
}

/// Particle system on `[grid]` with the `[regime]` scales. With a control
/// the controlled pair and `Z` are recorded instead. Diverged particles are
/// listed in `simulate.json` and give exit code 4.
pub fn simulate(path: &Path, g: &Globals, h1: Option<Vec<f64>>, h2: Option<Vec<f64>>) -> Result<Outcome, RunError> {
    let mut s = Session::open(path, g)?;
    let grid = s.grid()?;
    let mc = multiscale_config(&s, grid)?;
    let d = s.model.dims();
    let summary = if h1.is_some() || h2.is_some() {
        let h1 = h1.unwrap_or_else(|| vec![0.0; d.d1]);
        let h2 = h2.unwrap_or_else(|| vec![0.0; d.d2]);
        if h1.len() != d.d1 || h2.len() != d.d2 {
            return Err(RunError::Config(format!("controls need {} and {} values", d.d1, d.d2)));
        }
        let control = constant_control(grid, &h1, &h2)?;
        let xbar = s.xbar(&grid)?.path;
        let run = mvmd_core::multiscale::simulate_controlled(&s.model, &mc, &control, &xbar, &s.exec)?;
        let (x, y, z) = (mean_path(&run.x), mean_path(&run.y), mean_path(&run.z));
        s.emit("slow_mean", || io::path_csv(&x), &path_json(&x))?;
        s.emit("fast_mean", || io::path_csv(&y), &path_json(&y))?;
        s.emit("deviation_mean", || io::path_csv(&z), &path_json(&z))?;
        s.emit("xbar", || io::path_csv(&xbar), &path_json(&xbar))?;
        run.summary
    } else {
        let run = mvmd_core::multiscale::simulate_multiscale(&s.model, &mc, &s.exec)?;
        let (x, y) = (run.mean_slow(), mean_path(&run.fast));
        s.emit("slow_mean", || io::path_csv(&x), &path_json(&x))?;
        s.emit("fast_mean", || io::path_csv(&y), &path_json(&y))?;
        run.summary
    };
    s.write(
        "simulate.json",
        &io::json(&serde_json::json!({
            "config": mc,
            "summary": summary,
            "diverged": summary.diverged > 0,
        })),
    )?;
    if summary.diverged > 0 {
        s.out.exit = 4;
    }
    Ok(s.out)
}

/// Options of the `occupation` subcommand.
#[derive(Debug, Clone)]
pub struct OccupationArgs {
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub y_range: (f64, f64),
    pub bins: usize,
    pub time_bins: usize,
    pub particle: usize,
}

/// Occupation measure of one particle of the controlled system over
/// `[0, T]` with window `Δ = ε^{1/3}` rounded to the step.
pub fn occupation(path: &Path, g: &Globals, a: &OccupationArgs) -> Result<Outcome, RunError> {
    let mut s = Session::open(path, g)?;
    let d = s.model.dims();
    if a.h1.len() != d.d1 || a.h2.len() != d.d2 {
        return Err(RunError::Config(format!("controls need {} and {} values", d.d1, d.d2)));
    }
    let base = s.grid()?;
    let dt = base.dt();
    let r = s.cfg.regime()?;
    if a.particle >= r.particles {
        return Err(RunError::Config(format!("--particle must be below {}", r.particles)));
    }
    let inner = (default_window(r.epsilon) / dt).round().max(1.0) as usize;
    let steps = base.steps() + inner;
    let grid = TimeGrid::with_steps(steps as f64 * dt, steps)?;
    let control = constant_control(grid, &a.h1, &a.h2)?;
    let mc = multiscale_config(&s, grid)?;
    let mut fast = PathGrid::zeros(grid, d.m);
    let who = a.particle;
    run_ensemble(
        &s.model,
        &mc,
        Some(&control),
        false,
        &mut |snap: &Snapshot<'_>| fast.set(snap.k, snap.particles[who].yh()),
        &s.exec,
    )?;
    let unit = |v: &f64| AxisSpec::new(v - 0.5, v + 0.5, 1);
    let spec = BinSpec {
        h1: a.h1.iter().map(unit).collect::<mvmd_core::Result<_>>()?,
        h2: a.h2.iter().map(unit).collect::<mvmd_core::Result<_>>()?,
        y: vec![AxisSpec::new(a.y_range.0, a.y_range.1, a.bins)?; d.m],
        time_bins: a.time_bins,
    };
    let occ = occupation_measure(&control, &fast, base.horizon(), inner as f64 * dt, &spec)?;
    s.emit("occupation", || io::occupation_csv(&occ), &occ)?;
    s.write("occupation_header.json", &io::occupation_header(&occ))?;
    Ok(s.out)
}

