//! Experiment campaigns: sweeps over the scale parameters with log-log
//! slope fits, the Khasminskii averaging check and the moderate-deviation
//! probability probe.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dsl::CoefficientModel;
use crate::error::{Error, Result};
use crate::exec::{Executor, Sequential};
use crate::frozen::{estimate_invariant_measure, FrozenConfig, RateOperator, Regime};
use crate::measure::MeasureMoments;
use crate::multiscale::{
    default_lambda, default_window, run_ensemble, solve_averaged_ode, AveragedOdeConfig, ControlFunction,
    MultiscaleConfig, Snapshot,
};
use crate::rate::{endpoint_rate_infimum, set_rate_infimum, LinearizedDrift};
use crate::sde::{channel, domain, em_step_in_place, PathGrid, RngPlan, StreamLabel, TimeGrid};
use crate::stats::{self, fit_log_log};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Delta,
    Epsilon,
    Window,
    Particles,
    Dt,
}

/// Geometric schedule `start·factor^i`, `i < count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub parameter: SweepParam,
    pub start: f64,
    pub factor: f64,
    pub count: usize,
    pub replicas: usize,
}

impl SweepSpec {
    pub fn new(parameter: SweepParam, start: f64, factor: f64, count: usize, replicas: usize) -> Result<Self> {
        if !(start > 0.0) || !(factor > 0.0) || factor == 1.0 || !factor.is_finite() {
            return Err(Error::Invalid(format!(
                "sweep needs start > 0 and a factor ≠ 1, got {start}, {factor}"
            )));
        }
        if count == 0 || replicas == 0 {
            return Err(Error::Invalid("sweep needs at least one point and one replica".into()));
        }
        Ok(Self {
            parameter,
            start,
            factor,
            count,
            replicas,
        })
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.start * libm::pow(self.factor, i as f64)).collect()
    }

    /// Slope fits need at least three points.
    pub fn check_fit(&self) -> Result<()> {
        if self.count < 3 {
            return Err(Error::Invalid(format!("slope fits need ≥ 3 points, sweep has {}", self.count)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub param: f64,
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Fitted,
    /// `R² < 0.9`: the slope is reported but not judged.
    Inconclusive,
    /// Some point is not finite and positive.
    NonFinite,
    TooFewPoints,
    Skipped,
    Aborted,
}

/// Log-log regression of `value` against `param`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: Vec<SweepPoint>,
    pub status: FitStatus,
    pub note: Option<String>,
}

impl SlopeFit {
    pub fn fit(points: Vec<SweepPoint>) -> Self {
        let mut out = Self {
            slope: f64::NAN,
            intercept: f64::NAN,
            r2: f64::NAN,
            points,
            status: FitStatus::TooFewPoints,
            note: None,
        };
        if out.points.len() < 3 {
            return out;
        }
        let x: Vec<f64> = out.points.iter().map(|p| p.param).collect();
        let y: Vec<f64> = out.points.iter().map(|p| p.value).collect();
        match fit_log_log(&x, &y) {
            Some(f) => {
                out.slope = f.slope;
                out.intercept = f.intercept;
                out.r2 = f.r2;
                out.status = if f.r2 < 0.9 {
                    FitStatus::Inconclusive
                } else {
                    FitStatus::Fitted
                };
            }
            None => out.status = FitStatus::NonFinite,
        }
        out
    }

    fn unfitted(points: Vec<SweepPoint>, status: FitStatus, note: String) -> Self {
        Self {
            slope: f64::NAN,
            intercept: f64::NAN,
            r2: f64::NAN,
            points,
            status,
            note: Some(note),
        }
    }

    /// Fitted with a slope inside `target ± tol`.
    pub fn within(&self, target: f64, tol: f64) -> bool {
        self.status == FitStatus::Fitted && libm::fabs(self.slope - target) <= tol
    }
}

/// Uniform grid on `[0, T]` with the largest step satisfying `dt ≤ ε/10`.
pub fn stiff_grid(horizon: f64, epsilon: f64) -> Result<TimeGrid> {
    resolved_grid(horizon, epsilon, 10.0)
}

/// Largest uniform step with `dt ≤ ε/resolution`.
pub fn resolved_grid(horizon: f64, epsilon: f64, resolution: f64) -> Result<TimeGrid> {
    if !(resolution >= 10.0) {
        return Err(Error::Invalid(format!("resolution {resolution} below the stiff-step limit 10")));
    }
    let steps = libm::ceil(resolution * horizon / epsilon * (1.0 - 1e-12)) as usize;
    TimeGrid::with_steps(horizon, steps.max(1))
}

fn is_abort(e: &Error) -> bool {
    matches!(
        e,
        Error::EnsembleDiverged { .. } | Error::Diverged { .. } | Error::NonFinite { .. }
    )
}

/// Whether `σ` and `g` vanish at the initial state, the mark of a model
/// whose slow-fast system is deterministic.
fn deterministic(model: &CoefficientModel, x0: &[f64], y0: &[f64]) -> Result<bool> {
    let mu = MeasureMoments::dirac(x0);
    let s = model.eval_sigma(x0, &mu)?;
    let mut zero = s.iter().all(|v| *v == 0.0);
    for shift in [-1.0, 0.0, 1.0] {
        let y: Vec<f64> = y0.iter().map(|v| v + shift).collect();
        zero &= model.eval_g(x0, &y, &mu)?.iter().all(|v| *v == 0.0);
    }
    Ok(zero)
}

/// Base setting shared by the multiscale sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub horizon: f64,
    pub particles: usize,
    pub replicas: usize,
    pub seed: u64,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub regime: Regime,
    pub ode: AveragedOdeConfig,
}

impl StudyConfig {
    pub fn scalar(horizon: f64, particles: usize, replicas: usize, seed: u64, x0: f64) -> Self {
        Self {
            horizon,
            particles,
            replicas,
            seed,
            x0: vec![x0],
            y0: vec![0.0],
            regime: Regime::One,
            ode: AveragedOdeConfig::default(),
        }
    }

    fn point(&self, delta: f64, epsilon: f64, grid: TimeGrid, replica: usize) -> MultiscaleConfig {
        MultiscaleConfig {
            delta,
            epsilon,
            lambda: default_lambda(delta),
            regime: self.regime,
            particles: self.particles,
            grid,
            seed: self.seed,
            replica: replica as u64,
            x0: self.x0.clone(),
            y0: self.y0.clone(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.particles == 0 || self.replicas == 0 {
            return Err(Error::Invalid("studies need particles and replicas".into()));
        }
        Ok(())
    }
}

/// Runs `replicas` independent ensembles concurrently and returns the
/// per-replica statistic in replica order.
fn over_replicas<E, F>(cfg: &StudyConfig, exec: &E, f: F) -> Result<Vec<f64>>
where
    E: Executor,
    F: Fn(usize) -> Result<f64> + Sync + Send,
{
    exec.map(cfg.replicas, f).into_iter().collect()
}

/// `E sup_t |X^δ_t − X̄_t|²` against `ε + δ` for each `(ε, δ)` pair.
///
/// A divergence stops the sweep and returns the points gathered so far.
pub fn averaging_study<E: Executor>(
    model: &CoefficientModel,
    points: &[(f64, f64)],
    cfg: &StudyConfig,
    exec: &E,
) -> Result<SlopeFit> {
    cfg.check()?;
    let mut out = Vec::new();
    for &(epsilon, delta) in points {
        let grid = stiff_grid(cfg.horizon, epsilon)?;
        let xbar = match solve_averaged_ode(model, &cfg.x0, &grid, &cfg.ode, &Sequential) {
            Ok(a) => a.path,
            Err(e) if is_abort(&e) => return Ok(SlopeFit::unfitted(out, FitStatus::Aborted, format!("{e}"))),
            Err(e) => return Err(e),
        };
        let run = over_replicas(cfg, exec, |r| {
            let mc = cfg.point(delta, epsilon, grid, r);
            let mut sup = vec![0.0f64; cfg.particles];
            run_ensemble(
                model,
                &mc,
                None,
                false,
                &mut |s: &Snapshot<'_>| {
                    let xb = xbar.at(s.k);
                    for (m, p) in sup.iter_mut().zip(s.particles) {
                        if p.alive() {
                            let d: f64 = p.x().iter().zip(xb).map(|(a, b)| (a - b) * (a - b)).sum();
                            *m = m.max(d);
                        }
                    }
                },
                &Sequential,
            )?;
            Ok(sup.iter().sum::<f64>() / sup.len() as f64)
        });
        match run {
            Ok(v) => {
                let (value, se) = stats::mean_se(&v);
                out.push(SweepPoint {
                    param: epsilon + delta,
                    value,
                    se,
                });
            }
            Err(e) if is_abort(&e) => {
                return Ok(SlopeFit::unfitted(out, FitStatus::Aborted, format!("ε={epsilon} δ={delta}: {e}")));
            }
            Err(e) => return Err(e),
        }
    }
    if deterministic(model, &cfg.x0, &cfg.y0)? {
        return Ok(SlopeFit::unfitted(
            out,
            FitStatus::Skipped,
            "deterministic model: errors are at ODE-integration level".into(),
        ));
    }
    Ok(SlopeFit::fit(out))
}

/// Constant controls `(h¹, h²)` on `grid`.
pub fn constant_control(grid: TimeGrid, h1: &[f64], h2: &[f64]) -> Result<ControlFunction> {
    let a = PathGrid::from_fn(grid, h1.len(), |_, o| o.copy_from_slice(h1));
    let b = PathGrid::from_fn(grid, h2.len(), |_, o| o.copy_from_slice(h2));
    let energy = (h1.iter().chain(h2).map(|v| v * v).sum::<f64>()) * grid.horizon();
    ControlFunction::new(a, b, energy * (1.0 + 1e-9) + 1e-300)
}

/// Moment statistics of one controlled sweep point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentPoint {
    pub delta: f64,
    pub epsilon: f64,
    /// `E sup_t |X^{δ,h}|²`
    pub slow_sup: (f64, f64),
    /// `E ∫ |Y^{δ,h}|² dt`
    pub fast_integral: (f64, f64),
    /// `E sup_t |Y^{δ,h}|²`
    pub fast_sup: (f64, f64),
    /// `E sup_t |Y^δ|²` of the uncontrolled process on the same noise.
    pub fast_sup_free: (f64, f64),
    /// `E sup_t |Z^{δ,h}|²`
    pub deviation_sup: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentStudy {
    pub points: Vec<MomentPoint>,
    /// `E sup|Y^{δ,h}|²` against `ε`.
    pub fast_sup: SlopeFit,
    /// `E sup|Z^{δ,h}|²` against `δ`.
    pub deviation_sup: SlopeFit,
    /// `E sup|X^{δ,h}|²` against `δ`.
    pub slow_sup: SlopeFit,
    pub note: Option<String>,
}

/// Moment estimates of the controlled system under constant controls.
pub fn moment_study<E: Executor>(
    model: &CoefficientModel,
    points: &[(f64, f64)],
    h1: &[f64],
    h2: &[f64],
    cfg: &StudyConfig,
    exec: &E,
) -> Result<MomentStudy> {
    cfg.check()?;
    let mut out = Vec::new();
    let mut note = None;
    'sweep: for &(epsilon, delta) in points {
        let grid = stiff_grid(cfg.horizon, epsilon)?;
        let control = constant_control(grid, h1, h2)?;
        let xbar = solve_averaged_ode(model, &cfg.x0, &grid, &cfg.ode, &Sequential)?.path;
        let run: Result<Vec<[f64; 5]>> = exec
            .map(cfg.replicas, |r| {
                let mc = cfg.point(delta, epsilon, grid, r);
                let lambda = mc.lambda;
                let mut acc = vec![[0.0f64; 5]; cfg.particles];
                let dt = grid.dt();
                let last = grid.steps();
                let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
                run_ensemble(
                    model,
                    &mc,
                    Some(&control),
                    false,
                    &mut |s: &Snapshot<'_>| {
                        let xb = xbar.at(s.k);
                        for (a, p) in acc.iter_mut().zip(s.particles) {
                            if !p.alive() {
                                continue;
                            }
                            a[0] = a[0].max(sq(p.xh()));
                            if s.k < last {
                                a[1] += sq(p.yh()) * dt;
                            }
                            a[2] = a[2].max(sq(p.yh()));
                            a[3] = a[3].max(sq(p.y()));
                            let z: f64 = p.xh().iter().zip(xb).map(|(u, v)| (u - v) * (u - v)).sum();
                            a[4] = a[4].max(z / (lambda * lambda));
                        }
                    },
                    &Sequential,
                )?;
                let mut mean = [0.0; 5];
                for a in &acc {
                    for (m, v) in mean.iter_mut().zip(a) {
                        *m += v / cfg.particles as f64;
                    }
                }
                Ok(mean)
            })
            .into_iter()
            .collect();
        let rows = match run {
            Ok(r) => r,
            Err(e) if is_abort(&e) => {
                note = Some(format!("ε={epsilon} δ={delta}: {e}"));
                break 'sweep;
            }
            Err(e) => return Err(e),
        };
        let col = |j: usize| stats::mean_se(&rows.iter().map(|r| r[j]).collect::<Vec<_>>());
        out.push(MomentPoint {
            delta,
            epsilon,
            slow_sup: col(0),
            fast_integral: col(1),
            fast_sup: col(2),
            fast_sup_free: col(3),
            deviation_sup: col(4),
        });
    }
    let pick = |x: fn(&MomentPoint) -> f64, y: fn(&MomentPoint) -> (f64, f64)| -> Vec<SweepPoint> {
        out.iter()
            .map(|p| SweepPoint {
                param: x(p),
                value: y(p).0,
                se: y(p).1,
            })
            .collect()
    };
    let fits = [
        pick(|p| p.epsilon, |p| p.fast_sup),
        pick(|p| p.delta, |p| p.deviation_sup),
        pick(|p| p.delta, |p| p.slow_sup),
    ]
    .map(|pts| match &note {
        Some(n) => SlopeFit::unfitted(pts, FitStatus::Aborted, n.clone()),
        None => SlopeFit::fit(pts),
    });
    let [fast_sup, deviation_sup, slow_sup] = fits;
    Ok(MomentStudy {
        points: out,
        fast_sup,
        deviation_sup,
        slow_sup,
        note,
    })
}

/// Time-regularity of the controlled slow process at one `(δ, ε)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityConfig {
    pub delta: f64,
    pub epsilon: f64,
    pub windows: Vec<f64>,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub study: StudyConfig,
}

/// `E|X^{δ,h}_{t+Δ} − X^{δ,h}_t|²` averaged over `t ∈ [0, T − Δ]`, against `Δ`.
pub fn time_regularity<E: Executor>(model: &CoefficientModel, cfg: &RegularityConfig, exec: &E) -> Result<SlopeFit> {
    let s = &cfg.study;
    s.check()?;
    let grid = stiff_grid(s.horizon, cfg.epsilon)?;
    let lags: Vec<usize> = cfg
        .windows
        .iter()
        .map(|w| (libm::round(w / grid.dt()) as usize).max(1))
        .collect();
    if lags.iter().any(|l| *l >= grid.steps()) {
        return Err(Error::Invalid("regularity windows must be shorter than the horizon".into()));
    }
    let control = constant_control(grid, &cfg.h1, &cfg.h2)?;
    let n = model.dims().n;
    let rows: Vec<Vec<f64>> = exec
        .map(s.replicas, |r| {
            let mc = s.point(cfg.delta, cfg.epsilon, grid, r);
            let mut paths = vec![0.0; s.particles * grid.nodes() * n];
            run_ensemble(
                model,
                &mc,
                Some(&control),
                false,
                &mut |snap: &Snapshot<'_>| {
                    for (i, p) in snap.particles.iter().enumerate() {
                        let at = (i * grid.nodes() + snap.k) * n;
                        paths[at..at + n].copy_from_slice(p.xh());
                    }
                },
                &Sequential,
            )?;
            let per_lag = lags
                .iter()
                .map(|&l| {
                    let mut total = 0.0;
                    for i in 0..s.particles {
                        let base = i * grid.nodes() * n;
                        for k in 0..grid.nodes() - l {
                            for j in 0..n {
                                let d = paths[base + (k + l) * n + j] - paths[base + k * n + j];
                                total += d * d;
                            }
                        }
                    }
                    total / (s.particles * (grid.nodes() - l)) as f64
                })
                .collect();
            Ok(per_lag)
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let points = lags
        .iter()
        .enumerate()
        .map(|(j, l)| {
            let (value, se) = stats::mean_se(&rows.iter().map(|r| r[j]).collect::<Vec<_>>());
            SweepPoint {
                param: *l as f64 * grid.dt(),
                value,
                se,
            }
        })
        .collect();
    Ok(SlopeFit::fit(points))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub deltas: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// `δ/λ²`
    pub speeds: Vec<f64>,
    /// Both `λ` and `δ/λ²` strictly decrease along the decreasing δ-sweep.
    pub consistent: bool,
}

pub fn lambda_schedule(deltas: &[f64], lambda: impl Fn(f64) -> f64) -> LambdaSchedule {
    let mut d = deltas.to_vec();
    d.sort_by(|a, b| b.total_cmp(a));
    let lambdas: Vec<f64> = d.iter().map(|v| lambda(*v)).collect();
    let speeds: Vec<f64> = d.iter().zip(&lambdas).map(|(a, l)| a / (l * l)).collect();
    let dec = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
    let in_range = lambdas.iter().all(|l| *l > 0.0 && *l < 1.0);
    LambdaSchedule {
        consistent: d.len() >= 2 && in_range && dec(&lambdas) && dec(&speeds),
        deltas: d,
        lambdas,
        speeds,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KhasminskiiConfig {
    pub horizon: f64,
    pub replicas: usize,
    pub seed: u64,
    pub y0: Vec<f64>,
    /// Bins of the reported time profile.
    pub time_bins: usize,
    /// Fast steps per unit of `ε`; Euler-Maruyama inflates the stationary
    /// variance of a fast OU with rate `θ` by `1/(1 − θ/(2·resolution))`.
    pub resolution: f64,
    /// Spacing of the nodes where `∫ϖ dν` is estimated.
    pub reference_step: f64,
    pub reference: FrozenConfig,
}

impl Default for KhasminskiiConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            replicas: 32,
            seed: 0,
            y0: vec![0.0],
            time_bins: 10,
            resolution: 10.0,
            reference_step: 0.05,
            reference: FrozenConfig {
                horizon: 100.0,
                dt: 0.01,
                burn_in: 5.0,
                thinning: 5,
                chains: 16,
                ..FrozenConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub epsilon: f64,
    pub t_mid: f64,
    /// Bin average of `ϖ(t, Ȳ_t)` over replicas.
    pub empirical: f64,
    pub se: f64,
    /// Bin average of `∫ϖ(t, y) ν_t(dy)`.
    pub reference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KhasminskiiReport {
    /// `E|∫ϖ(t, Ȳ_t)dt − ∫∫ϖ dν dt|` against `ε`.
    pub fit: SlopeFit,
    /// Windows `Δ` actually used, rounded to multiples of `dt`.
    pub windows: Vec<f64>,
    pub profiles: Vec<ProfilePoint>,
    /// The gap decreases with `ε` at every step of the sweep.
    pub monotone: bool,
}

/// Test function `ϖ(t, y)`.
pub type TestFunction<'a> = &'a (dyn Fn(f64, &[f64]) -> f64 + Sync);

/// Khasminskii discretization: the fast process with the slow argument
/// frozen at `X̄` of the window start, `Δ = ε^{1/3}`, compared in time
/// average with the invariant law along `X̄`.
pub fn khasminskii_check<E: Executor>(
    model: &CoefficientModel,
    xbar: &PathGrid,
    test: TestFunction<'_>,
    epsilons: &[f64],
    cfg: &KhasminskiiConfig,
    exec: &E,
) -> Result<KhasminskiiReport> {
    let d = model.dims();
    if cfg.replicas < 2 || cfg.time_bins == 0 {
        return Err(Error::Invalid("need ≥ 2 replicas and ≥ 1 time bin".into()));
    }
    if xbar.grid().horizon() + 1e-12 < cfg.horizon {
        return Err(Error::GridMismatch("averaged path shorter than the horizon".into()));
    }
    // ∫ϖ(t, ·)dν_t at coarse nodes
    let coarse = TimeGrid::with_steps(cfg.horizon, libm::ceil(cfg.horizon / cfg.reference_step).max(1.0) as usize)?;
    let mut x = vec![0.0; d.n];
    let mut refs = Vec::with_capacity(coarse.nodes());
    for k in 0..coarse.nodes() {
        let t = coarse.t(k);
        xbar.interpolate(t, &mut x);
        let inv = estimate_invariant_measure(model, &x, &MeasureMoments::dirac(&x), &cfg.reference, exec)?;
        let (v, _) = inv.average(1, |y, o| o[0] = test(t, y));
        refs.push(v[0]);
    }
    let reference_at = |t: f64| -> f64 {
        let s = (t / coarse.dt()).clamp(0.0, coarse.steps() as f64);
        let k = (libm::floor(s) as usize).min(coarse.steps() - 1);
        let w = s - k as f64;
        refs[k] + w * (refs[k + 1] - refs[k])
    };

    let mut points = Vec::new();
    let mut windows = Vec::new();
    let mut profiles = Vec::new();
    for &epsilon in epsilons {
        let grid = resolved_grid(cfg.horizon, epsilon, cfg.resolution)?;
        let dt = grid.dt();
        let l = (libm::round(default_window(epsilon) / dt) as usize).max(1);
        windows.push(l as f64 * dt);
        let per_bin = grid.steps().div_ceil(cfg.time_bins);
        let mut frozen_x = vec![0.0; d.n];
        // slow argument per window, shared by all replicas
        let starts: Vec<(Vec<f64>, MeasureMoments)> = (0..grid.steps().div_ceil(l))
            .map(|w| {
                xbar.interpolate(grid.t(w * l), &mut frozen_x);
                (frozen_x.clone(), MeasureMoments::dirac(&frozen_x))
            })
            .collect();
        let mut ref_total = 0.0;
        let mut ref_bins = vec![0.0; cfg.time_bins];
        for k in 0..grid.steps() {
            let v = reference_at(grid.t(k)) * dt;
            ref_total += v;
            ref_bins[k / per_bin] += v;
        }
        let plan = RngPlan::new(cfg.seed);
        let rows: Vec<Result<(f64, Vec<f64>)>> = exec.map(cfg.replicas, |r| {
            let mut noise = plan.stream(StreamLabel::new(domain::KHASMINSKII, r as u64, 0, channel::FAST));
            let mut y = cfg.y0.clone();
            let (mut f, mut g, mut dw) = (vec![0.0; d.m], vec![0.0; d.m * d.d2], vec![0.0; d.d2]);
            let (sqrt_dt, inv_eps, inv_sqrt_eps) = (libm::sqrt(dt), 1.0 / epsilon, 1.0 / libm::sqrt(epsilon));
            let mut total = 0.0;
            let mut bins = vec![0.0; cfg.time_bins];
            for k in 0..grid.steps() {
                let v = test(grid.t(k), &y) * dt;
                total += v;
                bins[k / per_bin] += v;
                let (xs, mu) = &starts[k / l];
                model.fast_drift(xs, &y, mu, &mut f);
                model.fast_diffusion(xs, &y, mu, &mut g);
                for v in &mut f {
                    *v *= inv_eps;
                }
                noise.fill_increments(sqrt_dt, &mut dw);
                for w in &mut dw {
                    *w *= inv_sqrt_eps;
                }
                if !em_step_in_place(&mut y, &f, &g, dt, &dw) {
                    return Err(Error::Diverged { step: k + 1 });
                }
            }
            Ok((total, bins))
        });
        let rows: Vec<(f64, Vec<f64>)> = match rows.into_iter().collect::<Result<_>>() {
            Ok(r) => r,
            Err(e) if is_abort(&e) => {
                let fit = SlopeFit::unfitted(points, FitStatus::Aborted, format!("ε={epsilon}: {e}"));
                return Ok(KhasminskiiReport {
                    fit,
                    windows,
                    profiles,
                    monotone: false,
                });
            }
            Err(e) => return Err(e),
        };
        let gaps: Vec<f64> = rows.iter().map(|(t, _)| libm::fabs(t - ref_total)).collect();
        let (value, se) = stats::mean_se(&gaps);
        points.push(SweepPoint {
            param: epsilon,
            value,
            se,
        });
        for b in 0..cfg.time_bins {
            let lo = b * per_bin;
            let hi = ((b + 1) * per_bin).min(grid.steps());
            if hi <= lo {
                continue;
            }
            let width = (hi - lo) as f64 * dt;
            let (m, s) = stats::mean_se(&rows.iter().map(|(_, bins)| bins[b] / width).collect::<Vec<_>>());
            profiles.push(ProfilePoint {
                epsilon,
                t_mid: 0.5 * (grid.t(lo) + grid.t(hi)),
                empirical: m,
                se: s,
                reference: ref_bins[b] / width,
            });
        }
    }
    let mut order: Vec<&SweepPoint> = points.iter().collect();
    order.sort_by(|a, b| a.param.total_cmp(&b.param));
    let monotone = order.len() >= 2 && order.windows(2).all(|w| w[0].value < w[1].value);
    let fit = if points.iter().all(|p| p.value <= 1e-12) {
        SlopeFit::unfitted(points, FitStatus::Skipped, "test function averages exactly".into())
    } else {
        SlopeFit::fit(points)
    };
    Ok(KhasminskiiReport {
        fit,
        windows,
        profiles,
        monotone,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpConfig {
    pub horizon: f64,
    /// Event `{|Z_T| ≥ radius}`.
    pub radius: f64,
    /// Independent interacting systems per δ.
    pub systems: usize,
    /// Particles per system; every particle counts as one replica.
    pub particles: usize,
    pub seed: u64,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    /// Regime 1 uses `ε = ratio·δ`; regime 2 always uses `ε = γδ`.
    pub epsilon_ratio: f64,
    pub min_exceedances: usize,
    pub ode: AveragedOdeConfig,
}

impl MdpConfig {
    pub fn scalar(radius: f64, systems: usize, particles: usize, seed: u64, x0: f64) -> Self {
        Self {
            horizon: 1.0,
            radius,
            systems,
            particles,
            seed,
            x0: vec![x0],
            y0: vec![0.0],
            epsilon_ratio: 0.1,
            min_exceedances: 50,
            ode: AveragedOdeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpPoint {
    pub delta: f64,
    pub epsilon: f64,
    pub lambda: f64,
    /// `δ/λ²`
    pub speed: f64,
    pub replicas: usize,
    pub exceedances: usize,
    pub p_hat: f64,
    pub p_se: f64,
    /// `−(δ/λ²)·log p̂`; absent when the point is unusable.
    pub rate_estimate: Option<f64>,
    pub rate_se: Option<f64>,
    /// Tail probability of the limiting linear Gaussian process (scalar state only).
    pub gaussian_p: Option<f64>,
    pub gaussian_rate: Option<f64>,
    pub usable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpReport {
    pub regime: u8,
    pub gamma: f64,
    pub radius: f64,
    /// Infimum of the rate function over the event.
    pub infimum: f64,
    pub points: Vec<MdpPoint>,
    /// Rate estimates strictly decrease as δ decreases, over usable points.
    pub decreasing: bool,
    pub note: String,
}

impl MdpReport {
    /// Rate estimate at the smallest δ.
    pub fn final_estimate(&self) -> Option<f64> {
        self.points
            .iter()
            .min_by(|a, b| a.delta.total_cmp(&b.delta))
            .and_then(|p| p.rate_estimate)
    }
}

/// Plain Monte Carlo estimate of `P(|Z^δ_T| ≥ r)` per δ, compared with
/// the rate-function infimum over the event.
pub fn mdp_probe<E: Executor>(
    model: &CoefficientModel,
    regime: Regime,
    deltas: &[f64],
    q: &RateOperator,
    lin: &LinearizedDrift,
    cfg: &MdpConfig,
    exec: &E,
) -> Result<MdpReport> {
    if cfg.systems == 0 || cfg.particles == 0 {
        return Err(Error::Invalid("the probe needs systems and particles".into()));
    }
    if !(cfg.radius >= 0.0) {
        return Err(Error::Invalid(format!("radius must be ≥ 0, got {}", cfg.radius)));
    }
    let n = model.dims().n;
    let infimum = if cfg.radius == 0.0 {
        0.0
    } else {
        set_rate_infimum(cfg.radius, q, lin)?
    };
    let gramian = if n == 1 {
        Some(endpoint_rate_infimum(&[1.0], q, lin)?.gramian[0])
    } else {
        None
    };
    let mut points = Vec::new();
    for &delta in deltas {
        let epsilon = match regime {
            Regime::One => cfg.epsilon_ratio * delta,
            Regime::Two { gamma } => gamma * delta,
        };
        let lambda = default_lambda(delta);
        let speed = delta / (lambda * lambda);
        let grid = stiff_grid(cfg.horizon, epsilon)?;
        let xbar = solve_averaged_ode(model, &cfg.x0, &grid, &cfg.ode, &Sequential)?.path;
        let xt = xbar.last().to_vec();
        let r2 = cfg.radius * cfg.radius;
        let counts: Vec<Result<usize>> = exec.map(cfg.systems, |s| {
            let mc = MultiscaleConfig {
                delta,
                epsilon,
                lambda,
                regime,
                particles: cfg.particles,
                grid,
                seed: cfg.seed,
                replica: s as u64,
                x0: cfg.x0.clone(),
                y0: cfg.y0.clone(),
            };
            let mut hits = 0;
            let last = grid.steps();
            run_ensemble(
                model,
                &mc,
                None,
                false,
                &mut |snap: &Snapshot<'_>| {
                    if snap.k != last {
                        return;
                    }
                    for p in snap.particles.iter().filter(|p| p.alive()) {
                        let z: f64 = p.x().iter().zip(&xt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (lambda * lambda);
                        if z >= r2 {
                            hits += 1;
                        }
                    }
                },
                &Sequential,
            )?;
            Ok(hits)
        });
        let exceedances: usize = counts.into_iter().collect::<Result<Vec<_>>>()?.into_iter().sum();
        let replicas = cfg.systems * cfg.particles;
        let p_hat = exceedances as f64 / replicas as f64;
        let p_se = libm::sqrt(p_hat * (1.0 - p_hat) / replicas as f64);
        let usable = exceedances >= cfg.min_exceedances;
        let rate = |p: f64| if p >= 1.0 { 0.0 } else { -speed * libm::log(p) };
        let (gaussian_p, gaussian_rate) = match gramian {
            Some(g) => {
                let sd = libm::sqrt(speed * g);
                let p = libm::erfc(cfg.radius / (core::f64::consts::SQRT_2 * sd));
                (Some(p), Some(rate(p)))
            }
            None => (None, None),
        };
        points.push(MdpPoint {
            delta,
            epsilon,
            lambda,
            speed,
            replicas,
            exceedances,
            p_hat,
            p_se,
            rate_estimate: usable.then(|| rate(p_hat)),
            rate_se: usable.then(|| speed * p_se / p_hat),
            gaussian_p,
            gaussian_rate,
            usable,
        });
    }
    let mut order: Vec<&MdpPoint> = points.iter().collect();
    order.sort_by(|a, b| b.delta.total_cmp(&a.delta));
    let decreasing = order.len() >= 2
        && order.iter().all(|p| p.usable)
        && order
            .windows(2)
            .all(|w| w[1].rate_estimate.unwrap() < w[0].rate_estimate.unwrap());
    Ok(MdpReport {
        regime: regime.index(),
        gamma: regime.gamma(),
        radius: cfg.radius,
        infimum,
        points,
        decreasing,
        note: "finite-δ bias of the estimate is not bounded by the theory; tolerances are engineering choices".into(),
    })
}
