//! The interacting-particle slow-fast system, its controlled variant, the
//! averaged ODE, the deviation process and occupation measures.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dsl::CoefficientModel;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::frozen::{averaged_drift_at, FrozenConfig, Regime};
use crate::linalg;
use crate::measure::{wasserstein1_hist, Histogram1d, MeasureMoments};
use crate::sde::{channel, domain, em_step_in_place, NoiseStream, PathGrid, RngPlan, StreamLabel, TimeGrid};
use crate::stats;

/// Default moderate-deviation scale `λ(δ) = δ^0.4`.
pub fn default_lambda(delta: f64) -> f64 {
    libm::pow(delta, 0.4)
}

/// Default Khasminskii window `Δ = ε^{1/3}`.
pub fn default_window(epsilon: f64) -> f64 {
    libm::cbrt(epsilon)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiscaleConfig {
    pub delta: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub regime: Regime,
    pub particles: usize,
    pub grid: TimeGrid,
    pub seed: u64,
    /// Replica index folded into every stream label.
    pub replica: u64,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
}

impl MultiscaleConfig {
    /// Scalar-state configuration with `λ = δ^0.4`, `X_0 = x0`, `Y_0 = 0`.
    pub fn scalar(delta: f64, epsilon: f64, regime: Regime, particles: usize, grid: TimeGrid, seed: u64, x0: f64) -> Self {
        Self {
            delta,
            epsilon,
            lambda: default_lambda(delta),
            regime,
            particles,
            grid,
            seed,
            replica: 0,
            x0: vec![x0],
            y0: vec![0.0],
        }
    }

    /// Checks ranges, dimensions and the stiff-step guard `dt ≤ ε/10`.
    /// Regime 2 requires `ε = γδ`; for regime 1 the ratio `ε/δ` is
    /// returned so callers can flag it when it is not small.
    pub fn check(&self, model: &CoefficientModel) -> Result<ConfigCheck> {
        for (name, v) in [("delta", self.delta), ("epsilon", self.epsilon), ("lambda", self.lambda)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Invalid(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if self.particles == 0 {
            return Err(Error::Invalid("need at least one particle".into()));
        }
        let d = model.dims();
        if self.x0.len() != d.n || self.y0.len() != d.m {
            return Err(Error::Dimension(format!(
                "initial state has dims ({}, {}), model has ({}, {})",
                self.x0.len(),
                self.y0.len(),
                d.n,
                d.m
            )));
        }
        let limit = self.epsilon / 10.0;
        if self.grid.dt() > limit * (1.0 + 1e-9) {
            return Err(Error::StiffStep { dt: self.grid.dt(), limit });
        }
        let ratio = self.epsilon / self.delta;
        if let Regime::Two { gamma } = self.regime {
            if libm::fabs(self.epsilon - gamma * self.delta) > 1e-9 * self.epsilon {
                return Err(Error::Invalid(format!(
                    "regime 2 needs ε = γδ, got ε={} γδ={}",
                    self.epsilon,
                    gamma * self.delta
                )));
            }
        }
        Ok(ConfigCheck {
            ratio,
            ratio_small: ratio <= 0.1,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfigCheck {
    /// `ε/δ`
    pub ratio: f64,
    pub ratio_small: bool,
}

/// Deterministic controls `h = (h¹, h²)` on a grid, zero past its horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlFunction {
    pub h1: PathGrid,
    pub h2: PathGrid,
    pub budget: f64,
}

impl ControlFunction {
    /// Fails with `BudgetExceeded` if `∫(|h¹|² + |h²|²) dt > budget`.
    pub fn new(h1: PathGrid, h2: PathGrid, budget: f64) -> Result<Self> {
        if !h1.grid().same_as(h2.grid()) {
            return Err(Error::GridMismatch("h¹ and h² on different grids".into()));
        }
        h1.check_finite()?;
        h2.check_finite()?;
        let c = Self { h1, h2, budget };
        let energy = c.energy();
        if energy > budget {
            return Err(Error::BudgetExceeded { energy, budget });
        }
        Ok(c)
    }

    pub fn zero(grid: TimeGrid, d1: usize, d2: usize) -> Self {
        Self {
            h1: PathGrid::zeros(grid, d1),
            h2: PathGrid::zeros(grid, d2),
            budget: 0.0,
        }
    }

    /// `∫₀ᵀ (|h¹|² + |h²|²) dt`, trapezoidal.
    pub fn energy(&self) -> f64 {
        let g = self.h1.grid();
        let mut e = 0.0;
        for k in 0..g.nodes() {
            let w = if k == 0 || k == g.steps() { 0.5 } else { 1.0 };
            let s: f64 = self.h1.at(k).iter().chain(self.h2.at(k)).map(|v| v * v).sum();
            e += w * s * g.dt();
        }
        e
    }

    fn at(&self, k: usize) -> (Option<&[f64]>, Option<&[f64]>) {
        if k > self.h1.grid().steps() {
            return (None, None);
        }
        let nz = |v: &[f64]| v.iter().any(|x| *x != 0.0);
        let (a, b) = (self.h1.at(k), self.h2.at(k));
        (nz(a).then_some(a), nz(b).then_some(b))
    }
}

/// Which processes a particle carries besides the uncontrolled pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Tracks {
    controlled: bool,
    tilde: bool,
}

/// State of one particle: the uncontrolled pair `(X, Y)`, optionally the
/// controlled pair `(X^h, Y^h)` and the uncontrolled fast process `Ỹ`
/// driven by `X^h`. All share the particle's two noise streams.
#[derive(Debug, Clone)]
pub struct Particle {
    x: Vec<f64>,
    y: Vec<f64>,
    xh: Vec<f64>,
    yh: Vec<f64>,
    yt: Vec<f64>,
    w1: NoiseStream,
    w2: NoiseStream,
    diverged_at: Option<usize>,
    controlled: bool,
    scratch: Scratch,
}

#[derive(Debug, Clone)]
struct Scratch {
    b: Vec<f64>,
    s: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    dw1: Vec<f64>,
    dw2: Vec<f64>,
}

impl Particle {
    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Controlled slow state (equals `x` when no control is tracked).
    pub fn xh(&self) -> &[f64] {
        if self.controlled { &self.xh } else { &self.x }
    }

    pub fn yh(&self) -> &[f64] {
        if self.controlled { &self.yh } else { &self.y }
    }

    /// Uncontrolled fast process driven by `X^h` (equals `y` when not tracked).
    pub fn y_tilde(&self) -> &[f64] {
        if self.controlled { &self.yt } else { &self.y }
    }

    pub fn alive(&self) -> bool {
        self.diverged_at.is_none()
    }
}

/// Shared per-step constants.
struct StepCtx<'a> {
    model: &'a CoefficientModel,
    mu: &'a MeasureMoments,
    dt: f64,
    sqrt_dt: f64,
    sqrt_delta: f64,
    inv_eps: f64,
    inv_sqrt_eps: f64,
    lambda: f64,
    fast_control: f64,
    d1: usize,
    d2: usize,
    tracks: Tracks,
    h1: Option<&'a [f64]>,
    h2: Option<&'a [f64]>,
}

impl Particle {
    fn step(&mut self, c: &StepCtx<'_>, k: usize) {
        if self.diverged_at.is_some() {
            return;
        }
        let sc = &mut self.scratch;
        self.w1.fill_increments(c.sqrt_dt, &mut sc.dw1);
        self.w2.fill_increments(c.sqrt_dt, &mut sc.dw2);
        for w in &mut sc.dw1 {
            *w *= c.sqrt_delta;
        }
        for w in &mut sc.dw2 {
            *w *= c.inv_sqrt_eps;
        }
        let mut ok = true;

        // controlled and tilde processes read the pre-step X^h
        if c.tracks.controlled {
            if c.tracks.tilde {
                c.model.fast_drift(&self.xh, &self.yt, c.mu, &mut sc.f);
                c.model.fast_diffusion(&self.xh, &self.yt, c.mu, &mut sc.g);
                for v in &mut sc.f {
                    *v *= c.inv_eps;
                }
                ok &= em_step_in_place(&mut self.yt, &sc.f, &sc.g, c.dt, &sc.dw2);
            }
            c.model.fast_drift(&self.xh, &self.yh, c.mu, &mut sc.f);
            c.model.fast_diffusion(&self.xh, &self.yh, c.mu, &mut sc.g);
            for v in &mut sc.f {
                *v *= c.inv_eps;
            }
            if let Some(h2) = c.h2 {
                let gh = linalg::mat_vec(&sc.g, h2, sc.f.len(), c.d2);
                for (v, u) in sc.f.iter_mut().zip(gh) {
                    *v += c.fast_control * u;
                }
            }
            c.model.slow_drift(&self.xh, &self.yh, c.mu, &mut sc.b);
            c.model.slow_diffusion(&self.xh, c.mu, &mut sc.s);
            if let Some(h1) = c.h1 {
                let sh = linalg::mat_vec(&sc.s, h1, sc.b.len(), c.d1);
                for (v, u) in sc.b.iter_mut().zip(sh) {
                    *v += c.lambda * u;
                }
            }
            ok &= em_step_in_place(&mut self.xh, &sc.b, &sc.s, c.dt, &sc.dw1);
            ok &= em_step_in_place(&mut self.yh, &sc.f, &sc.g, c.dt, &sc.dw2);
        }

        c.model.fast_drift(&self.x, &self.y, c.mu, &mut sc.f);
        c.model.fast_diffusion(&self.x, &self.y, c.mu, &mut sc.g);
        for v in &mut sc.f {
            *v *= c.inv_eps;
        }
        c.model.slow_drift(&self.x, &self.y, c.mu, &mut sc.b);
        c.model.slow_diffusion(&self.x, c.mu, &mut sc.s);
        ok &= em_step_in_place(&mut self.x, &sc.b, &sc.s, c.dt, &sc.dw1);
        ok &= em_step_in_place(&mut self.y, &sc.f, &sc.g, c.dt, &sc.dw2);
        if !ok {
            self.diverged_at = Some(k + 1);
        }
    }
}

/// View of the ensemble at node `k`, handed to observers.
pub struct Snapshot<'a> {
    pub k: usize,
    pub t: f64,
    pub particles: &'a [Particle],
    /// Moments of the uncontrolled slow cloud at `t`.
    pub mu: &'a MeasureMoments,
}

pub trait Observer {
    fn observe(&mut self, snap: &Snapshot<'_>);
}

impl<F: FnMut(&Snapshot<'_>)> Observer for F {
    fn observe(&mut self, snap: &Snapshot<'_>) {
        self(snap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub particles: usize,
    pub diverged: usize,
    /// `(particle, step)` for every diverged particle.
    pub divergences: Vec<(usize, usize)>,
    pub check: ConfigCheck,
}

/// Advances all particles in lockstep over `cfg.grid`, reporting every
/// node (including `t = 0`) to `observer`.
///
/// With a control, the controlled pair is driven by `λσh¹` and
/// `λ/√(δε)·g h²` while the measure argument always comes from the
/// uncontrolled cloud. Moments are reduced in particle order.
pub fn run_ensemble<E: Executor, O: Observer + ?Sized>(
    model: &CoefficientModel,
    cfg: &MultiscaleConfig,
    control: Option<&ControlFunction>,
    track_tilde: bool,
    observer: &mut O,
    exec: &E,
) -> Result<RunSummary> {
    let check = cfg.check(model)?;
    let d = model.dims();
    if let Some(c) = control {
        if c.h1.dim() != d.d1 || c.h2.dim() != d.d2 {
            return Err(Error::Dimension("control dimensions do not match d1, d2".into()));
        }
        if libm::fabs(c.h1.grid().dt() - cfg.grid.dt()) > 1e-12 * cfg.grid.dt() {
            return Err(Error::GridMismatch("control grid step differs from the simulation step".into()));
        }
    }
    let tracks = Tracks {
        controlled: control.is_some(),
        tilde: control.is_some() && track_tilde,
    };
    let plan = RngPlan::new(cfg.seed);
    let mut particles: Vec<Particle> = (0..cfg.particles)
        .map(|i| Particle {
            x: cfg.x0.clone(),
            y: cfg.y0.clone(),
            xh: cfg.x0.clone(),
            yh: cfg.y0.clone(),
            yt: cfg.y0.clone(),
            w1: plan.stream(StreamLabel::new(domain::MULTISCALE, cfg.replica, i as u64, channel::SLOW)),
            w2: plan.stream(StreamLabel::new(domain::MULTISCALE, cfg.replica, i as u64, channel::FAST)),
            diverged_at: None,
            controlled: tracks.controlled,
            scratch: Scratch {
                b: vec![0.0; d.n],
                s: vec![0.0; d.n * d.d1],
                f: vec![0.0; d.m],
                g: vec![0.0; d.m * d.d2],
                dw1: vec![0.0; d.d1],
                dw2: vec![0.0; d.d2],
            },
        })
        .collect();
    let mut mu = MeasureMoments::empty();
    let mut alive_x: Vec<f64> = Vec::with_capacity(cfg.particles * d.n);
    let reduce = |ps: &[Particle], mu: &mut MeasureMoments, buf: &mut Vec<f64>| {
        buf.clear();
        for p in ps.iter().filter(|p| p.alive()) {
            buf.extend_from_slice(&p.x);
        }
        mu.assign_from(d.n, buf);
    };
    reduce(&particles, &mut mu, &mut alive_x);
    observer.observe(&Snapshot {
        k: 0,
        t: 0.0,
        particles: &particles,
        mu: &mu,
    });
    let max_diverged = cfg.particles / 100;
    let mut diverged = 0;
    for k in 0..cfg.grid.steps() {
        let (h1, h2) = control.map_or((None, None), |c| c.at(k));
        let ctx = StepCtx {
            model,
            mu: &mu,
            dt: cfg.grid.dt(),
            sqrt_dt: libm::sqrt(cfg.grid.dt()),
            sqrt_delta: libm::sqrt(cfg.delta),
            inv_eps: 1.0 / cfg.epsilon,
            inv_sqrt_eps: 1.0 / libm::sqrt(cfg.epsilon),
            lambda: cfg.lambda,
            fast_control: cfg.lambda / libm::sqrt(cfg.delta * cfg.epsilon),
            d1: d.d1,
            d2: d.d2,
            tracks,
            h1,
            h2,
        };
        exec.for_each_mut(&mut particles, |_, p| p.step(&ctx, k));
        let now = particles.iter().filter(|p| !p.alive()).count();
        if now != diverged {
            diverged = now;
            if diverged > max_diverged {
                return Err(Error::EnsembleDiverged {
                    diverged,
                    total: cfg.particles,
                });
            }
        }
        reduce(&particles, &mut mu, &mut alive_x);
        observer.observe(&Snapshot {
            k: k + 1,
            t: cfg.grid.t(k + 1),
            particles: &particles,
            mu: &mu,
        });
    }
    let divergences = particles
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.diverged_at.map(|s| (i, s)))
        .collect();
    Ok(RunSummary {
        particles: cfg.particles,
        diverged,
        divergences,
        check,
    })
}

/// Full per-particle paths of an uncontrolled run.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub slow: Vec<PathGrid>,
    pub fast: Vec<PathGrid>,
    pub summary: RunSummary,
}

impl Ensemble {
    /// Particle-average of the slow paths.
    pub fn mean_slow(&self) -> PathGrid {
        let g = *self.slow[0].grid();
        let n = self.slow[0].dim();
        let count = self.slow.len() as f64;
        PathGrid::from_fn(g, n, |t, o| {
            let k = libm::round(t / g.dt()) as usize;
            o.fill(0.0);
            for p in &self.slow {
                for (a, v) in o.iter_mut().zip(p.at(k)) {
                    *a += v / count;
                }
            }
        })
    }
}

fn record(grid: TimeGrid, particles: usize, dim: usize) -> Vec<PathGrid> {
    (0..particles).map(|_| PathGrid::zeros(grid, dim)).collect()
}

/// Runs the uncontrolled system and keeps every path.
pub fn simulate_multiscale<E: Executor>(model: &CoefficientModel, cfg: &MultiscaleConfig, exec: &E) -> Result<Ensemble> {
    let d = model.dims();
    let mut slow = record(cfg.grid, cfg.particles, d.n);
    let mut fast = record(cfg.grid, cfg.particles, d.m);
    let summary = run_ensemble(
        model,
        cfg,
        None,
        false,
        &mut |s: &Snapshot<'_>| {
            for (i, p) in s.particles.iter().enumerate() {
                slow[i].set(s.k, p.x());
                fast[i].set(s.k, p.y());
            }
        },
        exec,
    )?;
    Ok(Ensemble { slow, fast, summary })
}

/// Paths of a controlled run: `X^{δ,h}`, `Y^{δ,h}` and
/// `Z^{δ,h} = (X^{δ,h} − X̄)/λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlledEnsemble {
    pub x: Vec<PathGrid>,
    pub y: Vec<PathGrid>,
    pub z: Vec<PathGrid>,
    pub summary: RunSummary,
}

pub fn simulate_controlled<E: Executor>(
    model: &CoefficientModel,
    cfg: &MultiscaleConfig,
    control: &ControlFunction,
    xbar: &PathGrid,
    exec: &E,
) -> Result<ControlledEnsemble> {
    let d = model.dims();
    if !xbar.grid().same_as(&cfg.grid) {
        return Err(Error::GridMismatch("averaged path and simulation grid differ".into()));
    }
    let mut x = record(cfg.grid, cfg.particles, d.n);
    let mut y = record(cfg.grid, cfg.particles, d.m);
    let summary = run_ensemble(
        model,
        cfg,
        Some(control),
        false,
        &mut |s: &Snapshot<'_>| {
            for (i, p) in s.particles.iter().enumerate() {
                x[i].set(s.k, p.xh());
                y[i].set(s.k, p.yh());
            }
        },
        exec,
    )?;
    let z = x
        .iter()
        .map(|p| deviation_process(p, xbar, cfg.lambda))
        .collect::<Result<Vec<_>>>()?;
    Ok(ControlledEnsemble { x, y, z, summary })
}

/// `Z_t = (X_t − X̄_t)/λ`.
pub fn deviation_process(slow: &PathGrid, averaged: &PathGrid, lambda: f64) -> Result<PathGrid> {
    if !slow.grid().same_as(averaged.grid()) || slow.dim() != averaged.dim() {
        return Err(Error::GridMismatch("slow and averaged paths live on different grids".into()));
    }
    Ok(slow.map(slow.dim(), |k, x, out| {
        for ((o, a), b) in out.iter_mut().zip(x).zip(averaged.at(k)) {
            *o = (a - b) / lambda;
        }
    }))
}

/// `E ∫₀ᵀ |Y^{δ,h} − Ỹ^δ|² dt` over the particles, with its standard error.
pub fn controlled_fast_gap<E: Executor>(
    model: &CoefficientModel,
    cfg: &MultiscaleConfig,
    control: &ControlFunction,
    exec: &E,
) -> Result<(f64, f64)> {
    let mut acc = vec![0.0; cfg.particles];
    let dt = cfg.grid.dt();
    let last = cfg.grid.steps();
    run_ensemble(
        model,
        cfg,
        Some(control),
        true,
        &mut |s: &Snapshot<'_>| {
            if s.k == last {
                return;
            }
            for (a, p) in acc.iter_mut().zip(s.particles) {
                let g: f64 = p.yh().iter().zip(p.y_tilde()).map(|(u, v)| (u - v) * (u - v)).sum();
                *a += g * dt;
            }
        },
        exec,
    )?;
    Ok(stats::mean_se(&acc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedOdeConfig {
    /// Step of the one-step integrator; a multiple of the output `dt`.
    pub ode_step: f64,
    pub frozen: FrozenConfig,
}

impl Default for AveragedOdeConfig {
    fn default() -> Self {
        Self {
            ode_step: 0.1,
            frozen: FrozenConfig {
                horizon: 50.0,
                dt: 0.01,
                burn_in: 5.0,
                thinning: 1,
                chains: 16,
                antithetic: true,
                min_ess: 0.0,
                ..FrozenConfig::default()
            },
        }
    }
}

/// `X̄` and `b̄(X̄, δ_X̄)` on the output grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedPath {
    pub path: PathGrid,
    pub drift: PathGrid,
    /// Largest standard error of any `b̄` evaluation.
    pub drift_se: f64,
    pub evaluations: usize,
}

/// Classical RK4 for `dX̄/dt = b̄(X̄, δ_X̄)` on a coarse grid, then cubic
/// Hermite interpolation onto `grid`. `b̄` comes from frozen chains that
/// share their noise across evaluation points, memoized by state.
pub fn solve_averaged_ode<E: Executor>(
    model: &CoefficientModel,
    x0: &[f64],
    grid: &TimeGrid,
    cfg: &AveragedOdeConfig,
    exec: &E,
) -> Result<AveragedPath> {
    let n = model.dims().n;
    if x0.len() != n {
        return Err(Error::Dimension(format!("x0 has {} entries, n = {n}", x0.len())));
    }
    let k = grid.steps();
    let want = (libm::round(cfg.ode_step / grid.dt()) as usize).clamp(1, k);
    let stride = (1..=want).rev().find(|s| k % s == 0).unwrap_or(1);
    let h = stride as f64 * grid.dt();
    let coarse = k / stride;

    let mut memo: BTreeMap<Vec<u64>, Vec<f64>> = BTreeMap::new();
    let mut drift_se = 0.0f64;
    let mut bbar = |x: &[f64]| -> Result<Vec<f64>> {
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        if let Some(v) = memo.get(&key) {
            return Ok(v.clone());
        }
        let e = averaged_drift_at(model, x, &MeasureMoments::dirac(x), &cfg.frozen, exec)?;
        for s in &e.se {
            if s.is_finite() {
                drift_se = drift_se.max(*s);
            }
        }
        memo.insert(key, e.value.clone());
        Ok(e.value)
    };
    let axpy = |x: &[f64], a: f64, v: &[f64]| -> Vec<f64> { x.iter().zip(v).map(|(p, q)| p + a * q).collect() };

    let mut xs = vec![x0.to_vec()];
    let mut fs = vec![bbar(x0)?];
    for j in 0..coarse {
        let x = &xs[j];
        let k1 = fs[j].clone();
        let k2 = bbar(&axpy(x, 0.5 * h, &k1))?;
        let k3 = bbar(&axpy(x, 0.5 * h, &k2))?;
        let k4 = bbar(&axpy(x, h, &k3))?;
        let next: Vec<f64> = (0..n)
            .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step: (j + 1) * stride });
        }
        fs.push(bbar(&next)?);
        xs.push(next);
    }
    drop(bbar);
    let evaluations = memo.len();

    let mut path = PathGrid::zeros(*grid, n);
    let mut drift = PathGrid::zeros(*grid, n);
    for kk in 0..grid.nodes() {
        let j = (kk / stride).min(coarse - 1);
        let s = (kk - j * stride) as f64 / stride as f64;
        let (h00, h10, h01, h11) = (
            2.0 * s * s * s - 3.0 * s * s + 1.0,
            s * s * s - 2.0 * s * s + s,
            -2.0 * s * s * s + 3.0 * s * s,
            s * s * s - s * s,
        );
        for i in 0..n {
            path.at_mut(kk)[i] = h00 * xs[j][i] + h10 * h * fs[j][i] + h01 * xs[j + 1][i] + h11 * h * fs[j + 1][i];
            drift.at_mut(kk)[i] = (1.0 - s) * fs[j][i] + s * fs[j + 1][i];
        }
    }
    Ok(AveragedPath {
        path,
        drift,
        drift_se,
        evaluations,
    })
}

/// Rectangular bins on `[lo, hi)` plus one overflow bin on each side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl AxisSpec {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if !(hi > lo) || bins == 0 {
            return Err(Error::Invalid(format!("bad axis [{lo}, {hi}) with {bins} bins")));
        }
        Ok(Self { lo, hi, bins })
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    /// Slots including the two overflow bins.
    pub fn slots(&self) -> usize {
        self.bins + 2
    }

    /// Slot of `v`: 0 below `lo`, `bins + 1` at or above `hi`.
    pub fn slot(&self, v: f64) -> usize {
        if v < self.lo {
            0
        } else if v >= self.hi {
            self.bins + 1
        } else {
            1 + ((((v - self.lo) / self.width()) as usize).min(self.bins - 1))
        }
    }

    /// Representative point of a slot; overflow slots sit half a width
    /// outside the range.
    pub fn center(&self, slot: usize) -> f64 {
        self.lo + (slot as f64 - 0.5) * self.width()
    }
}

/// `N(mean, sd²)` binned on the slots of `axis`, overflow slots included.
pub fn gaussian_slots(axis: &AxisSpec, mean: f64, sd: f64) -> Histogram1d {
    let cdf = |v: f64| 0.5 * libm::erfc(-(v - mean) / (sd * core::f64::consts::SQRT_2));
    let mut mass = Vec::with_capacity(axis.slots());
    mass.push(cdf(axis.lo));
    for i in 0..axis.bins {
        let a = axis.lo + i as f64 * axis.width();
        mass.push(cdf(a + axis.width()) - cdf(a));
    }
    mass.push(1.0 - cdf(axis.hi));
    Histogram1d {
        left: axis.lo - axis.width(),
        width: axis.width(),
        mass,
    }
}

/// Empirical law of `samples` on the slots of `axis`, normalized.
pub fn empirical_slots(axis: &AxisSpec, samples: &[f64]) -> Histogram1d {
    let mut mass = vec![0.0; axis.slots()];
    for v in samples {
        mass[axis.slot(*v)] += 1.0 / samples.len() as f64;
    }
    Histogram1d {
        left: axis.lo - axis.width(),
        width: axis.width(),
        mass,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub h1: Vec<AxisSpec>,
    pub h2: Vec<AxisSpec>,
    pub y: Vec<AxisSpec>,
    pub time_bins: usize,
}

impl BinSpec {
    fn axes(&self) -> impl Iterator<Item = &AxisSpec> {
        self.h1.iter().chain(&self.h2).chain(&self.y)
    }

    fn cells(&self) -> usize {
        self.axes().map(|a| a.slots()).product()
    }
}

/// Binned occupation measure of `(h¹, h², Y, t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupationMeasure {
    pub spec: BinSpec,
    pub horizon: f64,
    /// Window length `Δ`.
    pub window: f64,
    /// Dense masses, time bin slowest, then h¹, h², y axes in order.
    pub mass: Vec<f64>,
    /// Mass that landed in any overflow slot.
    pub overflow_mass: f64,
}

impl OccupationMeasure {
    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    fn cells(&self) -> usize {
        self.spec.cells()
    }

    /// Decodes a flat cell index into per-axis slots.
    pub fn slots_of(&self, cell: usize) -> Vec<usize> {
        let axes: Vec<&AxisSpec> = self.spec.axes().collect();
        let mut slots = vec![0; axes.len()];
        let mut rest = cell;
        for (i, a) in axes.iter().enumerate().rev() {
            slots[i] = rest % a.slots();
            rest /= a.slots();
        }
        slots
    }

    pub fn time_bin_mass(&self, b: usize) -> &[f64] {
        let c = self.cells();
        &self.mass[b * c..(b + 1) * c]
    }

    /// Mass of the `y`-coordinate `j` in time bin `b`, as a histogram
    /// whose first and last bins are the overflow slots.
    pub fn y_marginal(&self, b: usize, j: usize) -> Histogram1d {
        let d1 = self.spec.h1.len();
        let d2 = self.spec.h2.len();
        let axis = self.spec.y[j];
        let mut mass = vec![0.0; axis.slots()];
        for (cell, m) in self.time_bin_mass(b).iter().enumerate() {
            if *m != 0.0 {
                mass[self.slots_of(cell)[d1 + d2 + j]] += m;
            }
        }
        Histogram1d {
            left: axis.lo - axis.width(),
            width: axis.width(),
            mass,
        }
    }

    /// Mass of the control slots `(h¹, h²)` summed over time and `y`.
    pub fn control_marginal(&self) -> BTreeMap<Vec<usize>, f64> {
        let d = self.spec.h1.len() + self.spec.h2.len();
        let mut out = BTreeMap::new();
        for b in 0..self.spec.time_bins {
            for (cell, m) in self.time_bin_mass(b).iter().enumerate() {
                if *m != 0.0 {
                    *out.entry(self.slots_of(cell)[..d].to_vec()).or_insert(0.0) += m;
                }
            }
        }
        out
    }
}

/// Occupation measure
/// `P(A × B × C × [s, t]) = ∫_s^t (1/Δ) ∫_r^{r+Δ} 1{h¹_u ∈ A, h²_u ∈ B, Y_u ∈ C} du dr`
/// with left Riemann sums on the grid of `fast`.
///
/// `fast` must extend at least `Δ` past `horizon`; controls past their own
/// horizon count as zero.
pub fn occupation_measure(
    control: &ControlFunction,
    fast: &PathGrid,
    horizon: f64,
    window: f64,
    spec: &BinSpec,
) -> Result<OccupationMeasure> {
    let g = *fast.grid();
    let dt = g.dt();
    if spec.h1.len() != control.h1.dim() || spec.h2.len() != control.h2.dim() || spec.y.len() != fast.dim() {
        return Err(Error::Dimension("bin spec does not match control and fast dimensions".into()));
    }
    let outer = TimeGrid::new(horizon, dt)?.steps();
    let inner = g.steps_in(window)?;
    if outer + inner > g.nodes() {
        return Err(Error::Invalid(format!(
            "fast path ends at {} but the windows reach {}",
            g.horizon(),
            horizon + window
        )));
    }
    if spec.time_bins == 0 || outer % spec.time_bins != 0 {
        return Err(Error::Invalid("time bins must split the outer grid evenly".into()));
    }
    let per_bin = outer / spec.time_bins;
    let cells = spec.cells();
    let axes: Vec<AxisSpec> = spec.axes().copied().collect();
    let zero_h1 = vec![0.0; control.h1.dim()];
    let zero_h2 = vec![0.0; control.h2.dim()];
    let cell_of = |u: usize| -> (usize, bool) {
        let (h1, h2) = if u <= control.h1.grid().steps() {
            (control.h1.at(u), control.h2.at(u))
        } else {
            (&zero_h1[..], &zero_h2[..])
        };
        let mut idx = 0;
        let mut over = false;
        for (a, v) in axes.iter().zip(h1.iter().chain(h2).chain(fast.at(u))) {
            let s = a.slot(*v);
            over |= s == 0 || s == a.bins + 1;
            idx = idx * a.slots() + s;
        }
        (idx, over)
    };
    let cache: Vec<(usize, bool)> = (0..outer + inner).map(cell_of).collect();
    let mut mass = vec![0.0; spec.time_bins * cells];
    let mut overflow = 0.0;
    let w = dt / inner as f64;
    for k in 0..outer {
        let base = (k / per_bin) * cells;
        for &(cell, over) in &cache[k..k + inner] {
            mass[base + cell] += w;
            if over {
                overflow += w;
            }
        }
    }
    Ok(OccupationMeasure {
        spec: spec.clone(),
        horizon,
        window,
        mass,
        overflow_mass: overflow,
    })
}

/// Inputs of the map `Θ(z, y, h¹, h²) = ∂x b̄·z + σh¹ + √γ ∂yΦ_g(y)h²`
/// along a grid: `dbbar` and `sigma` hold one row-major matrix per node.
pub struct ThetaInputs<'a> {
    pub dbbar: &'a [f64],
    pub sigma: &'a [f64],
    /// `∂yΦ_g` at node `k` and fast state `y`, written as an `n × d2` matrix.
    pub dphig: &'a dyn Fn(usize, &[f64], &mut [f64]),
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViablePairCheck {
    pub trajectory_residual: f64,
    pub marginal_distance: f64,
    pub second_moment: f64,
}

/// Checks that `(z, P)` satisfies the averaged controlled dynamics and
/// that the `y`-marginal of `P` matches `ν̂` per time bin.
///
/// The residual is evaluated at the time-bin edges, with the `∂x b̄·z`
/// term integrated on the grid of `z` and the remaining terms taken from
/// the binned measure at slot centres.
pub fn viability_check(
    z: &PathGrid,
    occ: &OccupationMeasure,
    theta: &ThetaInputs<'_>,
    nu_hat: &[Histogram1d],
) -> Result<ViablePairCheck> {
    let n = z.dim();
    let g = *z.grid();
    let d1 = occ.spec.h1.len();
    let d2 = occ.spec.h2.len();
    let m = occ.spec.y.len();
    let outer = TimeGrid::new(occ.horizon, g.dt())?.steps();
    if outer > g.steps() || theta.dbbar.len() < (outer + 1) * n * n || theta.sigma.len() < (outer + 1) * n * d1 {
        return Err(Error::GridMismatch("Θ inputs do not cover the occupation horizon".into()));
    }
    if nu_hat.len() != occ.spec.time_bins * m {
        return Err(Error::Dimension("need one ν̂ histogram per time bin and fast coordinate".into()));
    }
    let per_bin = outer / occ.spec.time_bins;
    let axes: Vec<AxisSpec> = occ.spec.axes().copied().collect();
    let sg = libm::sqrt(theta.gamma);

    let mut integral = vec![0.0; n];
    let mut residual = 0.0f64;
    let mut second = 0.0;
    let mut phig = vec![0.0; n * d2];
    for b in 0..occ.spec.time_bins {
        let k0 = b * per_bin;
        for k in k0..k0 + per_bin {
            let a = &theta.dbbar[k * n * n..(k + 1) * n * n];
            for (i, v) in linalg::mat_vec(a, z.at(k), n, n).into_iter().enumerate() {
                integral[i] += v * g.dt();
            }
        }
        let mid = k0 + per_bin / 2;
        let sigma = &theta.sigma[mid * n * d1..(mid + 1) * n * d1];
        for (cell, mass) in occ.time_bin_mass(b).iter().enumerate() {
            if *mass == 0.0 {
                continue;
            }
            let pt: Vec<f64> = occ.slots_of(cell).iter().zip(&axes).map(|(s, a)| a.center(*s)).collect();
            let (h1, rest) = pt.split_at(d1);
            let (h2, y) = rest.split_at(d2);
            second += mass * pt.iter().map(|v| v * v).sum::<f64>();
            (theta.dphig)(mid, y, &mut phig);
            let sh = linalg::mat_vec(sigma, h1, n, d1);
            let ph = linalg::mat_vec(&phig, h2, n, d2);
            for i in 0..n {
                integral[i] += mass * (sh[i] + sg * ph[i]);
            }
        }
        let edge = k0 + per_bin;
        let gap = z
            .at(edge)
            .iter()
            .zip(z.at(0))
            .zip(&integral)
            .map(|((zt, z0), int)| (zt - z0 - int) * (zt - z0 - int))
            .sum::<f64>();
        residual = residual.max(libm::sqrt(gap));
    }

    let mut dist = 0.0;
    for b in 0..occ.spec.time_bins {
        for j in 0..m {
            let marg = occ.y_marginal(b, j).normalized();
            dist += wasserstein1_hist(&marg, &nu_hat[b * m + j].normalized())?;
        }
    }
    Ok(ViablePairCheck {
        trajectory_residual: residual,
        marginal_distance: dist / (occ.spec.time_bins * m) as f64,
        second_moment: second,
    })
}

/// `ν̂` per time bin for fast coordinate `j`: the invariant law of the
/// frozen equation at `X̄` in the middle of each bin, binned on `axis`.
pub fn reference_marginals<E: Executor>(
    model: &CoefficientModel,
    xbar: &PathGrid,
    time_bins: usize,
    j: usize,
    axis: &AxisSpec,
    frozen: &FrozenConfig,
    exec: &E,
) -> Result<Vec<Histogram1d>> {
    let per_bin = xbar.grid().steps() / time_bins.max(1);
    (0..time_bins)
        .map(|b| {
            let x = xbar.at(b * per_bin + per_bin / 2);
            let inv = crate::frozen::estimate_invariant_measure(model, x, &MeasureMoments::dirac(x), frozen, exec)?;
            Ok(empirical_slots(axis, &inv.cloud.coordinate(j)))
        })
        .collect()
}
