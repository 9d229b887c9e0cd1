//! The frozen fast equation `dY = f(x, μ, Y) dt + g(x, μ, Y) dW` at fixed
//! slow state and measure, its invariant law, the averaged drift `b̄`,
//! the Poisson cell solution `Φ`, `∂yΦ·g`, and the rate operators `Q1`/`Q2`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dsl::CoefficientModel;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::linalg;
use crate::measure::{MeasureMoments, ParticleCloud};
use crate::sde::{channel, domain, em_step_in_place, NoiseStream, PathGrid, RngPlan, StreamLabel, TimeGrid};
use crate::stats;

/// Largest frozen-equation step accepted for a validated model.
pub fn frozen_step_limit(model: &CoefficientModel) -> Result<f64> {
    let c = model.constants().ok_or(Error::NotValidated)?;
    Ok(0.1 / c.lipschitz.max(1.0))
}

fn check_step(model: &CoefficientModel, dt: f64) -> Result<()> {
    let limit = frozen_step_limit(model)?;
    if dt > limit * (1.0 + 1e-12) {
        return Err(Error::StiffStep { dt, limit });
    }
    Ok(())
}

/// One frozen path from `y0` on `grid`, driven by stream `(FROZEN, 0, 0, FAST)`.
pub fn simulate_frozen(
    model: &CoefficientModel,
    x: &[f64],
    mu: &MeasureMoments,
    y0: &[f64],
    grid: &TimeGrid,
    plan: &RngPlan,
) -> Result<PathGrid> {
    check_step(model, grid.dt())?;
    let d = model.dims();
    let mut stream = plan.stream(StreamLabel::new(domain::FROZEN, 0, 0, channel::FAST));
    Ok(crate::sde::simulate_path(
        |_, y, out| model.fast_drift(x, y, mu, out),
        |_, y, out| model.fast_diffusion(x, y, mu, out),
        y0,
        grid,
        d.d2,
        &mut stream,
    ))
}

/// Runs one frozen chain for `steps` steps and hands every new state to
/// `visit`. `sign = -1` gives the antithetic partner of a stream.
#[allow(clippy::too_many_arguments)]
fn run_chain(
    model: &CoefficientModel,
    x: &[f64],
    mu: &MeasureMoments,
    y0: &[f64],
    dt: f64,
    steps: usize,
    stream: &mut NoiseStream,
    sign: f64,
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<()> {
    let d = model.dims();
    let mut y = y0.to_vec();
    let mut f = vec![0.0; d.m];
    let mut g = vec![0.0; d.m * d.d2];
    let mut dw = vec![0.0; d.d2];
    let sdt = sign * libm::sqrt(dt);
    for k in 1..=steps {
        model.fast_drift(x, &y, mu, &mut f);
        model.fast_diffusion(x, &y, mu, &mut g);
        stream.fill_increments(sdt, &mut dw);
        if !em_step_in_place(&mut y, &f, &g, dt, &dw) {
            return Err(Error::Diverged { step: k });
        }
        visit(k, &y);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenConfig {
    /// Length of each chain.
    pub horizon: f64,
    pub dt: f64,
    pub burn_in: f64,
    /// Keep every `thinning`-th post-burn-in state.
    pub thinning: usize,
    /// Independent chains run side by side.
    pub chains: usize,
    pub seed: u64,
    /// Start of every chain; the origin when absent.
    pub y0: Option<Vec<f64>>,
    pub min_ess: f64,
    /// Pair chains with sign-flipped noise.
    pub antithetic: bool,
}

impl Default for FrozenConfig {
    fn default() -> Self {
        Self {
            horizon: 200.0,
            dt: 1e-3,
            burn_in: 20.0,
            thinning: 100,
            chains: 1,
            seed: 0,
            y0: None,
            min_ess: 100.0,
            antithetic: false,
        }
    }
}

impl FrozenConfig {
    fn layout(&self, model: &CoefficientModel) -> Result<(usize, usize, Vec<f64>)> {
        check_step(model, self.dt)?;
        if !(self.burn_in >= 0.0 && self.burn_in < self.horizon) {
            return Err(Error::Invalid(format!(
                "burn_in {} must lie in [0, horizon {})",
                self.burn_in, self.horizon
            )));
        }
        if self.chains == 0 || self.thinning == 0 {
            return Err(Error::Invalid("chains and thinning must be positive".into()));
        }
        if self.antithetic && self.chains % 2 != 0 {
            return Err(Error::Invalid("antithetic sampling needs an even chain count".into()));
        }
        let steps = TimeGrid::new(self.horizon, self.dt)?.steps();
        let burn = libm::round(self.burn_in / self.dt) as usize;
        let y0 = match &self.y0 {
            Some(v) if v.len() != model.dims().m => {
                return Err(Error::Dimension(format!("y0 has {} entries, m = {}", v.len(), model.dims().m)))
            }
            Some(v) => v.clone(),
            None => vec![0.0; model.dims().m],
        };
        Ok((steps, burn, y0))
    }

    fn chain_stream(&self, c: usize) -> (NoiseStream, f64) {
        let plan = RngPlan::new(self.seed);
        if self.antithetic {
            let s = plan.stream(StreamLabel::new(domain::FROZEN, (c / 2) as u64, 0, channel::FAST));
            (s, if c % 2 == 0 { 1.0 } else { -1.0 })
        } else {
            (plan.stream(StreamLabel::new(domain::FROZEN, c as u64, 0, channel::FAST)), 1.0)
        }
    }

    /// Chains whose outputs are averaged before forming batch statistics.
    fn batch(&self) -> usize {
        if self.antithetic {
            2
        } else {
            1
        }
    }
}

/// Post burn-in samples of the frozen equation, chain-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantMeasureEstimate {
    pub x: Vec<f64>,
    pub mu: MeasureMoments,
    pub cloud: ParticleCloud,
    pub chains: usize,
    pub per_chain: usize,
    batch: usize,
    pub burn_in: f64,
    /// Time between retained samples.
    pub spacing: f64,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub mean_se: Vec<f64>,
    /// Smallest per-coordinate effective sample size.
    pub ess: f64,
    /// Exponential decorrelation rate from the lag-one autocorrelation.
    pub mixing_rate: Option<f64>,
    /// The rate `κ/2` guaranteed by dissipativity.
    pub kappa_rate: Option<f64>,
}

impl InvariantMeasureEstimate {
    fn chain(&self, c: usize) -> &[f64] {
        let m = self.cloud.dim();
        &self.cloud.as_flat()[c * self.per_chain * m..(c + 1) * self.per_chain * m]
    }

    /// Mean of `h(y)` over the cloud with a standard error from batch means
    /// over chains, or from the effective sample size when there are too
    /// few chains.
    pub fn average(&self, out_dim: usize, mut h: impl FnMut(&[f64], &mut [f64])) -> (Vec<f64>, Vec<f64>) {
        let batches = self.chains / self.batch;
        let mut per_batch = vec![0.0; batches * out_dim];
        let mut total = vec![0.0; out_dim];
        let mut total_sq = vec![0.0; out_dim];
        let mut buf = vec![0.0; out_dim];
        for c in 0..self.chains {
            let bi = c / self.batch;
            for y in self.chain(c).chunks_exact(self.cloud.dim()) {
                h(y, &mut buf);
                for j in 0..out_dim {
                    per_batch[bi * out_dim + j] += buf[j];
                    total[j] += buf[j];
                    total_sq[j] += buf[j] * buf[j];
                }
            }
        }
        let count = self.cloud.len() as f64;
        let value: Vec<f64> = total.iter().map(|s| s / count).collect();
        let se = (0..out_dim)
            .map(|j| {
                if batches >= 8 {
                    let per = (self.per_chain * self.batch) as f64;
                    let means: Vec<f64> = (0..batches).map(|b| per_batch[b * out_dim + j] / per).collect();
                    stats::mean_se(&means).1
                } else {
                    let var = (total_sq[j] / count - value[j] * value[j]).max(0.0);
                    libm::sqrt(var / self.ess)
                }
            })
            .collect();
        (value, se)
    }
}

fn same_point(x: &[f64], mu: &MeasureMoments, ex: &[f64], emu: &MeasureMoments) -> Result<()> {
    if x != ex || mu != emu {
        return Err(Error::Invalid("invariant-measure estimate was computed at a different (x, μ)".into()));
    }
    Ok(())
}

/// Ergodic samples of the frozen equation after burn-in, thinned.
pub fn estimate_invariant_measure<E: Executor>(
    model: &CoefficientModel,
    x: &[f64],
    mu: &MeasureMoments,
    cfg: &FrozenConfig,
    exec: &E,
) -> Result<InvariantMeasureEstimate> {
    let (steps, burn, y0) = cfg.layout(model)?;
    let m = model.dims().m;
    let per_chain = (steps - burn) / cfg.thinning;
    if per_chain < 2 {
        return Err(Error::Invalid("too few retained samples per chain".into()));
    }
    let runs = exec.map(cfg.chains, |c| {
        let (mut stream, sign) = cfg.chain_stream(c);
        let mut kept = Vec::with_capacity(per_chain * m);
        run_chain(model, x, mu, &y0, cfg.dt, steps, &mut stream, sign, |k, y| {
            if k > burn && (k - burn) % cfg.thinning == 0 && kept.len() < per_chain * m {
                kept.extend_from_slice(y);
            }
        })?;
        Ok(kept)
    });
    let mut flat = Vec::with_capacity(cfg.chains * per_chain * m);
    for r in runs {
        flat.extend(r?);
    }
    let cloud = ParticleCloud::new(m, flat)?;
    let moments = cloud.moments();
    let variance = moments.variance();
    let spacing = cfg.thinning as f64 * cfg.dt;

    let mut ess = f64::INFINITY;
    let mut mixing: Option<f64> = None;
    for j in 0..m {
        let series: Vec<Vec<f64>> = (0..cfg.chains)
            .map(|c| {
                let s = &cloud.as_flat()[c * per_chain * m..(c + 1) * per_chain * m];
                s.iter().skip(j).step_by(m).copied().collect()
            })
            .collect();
        let ess_j: f64 = series
            .iter()
            .map(|s| match stats::integrated_autocorrelation(s) {
                Some(tau) => s.len() as f64 / tau,
                None => s.len() as f64,
            })
            .sum();
        ess = ess.min(ess_j);
        let rows: Vec<&[f64]> = series.iter().map(|s| s.as_slice()).collect();
        if let Some(r1) = stats::autocorrelation(&rows, 1) {
            if r1 > 0.0 && r1 < 1.0 {
                let rate = -libm::log(r1) / spacing;
                mixing = Some(mixing.map_or(rate, |v: f64| v.min(rate)));
            }
        }
    }
    if ess < cfg.min_ess {
        return Err(Error::LowEffectiveSampleSize { ess, min: cfg.min_ess });
    }
    let mut est = InvariantMeasureEstimate {
        x: x.to_vec(),
        mu: mu.clone(),
        cloud,
        chains: cfg.chains,
        per_chain,
        batch: cfg.batch(),
        burn_in: cfg.burn_in,
        spacing,
        mean: moments.mean.clone(),
        variance,
        mean_se: Vec::new(),
        ess,
        mixing_rate: mixing,
        kappa_rate: model.constants().map(|c| c.kappa / 2.0),
    };
    est.mean_se = est.average(m, |y, o| o.copy_from_slice(y)).1;
    Ok(est)
}

/// A Monte Carlo estimate with standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: Vec<f64>,
    pub se: Vec<f64>,
}

/// `b̄(x, μ)` as the average of `b(x, μ, ·)` over the samples of `inv`.
pub fn averaged_drift(
    model: &CoefficientModel,
    x: &[f64],
    mu: &MeasureMoments,
    inv: &InvariantMeasureEstimate,
) -> Result<Estimate> {
    same_point(x, mu, &inv.x, &inv.mu)?;
    let n = model.dims().n;
    if model.slow_drift_fast_free() {
        return Ok(Estimate {
            value: model.eval_b(x, &vec![0.0; model.dims().m], mu)?,
            se: vec![0.0; n],
        });
    }
    let (value, se) = inv.average(n, |y, o| model.slow_drift(x, y, mu, o));
    if value.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { path: "b̄".into() });
    }
    Ok(Estimate { value, se })
}

/// `b̄(x, μ)` averaged along the frozen chains as they run, without
/// storing samples. Every post-burn-in step contributes.
pub fn averaged_drift_at<E: Executor>(
    model: &CoefficientModel,
    x: &[f64],
    mu: &MeasureMoments,
    cfg: &FrozenConfig,
    exec: &E,
) -> Result<Estimate> {
    let n = model.dims().n;
    if model.slow_drift_fast_free() {
        return Ok(Estimate {
            value: model.eval_b(x, &vec![0.0; model.dims().m], mu)?,
            se: vec![0.0; n],
        });
    }
    let (steps, burn, y0) = cfg.layout(model)?;
    let sums = exec.map(cfg.chains, |c| {
        let (mut stream, sign) = cfg.chain_stream(c);
        let mut acc = vec![0.0; n];
        let mut b = vec![0.0; n];
        run_chain(model, x, mu, &y0, cfg.dt, steps, &mut stream, sign, |k, y| {
            if k > burn {
                model.slow_drift(x, y, mu, &mut b);
                for j in 0..n {
                    acc[j] += b[j];
                }
            }
        })?;
        Ok(acc)
    });
    let per = (steps - burn) as f64;
    let batch = cfg.batch();
    let batches = cfg.chains / batch;
    let mut means = vec![vec![0.0; batches]; n];
    for (c, s) in sums.into_iter().enumerate() {
        let s: Vec<f64> = s?;
        for j in 0..n {
            means[j][c / batch] += s[j] / (per * batch as f64);
        }
    }
    let mut value = Vec::with_capacity(n);
    let mut se = Vec::with_capacity(n);
    for col in &means {
        let (v, e) = stats::mean_se(col);
        if !v.is_finite() {
            return Err(Error::NonFinite { path: "b̄".into() });
        }
        value.push(v);
        se.push(e);
    }
    Ok(Estimate { value, se })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonConfig {
    /// Truncation horizon `S`; chosen from `κ` and `tol` when absent.
    pub horizon: Option<f64>,
    pub tol: f64,
    pub replicas: usize,
    pub dt: f64,
    pub seed: u64,
}

impl Default for PoissonConfig {
    fn default() -> Self {
        Self {
            horizon: None,
            tol: 1e-3,
            replicas: 1000,
            dt: 1e-3,
            seed: 0,
        }
    }
}

/// Smallest `S` with `e^{−κS/2}(1 + |y|) ≤ tol/10`.
pub fn required_horizon(kappa: f64, y: &[f64], tol: f64) -> f64 {
    let ny = libm::sqrt(y.iter().map(|v| v * v).sum());
    (2.0 / kappa) * libm::log(10.0 * (1.0 + ny) / tol).max(0.0)
}

fn poisson_steps(model: &CoefficientModel, y: &[f64], cfg: &PoissonConfig) -> Result<(usize, f64)> {
    check_step(model, cfg.dt)?;
    if cfg.replicas < 2 || !(cfg.tol > 0.0) {
        return Err(Error::Invalid("Poisson solve needs ≥ 2 replicas and tol > 0".into()));
    }
    let required = required_horizon(model.kappa()?, y, cfg.tol);
    let s = match cfg.horizon {
        Some(s) if s < required => return Err(Error::Truncation { horizon: s, required }),
        Some(s) => s,
        None => required,
    };
    let steps = (libm::ceil(s / cfg.dt - 1e-9) as usize).max(1);
    Ok((steps, steps as f64 * cfg.dt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonSolution {
    pub x: Vec<f64>,
    pub mu: MeasureMoments,
    pub y: Vec<f64>,
    pub value: Vec<f64>,
    pub se: Vec<f64>,
    /// Truncation horizon actually integrated.
    pub horizon: f64,
    pub replicas: usize,
    /// `max_i |Φ_i| / (1 + |y|)`.
    pub growth_constant: f64,
}

/// Integrates `b(x, μ, Y^a) − b(x, μ, Y^b)` for two frozen copies started
/// at `ya`, `yb` and driven by the same noise; trapezoidal rule.
#[allow(clippy::too_many_arguments)]
fn coupled_gap_integral(
    model: &CoefficientModel,
    x: &[f64],
    mu: &MeasureMoments,
    ya: &[f64],
    yb: &[f64],
    dt: f64,
    steps: usize,
    mut stream: NoiseStream,
    out: &mut [f64],
) -> Result<()> {
    let d = model.dims();
    let (mut a, mut b) = (ya.to_vec(), yb.to_vec());
    let mut fa = vec![0.0; d.m];
    let mut ga = vec![0.0; d.m * d.d2];
    let mut fb = vec![0.0; d.m];
    let mut gb = vec![0.0; d.m * d.d2];
    let mut dw = vec![0.0; d.d2];
    let mut ba = vec![0.0; d.n];
    let mut bb = vec![0.0; d.n];
    let sdt = libm::sqrt(dt);
    out.fill(0.0);
    for k in 0..=steps {
        model.slow_drift(x, &a, mu, &mut ba);
        model.slow_drift(x, &b, mu, &mut bb);
        let w = if k == 0 || k == steps { 0.5 * dt } else { dt };
        for i in 0..d.n {
            out[i] += w * (ba[i] - bb[i]);
        }
        if k == steps {
            break;
        }
        model.fast_drift(x, &a, mu, &mut fa);
        model.fast_diffusion(x, &a, mu, &mut ga);
        model.fast_drift(x, &b, mu, &mut fb);
        model.fast_diffusion(x, &b, mu, &mut gb);
        stream.fill_increments(sdt, &mut dw);
        let ok_a = em_step_in_place(&mut a, &fa, &ga, dt, &dw);
        let ok_b = em_step_in_place(&mut b, &fb, &gb, dt, &dw);
        if !(ok_a && ok_b) {
            return Err(Error::Diverged { step: k + 1 });
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { path: "Φ".into() });
    }
    Ok(())
}

fn replica_stream(seed: u64, r: usize) -> NoiseStream {
    RngPlan::new(seed).stream(StreamLabel::new(domain::POISSON, r as u64, 0, channel::FAST))
}

/// `Φ(x, μ, y) = ∫₀^S (E b(x, μ, Y^y_s) − b̄(x, μ)) ds`.
///
/// Each replica pairs the path from `y` with a companion started at a
/// sample of `inv` and sharing its noise. The companion is stationary, so
/// its drift has mean `b̄` at every time, and the synchronous coupling
/// makes the integrand contract at rate `κ/2` path by path.
pub fn solve_poisson_phi<E: Executor>(
    model: &CoefficientModel,
    x: &[f64],
    mu: &MeasureMoments,
    y: &[f64],
    cfg: &PoissonConfig,
    inv: &InvariantMeasureEstimate,
    exec: &E,
) -> Result<PoissonSolution> {
    same_point(x, mu, &inv.x, &inv.mu)?;
    let d = model.dims();
    if y.len() != d.m {
        return Err(Error::Dimension(format!("y has {} entries, m = {}", y.len(), d.m)));
    }
    let (steps, horizon) = poisson_steps(model, y, cfg)?;
    let plan = RngPlan::new(cfg.seed);
    let runs = exec.map(cfg.replicas, |r| {
        let pick = plan
            .stream(StreamLabel::new(domain::POISSON, r as u64, 0, channel::FAST + 1))
            .index(inv.cloud.len());
        let mut out = vec![0.0; d.n];
        coupled_gap_integral(model, x, mu, y, inv.cloud.point(pick), cfg.dt, steps, replica_stream(cfg.seed, r), &mut out)?;
        Ok(out)
    });
    let (value, se) = reduce_replicas(runs, d.n)?;
    let ny = libm::sqrt(y.iter().map(|v| v * v).sum());
    let growth_constant = value.iter().map(|v| libm::fabs(*v)).fold(0.0, f64::max) / (1.0 + ny);
    Ok(PoissonSolution {
        x: x.to_vec(),
        mu: mu.clone(),
        y: y.to_vec(),
        value,
        se,
        horizon,
        replicas: cfg.replicas,
        growth_constant,
    })
}

fn reduce_replicas(runs: Vec<Result<Vec<f64>>>, dim: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let runs: Vec<Vec<f64>> = runs.into_iter().collect::<Result<_>>()?;
    let mut value = Vec::with_capacity(dim);
    let mut se = Vec::with_capacity(dim);
    for j in 0..dim {
        let col: Vec<f64> = runs.iter().map(|r| r[j]).collect();
        let (v, e) = stats::mean_se(&col);
        value.push(v);
        se.push(e);
    }
    Ok((value, se))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradConfig {
    pub fd_step: f64,
    pub poisson: PoissonConfig,
}

impl Default for GradConfig {
    fn default() -> Self {
        Self {
            fd_step: 1e-2,
            poisson: PoissonConfig::default(),
        }
    }
}

/// `∂yΦ(x, μ, y)·g(x, μ, y)` as a row-major `n × d2` matrix.
///
/// Central differences in each fast coordinate; the `±` paths of a
/// replica share their noise, so the `b̄` centring cancels and the
/// difference is integrated directly.
pub fn grad_y_phi_g<E: Executor>(
    model: &CoefficientModel,
    x: &[f64],
    mu: &MeasureMoments,
    y: &[f64],
    cfg: &GradConfig,
    exec: &E,
) -> Result<Estimate> {
    let d = model.dims();
    if !(cfg.fd_step > 0.0) {
        return Err(Error::Invalid("fd_step must be positive".into()));
    }
    if y.len() != d.m {
        return Err(Error::Dimension(format!("y has {} entries, m = {}", y.len(), d.m)));
    }
    let (steps, _) = poisson_steps(model, y, &cfg.poisson)?;
    let g = model.eval_g(x, y, mu)?;
    let h = cfg.fd_step;
    let runs = exec.map(cfg.poisson.replicas, |r| {
        let mut dphi = vec![0.0; d.n * d.m];
        let mut col = vec![0.0; d.n];
        for j in 0..d.m {
            let mut up = y.to_vec();
            let mut dn = y.to_vec();
            up[j] += h;
            dn[j] -= h;
            coupled_gap_integral(model, x, mu, &up, &dn, cfg.poisson.dt, steps, replica_stream(cfg.poisson.seed, r), &mut col)?;
            for i in 0..d.n {
                dphi[i * d.m + j] = col[i] / (2.0 * h);
            }
        }
        Ok(linalg::matmul(&dphi, &g, d.n, d.m, d.d2))
    });
    let (value, se) = reduce_replicas(runs, d.n * d.d2)?;
    Ok(Estimate { value, se })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime")]
pub enum Regime {
    /// `ε/δ → 0`
    #[serde(rename = "1")]
    One,
    /// `ε/δ → γ`
    #[serde(rename = "2")]
    Two { gamma: f64 },
}

impl Regime {
    pub fn index(&self) -> u8 {
        match self {
            Regime::One => 1,
            Regime::Two { .. } => 2,
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            Regime::One => 0.0,
            Regime::Two { gamma } => *gamma,
        }
    }
}

/// Time-indexed `n × n` covariance operators with their inverses and
/// inverse square roots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateOperator {
    grid: TimeGrid,
    n: usize,
    regime: Regime,
    q: Vec<f64>,
    q_inv: Vec<f64>,
    q_inv_sqrt: Vec<f64>,
    source: String,
}

impl RateOperator {
    /// `q` holds one row-major matrix per grid node. Matrices are
    /// symmetrized and must be positive definite.
    pub fn from_matrices(grid: TimeGrid, n: usize, regime: Regime, mut q: Vec<f64>, source: &str) -> Result<Self> {
        let nn = n * n;
        if q.len() != grid.nodes() * nn {
            return Err(Error::Dimension(format!("expected {} matrix entries, got {}", grid.nodes() * nn, q.len())));
        }
        if let Regime::Two { gamma } = regime {
            if !(gamma >= 0.0) {
                return Err(Error::Invalid(format!("γ must be ≥ 0, got {gamma}")));
            }
        }
        let mut q_inv = Vec::with_capacity(q.len());
        let mut q_inv_sqrt = Vec::with_capacity(q.len());
        for k in 0..grid.nodes() {
            let m = &mut q[k * nn..(k + 1) * nn];
            linalg::symmetrize(m, n);
            let s = linalg::inv_sqrt_spd(m, n, k)?;
            let w = linalg::matmul(&linalg::matmul(&s, m, n, n, n), &linalg::transpose(&s, n, n), n, n, n);
            for i in 0..n {
                for j in 0..n {
                    let id = if i == j { 1.0 } else { 0.0 };
                    if libm::fabs(w[i * n + j] - id) > 1e-8 {
                        return Err(Error::NotPositiveDefinite {
                            node: k,
                            min_eigenvalue: linalg::eigen_range(m, n).0,
                        });
                    }
                }
            }
            q_inv.extend(linalg::inv_spd(m, n, k)?);
            q_inv_sqrt.extend(s);
        }
        Ok(Self {
            grid,
            n,
            regime,
            q,
            q_inv,
            q_inv_sqrt,
            source: source.into(),
        })
    }

    /// The same matrix at every node.
    pub fn constant(grid: TimeGrid, n: usize, regime: Regime, q: &[f64], source: &str) -> Result<Self> {
        let mut all = Vec::with_capacity(grid.nodes() * n * n);
        for _ in 0..grid.nodes() {
            all.extend_from_slice(q);
        }
        Self::from_matrices(grid, n, regime, all, source)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    /// Where the matrices came from, e.g. `"estimated"` or `"analytic"`.
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn q(&self, k: usize) -> &[f64] {
        &self.q[k * self.n * self.n..(k + 1) * self.n * self.n]
    }

    pub fn q_inv(&self, k: usize) -> &[f64] {
        &self.q_inv[k * self.n * self.n..(k + 1) * self.n * self.n]
    }

    pub fn q_inv_sqrt(&self, k: usize) -> &[f64] {
        &self.q_inv_sqrt[k * self.n * self.n..(k + 1) * self.n * self.n]
    }

    /// Smallest eigenvalue of `self.q(k) − lower.q(k)` over all nodes.
    pub fn min_gap_eigenvalue(&self, lower: &RateOperator) -> Result<f64> {
        if !self.grid.same_as(&lower.grid) || self.n != lower.n {
            return Err(Error::GridMismatch("rate operators on different grids".into()));
        }
        let mut min = f64::INFINITY;
        for k in 0..self.grid.nodes() {
            let diff: Vec<f64> = self.q(k).iter().zip(lower.q(k)).map(|(a, b)| a - b).collect();
            min = min.min(linalg::eigen_range(&diff, self.n).0);
        }
        Ok(min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QConfig {
    /// Matrices are estimated every `stride` nodes and interpolated linearly.
    pub stride: usize,
    /// ν-samples per node for the regime-2 correction.
    pub samples: usize,
    pub frozen: FrozenConfig,
    pub grad: GradConfig,
}

impl Default for QConfig {
    fn default() -> Self {
        Self {
            stride: 100,
            samples: 16,
            frozen: FrozenConfig {
                horizon: 50.0,
                dt: 0.01,
                burn_in: 5.0,
                thinning: 10,
                chains: 8,
                ..FrozenConfig::default()
            },
            grad: GradConfig {
                poisson: PoissonConfig {
                    replicas: 64,
                    dt: 0.01,
                    ..PoissonConfig::default()
                },
                ..GradConfig::default()
            },
        }
    }
}

/// Node indices `0, stride, 2·stride, …` always including the last node.
pub(crate) fn strided_nodes(nodes: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut v: Vec<usize> = (0..nodes).step_by(stride).collect();
    if *v.last().unwrap() != nodes - 1 {
        v.push(nodes - 1);
    }
    v
}

/// Fills every node by linear interpolation between strided samples.
pub(crate) fn interpolate_nodes(nodes: &[usize], samples: &[Vec<f64>], total: usize) -> Vec<f64> {
    let width = samples[0].len();
    let mut out = Vec::with_capacity(total * width);
    let mut seg = 0;
    for k in 0..total {
        while seg + 1 < nodes.len() - 1 && k > nodes[seg + 1] {
            seg += 1;
        }
        if nodes.len() == 1 {
            out.extend_from_slice(&samples[0]);
            continue;
        }
        let (a, b) = (nodes[seg], nodes[seg + 1]);
        let w = (k - a) as f64 / (b - a) as f64;
        for j in 0..width {
            out.push(samples[seg][j] + w * (samples[seg + 1][j] - samples[seg][j]));
        }
    }
    out
}

/// `Q1 = σσ*` or `Q2 = ∫ [σσ* + γ (∂yΦ_g)(∂yΦ_g)*] dν` along `xbar`,
/// with the measure argument `δ_{X̄_t}`.
pub fn assemble_q<E: Executor>(
    model: &CoefficientModel,
    xbar: &PathGrid,
    regime: Regime,
    cfg: &QConfig,
    exec: &E,
) -> Result<RateOperator> {
    let d = model.dims();
    let grid = *xbar.grid();
    let nodes = strided_nodes(grid.nodes(), cfg.stride);
    let gamma = regime.gamma();
    let mut samples = Vec::with_capacity(nodes.len());
    for &k in &nodes {
        let x = xbar.at(k);
        let mu = MeasureMoments::dirac(x);
        let s = model.eval_sigma(x, &mu)?;
        let mut q = linalg::outer_self(&s, d.n, d.d1);
        if gamma > 0.0 {
            let inv = estimate_invariant_measure(model, x, &mu, &cfg.frozen, exec)?;
            let mut picks = RngPlan::new(cfg.frozen.seed).stream(StreamLabel::new(domain::POISSON, 0, 0, 7));
            let mut corr = vec![0.0; d.n * d.n];
            for _ in 0..cfg.samples {
                let y = inv.cloud.point(picks.index(inv.cloud.len())).to_vec();
                let gp = grad_y_phi_g(model, x, &mu, &y, &cfg.grad, exec)?;
                let gg = linalg::outer_self(&gp.value, d.n, d.d2);
                for (c, v) in corr.iter_mut().zip(gg) {
                    *c += v / cfg.samples as f64;
                }
            }
            for (a, c) in q.iter_mut().zip(corr) {
                *a += gamma * c;
            }
        }
        samples.push(q);
    }
    let all = interpolate_nodes(&nodes, &samples, grid.nodes());
    RateOperator::from_matrices(grid, d.n, regime, all, "estimated")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::{CoefficientModel, ModelConstants};
    use crate::exec::Sequential;

    fn model(b: &str, sigma: &str, f: &str, g: &str) -> CoefficientModel {
        CoefficientModel::from_sources(&crate::dsl::model_fixtures::sources(b, sigma, f, g))
            .unwrap()
            .with_constants(ModelConstants {
                kappa: 2.0,
                c1: 1.0,
                c2: 1.0,
                lipschitz: 2.0,
            })
    }

    #[test]
    fn deterministic_contraction() {
        let m = model("-x0", "1", "-2*y0", "0");
        let g = TimeGrid::new(10.0, 0.01).unwrap();
        let p = simulate_frozen(&m, &[1.0], &MeasureMoments::dirac(&[1.0]), &[1.0], &g, &RngPlan::new(0)).unwrap();
        assert!(p.last()[0].abs() < 1e-8);
    }

    #[test]
    fn stiff_step_rejected() {
        let m = model("-x0", "1", "-2*y0", "1");
        let g = TimeGrid::new(1.0, 0.1).unwrap();
        assert!(matches!(
            simulate_frozen(&m, &[0.0], &MeasureMoments::dirac(&[0.0]), &[0.0], &g, &RngPlan::new(0)),
            Err(Error::StiffStep { .. })
        ));
    }

    #[test]
    fn strided_interpolation() {
        let nodes = strided_nodes(6, 2);
        assert_eq!(nodes, [0, 2, 4, 5]);
        let s = vec![vec![0.0], vec![2.0], vec![4.0], vec![10.0]];
        assert_eq!(interpolate_nodes(&nodes, &s, 6), [0.0, 1.0, 2.0, 3.0, 4.0, 10.0]);
        assert_eq!(interpolate_nodes(&[0], &[vec![3.0]], 1), [3.0]);
    }

    #[test]
    fn dirac_invariant_measure() {
        let m = model("-x0", "1", "-y0", "0");
        let cfg = FrozenConfig {
            horizon: 20.0,
            dt: 0.01,
            burn_in: 10.0,
            thinning: 10,
            chains: 2,
            y0: Some(vec![1.0]),
            min_ess: 0.0,
            ..FrozenConfig::default()
        };
        let inv = estimate_invariant_measure(&m, &[0.0], &MeasureMoments::dirac(&[0.0]), &cfg, &Sequential).unwrap();
        assert!(inv.variance[0] < 1e-6);
    }

    #[test]
    fn drift_without_fast_dependence_is_exact() {
        let m = model("-0.3*x0 + mu.mean0", "1", "-2*y0", "1");
        let mu = MeasureMoments::dirac(&[2.0]);
        let cfg = FrozenConfig {
            horizon: 2.0,
            dt: 0.01,
            burn_in: 1.0,
            thinning: 1,
            chains: 2,
            min_ess: 0.0,
            ..FrozenConfig::default()
        };
        let e = averaged_drift_at(&m, &[1.0], &mu, &cfg, &Sequential).unwrap();
        assert_eq!(e.value, m.eval_b(&[1.0], &[0.0], &mu).unwrap());
        let inv = estimate_invariant_measure(&m, &[1.0], &mu, &cfg, &Sequential).unwrap();
        assert_eq!(averaged_drift(&m, &[1.0], &mu, &inv).unwrap().value, e.value);
        assert!(averaged_drift(&m, &[1.5], &mu, &inv).is_err());
    }

    #[test]
    fn truncation_guard() {
        let m = model("y0", "1", "-2*y0", "1");
        let mu = MeasureMoments::dirac(&[0.0]);
        let cfg = GradConfig {
            poisson: PoissonConfig {
                horizon: Some(1.0),
                dt: 0.01,
                ..PoissonConfig::default()
            },
            ..GradConfig::default()
        };
        let need = required_horizon(2.0, &[1.0], 1e-3);
        assert!((need - libm::log(2e4)).abs() < 1e-12);
        match grad_y_phi_g(&m, &[0.0], &mu, &[1.0], &cfg, &Sequential) {
            Err(Error::Truncation { horizon, required }) => {
                assert_eq!(horizon, 1.0);
                assert!((required - need).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn regime_two_with_zero_gamma_is_q1() {
        let m = model("-x0 + y0", "1 + 0.5*tanh(x0)", "x0 - 2*y0", "1");
        let grid = TimeGrid::new(1.0, 0.1).unwrap();
        let xbar = PathGrid::from_fn(grid, 1, |t, o| o[0] = libm::exp(-t));
        let q1 = assemble_q(&m, &xbar, Regime::One, &QConfig::default(), &Sequential).unwrap();
        let q2 = assemble_q(&m, &xbar, Regime::Two { gamma: 0.0 }, &QConfig::default(), &Sequential).unwrap();
        for k in 0..grid.nodes() {
            assert_eq!(q1.q(k), q2.q(k));
        }
    }
}
