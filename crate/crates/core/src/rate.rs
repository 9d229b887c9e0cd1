//! Skeleton equation, moderate-deviation rate functionals, optimal
//! feedback controls and the endpoint infimum.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dsl::CoefficientModel;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::frozen::{averaged_drift_at, interpolate_nodes, strided_nodes, FrozenConfig, RateOperator, Regime};
use crate::linalg;
use crate::measure::MeasureMoments;
use crate::sde::{PathGrid, TimeGrid};

/// A path with `φ_0 = 0` and its forward-difference derivative; the last
/// node repeats the final backward difference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePath {
    pub phi: PathGrid,
    pub dphi: PathGrid,
}

impl RatePath {
    pub fn new(phi: PathGrid) -> Result<Self> {
        if phi.at(0).iter().any(|v| libm::fabs(*v) > 1e-12) {
            return Err(Error::Invalid("rate paths must start at 0".into()));
        }
        phi.check_finite()?;
        let g = *phi.grid();
        let dt = g.dt();
        let k_last = g.steps();
        let dphi = phi.map(phi.dim(), |k, _, out| {
            let (a, b) = if k == k_last { (k - 1, k) } else { (k, k + 1) };
            for (j, o) in out.iter_mut().enumerate() {
                *o = (phi.at(b)[j] - phi.at(a)[j]) / dt;
            }
        });
        Ok(Self { phi, dphi })
    }

    pub fn grid(&self) -> &TimeGrid {
        self.phi.grid()
    }
}

/// `∂x b̄(X̄_t, δ_{X̄_t})` per node, row-major `n × n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearizedDrift {
    pub grid: TimeGrid,
    pub n: usize,
    pub a: Vec<f64>,
    /// Central-difference step used at each node (0 for supplied values).
    pub step: Vec<f64>,
}

impl LinearizedDrift {
    pub fn constant(grid: TimeGrid, n: usize, a: &[f64]) -> Self {
        let mut all = Vec::with_capacity(grid.nodes() * n * n);
        for _ in 0..grid.nodes() {
            all.extend_from_slice(a);
        }
        Self {
            grid,
            n,
            a: all,
            step: vec![0.0; grid.nodes()],
        }
    }

    #[inline]
    pub fn at(&self, k: usize) -> &[f64] {
        &self.a[k * self.n * self.n..(k + 1) * self.n * self.n]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearizeConfig {
    pub stride: usize,
    /// Step is `rel_step·(1 + |x|)`.
    pub rel_step: f64,
    pub frozen: FrozenConfig,
}

impl Default for LinearizeConfig {
    fn default() -> Self {
        Self {
            stride: 100,
            rel_step: 1e-3,
            frozen: crate::multiscale::AveragedOdeConfig::default().frozen,
        }
    }
}

/// Central differences of `b̄` in `x` at fixed measure argument, with
/// the frozen chains of both evaluations sharing their noise.
pub fn linearize_drift<E: Executor>(
    model: &CoefficientModel,
    xbar: &PathGrid,
    cfg: &LinearizeConfig,
    exec: &E,
) -> Result<LinearizedDrift> {
    let n = model.dims().n;
    let grid = *xbar.grid();
    let nodes = strided_nodes(grid.nodes(), cfg.stride);
    let mut mats = Vec::with_capacity(nodes.len());
    let mut steps = Vec::with_capacity(nodes.len());
    for &k in &nodes {
        let x = xbar.at(k);
        let mu = MeasureMoments::dirac(x);
        let norm = libm::sqrt(x.iter().map(|v| v * v).sum());
        let h = cfg.rel_step * (1.0 + norm);
        let mut a = vec![0.0; n * n];
        for j in 0..n {
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[j] += h;
            dn[j] -= h;
            let bu = averaged_drift_at(model, &up, &mu, &cfg.frozen, exec)?;
            let bd = averaged_drift_at(model, &dn, &mu, &cfg.frozen, exec)?;
            for i in 0..n {
                a[i * n + j] = (bu.value[i] - bd.value[i]) / (2.0 * h);
            }
        }
        mats.push(a);
        steps.push(vec![h]);
    }
    Ok(LinearizedDrift {
        grid,
        n,
        a: interpolate_nodes(&nodes, &mats, grid.nodes()),
        step: interpolate_nodes(&nodes, &steps, grid.nodes()),
    })
}

/// `σ(X̄_t, δ_{X̄_t})` per node, row-major `n × d1`.
pub fn sigma_along(model: &CoefficientModel, xbar: &PathGrid) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(xbar.grid().nodes() * model.dims().n * model.dims().d1);
    for k in 0..xbar.grid().nodes() {
        let x = xbar.at(k);
        out.extend(model.eval_sigma(x, &MeasureMoments::dirac(x))?);
    }
    Ok(out)
}

fn check_grid(a: &TimeGrid, b: &TimeGrid, what: &str) -> Result<()> {
    if !a.same_as(b) {
        return Err(Error::GridMismatch(format!("{what} on a different grid")));
    }
    Ok(())
}

/// Heun integration of `dZ = ∂x b̄·Z dt + σ h¹ dt` from `Z_0 = 0`.
pub fn solve_skeleton(lin: &LinearizedDrift, sigma: &[f64], h1: &PathGrid) -> Result<RatePath> {
    let g = lin.grid;
    check_grid(&g, h1.grid(), "control")?;
    let (n, d1) = (lin.n, h1.dim());
    if sigma.len() != g.nodes() * n * d1 {
        return Err(Error::Dimension("σ along the path has the wrong size".into()));
    }
    let rhs = |k: usize, z: &[f64]| -> Vec<f64> {
        let az = linalg::mat_vec(lin.at(k), z, n, n);
        let sh = linalg::mat_vec(&sigma[k * n * d1..(k + 1) * n * d1], h1.at(k), n, d1);
        az.iter().zip(sh).map(|(a, b)| a + b).collect()
    };
    let dt = g.dt();
    let mut z = PathGrid::zeros(g, n);
    for k in 0..g.steps() {
        let zk = z.at(k).to_vec();
        let f0 = rhs(k, &zk);
        let pred: Vec<f64> = zk.iter().zip(&f0).map(|(a, b)| a + dt * b).collect();
        let f1 = rhs(k + 1, &pred);
        let next: Vec<f64> = (0..n).map(|i| zk[i] + 0.5 * dt * (f0[i] + f1[i])).collect();
        z.set(k + 1, &next);
    }
    RatePath::new(z)
}

/// `r_t = φ̇_t − ∂x b̄_t φ_t`
fn residual(phi: &RatePath, lin: &LinearizedDrift, k: usize) -> Vec<f64> {
    let n = lin.n;
    let a = linalg::mat_vec(lin.at(k), phi.phi.at(k), n, n);
    phi.dphi.at(k).iter().zip(a).map(|(d, v)| d - v).collect()
}

/// `½∫₀ᵀ |Q_t^{−1/2}(φ̇_t − ∂x b̄_t φ_t)|² dt`, trapezoidal.
///
/// Grid paths are always absolutely continuous, so the functional is
/// finite for every input.
pub fn rate_functional(phi: &RatePath, q: &RateOperator, lin: &LinearizedDrift) -> Result<f64> {
    let g = *phi.grid();
    check_grid(&g, q.grid(), "rate operator")?;
    check_grid(&g, &lin.grid, "linearized drift")?;
    let n = lin.n;
    let mut total = 0.0;
    for k in 0..g.nodes() {
        let r = residual(phi, lin, k);
        let w = linalg::mat_vec(q.q_inv_sqrt(k), &r, n, n);
        let s: f64 = w.iter().map(|v| v * v).sum();
        let weight = if k == 0 || k == g.steps() { 0.5 } else { 1.0 };
        total += weight * 0.5 * s * g.dt();
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub regime: u8,
    pub gamma: f64,
    pub value: f64,
    pub quadrature_dt: f64,
    #[serde(rename = "Q_source")]
    pub q_source: String,
}

impl RateReport {
    pub fn new(q: &RateOperator, value: f64) -> Self {
        Self {
            regime: q.regime().index(),
            gamma: q.regime().gamma(),
            value,
            quadrature_dt: q.grid().dt(),
            q_source: q.source().into(),
        }
    }
}

/// Fast-state points with per-node weights standing for `ν̂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastGrid {
    pub m: usize,
    /// `count × m`
    pub points: Vec<f64>,
    /// `nodes × count`, each row summing to 1.
    pub weights: Vec<f64>,
}

impl FastGrid {
    pub fn count(&self) -> usize {
        self.points.len() / self.m
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.m..(i + 1) * self.m]
    }

    pub fn weight(&self, k: usize, i: usize) -> f64 {
        self.weights[k * self.count() + i]
    }
}

/// `h¹_t(y)`, `h²_t(y)` on a [`FastGrid`]; `h¹` is stored `nodes × count × d1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackControls {
    pub grid: TimeGrid,
    pub ys: FastGrid,
    pub d1: usize,
    pub d2: usize,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
}

impl FeedbackControls {
    pub fn h1(&self, k: usize, i: usize) -> &[f64] {
        let c = self.ys.count();
        &self.h1[(k * c + i) * self.d1..(k * c + i + 1) * self.d1]
    }

    pub fn h2(&self, k: usize, i: usize) -> &[f64] {
        let c = self.ys.count();
        &self.h2[(k * c + i) * self.d2..(k * c + i + 1) * self.d2]
    }

    /// `½∫∫(|h¹|² + |h²|²) dν̂ dt`, trapezoidal in time.
    pub fn energy(&self) -> f64 {
        let mut total = 0.0;
        for k in 0..self.grid.nodes() {
            let w = if k == 0 || k == self.grid.steps() { 0.5 } else { 1.0 };
            let mut s = 0.0;
            for i in 0..self.ys.count() {
                let e: f64 = self.h1(k, i).iter().chain(self.h2(k, i)).map(|v| v * v).sum();
                s += self.ys.weight(k, i) * e;
            }
            total += w * 0.5 * s * self.grid.dt();
        }
        total
    }
}

/// `∂yΦ_g` as a function of node and fast state, written `n × d2`.
pub type DphigField<'a> = &'a dyn Fn(usize, &[f64], &mut [f64]);

/// Feedback controls attaining the rate:
/// `h¹ = σ* Q⁻¹ r`, `h² = √γ (∂yΦ_g)* Q⁻¹ r` with `r = φ̇ − ∂x b̄ φ`.
/// In regime 1 `h²` vanishes and `h¹` is the minimum-norm control.
pub fn optimal_controls(
    phi: &RatePath,
    q: &RateOperator,
    lin: &LinearizedDrift,
    sigma: &[f64],
    dphig: DphigField<'_>,
    d2: usize,
    ys: &FastGrid,
) -> Result<FeedbackControls> {
    let g = *phi.grid();
    check_grid(&g, q.grid(), "rate operator")?;
    check_grid(&g, &lin.grid, "linearized drift")?;
    let n = lin.n;
    let d1 = sigma.len() / (g.nodes() * n);
    let gamma = q.regime().gamma();
    let regime_two = matches!(q.regime(), Regime::Two { .. });
    let mut h1 = Vec::with_capacity(g.nodes() * ys.count() * d1);
    let mut h2 = Vec::with_capacity(g.nodes() * ys.count() * d2);
    let mut gm = vec![0.0; n * d2];
    for k in 0..g.nodes() {
        let r = residual(phi, lin, k);
        let v = linalg::mat_vec(q.q_inv(k), &r, n, n);
        let sk = &sigma[k * n * d1..(k + 1) * n * d1];
        let a = linalg::mat_vec(&linalg::transpose(sk, n, d1), &v, d1, n);
        for i in 0..ys.count() {
            h1.extend_from_slice(&a);
            if regime_two && gamma > 0.0 {
                dphig(k, ys.point(i), &mut gm);
                let b = linalg::mat_vec(&linalg::transpose(&gm, n, d2), &v, d2, n);
                h2.extend(b.into_iter().map(|u| libm::sqrt(gamma) * u));
            } else {
                h2.extend(core::iter::repeat_n(0.0, d2));
            }
        }
    }
    Ok(FeedbackControls {
        grid: g,
        ys: ys.clone(),
        d1,
        d2,
        h1,
        h2,
    })
}

/// `φ_{k+1} = φ_k + dt(∂x b̄ φ_k + σ h¹ + √γ ∫ ∂yΦ_g h² dν̂)`, the
/// averaged controlled dynamics under a feedback control.
pub fn integrate_feedback(
    controls: &FeedbackControls,
    lin: &LinearizedDrift,
    sigma: &[f64],
    dphig: DphigField<'_>,
    gamma: f64,
) -> Result<PathGrid> {
    let g = controls.grid;
    check_grid(&g, &lin.grid, "linearized drift")?;
    let (n, d1, d2) = (lin.n, controls.d1, controls.d2);
    let mut phi = PathGrid::zeros(g, n);
    let mut gm = vec![0.0; n * d2];
    for k in 0..g.steps() {
        let cur = phi.at(k).to_vec();
        let mut rhs = linalg::mat_vec(lin.at(k), &cur, n, n);
        let sk = &sigma[k * n * d1..(k + 1) * n * d1];
        for i in 0..controls.ys.count() {
            let w = controls.ys.weight(k, i);
            let sh = linalg::mat_vec(sk, controls.h1(k, i), n, d1);
            dphig(k, controls.ys.point(i), &mut gm);
            let ph = linalg::mat_vec(&gm, controls.h2(k, i), n, d2);
            for j in 0..n {
                rhs[j] += w * (sh[j] + libm::sqrt(gamma) * ph[j]);
            }
        }
        let next: Vec<f64> = (0..n).map(|j| cur[j] + g.dt() * rhs[j]).collect();
        phi.set(k + 1, &next);
    }
    Ok(phi)
}

/// Closed-form solution of the discretized endpoint problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointInfimum {
    pub value: f64,
    /// Controllability Gramian `Σ dt M_k Q_k M_kᵀ`, row-major.
    pub gramian: Vec<f64>,
    /// Optimal `u_k`, `K × n`.
    pub controls: Vec<f64>,
    pub path: PathGrid,
    /// Largest violation of the adjoint optimality conditions.
    pub adjoint_residual: f64,
}

fn gramian(q: &RateOperator, lin: &LinearizedDrift) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let g = lin.grid;
    check_grid(&g, q.grid(), "rate operator")?;
    let n = lin.n;
    let steps = g.steps();
    let dt = g.dt();
    let eye: Vec<f64> = (0..n * n).map(|i| if i % (n + 1) == 0 { 1.0 } else { 0.0 }).collect();
    // M_{K−1} = I, M_k = M_{k+1}(I + dt A_{k+1})
    let mut ms = vec![Vec::new(); steps];
    ms[steps - 1] = eye.clone();
    for k in (0..steps - 1).rev() {
        let step: Vec<f64> = eye.iter().zip(lin.at(k + 1)).map(|(i, a)| i + dt * a).collect();
        ms[k] = linalg::matmul(&ms[k + 1], &step, n, n, n);
    }
    let mut gram = vec![0.0; n * n];
    for k in 0..steps {
        let mq = linalg::matmul(&ms[k], q.q(k), n, n, n);
        let mqm = linalg::matmul(&mq, &linalg::transpose(&ms[k], n, n), n, n, n);
        for (a, b) in gram.iter_mut().zip(mqm) {
            *a += dt * b;
        }
    }
    linalg::symmetrize(&mut gram, n);
    let (lo, hi) = linalg::eigen_range(&gram, n);
    if !(lo > 1e-14 * hi.max(1e-300)) {
        return Err(Error::SingularGramian { min_eigenvalue: lo });
    }
    Ok((gram, ms))
}

/// Minimizes `½ Σ dt |Q_k^{−1/2} u_k|²` over
/// `φ_{k+1} = φ_k + dt(∂x b̄_k φ_k + u_k)`, `φ_0 = 0`, `φ_K = z`.
pub fn endpoint_rate_infimum(z: &[f64], q: &RateOperator, lin: &LinearizedDrift) -> Result<EndpointInfimum> {
    let n = lin.n;
    if z.len() != n {
        return Err(Error::Dimension(format!("z has {} entries, n = {n}", z.len())));
    }
    let (gram, ms) = gramian(q, lin)?;
    let g = lin.grid;
    let dt = g.dt();
    let nu = linalg::solve_spd(&gram, n, z).ok_or(Error::SingularGramian {
        min_eigenvalue: linalg::eigen_range(&gram, n).0,
    })?;
    let value = 0.5 * z.iter().zip(&nu).map(|(a, b)| a * b).sum::<f64>();

    let mut controls = Vec::with_capacity(g.steps() * n);
    for (k, m) in ms.iter().enumerate() {
        let mt_nu = linalg::mat_vec(&linalg::transpose(m, n, n), &nu, n, n);
        controls.extend(linalg::mat_vec(q.q(k), &mt_nu, n, n));
    }
    let mut path = PathGrid::zeros(g, n);
    for k in 0..g.steps() {
        let cur = path.at(k).to_vec();
        let a = linalg::mat_vec(lin.at(k), &cur, n, n);
        let next: Vec<f64> = (0..n).map(|i| cur[i] + dt * (a[i] + controls[k * n + i])).collect();
        path.set(k + 1, &next);
    }

    // costate λ_K = ν, λ_k = (I + dt A_k)ᵀ λ_{k+1}; optimality u_k = Q_k λ_{k+1}
    let mut residual = path
        .last()
        .iter()
        .zip(z)
        .map(|(a, b)| libm::fabs(a - b))
        .fold(0.0, f64::max);
    let mut lam = nu.clone();
    for k in (0..g.steps()).rev() {
        let want = linalg::mat_vec(q.q(k), &lam, n, n);
        for i in 0..n {
            residual = residual.max(libm::fabs(want[i] - controls[k * n + i]));
        }
        let at = linalg::transpose(lin.at(k), n, n);
        let back = linalg::mat_vec(&at, &lam, n, n);
        lam = (0..n).map(|i| lam[i] + dt * back[i]).collect();
    }
    Ok(EndpointInfimum {
        value,
        gramian: gram,
        controls,
        path,
        adjoint_residual: residual,
    })
}

/// Infimum over `{|φ_T| ≥ r}`: `r² / (2 λ_max(G))`.
pub fn set_rate_infimum(r: f64, q: &RateOperator, lin: &LinearizedDrift) -> Result<f64> {
    let (gram, _) = gramian(q, lin)?;
    let (_, hi) = linalg::eigen_range(&gram, lin.n);
    Ok(r * r / (2.0 * hi))
}
