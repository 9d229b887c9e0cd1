//! Time grids, label-addressed Gaussian noise and Euler–Maruyama stepping.

mod noise;
mod path;

pub use noise::{
    brownian_increments, channel, domain, IncrementCursor, Increments, NoNoise, NoiseSource,
    NoiseStream, RngPlan, StreamLabel,
};
pub use path::PathGrid;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid `t_k = k·dt`, `k = 0..=K`, on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    dt: f64,
    steps: usize,
}

impl TimeGrid {
    /// Fails unless `horizon / dt` is an integer up to rounding.
    pub fn new(horizon: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite() && horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Invalid(format!("grid needs T > 0 and dt > 0, got T={horizon} dt={dt}")));
        }
        let k = libm::round(horizon / dt);
        if k < 1.0 || libm::fabs(k * dt - horizon) > 1e-9 * horizon {
            return Err(Error::Invalid(format!("T={horizon} is not a whole multiple of dt={dt}")));
        }
        Ok(Self {
            horizon,
            dt,
            steps: k as usize,
        })
    }

    /// Grid with `steps` intervals on `[0, horizon]`.
    pub fn with_steps(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 || !(horizon > 0.0) {
            return Err(Error::Invalid(format!("grid needs T > 0 and K ≥ 1, got T={horizon} K={steps}")));
        }
        Ok(Self {
            horizon,
            dt: horizon / steps as f64,
            steps,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of intervals `K`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    #[inline]
    pub fn t(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Number of steps spanning `span`, which must be a multiple of `dt`.
    pub fn steps_in(&self, span: f64) -> Result<usize> {
        let l = libm::round(span / self.dt);
        if l < 1.0 || libm::fabs(l * self.dt - span) > 1e-9 * span.max(self.dt) {
            return Err(Error::Invalid(format!("window {span} is not a multiple of dt={}", self.dt)));
        }
        Ok(l as usize)
    }

    pub fn same_as(&self, other: &TimeGrid) -> bool {
        self.steps == other.steps && libm::fabs(self.dt - other.dt) <= 1e-12 * self.dt
    }
}

/// One Euler–Maruyama step, returned as a new vector:
/// `state + drift·dt + diffusion·dW` with `diffusion` row-major
/// `state.len() × dw.len()`.
pub fn em_step(state: &[f64], drift: &[f64], diffusion: &[f64], dt: f64, dw: &[f64]) -> Vec<f64> {
    let mut out = state.to_vec();
    em_step_in_place(&mut out, drift, diffusion, dt, dw);
    out
}

/// In-place variant of [`em_step`]; returns `false` if any entry of the
/// new state is not finite.
#[inline]
pub fn em_step_in_place(state: &mut [f64], drift: &[f64], diffusion: &[f64], dt: f64, dw: &[f64]) -> bool {
    let q = dw.len();
    let mut finite = true;
    for (i, s) in state.iter_mut().enumerate() {
        let mut v = *s + drift[i] * dt;
        for (j, w) in dw.iter().enumerate() {
            v += diffusion[i * q + j] * w;
        }
        *s = v;
        finite &= v.is_finite();
    }
    finite
}

/// Iterates [`em_step`] over `grid` from `x0`.
///
/// `drift(t, x, out)` fills `dim` entries and `diffusion(t, x, out)` fills
/// a row-major `dim × noise_dim` matrix. On the first non-finite state the
/// path records the step and the remaining samples stay NaN.
pub fn simulate_path<D, S, N>(
    mut drift: D,
    mut diffusion: S,
    x0: &[f64],
    grid: &TimeGrid,
    noise_dim: usize,
    noise: &mut N,
) -> PathGrid
where
    D: FnMut(f64, &[f64], &mut [f64]),
    S: FnMut(f64, &[f64], &mut [f64]),
    N: NoiseSource + ?Sized,
{
    let dim = x0.len();
    let mut path = PathGrid::nan(*grid, dim);
    path.set(0, x0);
    let mut x = x0.to_vec();
    let mut b = vec![0.0; dim];
    let mut s = vec![0.0; dim * noise_dim];
    let mut dw = vec![0.0; noise_dim];
    for k in 0..grid.steps() {
        let t = grid.t(k);
        drift(t, &x, &mut b);
        diffusion(t, &x, &mut s);
        noise.next_increment(grid.dt(), &mut dw);
        if !em_step_in_place(&mut x, &b, &s, grid.dt(), &dw) {
            path.mark_diverged(k + 1);
            return path;
        }
        path.set(k + 1, &x);
    }
    path
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_requires_exact_division() {
        assert_eq!(TimeGrid::new(1.0, 1e-3).unwrap().steps(), 1000);
        assert!(TimeGrid::new(1.0, 0.3).is_err());
        assert!(TimeGrid::new(1.0, 0.0).is_err());
        assert!(TimeGrid::new(0.0, 0.1).is_err());
        let g = TimeGrid::new(2.0, 0.25).unwrap();
        assert_eq!(g.t(3), 0.75);
        assert_eq!(g.steps_in(0.5).unwrap(), 2);
        assert!(g.steps_in(0.3).is_err());
    }

    #[test]
    fn em_step_examples() {
        assert_eq!(em_step(&[1.5], &[0.0], &[0.0], 0.1, &[0.7]), [1.5]);
        assert!((em_step(&[1.0], &[-1.0], &[0.0], 0.1, &[0.0])[0] - 0.9).abs() < 1e-15);
        assert_eq!(em_step(&[0.0], &[0.0], &[1.0], 0.1, &[0.37]), [0.37]);
        let mut s = [1.0];
        assert!(!em_step_in_place(&mut s, &[f64::INFINITY], &[0.0], 0.1, &[0.0]));
    }

    #[test]
    fn constant_path_without_coefficients() {
        let g = TimeGrid::new(1.0, 0.1).unwrap();
        let p = simulate_path(|_, _, o| o.fill(0.0), |_, _, o| o.fill(0.0), &[2.0, -1.0], &g, 1, &mut NoNoise);
        for k in 0..g.nodes() {
            assert_eq!(p.at(k), [2.0, -1.0]);
        }
        assert!(p.diverged_at().is_none());
    }

    #[test]
    fn linear_decay_matches_exponential() {
        let g = TimeGrid::new(1.0, 1e-3).unwrap();
        let p = simulate_path(|_, x, o| o[0] = -x[0], |_, _, o| o[0] = 0.0, &[1.0], &g, 1, &mut NoNoise);
        assert!((p.last()[0] - libm::exp(-1.0)).abs() < 1e-3);
    }

    #[test]
    fn divergence_keeps_partial_path() {
        let g = TimeGrid::new(1.0, 0.1).unwrap();
        let p = simulate_path(|_, x, o| o[0] = 1e200 * x[0], |_, _, o| o[0] = 0.0, &[1.0], &g, 1, &mut NoNoise);
        let k = p.diverged_at().unwrap();
        assert!(k >= 1);
        assert_eq!(p.at(0), [1.0]);
        assert!(p.at(k)[0].is_nan());
        assert!(p.check_finite().is_err());
    }

    #[test]
    fn replay_is_identical() {
        let plan = RngPlan::new(11);
        let g = TimeGrid::new(1.0, 0.01).unwrap();
        let label = StreamLabel::new(domain::SCRATCH, 0, 0, 0);
        let run = || {
            simulate_path(|_, x, o| o[0] = -x[0], |_, _, o| o[0] = 1.0, &[0.0], &g, 1, &mut plan.stream(label))
        };
        assert_eq!(run(), run());
    }
}
