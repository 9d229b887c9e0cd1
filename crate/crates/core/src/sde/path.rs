use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::TimeGrid;
use crate::error::{Error, Result};

/// `K + 1` samples of a `dim`-vector on a [`TimeGrid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathGrid {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
    diverged_at: Option<usize>,
}

impl PathGrid {
    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Self {
            grid,
            dim,
            values: vec![0.0; grid.nodes() * dim],
            diverged_at: None,
        }
    }

    pub(crate) fn nan(grid: TimeGrid, dim: usize) -> Self {
        Self {
            grid,
            dim,
            values: vec![f64::NAN; grid.nodes() * dim],
            diverged_at: None,
        }
    }

    /// Samples `f(t_k)` at every node.
    pub fn from_fn(grid: TimeGrid, dim: usize, mut f: impl FnMut(f64, &mut [f64])) -> Self {
        let mut p = Self::zeros(grid, dim);
        for k in 0..grid.nodes() {
            f(grid.t(k), &mut p.values[k * dim..(k + 1) * dim]);
        }
        p
    }

    /// Wraps `values` (node-major, `dim` per node).
    pub fn from_values(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() != grid.nodes() * dim {
            return Err(Error::Dimension(alloc::format!(
                "path needs {} values, got {}",
                grid.nodes() * dim,
                values.len()
            )));
        }
        Ok(Self {
            grid,
            dim,
            values,
            diverged_at: None,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn at(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    #[inline]
    pub fn at_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn set(&mut self, k: usize, v: &[f64]) {
        self.at_mut(k).copy_from_slice(v);
    }

    pub fn last(&self) -> &[f64] {
        self.at(self.grid.steps())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Coordinate `j` at every node.
    pub fn component(&self, j: usize) -> Vec<f64> {
        self.values.iter().skip(j).step_by(self.dim).copied().collect()
    }

    /// First node whose sample is non-finite, if the integrator gave up.
    pub fn diverged_at(&self) -> Option<usize> {
        self.diverged_at
    }

    pub(crate) fn mark_diverged(&mut self, k: usize) {
        self.diverged_at = Some(k);
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(step) = self.diverged_at {
            return Err(Error::Diverged { step });
        }
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::Diverged { step: i / self.dim }),
            None => Ok(()),
        }
    }

    /// Elementwise map over nodes into a path of dimension `dim`.
    pub fn map(&self, dim: usize, mut f: impl FnMut(usize, &[f64], &mut [f64])) -> PathGrid {
        let mut out = PathGrid::zeros(self.grid, dim);
        for k in 0..self.grid.nodes() {
            let (src, dst) = (&self.values[k * self.dim..(k + 1) * self.dim], &mut out.values[k * dim..(k + 1) * dim]);
            f(k, src, dst);
        }
        out
    }

    /// `max_k |self_k − other_k|` over all coordinates.
    pub fn sup_distance(&self, other: &PathGrid) -> Result<f64> {
        if !self.grid.same_as(&other.grid) || self.dim != other.dim {
            return Err(Error::GridMismatch("paths live on different grids".into()));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max))
    }

    /// Linear interpolation at time `t`, clamped to `[0, T]`.
    pub fn interpolate(&self, t: f64, out: &mut [f64]) {
        let s = (t / self.grid.dt()).clamp(0.0, self.grid.steps() as f64);
        let k = (libm::floor(s) as usize).min(self.grid.steps().saturating_sub(1));
        let w = s - k as f64;
        for j in 0..self.dim {
            let a = self.values[k * self.dim + j];
            let b = self.values[(k + 1).min(self.grid.steps()) * self.dim + j];
            out[j] = a + w * (b - a);
        }
    }
}
