//! Empirical measures: particle clouds, their moments, and exact
//! one-dimensional Wasserstein distances.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coordinatewise mean and raw second moment of a measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureMoments {
    pub mean: Vec<f64>,
    pub second: Vec<f64>,
}

impl MeasureMoments {
    pub fn empty() -> Self {
        Self {
            mean: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Moments of the Dirac mass at `x`.
    pub fn dirac(x: &[f64]) -> Self {
        Self {
            mean: x.to_vec(),
            second: x.iter().map(|v| v * v).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.second)
            .map(|(m, s)| (s - m * m).max(0.0))
            .collect()
    }

    /// Recomputes the moments of `points` (flat, `dim` per point) in place.
    pub fn assign_from(&mut self, dim: usize, points: &[f64]) {
        self.mean.clear();
        self.mean.resize(dim, 0.0);
        self.second.clear();
        self.second.resize(dim, 0.0);
        for p in points.chunks_exact(dim) {
            for (j, v) in p.iter().enumerate() {
                self.mean[j] += v;
                self.second[j] += v * v;
            }
        }
        let count = (points.len() / dim) as f64;
        for j in 0..dim {
            self.mean[j] /= count;
            self.second[j] /= count;
        }
    }
}

/// Uniformly weighted point set in `R^dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleCloud {
    dim: usize,
    points: Vec<f64>,
}

impl ParticleCloud {
    /// `points` is flat, `dim` coordinates per point.
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(Error::Invalid(format!(
                "cloud needs a positive number of {dim}-dimensional points, got {} values",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "cloud coordinate {} of point {} is not finite",
                i % dim,
                i / dim
            )));
        }
        Ok(Self { dim, points })
    }

    pub fn from_scalars(values: Vec<f64>) -> Result<Self> {
        Self::new(1, values)
    }

    pub fn dirac(point: &[f64]) -> Result<Self> {
        Self::new(point.len(), point.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.points
    }

    pub fn coordinate(&self, j: usize) -> Vec<f64> {
        self.points().map(|p| p[j]).collect()
    }

    pub fn moments(&self) -> MeasureMoments {
        let mut m = MeasureMoments::empty();
        m.assign_from(self.dim, &self.points);
        m
    }

    /// The cloud translated by `shift` in every coordinate.
    pub fn shifted(&self, shift: f64) -> Self {
        Self {
            dim: self.dim,
            points: self.points.iter().map(|v| v + shift).collect(),
        }
    }
}

/// Exact `W₂` between equal-size one-dimensional clouds, via the
/// monotone pairing of order statistics.
pub fn wasserstein2_1d(a: &ParticleCloud, b: &ParticleCloud) -> Result<f64> {
    if a.dim() != 1 || b.dim() != 1 {
        return Err(Error::Dimension(format!(
            "wasserstein2_1d needs 1-d clouds, got {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "wasserstein2_1d needs equal sizes, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut sa = a.as_flat().to_vec();
    let mut sb = b.as_flat().to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let sq: f64 = sa.iter().zip(&sb).map(|(u, v)| (u - v) * (u - v)).sum();
    Ok(libm::sqrt(sq / sa.len() as f64))
}

/// Binned one-dimensional measure on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram1d {
    pub left: f64,
    pub width: f64,
    pub mass: Vec<f64>,
}

impl Histogram1d {
    pub fn new(left: f64, width: f64, mass: Vec<f64>) -> Result<Self> {
        if !(width > 0.0) || mass.is_empty() {
            return Err(Error::Invalid("histogram needs bins of positive width".into()));
        }
        if mass.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::Invalid("histogram masses must be finite and nonnegative".into()));
        }
        Ok(Self { left, width, mass })
    }

    pub fn zeros(left: f64, width: f64, bins: usize) -> Self {
        Self {
            left,
            width,
            mass: vec![0.0; bins],
        }
    }

    pub fn bins(&self) -> usize {
        self.mass.len()
    }

    pub fn bin_left(&self, i: usize) -> f64 {
        self.left + i as f64 * self.width
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn normalized(&self) -> Self {
        let t = self.total();
        Self {
            left: self.left,
            width: self.width,
            mass: self.mass.iter().map(|m| m / t).collect(),
        }
    }
}

/// `W₁` between two binned measures on the same grid: the L¹ distance of
/// the CDFs times the bin width.
pub fn wasserstein1_hist(a: &Histogram1d, b: &Histogram1d) -> Result<f64> {
    let tol = 1e-12 * (1.0 + a.left.abs());
    if a.bins() != b.bins() || (a.left - b.left).abs() > tol || (a.width - b.width).abs() > 1e-12 * a.width
    {
        return Err(Error::GridMismatch(format!(
            "histograms ({}, {}, {}) and ({}, {}, {})",
            a.left,
            a.width,
            a.bins(),
            b.left,
            b.width,
            b.bins()
        )));
    }
    let (ta, tb) = (a.total(), b.total());
    if (ta - tb).abs() > 1e-9 {
        return Err(Error::MassMismatch { left: ta, right: tb });
    }
    let mut cdf_gap = 0.0;
    let mut acc = 0.0;
    for (p, q) in a.mass.iter().zip(&b.mass) {
        cdf_gap += p - q;
        acc += cdf_gap.abs();
    }
    Ok(acc * a.width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud(v: &[f64]) -> ParticleCloud {
        ParticleCloud::from_scalars(v.to_vec()).unwrap()
    }

    #[test]
    fn moments_examples() {
        let m = cloud(&[0.0, 2.0]).moments();
        assert_eq!((m.mean[0], m.second[0]), (1.0, 2.0));
        let m = cloud(&[3.5]).moments();
        assert_eq!((m.mean[0], m.second[0]), (3.5, 12.25));
        let m = cloud(&[-1.0, 1.0]).moments();
        assert_eq!((m.mean[0], m.second[0]), (0.0, 1.0));
        assert_eq!(MeasureMoments::dirac(&[3.5]), cloud(&[3.5]).moments());
    }

    #[test]
    fn cloud_invariants() {
        assert!(ParticleCloud::from_scalars(vec![]).is_err());
        assert!(ParticleCloud::from_scalars(vec![1.0, f64::NAN]).is_err());
        assert!(ParticleCloud::new(2, vec![1.0, 2.0, 3.0]).is_err());
        let c = ParticleCloud::new(2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.point(1), &[3.0, 4.0]);
        assert_eq!(c.moments().mean, vec![2.0, 3.0]);
    }

    #[test]
    fn w2_examples() {
        let a = cloud(&[0.3, -1.0, 2.0]);
        assert_eq!(wasserstein2_1d(&a, &a).unwrap(), 0.0);
        assert_eq!(
            wasserstein2_1d(&cloud(&[0.0; 4]), &cloud(&[1.0; 4])).unwrap(),
            1.0
        );
        // the two couplings of {0,2} and {1,3} cost 1 (sorted) and √5 (crossed)
        let best = [(0.0, 1.0, 2.0, 3.0), (0.0, 3.0, 2.0, 1.0)]
            .iter()
            .map(|(a1, b1, a2, b2): &(f64, f64, f64, f64)| {
                libm::sqrt(((a1 - b1).powi(2) + (a2 - b2).powi(2)) / 2.0)
            })
            .fold(f64::INFINITY, f64::min);
        assert_eq!(best, 1.0);
        assert_eq!(
            wasserstein2_1d(&cloud(&[0.0, 2.0]), &cloud(&[1.0, 3.0])).unwrap(),
            best
        );
        assert!(wasserstein2_1d(&cloud(&[0.0]), &cloud(&[0.0, 1.0])).is_err());
        let two = ParticleCloud::new(2, vec![0.0, 1.0]).unwrap();
        assert!(wasserstein2_1d(&two, &two).is_err());
    }

    #[test]
    fn w1_hist_examples() {
        let h = Histogram1d::new(0.0, 0.5, vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(wasserstein1_hist(&h, &h).unwrap(), 0.0);
        let mut a = Histogram1d::zeros(-1.0, 0.25, 8);
        let mut b = a.clone();
        a.mass[0] = 1.0;
        b.mass[5] = 1.0;
        assert!((wasserstein1_hist(&a, &b).unwrap() - 5.0 * 0.25).abs() < 1e-15);
        // uniform on two unit bins vs point mass in the first: ∫|F−G| = 0.5
        let u = Histogram1d::new(0.0, 1.0, vec![0.5, 0.5]).unwrap();
        let p = Histogram1d::new(0.0, 1.0, vec![1.0, 0.0]).unwrap();
        assert_eq!(wasserstein1_hist(&u, &p).unwrap(), 0.5);
    }

    #[test]
    fn w1_hist_errors() {
        let a = Histogram1d::new(0.0, 1.0, vec![0.5, 0.5]).unwrap();
        let b = Histogram1d::new(0.5, 1.0, vec![0.5, 0.5]).unwrap();
        assert!(matches!(wasserstein1_hist(&a, &b), Err(Error::GridMismatch(_))));
        let c = Histogram1d::new(0.0, 1.0, vec![0.5, 0.6]).unwrap();
        assert!(matches!(wasserstein1_hist(&a, &c), Err(Error::MassMismatch { .. })));
        let d = Histogram1d::new(0.0, 1.0, vec![0.5, 0.5, 0.0]).unwrap();
        assert!(wasserstein1_hist(&a, &d).is_err());
    }

    fn sample(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, len)
    }

    proptest! {
        #[test]
        fn w2_is_a_metric(a in sample(7), b in sample(7), c in sample(7)) {
            let (a, b, c) = (cloud(&a), cloud(&b), cloud(&c));
            let ab = wasserstein2_1d(&a, &b).unwrap();
            let ba = wasserstein2_1d(&b, &a).unwrap();
            let bc = wasserstein2_1d(&b, &c).unwrap();
            let ac = wasserstein2_1d(&a, &c).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn w2_zero_iff_sorted_samples_coincide(a in sample(6), perm in Just(()).prop_perturb(|_, mut rng| {
            let mut idx: Vec<usize> = (0..6).collect();
            for i in (1..6).rev() {
                idx.swap(i, (rng.next_u32() as usize) % (i + 1));
            }
            idx
        })) {
            let shuffled: Vec<f64> = perm.iter().map(|&i| a[i]).collect();
            prop_assert_eq!(wasserstein2_1d(&cloud(&a), &cloud(&shuffled)).unwrap(), 0.0);
            let (m1, m2) = (cloud(&a).moments(), cloud(&shuffled).moments());
            prop_assert!((m1.mean[0] - m2.mean[0]).abs() < 1e-12);
            prop_assert!((m1.second[0] - m2.second[0]).abs() < 1e-11);
            let mut bumped = a.clone();
            bumped[0] += 0.5;
            prop_assert!(wasserstein2_1d(&cloud(&a), &cloud(&bumped)).unwrap() > 0.0);
        }

        #[test]
        fn w2_translation(a in sample(9), shift in -5.0f64..5.0) {
            let base = cloud(&a);
            let w = wasserstein2_1d(&base, &base.shifted(shift)).unwrap();
            prop_assert!((w - shift.abs()).abs() < 1e-12 * (1.0 + shift.abs()) * 10.0);
        }
    }
}
