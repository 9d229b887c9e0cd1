use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::TimeGrid;

/// Label domains keep streams of different subsystems apart.
pub mod domain {
    pub const VALIDATION: u32 = 1;
    pub const FROZEN: u32 = 2;
    pub const POISSON: u32 = 3;
    pub const MULTISCALE: u32 = 4;
    pub const KHASMINSKII: u32 = 5;
    pub const SCRATCH: u32 = 15;
}

/// Channels within a particle.
pub mod channel {
    pub const SLOW: u32 = 0;
    pub const FAST: u32 = 1;
}

/// Master seed from which every noise stream is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngPlan {
    pub seed: u64,
}

/// Address of one noise stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamLabel {
    pub domain: u32,
    pub replica: u64,
    pub particle: u64,
    pub channel: u32,
}

impl StreamLabel {
    pub fn new(domain: u32, replica: u64, particle: u64, channel: u32) -> Self {
        Self {
            domain,
            replica,
            particle,
            channel,
        }
    }

    /// 64-bit ChaCha stream id. Labels inside the packed ranges map
    /// injectively (bit 63 clear); anything larger is hashed into the
    /// other half of the id space.
    fn stream_id(&self) -> u64 {
        let fits = self.domain < 1 << 4
            && self.channel < 1 << 5
            && self.particle < 1 << 27
            && self.replica < 1 << 27;
        if fits {
            (self.domain as u64) << 59
                | (self.channel as u64) << 54
                | self.particle << 27
                | self.replica
        } else {
            let mut h = splitmix(self.domain as u64 ^ 0x5851_f42d_4c95_7f2d);
            h = splitmix(h ^ self.channel as u64);
            h = splitmix(h ^ self.particle);
            h = splitmix(h ^ self.replica);
            h | 1 << 63
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngPlan {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// Independent stream for `label`; the same `(seed, label)` always
    /// yields the same sequence.
    pub fn stream(&self, label: StreamLabel) -> NoiseStream {
        let mut key = [0u8; 32];
        let mut s = self.seed;
        for chunk in key.chunks_exact_mut(8) {
            s = splitmix(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(label.stream_id());
        NoiseStream { rng }
    }

    /// Derived plan, used where a study needs a seed per sweep point.
    pub fn child(&self, index: u64) -> RngPlan {
        RngPlan {
            seed: splitmix(self.seed ^ splitmix(index.wrapping_add(0x632b_e59b_d9b4_e019))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    #[inline]
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.random::<f64>()
    }

    pub fn index(&mut self, len: usize) -> usize {
        self.rng.random_range(0..len)
    }

    /// Fills `out` with independent `N(0, dt)` increments.
    #[inline]
    pub fn fill_increments(&mut self, dt_sqrt: f64, out: &mut [f64]) {
        for o in out {
            *o = dt_sqrt * self.normal();
        }
    }
}

/// Anything that can hand out Brownian increments one step at a time.
pub trait NoiseSource {
    fn next_increment(&mut self, dt: f64, out: &mut [f64]);
}

impl NoiseSource for NoiseStream {
    fn next_increment(&mut self, dt: f64, out: &mut [f64]) {
        self.fill_increments(libm::sqrt(dt), out);
    }
}

/// Zero noise, for deterministic integration.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoNoise;

impl NoiseSource for NoNoise {
    fn next_increment(&mut self, _dt: f64, out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Precomputed `K × dim` increment array.
#[derive(Debug, Clone, PartialEq)]
pub struct Increments {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Increments {
    pub fn steps(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn cursor(&self) -> IncrementCursor<'_> {
        IncrementCursor { inc: self, next: 0 }
    }
}

pub struct IncrementCursor<'a> {
    inc: &'a Increments,
    next: usize,
}

impl NoiseSource for IncrementCursor<'_> {
    fn next_increment(&mut self, _dt: f64, out: &mut [f64]) {
        out.copy_from_slice(self.inc.row(self.next));
        self.next += 1;
    }
}

/// `K × dim` array of `N(0, dt)` entries for stream `label`.
///
/// Row `k` equals what the `k`-th call of [`NoiseSource::next_increment`]
/// on `plan.stream(label)` produces.
pub fn brownian_increments(plan: &RngPlan, label: StreamLabel, grid: &TimeGrid, dim: usize) -> Increments {
    let dim = dim.max(1);
    let mut stream = plan.stream(label);
    let mut data = vec![0.0; grid.steps() * dim];
    let s = libm::sqrt(grid.dt());
    for row in data.chunks_exact_mut(dim) {
        stream.fill_increments(s, row);
    }
    Increments { dim, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_variance(v: &[f64]) -> f64 {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    }

    #[test]
    fn same_label_same_increments() {
        let plan = RngPlan::new(42);
        let grid = TimeGrid::new(1.0, 0.01).unwrap();
        let l = StreamLabel::new(domain::SCRATCH, 3, 7, 0);
        assert_eq!(
            brownian_increments(&plan, l, &grid, 2),
            brownian_increments(&plan, l, &grid, 2)
        );
        let other = StreamLabel::new(domain::SCRATCH, 3, 8, 0);
        assert_ne!(
            brownian_increments(&plan, l, &grid, 2),
            brownian_increments(&plan, other, &grid, 2)
        );
        assert_ne!(
            brownian_increments(&plan, l, &grid, 2),
            brownian_increments(&RngPlan::new(43), l, &grid, 2)
        );
    }

    #[test]
    fn increment_variance_matches_dt() {
        // Var of the sample variance of 10⁶ Gaussians is 2σ⁴/(N−1): the
        // relative standard error is √2·10⁻³, so 1% is a 7σ band.
        let plan = RngPlan::new(7);
        let grid = TimeGrid::new(10_000.0, 0.01).unwrap();
        let inc = brownian_increments(&plan, StreamLabel::new(domain::SCRATCH, 0, 0, 0), &grid, 1);
        assert_eq!(inc.data.len(), 1_000_000);
        let v = sample_variance(&inc.data);
        assert!((v / 0.01 - 1.0).abs() < 0.01, "variance {v}");

        let coarse = TimeGrid::new(250_000.0, 0.25).unwrap();
        let inc = brownian_increments(&plan, StreamLabel::new(domain::SCRATCH, 1, 0, 0), &coarse, 1);
        let scaled: Vec<f64> = inc.data.iter().map(|w| w / 0.5).collect();
        assert!((sample_variance(&scaled) - 1.0).abs() < 0.01);
    }

    #[test]
    fn streams_are_uncorrelated() {
        let plan = RngPlan::new(1);
        let grid = TimeGrid::new(1000.0, 0.01).unwrap();
        let a = brownian_increments(&plan, StreamLabel::new(domain::SCRATCH, 0, 0, 0), &grid, 1);
        let b = brownian_increments(&plan, StreamLabel::new(domain::SCRATCH, 0, 0, 1), &grid, 1);
        let n = a.data.len() as f64;
        let corr = a.data.iter().zip(&b.data).map(|(u, v)| u * v).sum::<f64>() / (n * 0.01);
        // standard error 1/√n = 0.01
        assert!(corr.abs() < 0.05, "correlation {corr}");
    }

    #[test]
    fn cursor_replays_stream() {
        let plan = RngPlan::new(5);
        let grid = TimeGrid::new(0.1, 0.01).unwrap();
        let l = StreamLabel::new(domain::SCRATCH, 0, 0, 0);
        let inc = brownian_increments(&plan, l, &grid, 3);
        let mut s = plan.stream(l);
        let mut row = [0.0; 3];
        for k in 0..grid.steps() {
            s.next_increment(grid.dt(), &mut row);
            assert_eq!(&row, inc.row(k));
        }
    }

    #[test]
    fn large_labels_hash_apart() {
        let a = StreamLabel::new(domain::SCRATCH, 1 << 40, 0, 0).stream_id();
        let b = StreamLabel::new(domain::SCRATCH, (1 << 40) + 1, 0, 0).stream_id();
        assert_ne!(a, b);
        assert!(a >> 63 == 1 && b >> 63 == 1);
    }
}
