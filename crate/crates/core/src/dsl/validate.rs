//! Statistical probing of the regularity assumptions on a model.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::model::{CoefficientModel, ModelConstants};
use crate::error::{Error, Result};
use crate::linalg;
use crate::measure::MeasureMoments;
use crate::sde::{domain, RngPlan, StreamLabel};

/// Sampling box for the probes.
///
/// Measures are probed through moment pairs: each coordinate gets a mean
/// in `mean_range` and a spread in `[0, spread_max]`, so `m2 = mean² + sd²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub mean_range: (f64, f64),
    pub spread_max: f64,
    pub probes: usize,
    pub seed: u64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            x_range: (-3.0, 3.0),
            y_range: (-3.0, 3.0),
            mean_range: (-3.0, 3.0),
            spread_max: 2.0,
            probes: 1000,
            seed: 0,
        }
    }
}

/// Largest observed difference quotient per coefficient family.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LipschitzRatios {
    pub b: f64,
    pub sigma: f64,
    pub f: f64,
    pub g: f64,
}

/// One probe: two slow states, two moment sets and two fast states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeWitness {
    pub index: usize,
    pub x: [Vec<f64>; 2],
    pub mean: [Vec<f64>; 2],
    pub m2: [Vec<f64>; 2],
    pub y: [Vec<f64>; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    /// `"dissipativity"` or `"ellipticity"`.
    pub condition: String,
    pub value: f64,
    pub witness: ProbeWitness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub kappa_hat: f64,
    pub c1_hat: f64,
    pub c2_hat: f64,
    pub lipschitz_hat: f64,
    pub probes: usize,
    pub seed: u64,
    pub accepted: bool,
    pub lipschitz: LipschitzRatios,
    /// Largest Frobenius norm of `g` seen.
    pub g_sup: f64,
    /// The Hölder condition on measure derivatives has no probe.
    pub a2: String,
    pub rejection: Option<Rejection>,
}

impl ValidationReport {
    pub fn constants(&self) -> ModelConstants {
        ModelConstants {
            kappa: self.kappa_hat,
            c1: self.c1_hat,
            c2: self.c2_hat,
            lipschitz: self.lipschitz_hat,
        }
    }

    /// Attaches the probed constants if the model was accepted.
    pub fn apply(&self, model: CoefficientModel) -> Result<CoefficientModel> {
        match &self.rejection {
            None => Ok(model.with_constants(self.constants())),
            Some(r) => Err(Error::Rejected(format!(
                "{} violated (value {}, probe {})",
                r.condition, r.value, r.witness.index
            ))),
        }
    }
}

fn draw(spec: &ProbeSpec, model: &CoefficientModel, index: usize) -> ProbeWitness {
    let d = model.dims();
    let mut s = RngPlan::new(spec.seed).stream(StreamLabel::new(domain::VALIDATION, 0, index as u64, 0));
    let vec_in = |len: usize, (lo, hi): (f64, f64), s: &mut crate::sde::NoiseStream| {
        (0..len).map(|_| s.uniform(lo, hi)).collect::<Vec<f64>>()
    };
    let x = [vec_in(d.n, spec.x_range, &mut s), vec_in(d.n, spec.x_range, &mut s)];
    let mean = [vec_in(d.n, spec.mean_range, &mut s), vec_in(d.n, spec.mean_range, &mut s)];
    let sd = [vec_in(d.n, (0.0, spec.spread_max), &mut s), vec_in(d.n, (0.0, spec.spread_max), &mut s)];
    let y = [vec_in(d.m, spec.y_range, &mut s), vec_in(d.m, spec.y_range, &mut s)];
    let m2 = [0, 1].map(|i| mean[i].iter().zip(&sd[i]).map(|(m, s)| m * m + s * s).collect());
    ProbeWitness {
        index,
        x,
        mean,
        m2,
        y,
    }
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| libm::fabs(u - v)).sum()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum())
}

/// Probes the dissipativity, ellipticity, Lipschitz and boundedness
/// conditions at `spec.probes` random points.
///
/// Probe `i` depends only on `(seed, i)`, so a larger probe count extends
/// the sample rather than redrawing it. The model is accepted iff the
/// smallest dissipativity margin and the smallest eigenvalue of `σσ*`
/// are both positive.
pub fn validate_model(model: &CoefficientModel, spec: &ProbeSpec) -> Result<ValidationReport> {
    if spec.probes < 100 {
        return Err(Error::Invalid(format!("need at least 100 probes, got {}", spec.probes)));
    }
    let d = model.dims();
    let mut kappa = f64::INFINITY;
    let (mut c1, mut c2) = (f64::INFINITY, 0.0f64);
    let mut lip = LipschitzRatios::default();
    let mut g_sup = 0.0f64;
    let mut dissipativity_fail = None;
    let mut ellipticity_fail = None;

    for i in 0..spec.probes {
        let w = draw(spec, model, i);
        let mu = [0, 1].map(|k| MeasureMoments {
            mean: w.mean[k].clone(),
            second: w.m2[k].clone(),
        });
        let sd = |k: usize| -> Vec<f64> { mu[k].variance().iter().map(|v| libm::sqrt(*v)).collect() };
        let w2 = libm::sqrt(
            w.mean[0]
                .iter()
                .zip(&w.mean[1])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                + sd(0).iter().zip(&sd(1)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
        );
        let dist_slow = l1(&w.x[0], &w.x[1]) + w2;
        let dist = dist_slow + l1(&w.y[0], &w.y[1]);

        let b = [model.eval_b(&w.x[0], &w.y[0], &mu[0])?, model.eval_b(&w.x[1], &w.y[1], &mu[1])?];
        let s = [model.eval_sigma(&w.x[0], &mu[0])?, model.eval_sigma(&w.x[1], &mu[1])?];
        let f = [model.eval_f(&w.x[0], &w.y[0], &mu[0])?, model.eval_f(&w.x[1], &w.y[1], &mu[1])?];
        let g = [model.eval_g(&w.x[0], &w.y[0], &mu[0])?, model.eval_g(&w.x[1], &w.y[1], &mu[1])?];
        if dist > 0.0 {
            lip.b = lip.b.max((l1(&b[0], &b[1]) + l2(&s[0], &s[1])) / dist);
            lip.f = lip.f.max((l1(&f[0], &f[1]) + l2(&g[0], &g[1])) / dist);
            lip.g = lip.g.max(l2(&g[0], &g[1]) / dist);
        }
        if dist_slow > 0.0 {
            lip.sigma = lip.sigma.max(l2(&s[0], &s[1]) / dist_slow);
        }
        for gk in &g {
            g_sup = g_sup.max(libm::sqrt(gk.iter().map(|v| v * v).sum()));
        }

        // dissipativity in y at fixed (x, μ)
        let fa = model.eval_f(&w.x[0], &w.y[0], &mu[0])?;
        let fb = model.eval_f(&w.x[0], &w.y[1], &mu[0])?;
        let ga = model.eval_g(&w.x[0], &w.y[0], &mu[0])?;
        let gb = model.eval_g(&w.x[0], &w.y[1], &mu[0])?;
        let dy2: f64 = w.y[0].iter().zip(&w.y[1]).map(|(a, b)| (a - b) * (a - b)).sum();
        if dy2 > 0.0 {
            let inner: f64 = (0..d.m).map(|j| (fa[j] - fb[j]) * (w.y[0][j] - w.y[1][j])).sum();
            let gdiff: f64 = ga.iter().zip(&gb).map(|(a, b)| (a - b) * (a - b)).sum();
            let margin = -(2.0 * inner + 3.0 * gdiff) / dy2;
            if margin <= 0.0 && dissipativity_fail.is_none() {
                dissipativity_fail = Some((margin, w.clone()));
            }
            kappa = kappa.min(margin);
        }

        let ss = linalg::outer_self(&s[0], d.n, d.d1);
        let (lo, hi) = linalg::eigen_range(&ss, d.n);
        if lo <= 1e-12 * hi.max(1.0) && ellipticity_fail.is_none() {
            ellipticity_fail = Some((lo, w.clone()));
        }
        c1 = c1.min(lo);
        c2 = c2.max(hi);
    }

    let rejection = dissipativity_fail
        .map(|(value, witness)| Rejection {
            condition: "dissipativity".into(),
            value,
            witness,
        })
        .or_else(|| {
            ellipticity_fail.map(|(value, witness)| Rejection {
                condition: "ellipticity".into(),
                value,
                witness,
            })
        });
    let lipschitz_hat = lip.b.max(lip.sigma).max(lip.f).max(lip.g);
    Ok(ValidationReport {
        kappa_hat: kappa,
        c1_hat: c1.max(0.0),
        c2_hat: c2,
        lipschitz_hat,
        probes: spec.probes,
        seed: spec.seed,
        accepted: rejection.is_none(),
        lipschitz: lip,
        g_sup,
        a2: "unvalidated".into(),
        rejection,
    })
}

#[cfg(test)]
mod tests {
    use super::super::model::fixtures::*;
    use super::*;

    fn spec(probes: usize) -> ProbeSpec {
        ProbeSpec {
            probes,
            seed: 9,
            ..ProbeSpec::default()
        }
    }

    #[test]
    fn lin1_accepted_with_exact_kappa() {
        let r = validate_model(&lin1(), &spec(200)).unwrap();
        assert!(r.accepted);
        assert!((r.kappa_hat - 4.0).abs() < 1e-9, "{}", r.kappa_hat);
        assert_eq!((r.c1_hat, r.c2_hat), (1.0, 1.0));
        assert_eq!(r.g_sup, 1.0);
        assert_eq!(r.a2, "unvalidated");
    }

    #[test]
    fn anti_dissipative_rejected() {
        let m = CoefficientModel::from_sources(&sources("-x0", "1", "y0", "1")).unwrap();
        let r = validate_model(&m, &spec(100)).unwrap();
        assert!(!r.accepted);
        assert!(r.kappa_hat <= 0.0);
        let rej = r.rejection.unwrap();
        assert_eq!(rej.condition, "dissipativity");
        assert_eq!(rej.witness.index, 0);
    }

    #[test]
    fn degenerate_sigma_rejected() {
        let m = CoefficientModel::from_sources(&sources("-x0", "0", "-y0", "1")).unwrap();
        let r = validate_model(&m, &spec(100)).unwrap();
        assert!(!r.accepted);
        assert_eq!(r.c1_hat, 0.0);
        assert_eq!(r.rejection.unwrap().condition, "ellipticity");
    }

    #[test]
    fn too_few_probes() {
        assert!(validate_model(&lin1(), &spec(99)).is_err());
    }

    #[test]
    fn more_probes_only_tighten() {
        let m = CoefficientModel::from_sources(&sources("sin(x0) + y0*mu.mean0", "1 + 0.5*tanh(x0)", "-2*y0 + 0.3*sin(y0)", "1 + 0.1*cos(y0)")).unwrap();
        let small = validate_model(&m, &spec(100)).unwrap();
        let large = validate_model(&m, &spec(400)).unwrap();
        assert!(large.kappa_hat <= small.kappa_hat);
        assert!(large.c1_hat <= small.c1_hat);
        assert!(large.c2_hat >= small.c2_hat);
        assert!(large.lipschitz_hat >= small.lipschitz_hat);
    }
}
