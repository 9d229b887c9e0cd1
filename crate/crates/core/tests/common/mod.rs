#![allow(dead_code)]

use mvmd_core::dsl::{CoefficientModel, Dims, ModelConstants, ModelSources};

pub fn sources(b: &str, sigma: &str, f: &str, g: &str) -> ModelSources {
    ModelSources {
        dims: Dims { n: 1, m: 1, d1: 1, d2: 1 },
        b: vec![b.into()],
        sigma: vec![sigma.into()],
        f: vec![f.into()],
        g: vec![g.into()],
    }
}

pub fn scalar_model(b: &str, sigma: &str, f: &str, g: &str, kappa: f64) -> CoefficientModel {
    CoefficientModel::from_sources(&sources(b, sigma, f, g))
        .unwrap()
        .with_constants(ModelConstants { kappa, c1: 1.0, c2: 1.0, lipschitz: 2.0 })
}

/// b = −x + y + ¼·mean, σ = 1, f = x − 2y, g = 1.
pub fn lin1() -> CoefficientModel {
    scalar_model("-x0 + y0 + 0.25*mu.mean0", "1", "x0 - 2*y0", "1", 4.0)
}
