use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::ast::Expr;
use super::parser::{parse_expr, VarContext};
use super::program::Program;
use crate::error::{Error, Result};
use crate::measure::MeasureMoments;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// slow state
    pub n: usize,
    /// fast state
    pub m: usize,
    /// slow noise
    pub d1: usize,
    /// fast noise
    pub d2: usize,
}

/// Source text for each coefficient entry. Matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSources {
    pub dims: Dims,
    pub b: Vec<String>,
    pub sigma: Vec<String>,
    pub f: Vec<String>,
    pub g: Vec<String>,
}

/// Constants established by probing, see [`super::validate_model`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConstants {
    pub kappa: f64,
    pub c1: f64,
    pub c2: f64,
    pub lipschitz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coefficient {
    program: Program,
}

impl Coefficient {
    fn new(expr: Expr) -> Self {
        Self {
            program: Program::compile(&expr),
        }
    }
}

/// The four coefficient families of the slow-fast system
///
/// ```text
/// dX = b(X, μ, Y) dt + √δ σ(X, μ) dW¹
/// dY = ε⁻¹ f(X, μ, Y) dt + ε^{-1/2} g(X, μ, Y) dW²
/// ```
///
/// with `μ` the law of `X`, seen through its moments.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientModel {
    dims: Dims,
    b: Vec<Coefficient>,
    sigma: Vec<Coefficient>,
    f: Vec<Coefficient>,
    g: Vec<Coefficient>,
    constants: Option<ModelConstants>,
}

impl CoefficientModel {
    pub fn from_sources(src: &ModelSources) -> Result<Self> {
        let Dims { n, m, d1, d2 } = src.dims;
        if n == 0 || m == 0 || d1 == 0 || d2 == 0 {
            return Err(Error::Invalid(format!(
                "all dimensions must be positive, got n={n} m={m} d1={d1} d2={d2}"
            )));
        }
        let full = VarContext::full(n, m);
        let slow = VarContext::slow_only(n, m);
        let parse_all = |name: &str, texts: &[String], len: usize, ctx: VarContext| {
            if texts.len() != len {
                return Err(Error::Dimension(format!(
                    "{name} needs {len} entries, got {}",
                    texts.len()
                )));
            }
            texts
                .iter()
                .map(|t| parse_expr(t, ctx).map(Coefficient::new))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            dims: src.dims,
            b: parse_all("b", &src.b, n, full)?,
            sigma: parse_all("sigma", &src.sigma, n * d1, slow)?,
            f: parse_all("f", &src.f, m, full)?,
            g: parse_all("g", &src.g, m * d2, full)?,
            constants: None,
        })
    }

    /// Builds a model from already parsed trees.
    pub fn from_exprs(dims: Dims, b: Vec<Expr>, sigma: Vec<Expr>, f: Vec<Expr>, g: Vec<Expr>) -> Result<Self> {
        let Dims { n, m, d1, d2 } = dims;
        if b.len() != n || sigma.len() != n * d1 || f.len() != m || g.len() != m * d2 {
            return Err(Error::Dimension("coefficient counts do not match dims".into()));
        }
        if let Some(bad) = sigma.iter().find(|e| e.uses_fast()) {
            return Err(Error::FastVariableForbidden {
                name: format!("{bad}"),
            });
        }
        let wrap = |v: Vec<Expr>| v.into_iter().map(Coefficient::new).collect();
        Ok(Self {
            dims,
            b: wrap(b),
            sigma: wrap(sigma),
            f: wrap(f),
            g: wrap(g),
            constants: None,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn constants(&self) -> Option<ModelConstants> {
        self.constants
    }

    pub fn with_constants(mut self, constants: ModelConstants) -> Self {
        self.constants = Some(constants);
        self
    }

    /// Dissipativity constant from validation.
    pub fn kappa(&self) -> Result<f64> {
        self.constants.map(|c| c.kappa).ok_or(Error::NotValidated)
    }

    pub fn uses_measure(&self) -> bool {
        self.all().any(|c| c.program.expr().uses_measure())
    }

    /// True when `σ` and `g` are identically zero.
    pub fn is_deterministic(&self) -> bool {
        self.sigma
            .iter()
            .chain(&self.g)
            .all(|c| c.program.expr().constant_value() == Some(0.0))
    }

    /// True when no drift entry of the slow equation reads the fast state.
    pub fn slow_drift_fast_free(&self) -> bool {
        self.b.iter().all(|c| !c.program.expr().uses_fast())
    }

    fn all(&self) -> impl Iterator<Item = &Coefficient> {
        self.b.iter().chain(&self.sigma).chain(&self.f).chain(&self.g)
    }

    pub fn b_exprs(&self) -> impl Iterator<Item = &Expr> {
        self.b.iter().map(|c| c.program.expr())
    }

    pub fn sigma_exprs(&self) -> impl Iterator<Item = &Expr> {
        self.sigma.iter().map(|c| c.program.expr())
    }

    pub fn f_exprs(&self) -> impl Iterator<Item = &Expr> {
        self.f.iter().map(|c| c.program.expr())
    }

    pub fn g_exprs(&self) -> impl Iterator<Item = &Expr> {
        self.g.iter().map(|c| c.program.expr())
    }

    // Unchecked fills for the integrators; a non-finite entry surfaces as
    // path divergence downstream.

    #[inline]
    pub fn slow_drift(&self, x: &[f64], y: &[f64], mu: &MeasureMoments, out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.b) {
            *o = c.program.run(x, y, mu);
        }
    }

    #[inline]
    pub fn slow_diffusion(&self, x: &[f64], mu: &MeasureMoments, out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.sigma) {
            *o = c.program.run(x, &[], mu);
        }
    }

    #[inline]
    pub fn fast_drift(&self, x: &[f64], y: &[f64], mu: &MeasureMoments, out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.f) {
            *o = c.program.run(x, y, mu);
        }
    }

    #[inline]
    pub fn fast_diffusion(&self, x: &[f64], y: &[f64], mu: &MeasureMoments, out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.g) {
            *o = c.program.run(x, y, mu);
        }
    }

    // Checked evaluations returning owned vectors.

    pub fn eval_b(&self, x: &[f64], y: &[f64], mu: &MeasureMoments) -> Result<Vec<f64>> {
        self.b.iter().map(|c| c.program.eval(x, y, mu)).collect()
    }

    pub fn eval_sigma(&self, x: &[f64], mu: &MeasureMoments) -> Result<Vec<f64>> {
        self.sigma.iter().map(|c| c.program.eval(x, &[], mu)).collect()
    }

    pub fn eval_f(&self, x: &[f64], y: &[f64], mu: &MeasureMoments) -> Result<Vec<f64>> {
        self.f.iter().map(|c| c.program.eval(x, y, mu)).collect()
    }

    pub fn eval_g(&self, x: &[f64], y: &[f64], mu: &MeasureMoments) -> Result<Vec<f64>> {
        self.g.iter().map(|c| c.program.eval(x, y, mu)).collect()
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    pub fn sources(b: &str, sigma: &str, f: &str, g: &str) -> ModelSources {
        ModelSources {
            dims: Dims {
                n: 1,
                m: 1,
                d1: 1,
                d2: 1,
            },
            b: vec![b.to_string()],
            sigma: vec![sigma.to_string()],
            f: vec![f.to_string()],
            g: vec![g.to_string()],
        }
    }

    /// b = −x + y + ¼·mean, σ = 1, f = x − 2y, g = 1.
    pub fn lin1() -> CoefficientModel {
        CoefficientModel::from_sources(&sources("-x0 + y0 + 0.25*mu.mean0", "1", "x0 - 2*y0", "1"))
            .unwrap()
            .with_constants(ModelConstants {
                kappa: 4.0,
                c1: 1.0,
                c2: 1.0,
                lipschitz: 2.0,
            })
    }
}
