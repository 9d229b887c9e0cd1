//! Coefficient expression language.
//!
//! Coefficients `b`, `σ`, `f`, `g` are written as infix expressions over
//! the slow state `x0..`, the fast state `y0..` and two moment families
//! of the law of the slow component, `mu.mean0..` and `mu.m20..` (raw
//! second moment). Expressions are parsed into [`Expr`] trees, compiled
//! into a flat stack program for the hot loops, and bundled into a
//! [`CoefficientModel`].

mod ast;
mod lexer;
mod model;
mod parser;
mod program;
mod validate;

pub use ast::{BinOp, Expr, Func, Moment};
pub use model::{CoefficientModel, Dims, ModelConstants, ModelSources};
pub use parser::{parse_expr, VarContext};
pub use program::Program;
pub use validate::{
    validate_model, LipschitzRatios, ProbeSpec, ProbeWitness, Rejection, ValidationReport,
};

#[cfg(test)]
pub(crate) use model::fixtures as model_fixtures;
