use alloc::string::String;

/// Errors raised anywhere in the kernel.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("lexical error at position {pos}: {message}")]
    Lex { pos: usize, message: String },
    #[error("syntax error at position {pos}: expected {expected}, found {found}")]
    Syntax {
        pos: usize,
        expected: String,
        found: String,
    },
    #[error("variable `{name}` out of range: index must be below {bound}")]
    VariableRange { name: String, bound: usize },
    #[error("fast variable `{name}` is not permitted in this coefficient")]
    FastVariableForbidden { name: String },
    #[error("non-finite value at {path}")]
    NonFinite { path: String },
    #[error("invalid negative base {base} for non-integer exponent {exponent} at {path}")]
    NegativeBase {
        base: f64,
        exponent: f64,
        path: String,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("stiff step: dt = {dt} exceeds the stability limit {limit}")]
    StiffStep { dt: f64, limit: f64 },
    #[error("path diverged at step {step}")]
    Diverged { step: usize },
    #[error("{diverged} of {total} particles diverged")]
    EnsembleDiverged { diverged: usize, total: usize },
    #[error("truncation horizon {horizon} below the required {required}")]
    Truncation { horizon: f64, required: f64 },
    #[error("effective sample size {ess:.1} below the threshold {min:.1}")]
    LowEffectiveSampleSize { ess: f64, min: f64 },
    #[error("matrix not positive definite at node {node}: smallest eigenvalue {min_eigenvalue:e}")]
    NotPositiveDefinite { node: usize, min_eigenvalue: f64 },
    #[error("singular controllability Gramian (smallest eigenvalue {min_eigenvalue:e})")]
    SingularGramian { min_eigenvalue: f64 },
    #[error("control energy {energy} exceeds the budget {budget}")]
    BudgetExceeded { energy: f64, budget: f64 },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("histogram mass mismatch: {left} vs {right}")]
    MassMismatch { left: f64, right: f64 },
    #[error("model rejected: {0}")]
    Rejected(String),
    #[error("model has not been validated")]
    NotValidated,
}

pub type Result<T> = core::result::Result<T, Error>;
