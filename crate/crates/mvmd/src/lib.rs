//! Host side of `mvmd-core`: configuration files, artifact formats, a
//! rayon executor and the experiment campaign runner behind the `mvmd`
//! command-line tool.

pub mod campaign;
pub mod commands;
pub mod config;
pub mod io;
pub mod par;

use mvmd_core::dsl::{validate_model, CoefficientModel, ValidationReport};
use mvmd_core::Error;

pub use campaign::{run_campaign, CampaignOptions, Manifest};
pub use par::RayonExecutor;

/// Failures of a command, each with its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("model rejected: {0}")]
    Rejected(String),
    #[error("runtime divergence: {0}")]
    Diverged(String),
    #[error("tolerance gates failed: {0}")]
    Gates(String),
    #[error("{0}")]
    Runtime(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Rejected(_) => 3,
            RunError::Diverged(_) => 4,
            RunError::Gates(_) | RunError::Runtime(_) => 1,
        }
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::EnsembleDiverged { .. } | Error::Diverged { .. } | Error::NonFinite { .. } => RunError::Diverged(msg),
            Error::Rejected(_) => RunError::Rejected(msg),
            Error::Lex { .. }
            | Error::Syntax { .. }
            | Error::VariableRange { .. }
            | Error::FastVariableForbidden { .. }
            | Error::Invalid(_)
            | Error::Dimension(_)
            | Error::StiffStep { .. }
            | Error::Truncation { .. }
            | Error::BudgetExceeded { .. }
            | Error::GridMismatch(_) => RunError::Config(msg),
            _ => RunError::Runtime(msg),
        }
    }
}

impl From<config::ConfigError> for RunError {
    fn from(e: config::ConfigError) -> Self {
        RunError::Config(e.to_string())
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Runtime(format!("io: {e}"))
    }
}

/// Parses the model section and runs the validation probes. The returned
/// model carries the probed constants; a rejection is an error.
pub fn validated_model(cfg: &config::Config) -> Result<(CoefficientModel, ValidationReport), RunError> {
    let model = CoefficientModel::from_sources(&cfg.model.sources).map_err(|e| RunError::Config(format!("model: {e}")))?;
    let report = validate_model(&model, &cfg.model.probe)?;
    if !report.accepted {
        let why = report
            .rejection
            .as_ref()
            .map(|r| format!("{} (value {})", r.condition, r.value))
            .unwrap_or_default();
        return Err(RunError::Rejected(why));
    }
    Ok((report.apply(model)?, report))
}
