use std::path::PathBuf;

use exitlab::density::DensityError;
use exitlab::flow::FlowError;
use exitlab::model::ModelError;
use exitlab::problem::ProblemError;
use exitlab::rare::RareError;
use exitlab::sde::SimError;
use exitlab::theory::TheoryError;
use thiserror::Error;

/// Everything a subcommand can fail with, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, unreadable or invalid configs, parameters outside their domain.
    #[error("{0}")]
    Usage(String),
    /// A computation that was set up correctly but did not produce a result.
    #[error("{0}")]
    Numerical(String),
    #[error("cannot write {}: {source}", path.display())]
    Write { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) | Self::Write { .. } => 1,
            Self::Numerical(_) => 2,
        }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::Config(_)
            | FlowError::OutOfDomain(_)
            | FlowError::AtEquilibrium
            | FlowError::OutsideImage { .. }
            | FlowError::GridTooSmall(_) => Self::Usage(e.to_string()),
            FlowError::Escaped { .. } | FlowError::NonConvergence { .. } | FlowError::NoExit { .. } | FlowError::NotMonotone(_) => {
                Self::Numerical(e.to_string())
            }
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Flow(f) => f.into(),
            ModelError::DegenerateNoise { .. } => Self::Numerical(e.to_string()),
            ModelError::Invalid(_) | ModelError::RadiusTooLarge { .. } | ModelError::NonPositiveRadius(_) => {
                Self::Usage(e.to_string())
            }
        }
    }
}

impl From<ProblemError> for CliError {
    fn from(e: ProblemError) -> Self {
        match e {
            ProblemError::Model(m) => m.into(),
            ProblemError::Flow(f) => f.into(),
            ProblemError::Json(_) | ProblemError::UnknownPreset(_) => Self::Usage(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) | SimError::OutOfDomain(_) | SimError::BeyondHorizon { .. } => Self::Usage(e.to_string()),
            SimError::NonFinite { .. } | SimError::NoiseExhausted(_) => Self::Numerical(e.to_string()),
        }
    }
}

impl From<RareError> for CliError {
    fn from(e: RareError) -> Self {
        match e {
            RareError::Sim(s) => s.into(),
            RareError::Query(_) => Self::Usage(e.to_string()),
            RareError::InsufficientSample { .. } => Self::Numerical(e.to_string()),
        }
    }
}

impl From<DensityError> for CliError {
    fn from(e: DensityError) -> Self {
        match e {
            DensityError::Sim(s) => s.into(),
            DensityError::Policy { .. } | DensityError::Parameter(_) | DensityError::TooSmall(_) => {
                Self::Usage(e.to_string())
            }
            DensityError::Degenerate => Self::Numerical(e.to_string()),
        }
    }
}

impl From<TheoryError> for CliError {
    fn from(e: TheoryError) -> Self {
        match e {
            TheoryError::Parameter(_) | TheoryError::OutOfDomain(_) => Self::Usage(e.to_string()),
            TheoryError::Quadrature { .. } => Self::Numerical(e.to_string()),
        }
    }
}
