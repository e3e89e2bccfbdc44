//! A validated model together with its conjugation, neighborhood and
//! linearized coefficients.

use std::sync::OnceLock;

use thiserror::Error;

use crate::flow::{Conjugation, FlowError, FlowSolverConfig};
use crate::model::{choose_neighborhood, validate_model, ModelError, ModelInput, ModelSpec, Neighborhood};
use crate::num::Real;
use crate::presets;
use crate::sde::LinearizedModel;
use crate::theory::TheoremConstants;

/// Grid size of the conjugation table.
pub const TABLE_POINTS: usize = 257;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProblemError {
    #[error("invalid model JSON: {0}")]
    Json(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Debug)]
pub struct Problem<T> {
    pub model: ModelSpec<T>,
    pub conj: Conjugation<T>,
    pub nbhd: Neighborhood<T>,
    pub constants: TheoremConstants<T>,
    lin: OnceLock<Result<LinearizedModel<T>, FlowError>>,
}

impl<T: Real> Problem<T> {
    pub fn build(model: ModelSpec<T>, requested_r: Option<T>) -> Result<Self, ProblemError> {
        let conj = Conjugation::build(&model, TABLE_POINTS, FlowSolverConfig::default())?;
        let nbhd = choose_neighborhood(&model, &conj, requested_r)?;
        let constants = TheoremConstants::from_conjugation(&conj);
        Ok(Self {
            model,
            conj,
            nbhd,
            constants,
            lin: OnceLock::new(),
        })
    }

    pub fn from_input(input: &ModelInput, requested_r: Option<T>) -> Result<Self, ProblemError> {
        Self::build(validate_model(input)?, requested_r)
    }

    pub fn from_json(text: &str, requested_r: Option<T>) -> Result<Self, ProblemError> {
        let input = ModelInput::from_json(text).map_err(|e| ProblemError::Json(e.to_string()))?;
        Self::from_input(&input, requested_r)
    }

    pub fn preset(name: &str) -> Result<Self, ProblemError> {
        let text = presets::preset(name).ok_or_else(|| ProblemError::UnknownPreset(name.to_string()))?;
        Self::from_json(text, None)
    }

    /// Linearized coefficients, tabulated on first use.
    pub fn linearized(&self) -> Result<&LinearizedModel<T>, ProblemError> {
        self.lin
            .get_or_init(|| LinearizedModel::build(&self.model, &self.conj, self.nbhd))
            .as_ref()
            .map_err(|e| ProblemError::Flow(e.clone()))
    }
}
