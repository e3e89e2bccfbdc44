//! Exit of small-noise diffusions `dX = b(X) dt + eps sigma(X) dW` from an
//! interval around an unstable equilibrium at 0.
//!
//! The numerical core is generic over the scalar type ([`num::Real`]); the
//! aliases below fix it to `f64`, which is what the command line uses.

pub mod density;
pub mod expr;
pub mod flow;
pub mod model;
pub mod num;
pub mod presets;
pub mod problem;
pub mod rare;
pub mod rng;
pub mod sde;
pub mod stats;
pub mod theory;
pub mod verify;

pub type Model = model::ModelSpec<f64>;
pub type Neighborhood = model::Neighborhood<f64>;
pub type Conjugation = flow::Conjugation<f64>;
pub type ConjugationTable = flow::ConjugationTable<f64>;
pub type FlowSolverConfig = flow::FlowSolverConfig<f64>;
pub type SimConfig = sde::SimConfig<f64>;
pub type Path = sde::Path<f64>;
pub type LinearizedModel = sde::LinearizedModel<f64>;
pub type TheoremConstants = theory::TheoremConstants<f64>;
pub type RecursionSchedule = theory::RecursionSchedule<f64>;
pub type Problem = problem::Problem<f64>;
