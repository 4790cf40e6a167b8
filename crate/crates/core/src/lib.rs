//! Multivariate one-sided sensitivity analysis for matched observational
//! studies.
//!
//! The adversary chooses unit-level treatment probabilities within the
//! Gamma-constrained polytope; the analyst chooses a coherent (nonnegative)
//! combination of the per-outcome sum statistics. The resulting worst-case
//! deviate is compared with a worst-case chi-bar-squared critical value.

pub mod chibar;
pub mod critical;
pub mod error;
pub mod feasible;
pub mod game;
pub mod inference;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod output;
pub mod qp;
pub mod scalar;
pub mod simulation;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use game::{solve_worst_case, GameOptions, LambdaSpec};
pub use inference::{Analysis, GammaGrid, InferenceOptions, Method, TestRecord};
pub use model::{MatchedStudy, ScoreMatrix, ScoreScheme, StrataLayout};

pub type Study = model::MatchedStudy<f64>;
pub type Study32 = model::MatchedStudy<f32>;
pub type Scores = model::ScoreMatrix<f64>;
pub type Scores32 = model::ScoreMatrix<f32>;
pub type Probs = feasible::ProbVector<f64>;
pub type Probs32 = feasible::ProbVector<f32>;
pub type Moments = feasible::Moments<f64>;
pub type Moments32 = feasible::Moments<f32>;
pub type WorstCase = game::GameResult<f64>;
pub type WorstCase32 = game::GameResult<f32>;
