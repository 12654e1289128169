//! Accuracy metrics and the n-1 collusion attack.

mod attack;
mod metrics;

use thiserror::Error;

use crate::config::Scenario;
use crate::ring::RingError;

pub use attack::{collusion_attack, write_attack_csv, AttackAccumulator, AttackResult, ErrorSummary};
pub use metrics::{
    attack_r2, error_function, mcc, mean, mse, pearson, quantile, variance, ErrorStats, Histogram2d, RSquared,
};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("length mismatch: {left} vs {right}")]
    Length { left: usize, right: usize },

    #[error("not enough samples")]
    Empty,

    #[error("{} does not apply to the transcript of round {round}", scenario.name())]
    ModeMismatch { scenario: Scenario, round: u32 },

    #[error("round {round}: no captured log for {what}")]
    MissingLogs { round: u32, what: String },

    #[error(transparent)]
    Ring(#[from] RingError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;
