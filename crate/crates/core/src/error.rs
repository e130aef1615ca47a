use nalgebra::DVector;
use thiserror::Error;

use crate::conic::SolveStatus;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("matrix is not positive semidefinite (minimum eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// No input satisfies the stage-cost constraints at this state.
    #[error("infeasible state {state:?}")]
    InfeasibleState { state: Vec<f64> },

    /// A closed-loop simulation reached a state where the chosen input is infeasible.
    #[error("infeasible step at t = {step}, state {state:?}")]
    InfeasibleStep { step: usize, state: Vec<f64> },

    #[error("conic solve failed with status {status:?} ({context})")]
    Solver {
        status: SolveStatus,
        context: &'static str,
    },

    #[error("value iteration diverged after {iterations} iterations (norm {norm:e})")]
    Diverged { iterations: usize, norm: f64 },

    #[error(
        "value iteration did not converge in {iterations} iterations (last change {change:e})"
    )]
    NotConverged { iterations: usize, change: f64 },

    #[error("fitting failed at iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn infeasible_state(x: &DVector<f64>) -> Self {
        Error::InfeasibleState {
            state: x.iter().copied().collect(),
        }
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}
