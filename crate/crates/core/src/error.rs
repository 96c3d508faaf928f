use thiserror::Error;

/// Errors raised by the hierarchical controller and its harnesses.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite {quantity} at solver iteration {iteration}")]
    NonFinite {
        quantity: &'static str,
        iteration: usize,
    },

    #[error("local solve failed in subsystem {subsystem}: {source}")]
    Subsystem {
        subsystem: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("no converged candidate among {evaluated} set-point evaluations: {candidates}")]
    NoConvergedCandidate { evaluated: usize, candidates: String },

    #[error("closed loop diverged at step {step} (state norm {norm:.3e})")]
    Diverged { step: usize, norm: f64 },

    #[error("training aborted at epoch {epoch}: loss is not finite")]
    Training { epoch: usize },

    #[error("invalid surrogate parameters: {0}")]
    Surrogate(String),

    #[error("malformed data file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}
