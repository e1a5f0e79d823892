use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum SalError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid label {0} for log loss (expected 0 or 1)")]
    InvalidLabel(f64),

    #[error("loss {loss} is not valid for task {task}")]
    LossTaskMismatch { loss: &'static str, task: &'static str },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("adversary produced a non-finite value at sample {sample}")]
    AdversaryDiverged { sample: usize },

    #[error("{stage} diverged at iteration {iter}")]
    Diverged { stage: &'static str, iter: usize },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("selection acceptance rate {rate:.3e} too low for r = {r}")]
    LowAcceptance { r: f64, rate: f64 },

    #[error("csv: {0}")]
    Csv(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<SalError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for SalError {
    fn from(e: csv::Error) -> Self {
        SalError::Csv(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SalError>;

/// Attaches the name of the failing stage to an error.
pub trait StageContext<T> {
    fn stage(self, stage: impl FnOnce() -> String) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| SalError::Stage {
            stage: stage(),
            source: Box::new(e),
        })
    }
}
