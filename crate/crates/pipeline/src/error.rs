use hfalign_core::{CoreError, Dimension};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Core(#[from] CoreError),

    /// Input whose dimensions do not match the model.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A NaN or infinity in a parameter, gradient or loss.
    #[error("non-finite value in `{parameter}` ({context})")]
    NonFinite { context: String, parameter: String },

    /// Training loss blew up.
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("config error: {0}")]
    Config(String),

    /// Rejection sampling kept nothing; training would be meaningless.
    #[error("no surviving samples: none of the {total} synthesized samples is Good in every dimension")]
    NoSurvivors { total: usize },

    /// Rejection sampling kept too little data to train on safely.
    #[error(
        "only {kept} of {total} samples survive the filter ({rate:.4} < floor {floor}); \
         lower align.rs_survival_floor, add samples, or use rwl"
    )]
    SurvivalBelowFloor { kept: usize, total: usize, rate: f64, floor: f64 },

    /// The critic's answer did not start with a label token.
    #[error("could not parse a label for {dimension} from answer `{decoded}`")]
    Parse { dimension: Dimension, decoded: String },

    /// A correction stage waits on human decisions.
    #[error("{stage} is blocked on {pending} pending item(s)")]
    Blocked { stage: &'static str, pending: usize },

    /// A training run stopped early; `report` holds what was recorded so far.
    #[error("{source}")]
    Aborted { source: Box<PipelineError>, report: serde_json::Value },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
