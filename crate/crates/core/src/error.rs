use thiserror::Error;

/// Rejected arguments: empty inputs, out-of-range probabilities, bad splits.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum InvalidInput {
    #[error("empty score list")]
    EmptyScores,
    #[error("probability {name}={value} must lie in (0, 1)")]
    Probability { name: &'static str, value: f64 },
    #[error("score is NaN")]
    NanScore,
    #[error("{0}")]
    Message(String),
    #[error("fold {fold} would be empty (n={n}, folds={folds})")]
    EmptyFold { fold: usize, n: usize, folds: usize },
}

impl InvalidInput {
    pub(crate) fn msg(s: impl Into<String>) -> Self {
        InvalidInput::Message(s.into())
    }
}

/// Violations of the non-conformity update contracts.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContractError {
    #[error("quality must be strictly positive, got {0}")]
    NonPositiveQuality(f64),
    #[error("distance {distance} is negative for a metric declared nonnegative")]
    NegativeDistance { distance: f64 },
    #[error("distance {distance} exceeds declared upper bound {d_max}")]
    DistanceAboveBound { distance: f64, d_max: f64 },
    #[error("update rule {0} is not valid for this stage")]
    WrongRule(&'static str),
    #[error("gamma must be positive for sum/max rules, got {0}")]
    NonPositiveGamma(f64),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("generator failed: {0}")]
pub struct GeneratorError(pub String);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("timed out after {0:?} waiting for a verdict")]
    Timeout(std::time::Duration),
    #[error("no recorded verdict for instance {instance_id} stage {stage} position {position}")]
    MissingReplay {
        instance_id: u64,
        stage: usize,
        position: usize,
    },
    #[error("oracle unavailable: {0}")]
    Unavailable(String),
}

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error(transparent)]
    Invalid(#[from] InvalidInput),
    #[error(transparent)]
    Contract(#[from] ContractError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
}

/// Raised by the greedy samplers when every element is already taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no candidates left to sub-sample")]
pub struct NoCandidates;
