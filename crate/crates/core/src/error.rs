use thiserror::Error;

/// Errors produced by the steady-state engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid chain: {0}")]
    InvalidChain(String),
    #[error("invalid drive: {0}")]
    InvalidDrive(String),
    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),
    #[error("steady state is not unique: numerical nullspace has dimension {nullity}")]
    DegenerateNess { nullity: usize },
    #[error("chain of {n} sites exceeds the exact-diagonalization bound of {max}")]
    TooLarge { n: usize, max: usize },
    #[error("not a density matrix: {0}")]
    NotADensityMatrix(String),
    #[error("density operator has zero norm")]
    ZeroState,
    #[error("log-amplitude evaluated to a non-finite value")]
    NonFiniteAmplitude,
    #[error("sample weights sum to zero")]
    ZeroWeightSum,
    #[error("covariance system could not be solved")]
    SingularS,
    #[error("backtracking overflow: Lipschitz estimate reached {lipschitz:e}")]
    BacktrackOverflow { lipschitz: f64 },
    #[error("exponential fit diverged for every seed")]
    FitDiverged,
    #[error("incompatible runs: {0}")]
    IncompatibleRuns(String),
    #[error("linear algebra failure: {0}")]
    Linalg(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
