use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure category, used by the command-line front-end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad input: malformed files, out-of-domain arguments, invalid parameters.
    Input,
    /// The request is well-formed but cannot be satisfied (memory, bounds).
    Infeasible,
    /// A numerical procedure failed to produce a trustworthy answer.
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("loss bracket is non-positive ({bracket:e}) at N={n_dense:e}, D={d_tokens:e}, E={experts}")]
    NonPositiveBracket {
        bracket: f64,
        n_dense: f64,
        d_tokens: f64,
        experts: f64,
    },

    #[error(
        "insufficient memory: {required_bytes:e} B of weights on {gpus} GPU(s) with \
         {available_bytes:e} B; at least {min_gpus} GPU(s) needed"
    )]
    InsufficientMemory {
        gpus: u32,
        required_bytes: f64,
        available_bytes: f64,
        min_gpus: u64,
    },

    #[error("model too large for hardware: needs {required_bytes:e} B, at most {available_bytes:e} B over {max_gpus} GPU(s)")]
    ModelTooLarge {
        required_bytes: f64,
        available_bytes: f64,
        max_gpus: u32,
    },

    #[error("unservable at {gpus} GPU(s): throughput is zero")]
    Unservable { gpus: u32 },

    #[error("latency profile has no samples for stage {stage} on {gpus} GPU(s)")]
    MissingProfileSlice { stage: String, gpus: u32 },

    #[error("invalid latency profile: {0}")]
    InvalidProfile(String),

    #[error("interpolated latency is non-positive ({latency:e} s) for stage {stage}, model_bytes={model_bytes:e}, batch={batch:e}")]
    NonPositiveLatency {
        stage: String,
        model_bytes: f64,
        batch: f64,
        latency: f64,
    },

    #[error("search bounds too tight: minimizer at the {endpoint} endpoint N={n:e}")]
    SearchBoundsTooTight { endpoint: &'static str, n: f64 },

    #[error("loss is not monotone on the under-trained branch near N={n:e}")]
    NonMonotoneBranch { n: f64 },

    #[error("quality bound unreachable: best loss {best_loss} exceeds target {target_loss} by {gap:e}")]
    QualityBoundUnreachable {
        target_loss: f64,
        best_loss: f64,
        gap: f64,
    },

    #[error("cost bound unreachable: cheapest candidate costs {best_cost:e} per token, bound is {bound:e}")]
    CostBoundUnreachable { bound: f64, best_cost: f64 },

    #[error("root not bracketed: {0}")]
    NotBracketed(String),

    #[error("fit failed: every start diverged ({starts} start(s))")]
    AllStartsDiverged { starts: usize },

    #[error("{failed} of {total} verification case(s) out of tolerance")]
    VerificationFailed { failed: usize, total: usize },

    #[error("no training runs supplied")]
    NoRuns,

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_)
            | Error::InvalidParams(_)
            | Error::InvalidProfile(_)
            | Error::MissingProfileSlice { .. }
            | Error::NoRuns
            | Error::Parse(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => ErrorKind::Input,
            Error::InsufficientMemory { .. }
            | Error::ModelTooLarge { .. }
            | Error::Unservable { .. }
            | Error::QualityBoundUnreachable { .. }
            | Error::CostBoundUnreachable { .. } => ErrorKind::Infeasible,
            Error::NonPositiveBracket { .. }
            | Error::NonPositiveLatency { .. }
            | Error::SearchBoundsTooTight { .. }
            | Error::NonMonotoneBranch { .. }
            | Error::NotBracketed(_)
            | Error::AllStartsDiverged { .. }
            | Error::VerificationFailed { .. } => ErrorKind::Numeric,
        }
    }
}
