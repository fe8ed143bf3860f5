use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// The observations have zero probability under the structural zeros of
    /// the transition matrix. This signals corrupt data or an inconsistent
    /// hidden path; it must never occur inside a correct Gibbs sweep.
    #[error("observations have zero likelihood at local time {time}")]
    ZeroLikelihood { time: usize },

    #[error("state space too large to enumerate ({states}^{len} paths)")]
    TooLarge { states: usize, len: usize },

    #[error("unknown disease kind `{0}` (expected bartonella, babesia, cowpox or anaplasma)")]
    UnknownKind(String),

    #[error("covariate `{0}` is missing from the record")]
    MissingCovariate(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("duplicate capture of vole `{tag}` at lunar month {lm}")]
    DuplicateCapture { tag: String, lm: u32 },

    #[error("inconsistent `{field}` for vole `{tag}`")]
    InconsistentRecord { tag: String, field: &'static str },

    #[error("vole `{0}` has no observed weight")]
    NoWeightObserved(String),

    #[error("bad prior file: {0}")]
    BadPriorFile(String),

    #[error("chains are degenerate (zero within-chain variance)")]
    DegenerateChains,

    #[error("trace is empty after burn-in")]
    EmptyTrace,

    #[error("too few observations: {got} < {needed}")]
    TooFewObservations { needed: usize, got: usize },

    #[error("only {found} fully observed captures available, {needed} requested")]
    InsufficientFullyObserved { needed: usize, found: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
