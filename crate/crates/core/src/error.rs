use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("column `{column}` is declared more than once")]
    DuplicateColumn { column: String },

    #[error("more than one column has role {role}: `{first}` and `{second}`")]
    DuplicateRole {
        role: &'static str,
        first: String,
        second: String,
    },

    #[error("no column has role {0}")]
    MissingRole(&'static str),

    #[error("treatment column `{column}` has value {value} at row {row}; expected 0 or 1")]
    NonBinaryTreatment { column: String, row: usize, value: f64 },

    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("value {value} lies outside the bin range [{low}, {high}]")]
    OutOfRange { value: f64, low: f64, high: f64 },

    #[error("all values are identical ({0}); equal-width bins have zero width, use quantile binning or a single bin")]
    ZeroWidth(f64),

    #[error("training diverged at epoch {epoch} with learning rate {learning_rate}: loss is {loss}")]
    Diverged {
        epoch: usize,
        learning_rate: f64,
        loss: f64,
    },

    #[error("covariate combination {0:?} was not observed during fitting")]
    UnseenCovariates(Vec<f64>),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("cannot form {k} clusters from {distinct} distinct points")]
    TooFewDistinctPoints { k: usize, distinct: usize },

    #[error("micro-state {0} has zero marginal probability")]
    ZeroProbabilityState(usize),

    #[error("invalid probability table: {0}")]
    InvalidDistribution(String),

    #[error("cell of size {size} exceeds the exact-mode limit of {limit} vertices")]
    CellTooLarge { size: usize, limit: usize },

    #[error("total edge weight is zero")]
    ZeroWeight,

    #[error("design matrix is rank deficient; collinear columns: {0:?}")]
    RankDeficient(Vec<String>),

    #[error("perfect separation: coefficients diverge for {0:?}")]
    Separation(Vec<String>),

    #[error("no {0} units available")]
    NoUnits(&'static str),

    #[error("stratum {stratum} is empty: {detail}")]
    EmptyStratum { stratum: String, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
