use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric: max |m[i][j] - m[j][i]| = {max_asym:e} exceeds {tol:e}")]
    NotSymmetric { max_asym: f64, tol: f64 },

    #[error("eigendecomposition did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward called without a cached forward pass")]
    MissingForwardCache,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("need at least 2 nonempty classes, found {found}")]
    TooFewClasses { found: usize },

    #[error("between-class variance vanished (largest eigenvalue {lambda_max:e})")]
    VanishedBetweenClass { lambda_max: f64 },

    #[error("degenerate {what}: norm {norm:e}")]
    DegenerateNorm { what: &'static str, norm: f64 },

    #[error("degenerate series: {0}")]
    DegenerateSeries(String),

    #[error("bad magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("truncated data in {path} at byte offset {offset}: {detail}")]
    Truncated {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("NC1 threshold {threshold} not reached within {cap} epochs (best NC1 {best_nc1})")]
    ThresholdUnreachable {
        threshold: f64,
        cap: usize,
        best_nc1: f64,
    },

    #[error("malformed CSV at line {line}: {detail}")]
    Csv { line: u64, detail: String },

    #[error("config error in {path}: {detail}")]
    Config { path: PathBuf, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used for machine-parsable CLI errors and FFI codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::NotSquare { .. } => "shape",
            Error::NotSymmetric { .. } => "asymmetric",
            Error::NoConvergence { .. } => "no-convergence",
            Error::LabelOutOfRange { .. } => "label-range",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::MissingForwardCache => "missing-forward",
            Error::EmptyDataset => "empty-dataset",
            Error::TooFewClasses { .. } => "too-few-classes",
            Error::VanishedBetweenClass { .. } => "vanished-between-class",
            Error::DegenerateNorm { .. } => "degenerate-norm",
            Error::DegenerateSeries(_) => "degenerate-series",
            Error::BadMagic { .. } => "bad-magic",
            Error::Truncated { .. } => "truncated",
            Error::CountMismatch { .. } => "count-mismatch",
            Error::ThresholdUnreachable { .. } => "threshold-unreachable",
            Error::Csv { .. } => "csv",
            Error::Config { .. } => "config",
            Error::Io { .. } => "io",
        }
    }
}
