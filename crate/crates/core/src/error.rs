use thiserror::Error;

use crate::space::Violation;

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("parameter space must declare at least one parameter")]
    Empty,
    #[error("duplicate parameter name {0:?}")]
    DuplicateName(String),
    #[error("parameter {param:?}, field {field:?}: {reason}")]
    Field {
        param: String,
        field: String,
        reason: String,
    },
    #[error("invalid setting: {}", join_violations(.0))]
    InvalidSetting(Vec<Violation>),
    #[error("coordinate {value} at dim {dim} lies outside [0, 1]")]
    CoordinateOutOfRange { dim: usize, value: f64 },
    #[error("expected {expected} coordinates, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid box interval [{lo}, {hi}] at dim {dim}")]
    InvalidBox { dim: usize, lo: f64, hi: f64 },
    #[error("radius must be positive, got {0}")]
    InvalidRadius(f64),
    #[error("space file: {0}")]
    Parse(String),
    #[error("unsupported space file format_version {0}")]
    UnsupportedVersion(u32),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl SpaceError {
    pub(crate) fn field(
        param: impl Into<String>,
        field: impl Into<String>,
        reason: impl Into<String>,
    ) -> Self {
        SpaceError::Field {
            param: param.into(),
            field: field.into(),
            reason: reason.into(),
        }
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("design size must be at least 1")]
    EmptyDesign,
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid optimizer parameter {name}: {reason}")]
    InvalidParams { name: &'static str, reason: String },
    #[error("observed point does not match the last proposal")]
    PointMismatch,
    #[error("observe called without a pending proposal")]
    NoPendingProposal,
    #[error("budget must be at least 1")]
    ZeroBudget,
    #[error("baseline evaluation failed: {0}")]
    BaselineFailed(String),
    #[error("resumed record {index} diverges from the replayed proposal")]
    ResumeDiverged { index: usize },
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

#[derive(Debug, Error)]
pub enum SurfaceError {
    #[error("unknown surface {name:?}; available: {}", .available.join(", "))]
    Unknown {
        name: String,
        available: Vec<&'static str>,
    },
    #[error("grid of {size} points exceeds the cap of {cap}")]
    GridTooLarge { size: u128, cap: u64 },
    #[error("grid resolution must be at least 2 for real dimensions")]
    BadResolution,
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("template placeholder {0:?} does not name a parameter")]
    UnknownPlaceholder(String),
    #[error("template: unbalanced brace at byte {0}")]
    UnbalancedBrace(usize),
    #[error("no renderer value for parameter {0:?}")]
    MissingValue(String),
    #[error("metric rule {name:?}: {reason}")]
    BadRule { name: String, reason: String },
    #[error("metric {0:?} not found in output")]
    MissingObjective(String),
    #[error("metric {name:?} matched {count} times")]
    Ambiguous { name: String, count: usize },
    #[error("metric {name:?}: cannot parse number from line {line:?}")]
    Unparsable { name: String, line: String },
    #[error("trajectory record {line} is corrupt: {reason}")]
    CorruptRecord { line: usize, reason: String },
    #[error("{path}: {cause}")]
    Io { path: String, cause: std::io::Error },
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl AdapterError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        AdapterError::Io {
            path: path.as_ref().display().to_string(),
            cause: source,
        }
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("fatal system manipulator error: {0}")]
    Fatal(String),
    #[error("budget exhausted ({0} tests)")]
    BudgetExhausted(u64),
    #[error("tuning aborted after {} tests: {cause}", .partial.trajectory.len())]
    Aborted {
        cause: String,
        partial: Box<crate::search::TuningReport>,
    },
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("comparison invalid: budgets differ ({a} vs {b})")]
    BudgetMismatch { a: u64, b: u64 },
    #[error("analysis invalid: objectives differ ({a:?} vs {b:?})")]
    ObjectiveMismatch { a: String, b: String },
    #[error("analysis invalid: need at least 2 candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("metric {0:?} missing from one of the bundles")]
    MissingMetric(String),
}
