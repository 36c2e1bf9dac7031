use thiserror::Error;

pub type Result<T, E = LuqError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LuqError {
    #[error("not a LUQC container")]
    BadMagic,
    #[error("unsupported container version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("malformed container header: {0}")]
    Header(String),
    #[error("duplicate tensor name `{0}`")]
    DuplicateTensor(String),
    #[error("tensor `{name}`: {reason}")]
    TensorMismatch { name: String, reason: String },
    #[error("overlapping payloads for tensors `{0}` and `{1}`")]
    Overlap(String, String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numeric overflow in layer {0}")]
    NumericOverflow(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("grid too small: {0}")]
    GridTooSmall(String),
    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),
    #[error("singular damped Hessian (pivot {pivot} at column {column})")]
    SingularHessian { column: usize, pivot: f64 },
    #[error("budget infeasible: {0}")]
    BudgetInfeasible(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LuqError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        LuqError::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        LuqError::Shape(msg.into())
    }

    /// Errors caused by bad inputs or arguments rather than by a failure
    /// while computing. The CLI maps these to exit code 2.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            LuqError::NumericOverflow(_) | LuqError::SingularHessian { .. }
        )
    }
}
