use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("custom op `{op}`: {msg}")]
    Custom { op: &'static str, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

#[derive(Debug, Error)]
pub enum QpError {
    #[error("quadratic cost is not positive semidefinite (min pivot {0:e})")]
    NotPsd(f64),
    #[error("interior point hit iteration cap {iterations}: {residuals:?}")]
    IterationCap {
        iterations: usize,
        residuals: KktResiduals,
    },
    #[error("degenerate KKT system: {0}")]
    Degenerate(String),
    #[error("non-finite QP data: {0}")]
    NonFinite(&'static str),
    #[error("qp dimensions: {0}")]
    Dimensions(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("temperature {0} is outside the physical regime (T must be > 0)")]
    NonPhysical(f64),
    #[error("integrator produced a non-finite state; last finite state {last_finite:?}")]
    Diverged { last_finite: [f64; 3] },
    #[error("price series: {0}")]
    Prices(String),
    #[error("non-finite loss in {0}")]
    NonFiniteLoss(String),
    #[error("config `{path}`: {msg}")]
    Config { path: String, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
