use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("network state error: {0}")]
    State(String),

    #[error("non-finite value in layer {layer}: {msg}")]
    Numeric { layer: usize, msg: String },

    #[error("numeric error: {0}")]
    NonFinite(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("transform singularity at y = {0}")]
    Singularity(f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("simulation failed at theta = {theta:?}: {msg}")]
    Simulation { theta: Vec<f64>, msg: String },

    #[error("unsupported dimension {0} (grids need d in {{1, 2}})")]
    UnsupportedDimension(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Configuration problems are reported with a distinct CLI exit code.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
