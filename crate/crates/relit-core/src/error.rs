use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("out of bounds: {0}")]
    Bounds(String),
    #[error("degenerate lighting: {0}")]
    DegenerateLighting(String),
    #[error("degenerate scale: {0}")]
    DegenerateScale(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
