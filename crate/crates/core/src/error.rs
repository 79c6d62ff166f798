use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("structural error: {0}")]
    Structure(String),

    #[error("degree error: {0}")]
    Degree(String),

    #[error("invalid specification: {0}")]
    Spec(String),

    #[error("integration failed at t = {time}: state became non-finite")]
    Integration { time: f64 },

    #[error("data collection failed: {0}")]
    Collection(String),

    #[error("degenerate residual bound: {0}")]
    DegenerateBound(String),

    #[error("degenerate region of attraction: {0}")]
    DegenerateRoa(String),

    #[error("solver did not return a solution (status {0})")]
    NoSolution(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
