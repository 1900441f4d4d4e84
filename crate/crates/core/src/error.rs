use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected configuration: {0}")]
    Config(String),
    #[error("curve extinct at t = {t}")]
    Extinction { t: f64 },
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("conjugate gradients did not converge in {iterations} iterations (residual {residual:e})")]
    CgDiverged { iterations: usize, residual: f64 },
    #[error("step aborted after {halvings} dt halvings at t = {t}")]
    StepAborted { t: f64, halvings: usize },
    #[error("potential does not connect the wells: {0}")]
    Disconnected(String),
    #[error("no level crossing found: {0}")]
    NoCrossing(String),
    #[error("multiple level crossings: {0}")]
    MultipleCrossings(String),
    #[error("eroded bulk is empty: {0}")]
    EmptyBulk(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}
