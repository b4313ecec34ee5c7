use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("graph: {0}")]
    Graph(String),
    #[error("data: {0}")]
    Data(String),
    #[error("format: {0}")]
    Format(String),
    #[error("config: {0}")]
    Config(String),
    #[error("training diverged at episode {episode} (episode seed {seed}): loss = {loss}")]
    Diverged { episode: usize, seed: u64, loss: f64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}
