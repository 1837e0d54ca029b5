use gradcore::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("attention block {block} outside 0..{count}")]
    BlockIndex { block: usize, count: usize },
    #[error("unknown texture kind `{0}`")]
    UnknownTexture(String),
    #[error("unknown transfer method `{0}`")]
    UnknownMethod(String),
    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },
    #[error("non-finite latent at timestep {t}")]
    NonFiniteLatent { t: usize },
    #[error("optimizer diverged at timestep {t} (inner step {inner})")]
    OptimizerDiverged { t: usize, inner: usize },
    #[error("model has not been trained")]
    Untrained,
    #[error("malformed container: {0}")]
    Format(String),
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
