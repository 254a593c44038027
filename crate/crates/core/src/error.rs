use thiserror::Error;

pub type Result<T> = std::result::Result<T, SemError>;

#[derive(Debug, Error)]
pub enum SemError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index {index} out of range (size {size})")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("equation {equation}: projected Gram matrix is singular")]
    SingularGram { equation: usize },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("cyclic subgraph; effects undefined ({0})")]
    CyclicGraph(String),

    #[error("unknown {kind} '{name}'")]
    Unknown { kind: &'static str, name: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SemError {
    /// True for failures of the numerical machinery rather than of the input data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            SemError::SingularGram { .. } | SemError::Singular(_)
        )
    }
}
