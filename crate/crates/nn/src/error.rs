use thiserror::Error;

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{layer}: expected input shape {expected}, got {got:?}")]
    Shape {
        layer: String,
        expected: String,
        got: [usize; 4],
    },
    #[error("{layer}: backward called without a cached training forward pass")]
    NoCache { layer: String },
    #[error("cannot concatenate {left:?} and {right:?}: spatial sizes differ")]
    Concat { left: [usize; 4], right: [usize; 4] },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: [usize; 4] },
    #[error("parameter {name}: {msg}")]
    Param { name: String, msg: String },
}
