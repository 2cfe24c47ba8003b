use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("numeric error in {0}")]
    Numeric(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("point ({lon}, {lat}) lies outside the study region")]
    OutOfRegion { lon: f64, lat: f64 },
    #[error("region graph is empty")]
    EmptyGraph,
    #[error("invalid state: {0}")]
    State(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("target mask of {len} positions does not fit a sequence of {n}")]
    MaskTooLarge { len: usize, n: usize },
    #[error("every position of a length-{0} sequence is a target; no context left")]
    DegenerateContext(usize),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by the input data rather than by the program.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Data(_)
                | Error::Parse { .. }
                | Error::OutOfRegion { .. }
                | Error::EmptyGraph
                | Error::Format(_)
                | Error::Io(_)
        )
    }
}
