use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("numeric error at index {index}: {message}")]
    Numeric { index: usize, message: String },

    #[error("state error: {0}")]
    State(String),

    #[error("active-set mismatch on {} key(s): {}", keys.len(), format_keys(keys))]
    Alignment { keys: Vec<[i32; 4]> },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_keys(keys: &[[i32; 4]]) -> String {
    let shown: Vec<String> = keys
        .iter()
        .take(8)
        .map(|k| format!("({},{},{},{})", k[0], k[1], k[2], k[3]))
        .collect();
    if keys.len() > 8 {
        format!("{} ...", shown.join(" "))
    } else {
        shown.join(" ")
    }
}

impl Error {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format { offset, message: message.into() }
    }

    pub(crate) fn shape(message: impl Into<String>) -> Self {
        Error::Shape(message.into())
    }

    /// Process exit code for the command-line tool: 3 for numeric failures,
    /// 2 for every input, config or format problem.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric { .. } => 3,
            _ => 2,
        }
    }
}
