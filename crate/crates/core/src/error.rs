use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("sequence is empty")]
    EmptySequence,

    #[error("line {line:?} encodes to length {len}, maximum is {max}")]
    TooLong {
        line: String,
        len: usize,
        max: usize,
    },

    #[error("symbol id {id} is out of range for a vocabulary of size {size}")]
    SymbolOutOfRange { id: u32, size: usize },

    #[error("sequence length {len} is outside 1..={max}")]
    LengthOutOfRange { len: usize, max: usize },

    #[error("invalid n-gram order {0}, must be at least 1")]
    InvalidOrder(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("forward cache does not match: {0}")]
    StaleCache(String),

    #[error("length {len} needs {required} enumerated sequences, budget is {budget}")]
    EnumerationBudget {
        len: usize,
        required: u128,
        budget: u128,
    },

    #[error("length {0} has zero prior probability")]
    ZeroLengthPrior(usize),

    #[error("sequence has zero probability under both the model and the noise distribution")]
    ImpossibleSequence,

    #[error("non-finite gradient at step {step} in parameter block {block}")]
    NonFiniteGradient { step: usize, block: String },

    #[error("reference transcript is empty")]
    EmptyReference,

    #[error("utterance ids differ: without reference {missing_reference:?}, without n-best {missing_nbest:?}")]
    IdMismatch {
        missing_reference: Vec<String>,
        missing_nbest: Vec<String>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
