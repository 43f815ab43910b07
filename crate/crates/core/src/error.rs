use thiserror::Error;

pub type Result<T, E = FmtError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FmtError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape {shape:?} needs {expected} elements, got {actual}")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("fully masked row {row}")]
    FullyMaskedRow { row: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("vocabulary error: {table} id {id} at index {index} out of range (limit {limit})")]
    Vocabulary {
        table: &'static str,
        id: usize,
        index: usize,
        limit: usize,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error for record {id}: {msg}")]
    Validation { id: String, msg: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint incompatible at tensor `{name}`: {msg}")]
    Compatibility { name: String, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("encoder layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<FmtError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FmtError {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        FmtError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
