use thiserror::Error;

pub type Result<T> = std::result::Result<T, OsdError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OsdError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("SVD did not converge after {iterations} sweeps")]
    NonConvergence { iterations: usize },

    #[error("degenerate null-space basis: numerical rank {rank} leaves no null space in dimension {dim}")]
    DegenerateBasis { rank: usize, dim: usize },

    #[error("cosine similarity undefined for two zero vectors")]
    UndefinedSimilarity,

    #[error("structural mismatch: {0}")]
    Structural(String),

    #[error("cannot merge an empty adapter list")]
    EmptyMerge,

    #[error("operation not supported for the {0} variant")]
    UnsupportedVariant(&'static str),

    #[error("loss mask selects no positions")]
    EmptyLoss,

    #[error("training corpus is empty")]
    EmptyCorpus,

    #[error("non-finite gradient at {site}")]
    NonFinite { site: String },

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("requested {requested} facts but only {capacity} (subject, relation) pairs exist")]
    Capacity { requested: usize, capacity: usize },

    #[error("no instance lists more than one source document, so there are no relevant pairs")]
    EmptyRelevant,

    #[error("no adapter for document {0}")]
    MissingAdapter(String),
}

impl OsdError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        OsdError::Shape {
            op,
            detail: detail.into(),
        }
    }
}
