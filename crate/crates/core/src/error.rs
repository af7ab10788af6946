use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),

    #[error("invalid catalog entry `{feature}`: {reason}")]
    InvalidCatalog { feature: String, reason: String },

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("need at least {required} candidate features, found {found}")]
    TooFewFeatures { required: usize, found: usize },

    #[error("operator {0} requires a feature score table")]
    MissingScoreTable(String),

    #[error("rewrite is not a subset of its source EHR: {0}")]
    NotASubset(String),

    #[error("loss became non-finite at {context}")]
    NonFiniteLoss { context: String },

    #[error("sampling fraction {fraction} of {population} patients selects nobody")]
    EmptySample { fraction: f64, population: usize },

    #[error("patient `{patient}` from a held-out split appears in fitting set `{set}`")]
    Leakage { set: String, patient: String },

    #[error("infeasible cohort spec: {0}")]
    InfeasibleSpec(String),

    #[error("patient `{patient}` lacks latent attribute `{attribute}`")]
    MissingAttribute { patient: String, attribute: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error at line {line}: missing or invalid `{path}`")]
    Schema { line: usize, path: String },

    #[error("invalid config `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("external generator unavailable: {0}")]
    EndpointUnavailable(String),

    #[error("malformed generator response: {0}")]
    MalformedResponse(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
