use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid offspring distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid tree kind: {0}")]
    InvalidTree(String),
    #[error("invalid vertex {0}")]
    InvalidVertex(String),
    #[error("vertex cap exceeded: {count} vertices materialized (cap {cap})")]
    VertexCapExceeded { count: usize, cap: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("weight schedule precondition violated: {0}")]
    Schedule(String),
    #[error("lemma hypothesis not met: {0}")]
    Hypothesis(String),
    #[error("estimate refused: {0}")]
    Unstable(String),
    #[error("audit failure: {0}")]
    AuditFailure(String),
    #[error("monotonicity violated: {0}")]
    NonMonotone(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("spec file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
