use std::path::PathBuf;

use empathic_core::knowledge::Relation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// One rejected dataset record.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RecordDiagnostic {
    pub line: usize,
    pub conversation_id: Option<String>,
    pub reason: String,
}

impl std::fmt::Display for RecordDiagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.conversation_id {
            Some(id) => write!(f, "line {} (conversation {id}): {}", self.line, self.reason),
            None => write!(f, "line {}: {}", self.line, self.reason),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Core(#[from] empathic_core::Error),
    #[error("{path}: {} invalid record(s); first: {}", diagnostics.len(), diagnostics[0])]
    Dataset {
        path: PathBuf,
        diagnostics: Vec<RecordDiagnostic>,
    },
    #[error("backend {backend}: {message}")]
    Backend { backend: String, message: String },
    #[error("{relation} inference failed: {source}")]
    Relation {
        relation: Relation,
        #[source]
        source: Box<Error>,
    },
    #[error("no fixture entry in {backend} for {what}")]
    FixtureMiss { backend: String, what: String },
    #[error("replay miss: no recording for request_key {request_key}")]
    ReplayMiss { request_key: String },
    #[error("credential missing: environment variable {var} is not set")]
    MissingCredential { var: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing {what}: {path}")]
    MissingArtifact { what: String, path: PathBuf },
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error("sample ids differ; only in A: {only_a:?}; only in B: {only_b:?}")]
    SampleIdMismatch { only_a: Vec<String>, only_b: Vec<String> },
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn backend(backend: &str, message: impl Into<String>) -> Self {
        Error::Backend {
            backend: backend.to_string(),
            message: message.into(),
        }
    }

    pub fn stage(stage: &str, source: Error) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(source),
        }
    }
}
