use thiserror::Error;

use qualcode_core::annotation::{AnnotationError, CorpusError};
use qualcode_core::coder::CoderError;
use qualcode_core::lab::{LabError, SplitError};
use qualcode_core::metrics::MetricsError;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown project {0:?}")]
    UnknownProject(String),
    #[error("project {0:?} already exists")]
    ProjectExists(String),
    #[error("unknown text {0:?}")]
    UnknownText(String),
    #[error("unknown code {0:?}")]
    UnknownCode(String),
    #[error("unknown run {0:?}")]
    UnknownRun(String),
    #[error("run {0:?} has not finished")]
    RunIncomplete(String),
    #[error("run {0:?} failed: {1}")]
    RunFailed(String, String),
    #[error("run {0:?} is already in progress for this project")]
    RunInProgress(String),
    #[error("no few-shot examples selected")]
    NoExamples,
    #[error("invalid project id {0:?}")]
    InvalidProjectId(String),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Coder(#[from] CoderError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Lab(#[from] LabError),
    #[error("storage: {0}")]
    Storage(String),
}

impl ServiceError {
    /// Stable machine-readable name used in API error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnknownProject(_) => "UnknownProject",
            Self::ProjectExists(_) => "ProjectExists",
            Self::UnknownText(_) => "UnknownText",
            Self::UnknownCode(_) => "UnknownCode",
            Self::UnknownRun(_) => "UnknownRun",
            Self::RunIncomplete(_) => "RunIncomplete",
            Self::RunInProgress(_) => "RunInProgress",
            Self::RunFailed(..) => "RunFailed",
            Self::NoExamples => "NoExamples",
            Self::InvalidProjectId(_) => "InvalidProjectId",
            Self::Annotation(AnnotationError::Overlap { .. }) => "OverlapRejected",
            Self::Annotation(AnnotationError::InvalidSpan { .. }) => "InvalidSpan",
            Self::Annotation(AnnotationError::InvalidCode { .. }) => "InvalidCode",
            Self::Annotation(AnnotationError::MalformedMarkup { .. }) => "MalformedMarkup",
            Self::Corpus(CorpusError::DuplicateId(_)) => "DuplicateId",
            Self::Corpus(_) => "CorpusError",
            Self::Split(SplitError::UnannotatedExample(_)) => "UnannotatedExample",
            Self::Split(SplitError::TestSetViolation(_)) => "TestSetViolation",
            Self::Split(SplitError::TestSetFrozen) => "TestSetFrozen",
            Self::Split(SplitError::Duplicate(_)) => "DuplicateId",
            Self::Coder(_) => "RunAborted",
            Self::Metrics(_) => "MetricsError",
            Self::Lab(_) => "AnalysisError",
            Self::Storage(_) => "StorageError",
        }
    }
}

impl From<std::io::Error> for ServiceError {
    fn from(e: std::io::Error) -> Self {
        Self::Storage(e.to_string())
    }
}

impl From<serde_json::Error> for ServiceError {
    fn from(e: serde_json::Error) -> Self {
        Self::Storage(e.to_string())
    }
}
