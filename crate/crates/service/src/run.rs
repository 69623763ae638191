use serde::{Deserialize, Serialize};

use qualcode_core::annotation::Codebook;
use qualcode_core::coder::TextResult;
use qualcode_core::metrics::{AlignmentReport, AnnotationLayer};

use crate::state::RunScope;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

/// Everything known about one coding run. Written to disk when the run ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub scope: RunScope,
    pub status: RunStatus,
    pub done: usize,
    pub total: usize,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub error: Option<String>,
    pub warning: Option<String>,
    pub provider: String,
    pub text_ids: Vec<String>,
    pub example_ids: Vec<String>,
    pub instruction_snapshot: Vec<String>,
    pub codebook: Codebook,
    pub results: Vec<TextResult>,
    /// Present for scopes whose texts carry human annotations.
    pub report: Option<AlignmentReport>,
    /// Human annotations of the run's texts as they were when it started.
    pub human_snapshot: AnnotationLayer,
}

/// The status fields without the bulky results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunProgress {
    pub run_id: String,
    pub scope: RunScope,
    pub status: RunStatus,
    pub done: usize,
    pub total: usize,
    pub error: Option<String>,
    pub warning: Option<String>,
}

impl From<&RunRecord> for RunProgress {
    fn from(r: &RunRecord) -> Self {
        Self {
            run_id: r.run_id.clone(),
            scope: r.scope,
            status: r.status,
            done: r.done,
            total: r.total,
            error: r.error.clone(),
            warning: r.warning.clone(),
        }
    }
}
