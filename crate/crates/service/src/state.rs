//! Project state and the change log that reproduces it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use qualcode_core::annotation::{Annotation, Codebook, SourceText};
use qualcode_core::lab::DataSplit;
use qualcode_core::metrics::{AnnotationLayer, ReportSummary};

use crate::error::ServiceError;

/// Which texts a run codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunScope {
    /// Annotated texts that are neither examples nor test.
    Validation,
    /// Texts without a human annotation.
    Remainder,
    Test,
}

impl std::str::FromStr for RunScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "validation" => Ok(Self::Validation),
            "remainder" => Ok(Self::Remainder),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown scope {other:?} (expected validation, remainder or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub run_id: String,
    pub scope: RunScope,
    pub example_ids: Vec<String>,
    pub instruction_snapshot: Vec<String>,
    pub summary: ReportSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectState {
    pub project_id: String,
    pub corpus: Vec<SourceText>,
    pub human_layer: AnnotationLayer,
    pub llm_layers: BTreeMap<String, AnnotationLayer>,
    pub split: DataSplit,
    pub custom_instructions: Vec<String>,
    /// Human codes in first-use order, with optional descriptions.
    pub codebook: Codebook,
    pub iteration_history: Vec<IterationRecord>,
}

/// A state mutation. The log of these replays to the saved state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Operation {
    CreateProject {
        project_id: String,
        corpus: Vec<SourceText>,
    },
    UpsertAnnotation {
        annotation: Annotation,
    },
    RemoveAnnotation {
        text_id: String,
    },
    DescribeCode {
        label: String,
        description: String,
    },
    SetExamples {
        text_ids: Vec<String>,
    },
    SetInstructions {
        lines: Vec<String>,
    },
    SetTestSet {
        text_ids: Vec<String>,
    },
    FreezeTestSet,
    RecordRun {
        run_id: String,
        layer: AnnotationLayer,
        iteration: Option<IterationRecord>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeLogEntry {
    pub seq: u64,
    pub timestamp: String,
    pub actor: String,
    #[serde(flatten)]
    pub operation: Operation,
}

impl ProjectState {
    pub fn new(project_id: impl Into<String>, corpus: Vec<SourceText>) -> Self {
        Self {
            project_id: project_id.into(),
            corpus,
            human_layer: AnnotationLayer::new(),
            llm_layers: BTreeMap::new(),
            split: DataSplit::new(),
            custom_instructions: Vec::new(),
            codebook: Codebook::new(),
            iteration_history: Vec::new(),
        }
    }

    pub fn text(&self, id: &str) -> Option<&SourceText> {
        self.corpus.iter().find(|t| t.id == id)
    }

    /// Annotated text ids in corpus order.
    pub fn annotated_ids(&self) -> Vec<&str> {
        self.corpus
            .iter()
            .filter(|t| self.human_layer.contains_key(&t.id))
            .map(|t| t.id.as_str())
            .collect()
    }

    pub fn validation_ids(&self) -> Vec<String> {
        self.split.validation(self.annotated_ids())
    }

    pub fn scope_ids(&self, scope: RunScope) -> Vec<String> {
        match scope {
            RunScope::Validation => self.validation_ids(),
            RunScope::Remainder => self
                .corpus
                .iter()
                .filter(|t| !self.human_layer.contains_key(&t.id))
                .map(|t| t.id.clone())
                .collect(),
            RunScope::Test => {
                let test = self.split.test();
                self.corpus
                    .iter()
                    .filter(|t| test.contains(&t.id))
                    .map(|t| t.id.clone())
                    .collect()
            }
        }
    }

    /// Checks `op` and applies it. On error the state is unchanged.
    pub fn apply(&mut self, op: &Operation) -> Result<(), ServiceError> {
        match op {
            Operation::CreateProject { project_id, corpus } => {
                *self = ProjectState::new(project_id.clone(), corpus.clone());
            }
            Operation::UpsertAnnotation { annotation } => {
                let text = self
                    .text(&annotation.text_id)
                    .ok_or_else(|| ServiceError::UnknownText(annotation.text_id.clone()))?;
                annotation.validate_against(text)?;
                for label in annotation.code_set() {
                    self.codebook.insert(label, "");
                }
                self.human_layer.insert(annotation.text_id.clone(), annotation.clone());
            }
            Operation::RemoveAnnotation { text_id } => {
                if self.human_layer.remove(text_id).is_none() {
                    return Err(ServiceError::UnknownText(text_id.clone()));
                }
                self.split.forget_example(text_id);
            }
            Operation::DescribeCode { label, description } => {
                if !self.codebook.contains(label) {
                    return Err(ServiceError::UnknownCode(label.clone()));
                }
                let mut book = Codebook::new();
                for entry in self.codebook.entries() {
                    let d = if &entry.label == label { description } else { &entry.description };
                    book.insert(entry.label.clone(), d.clone());
                }
                self.codebook = book;
            }
            Operation::SetExamples { text_ids } => {
                for id in text_ids {
                    if self.text(id).is_none() {
                        return Err(ServiceError::UnknownText(id.clone()));
                    }
                }
                let layer = &self.human_layer;
                self.split.set_examples(text_ids, |id| layer.contains_key(id))?;
            }
            Operation::SetInstructions { lines } => {
                self.custom_instructions = lines.clone();
            }
            Operation::SetTestSet { text_ids } => {
                for id in text_ids {
                    if self.text(id).is_none() {
                        return Err(ServiceError::UnknownText(id.clone()));
                    }
                }
                self.split.set_test(text_ids)?;
            }
            Operation::FreezeTestSet => self.split.freeze_test(),
            Operation::RecordRun {
                run_id,
                layer,
                iteration,
            } => {
                self.llm_layers.insert(run_id.clone(), layer.clone());
                if let Some(it) = iteration {
                    self.iteration_history.push(it.clone());
                }
            }
        }
        Ok(())
    }

    /// Rebuilds a state from its change log.
    pub fn replay<'a>(entries: impl IntoIterator<Item = &'a ChangeLogEntry>) -> Result<Self, ServiceError> {
        let mut state = ProjectState::new("", Vec::new());
        for entry in entries {
            state.apply(&entry.operation)?;
        }
        Ok(state)
    }
}
