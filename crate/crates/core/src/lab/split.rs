//! Example / validation / test partition of the annotated texts.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SplitError {
    #[error("text {0:?} has no human annotation and cannot be an example")]
    UnannotatedExample(String),
    #[error("text {0:?} belongs to the test set")]
    TestSetViolation(String),
    #[error("the test set is frozen once validation metrics have been viewed")]
    TestSetFrozen,
    #[error("text {0:?} is listed twice")]
    Duplicate(String),
}

/// Few-shot examples and held-out test texts. The validation set is derived:
/// every annotated text that is neither an example nor a test text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    examples: Vec<String>,
    test: Vec<String>,
    test_frozen: bool,
}

impl DataSplit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn examples(&self) -> &[String] {
        &self.examples
    }

    pub fn test(&self) -> &[String] {
        &self.test
    }

    pub fn is_test_frozen(&self) -> bool {
        self.test_frozen
    }

    pub fn is_example(&self, id: &str) -> bool {
        self.examples.iter().any(|e| e == id)
    }

    pub fn is_test(&self, id: &str) -> bool {
        self.test.iter().any(|t| t == id)
    }

    /// Annotated ids (in the given order) that are neither examples nor test.
    pub fn validation<'a>(&self, annotated: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        annotated
            .into_iter()
            .filter(|id| !self.is_example(id) && !self.is_test(id))
            .map(str::to_string)
            .collect()
    }

    pub fn set_examples(&mut self, ids: &[String], is_annotated: impl Fn(&str) -> bool) -> Result<(), SplitError> {
        check_unique(ids)?;
        for id in ids {
            if self.is_test(id) {
                return Err(SplitError::TestSetViolation(id.clone()));
            }
            if !is_annotated(id) {
                return Err(SplitError::UnannotatedExample(id.clone()));
            }
        }
        self.examples = ids.to_vec();
        Ok(())
    }

    pub fn set_test(&mut self, ids: &[String]) -> Result<(), SplitError> {
        if self.test_frozen {
            return Err(SplitError::TestSetFrozen);
        }
        check_unique(ids)?;
        if let Some(id) = ids.iter().find(|id| self.is_example(id)) {
            return Err(SplitError::TestSetViolation(id.clone()));
        }
        self.test = ids.to_vec();
        Ok(())
    }

    /// Called when validation metrics are first shown.
    pub fn freeze_test(&mut self) {
        self.test_frozen = true;
    }

    /// Drops an id from the example list, e.g. when its annotation is deleted.
    pub fn forget_example(&mut self, id: &str) {
        self.examples.retain(|e| e != id);
    }
}

fn check_unique(ids: &[String]) -> Result<(), SplitError> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(SplitError::Duplicate(id.clone()));
        }
    }
    Ok(())
}
