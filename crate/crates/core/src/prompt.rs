//! Few-shot inductive coding prompt.
//!
//! Section order: preamble, custom instructions, code descriptions, worked
//! examples, and finally the text to code under `ACTUAL INPUT:`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{serialize_annotated, Annotation, Codebook, SourceText};

pub const BASE_INSTRUCTIONS: &str = "You are an expert qualitative researcher. You are given a text to code inductively. Please carry out the following task:
- Respond by repeating the original text, but highlighting the coded statements by surrounding the statements with double asterisks, as if they were bolded text in a Markdown document.
- Include the associated code(s) immediately after the statement, separated by a semicolon and enclosed in <sup></sup> tags, as if they were superscript text in a Markdown document.
- Preserve exact formatting of the original text. Do not correct typos or remove unnecessary spaces.";

pub const CODEBOOK_HEADER: &str =
    "Some examples of codes in the format \"{code}: {description}\". Please create new codes when needed:";

pub const EXAMPLES_HEADER: &str = "Below, I first give you examples of the output you should produce given an example input. After that, I give you the actual input to process. The input may come from a thread of texts, and any preceding texts are added as context (labelled CONTEXT). Your task is to code only the last text (labelled TEXT).";

pub const ACTUAL_INPUT: &str = "ACTUAL INPUT:";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("prompt needs ~{estimated} tokens but the budget is {budget}")]
    PromptTooLong { estimated: usize, budget: usize },
}

/// Token budget, estimated as `chars / chars_per_token`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBudget {
    pub max_tokens: usize,
    pub chars_per_token: usize,
}

impl Default for PromptBudget {
    fn default() -> Self {
        Self {
            max_tokens: 128_000,
            chars_per_token: 4,
        }
    }
}

impl PromptBudget {
    pub fn estimate(&self, prompt: &str) -> usize {
        prompt.chars().count().div_ceil(self.chars_per_token.max(1))
    }
}

/// A human-annotated text shown to the model as a worked example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub text: SourceText,
    pub annotation: Annotation,
}

#[derive(Debug, Clone)]
pub struct PromptSpec<'a> {
    pub base_instructions: &'a str,
    pub custom_instructions: &'a [String],
    pub codebook: &'a Codebook,
    pub examples: &'a [FewShotExample],
    pub target: &'a SourceText,
}

fn push_thread(out: &mut String, text: &SourceText) {
    for ctx in &text.context {
        out.push_str("CONTEXT: ");
        out.push_str(ctx);
        out.push('\n');
    }
    out.push_str("TEXT: ");
    out.push_str(&text.body);
}

/// Renders the prompt. The output always ends with the target body verbatim.
pub fn render_prompt(spec: &PromptSpec<'_>) -> String {
    let mut out = String::new();
    out.push_str(spec.base_instructions.trim_end());
    out.push('\n');
    for line in spec.custom_instructions {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if !line.starts_with("- ") {
            out.push_str("- ");
        }
        out.push_str(line);
        out.push('\n');
    }

    out.push('\n');
    out.push_str(CODEBOOK_HEADER);
    out.push('\n');
    for entry in spec.codebook.entries() {
        if entry.description.is_empty() {
            out.push_str(&format!("- {}\n", entry.label));
        } else {
            out.push_str(&format!("- {}: {}\n", entry.label, entry.description));
        }
    }

    out.push('\n');
    out.push_str(EXAMPLES_HEADER);
    out.push_str("\n\n");
    for example in spec.examples {
        out.push_str("EXAMPLE INPUT:\n");
        push_thread(&mut out, &example.text);
        out.push_str("\nEXAMPLE OUTPUT: ");
        out.push_str(&serialize_annotated(&example.text.body, &example.annotation.segments));
        out.push_str("\n\n");
    }

    out.push_str(ACTUAL_INPUT);
    out.push('\n');
    push_thread(&mut out, spec.target);
    out
}

pub fn build_prompt(spec: &PromptSpec<'_>, budget: &PromptBudget) -> Result<String, PromptError> {
    let prompt = render_prompt(spec);
    let estimated = budget.estimate(&prompt);
    if estimated > budget.max_tokens {
        return Err(PromptError::PromptTooLong {
            estimated,
            budget: budget.max_tokens,
        });
    }
    Ok(prompt)
}
