//! Sequential inductive coding with a growing codebook.
//!
//! Texts are processed strictly in order, one model call each. Every new
//! label found in a verified output gets a generated description and is
//! appended to the codebook before the next text's prompt is built.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{span_text, Annotation, Annotator, Codebook, SourceText};
use crate::cluster::{kmeans, ClusterError};
use crate::embedding::{Embedder, EmbeddingError};
use crate::metrics::AnnotationLayer;
use crate::prompt::{build_prompt, FewShotExample, PromptBudget, PromptSpec, BASE_INSTRUCTIONS};
use crate::provider::{mock_theme_name, sha256_hex, ChatBackend, ChatRequest, ChatTask, ProviderError, RetryPolicy};
use crate::reconstruct::{verify_and_reconstruct_with, DEFAULT_HALLUCINATION_THRESHOLD};

#[derive(Debug, Error)]
pub enum CoderError {
    #[error("run aborted at text {text_id:?}: {source}")]
    RunAborted {
        text_id: String,
        #[source]
        source: ProviderError,
    },
    #[error("codebook has {codes} codes, fewer than the {k} requested themes")]
    TooFewCodes { codes: usize, k: usize },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodingConfig {
    pub base_instructions: String,
    pub temperature: f64,
    pub retry: RetryPolicy,
    pub budget: PromptBudget,
    pub hallucination_threshold: f64,
}

impl Default for CodingConfig {
    fn default() -> Self {
        Self {
            base_instructions: BASE_INSTRUCTIONS.to_string(),
            temperature: 0.0,
            retry: RetryPolicy::default(),
            budget: PromptBudget::default(),
            hallucination_threshold: DEFAULT_HALLUCINATION_THRESHOLD,
        }
    }
}

/// Everything that shapes the prompt before the first text is coded.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CodingSeed {
    pub custom_instructions: Vec<String>,
    pub codebook: Codebook,
    pub examples: Vec<FewShotExample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextOutcome {
    Ok,
    Reconstructed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextResult {
    pub text_id: String,
    pub outcome: TextOutcome,
    pub error: Option<String>,
    pub edit_ratio: Option<f64>,
    pub dropped_spans: usize,
    pub new_codes: Vec<String>,
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLogRecord {
    pub text_id: String,
    pub prompt_hash: String,
    pub raw_output: String,
    pub outcome: TextOutcome,
    pub edit_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodingRun {
    pub run_id: String,
    pub provider: String,
    pub temperature: f64,
    pub example_ids: Vec<String>,
    pub instruction_snapshot: Vec<String>,
    pub results: Vec<TextResult>,
    /// LLM annotations for every target; failed texts carry an empty one.
    pub layer: AnnotationLayer,
    pub codebook: Codebook,
    /// Labels whose description fell back to the label itself.
    pub degraded_descriptions: Vec<String>,
    pub log: Vec<RunLogRecord>,
}

impl CodingRun {
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
            .collect()
    }

    pub fn count(&self, outcome: TextOutcome) -> usize {
        self.results.iter().filter(|r| r.outcome == outcome).count()
    }
}

pub fn code_inductively(
    run_id: &str,
    targets: &[SourceText],
    seed: &CodingSeed,
    chat: &dyn ChatBackend,
    config: &CodingConfig,
) -> Result<CodingRun, CoderError> {
    code_inductively_with_progress(run_id, targets, seed, chat, config, |_, _| {})
}

/// As [`code_inductively`], calling `progress(done, total)` after each text.
pub fn code_inductively_with_progress(
    run_id: &str,
    targets: &[SourceText],
    seed: &CodingSeed,
    chat: &dyn ChatBackend,
    config: &CodingConfig,
    mut progress: impl FnMut(usize, usize),
) -> Result<CodingRun, CoderError> {
    let mut codebook = seed.codebook.clone();
    let mut run = CodingRun {
        run_id: run_id.to_string(),
        provider: chat.id(),
        temperature: config.temperature,
        example_ids: seed.examples.iter().map(|e| e.text.id.clone()).collect(),
        instruction_snapshot: seed.custom_instructions.clone(),
        results: Vec::with_capacity(targets.len()),
        layer: AnnotationLayer::new(),
        codebook: Codebook::new(),
        degraded_descriptions: Vec::new(),
        log: Vec::with_capacity(targets.len()),
    };

    for (done, target) in targets.iter().enumerate() {
        let spec = PromptSpec {
            base_instructions: &config.base_instructions,
            custom_instructions: &seed.custom_instructions,
            codebook: &codebook,
            examples: &seed.examples,
            target,
        };
        let prompt = match build_prompt(&spec, &config.budget) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("skipping {}: {e}", target.id);
                run.results.push(failed(&target.id, e.to_string()));
                run.layer.insert(target.id.clone(), Annotation::empty(&target.id, Annotator::Llm));
                progress(done + 1, targets.len());
                continue;
            }
        };
        let request = ChatRequest {
            system: None,
            prompt,
            temperature: config.temperature,
            task: ChatTask::Annotate {
                target: target.body.clone(),
                examples: seed.examples.len(),
            },
        };
        let raw_output = config
            .retry
            .run(|| chat.complete(&request))
            .map_err(|source| CoderError::RunAborted {
                text_id: target.id.clone(),
                source,
            })?;

        let result = match verify_and_reconstruct_with(&target.body, &raw_output, config.hallucination_threshold) {
            Ok(rec) => {
                let annotation = Annotation::new(&target.id, Annotator::Llm, rec.segments)
                    .expect("reconstructed segments are sorted and disjoint");
                let mut new_codes = Vec::new();
                for label in annotation.code_set() {
                    if codebook.contains(&label) {
                        continue;
                    }
                    let exemplars: Vec<String> = annotation
                        .segments
                        .iter()
                        .filter(|s| s.codes.contains(&label))
                        .map(|s| span_text(&target.body, s.span))
                        .collect();
                    let description = generate_code_description(&label, &exemplars, chat, &config.retry);
                    if description.degraded {
                        run.degraded_descriptions.push(label.clone());
                    }
                    codebook.insert(label.clone(), description.text);
                    new_codes.push(label);
                }
                run.layer.insert(target.id.clone(), annotation);
                TextResult {
                    text_id: target.id.clone(),
                    outcome: if rec.reconstructed {
                        TextOutcome::Reconstructed
                    } else {
                        TextOutcome::Ok
                    },
                    error: None,
                    edit_ratio: Some(rec.edit_ratio),
                    dropped_spans: rec.dropped,
                    new_codes,
                }
            }
            Err(e) => {
                log::warn!("output for {} rejected: {e}", target.id);
                run.layer.insert(target.id.clone(), Annotation::empty(&target.id, Annotator::Llm));
                let mut r = failed(&target.id, e.to_string());
                if let crate::reconstruct::ReconstructError::HallucinatedOutput { edit_ratio, .. } = e {
                    r.edit_ratio = Some(edit_ratio);
                }
                r
            }
        };
        run.log.push(RunLogRecord {
            text_id: target.id.clone(),
            prompt_hash: sha256_hex(&request.prompt),
            raw_output,
            outcome: result.outcome,
            edit_ratio: result.edit_ratio,
        });
        run.results.push(result);
        progress(done + 1, targets.len());
    }

    run.codebook = codebook;
    Ok(run)
}

fn failed(text_id: &str, error: String) -> TextResult {
    TextResult {
        text_id: text_id.to_string(),
        outcome: TextOutcome::Failed,
        error: Some(error),
        edit_ratio: None,
        dropped_spans: 0,
        new_codes: Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeDescription {
    pub text: String,
    /// The provider failed and the label itself is used.
    pub degraded: bool,
}

pub fn description_prompt(label: &str, exemplars: &[String]) -> String {
    let mut prompt = format!(
        "You are an expert qualitative researcher. Write a single-sentence description of the qualitative code \"{label}\", explaining what kind of statements it captures. Reply with the sentence only."
    );
    if !exemplars.is_empty() {
        prompt.push_str("\n\nText segments coded with it:\n");
        for ex in exemplars {
            prompt.push_str(&format!("- \"{ex}\"\n"));
        }
    }
    prompt
}

/// One-sentence description of a new code. Falls back to the label on
/// provider failure.
pub fn generate_code_description(
    label: &str,
    exemplars: &[String],
    chat: &dyn ChatBackend,
    retry: &RetryPolicy,
) -> CodeDescription {
    let request = ChatRequest {
        system: None,
        prompt: description_prompt(label, exemplars),
        temperature: 0.0,
        task: ChatTask::DescribeCode {
            label: label.to_string(),
        },
    };
    let text = retry
        .run(|| chat.complete(&request))
        .map(|reply| first_line(&reply))
        .ok()
        .filter(|s| !s.is_empty());
    match text {
        Some(text) => CodeDescription { text, degraded: false },
        None => {
            log::warn!("description for {label:?} degraded to the label");
            CodeDescription {
                text: label.to_string(),
                degraded: true,
            }
        }
    }
}

fn first_line(reply: &str) -> String {
    reply
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("")
        .to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Theme {
    pub label: String,
    pub codes: Vec<String>,
}

/// Groups codebook entries into `k` themes by k-means over label embeddings,
/// then asks the model to name each group.
pub fn group_codes_into_themes(
    codebook: &Codebook,
    embedder: &Embedder,
    chat: &dyn ChatBackend,
    k: usize,
    seed: u64,
) -> Result<Vec<Theme>, CoderError> {
    if k == 0 || codebook.len() < k {
        return Err(CoderError::TooFewCodes {
            codes: codebook.len(),
            k,
        });
    }
    let labels: Vec<&str> = codebook.labels().collect();
    let vectors: Vec<Vec<f64>> = embedder
        .embed(&labels)?
        .into_iter()
        .map(|v| v.values().to_vec())
        .collect();
    let clustering = kmeans(&vectors, k, seed)?;
    let retry = RetryPolicy::default();
    let mut themes = Vec::with_capacity(k);
    for members in clustering.members().into_iter().filter(|m| !m.is_empty()) {
        let codes: Vec<String> = members.iter().map(|&i| labels[i].to_string()).collect();
        let mut prompt = String::from(
            "You are an expert qualitative researcher. Name the broader theme that unites the following codes in a few words. Reply with the theme name only.\n",
        );
        for code in &codes {
            let description = codebook.description(code).unwrap_or_default();
            prompt.push_str(&format!("- {code}: {description}\n"));
        }
        let request = ChatRequest {
            system: None,
            prompt,
            temperature: 0.0,
            task: ChatTask::NameTheme { codes: codes.clone() },
        };
        let label = retry
            .run(|| chat.complete(&request))
            .map(|r| first_line(&r))
            .ok()
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| mock_theme_name(&codes));
        themes.push(Theme { label, codes });
    }
    Ok(themes)
}
