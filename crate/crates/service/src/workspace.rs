//! Project operations shared by the HTTP API and the CLI.

use std::collections::{BTreeMap, HashMap};
use std::io::{Cursor, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use qualcode_core::annotation::{
    corpus_from_records, import_corpus, serialize_annotated, Annotation, Annotator, Codebook, CodedSegment,
    CorpusError, CorpusFormat, CorpusRecord, SourceText,
};
use qualcode_core::coder::{code_inductively_with_progress, CodingConfig, TextOutcome};
use qualcode_core::embedding::Embedder;
use qualcode_core::lab::Dataset;
use qualcode_core::metrics::{alignment_report, rank_texts, AnnotationLayer, ReportSummary, SortKey, TextAlignment};
use qualcode_core::provider::ChatBackend;

use crate::error::ServiceError;
use crate::run::{RunProgress, RunRecord, RunStatus};
use crate::state::{ChangeLogEntry, IterationRecord, Operation, ProjectState, RunScope};
use crate::store::{canonical_json, valid_project_id, Store};

/// Builds the chat backend for a run from the project it runs on.
pub type ChatSource = Arc<dyn Fn(&ProjectState) -> Arc<dyn ChatBackend> + Send + Sync>;

/// Below this many annotated texts the project view carries a warning.
pub const DEFAULT_MIN_ANNOTATIONS: usize = 20;

struct Inner {
    state: ProjectState,
    next_seq: u64,
}

struct ProjectHandle {
    inner: Mutex<Inner>,
    runs: Mutex<BTreeMap<String, RunRecord>>,
}

pub struct Workspace {
    store: Store,
    projects: Mutex<HashMap<String, Arc<ProjectHandle>>>,
    chat: ChatSource,
    embedder: Arc<Embedder>,
    config: CodingConfig,
    actor: String,
    min_annotations: usize,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextRole {
    Example,
    Validation,
    Test,
    Unannotated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextView {
    pub id: String,
    pub body: String,
    pub context: Vec<String>,
    pub created_order: i64,
    pub role: TextRole,
    pub human: Option<Annotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitView {
    pub examples: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub test_frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub texts: usize,
    pub annotated: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectView {
    pub project_id: String,
    pub texts: Vec<TextView>,
    pub split: SplitView,
    pub custom_instructions: Vec<String>,
    pub codebook: Codebook,
    pub iteration_history: Vec<IterationRecord>,
    pub runs: Vec<RunProgress>,
    pub counts: Counts,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub text_id: String,
    pub body: String,
    pub context: Vec<String>,
    pub outcome: TextOutcome,
    pub error: Option<String>,
    /// Absent for scopes without human annotations.
    pub metrics: Option<TextAlignment>,
    pub flags: Vec<String>,
    pub human: Option<Annotation>,
    pub llm: Annotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportResponse {
    pub run_id: String,
    pub scope: RunScope,
    pub sort: SortKey,
    pub provider: String,
    pub example_ids: Vec<String>,
    pub instruction_snapshot: Vec<String>,
    pub summary: Option<ReportSummary>,
    pub rows: Vec<ReportRow>,
}

impl Workspace {
    pub fn new(store: Store, chat: ChatSource, embedder: Arc<Embedder>) -> Self {
        Self {
            store,
            projects: Mutex::new(HashMap::new()),
            chat,
            embedder,
            config: CodingConfig::default(),
            actor: "user".to_string(),
            min_annotations: DEFAULT_MIN_ANNOTATIONS,
        }
    }

    pub fn with_config(mut self, config: CodingConfig) -> Self {
        self.config = config;
        self
    }

    pub fn with_actor(mut self, actor: impl Into<String>) -> Self {
        self.actor = actor.into();
        self
    }

    pub fn with_min_annotations(mut self, n: usize) -> Self {
        self.min_annotations = n;
        self
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    pub fn coding_config(&self) -> &CodingConfig {
        &self.config
    }

    pub fn chat_for(&self, state: &ProjectState) -> Arc<dyn ChatBackend> {
        (self.chat)(state)
    }

    fn handle(&self, id: &str) -> Result<Arc<ProjectHandle>, ServiceError> {
        if !valid_project_id(id) {
            return Err(ServiceError::UnknownProject(id.to_string()));
        }
        let mut projects = lock(&self.projects);
        if let Some(h) = projects.get(id) {
            return Ok(Arc::clone(h));
        }
        let state = self.store.load(id)?;
        let next_seq = self.store.changes(id)?.last().map_or(1, |e| e.seq + 1);
        let runs = self
            .store
            .load_runs(id)?
            .into_iter()
            .map(|r| (r.run_id.clone(), r))
            .collect();
        let handle = Arc::new(ProjectHandle {
            inner: Mutex::new(Inner { state, next_seq }),
            runs: Mutex::new(runs),
        });
        projects.insert(id.to_string(), Arc::clone(&handle));
        Ok(handle)
    }

    pub fn list_projects(&self) -> Result<Vec<String>, ServiceError> {
        self.store.project_ids()
    }

    pub fn create_project(&self, id: Option<String>, corpus: Vec<SourceText>) -> Result<String, ServiceError> {
        let mut seen = std::collections::HashSet::new();
        for t in &corpus {
            if !seen.insert(t.id.as_str()) {
                return Err(CorpusError::DuplicateId(t.id.clone()).into());
            }
        }
        let id = id.unwrap_or_else(|| uuid::Uuid::new_v4().simple().to_string());
        let op = Operation::CreateProject {
            project_id: id.clone(),
            corpus,
        };
        let mut state = ProjectState::new("", Vec::new());
        state.apply(&op)?;
        let entry = ChangeLogEntry {
            seq: 1,
            timestamp: now(),
            actor: self.actor.clone(),
            operation: op,
        };
        let _guard = lock(&self.projects);
        self.store.create(&state, &entry)?;
        Ok(id)
    }

    pub fn create_project_from_records(
        &self,
        id: Option<String>,
        records: Vec<CorpusRecord>,
    ) -> Result<String, ServiceError> {
        self.create_project(id, corpus_from_records(records)?)
    }

    pub fn import_project(&self, id: Option<String>, path: &Path, format: CorpusFormat) -> Result<String, ServiceError> {
        self.create_project(id, import_corpus(path, format)?)
    }

    pub fn state(&self, id: &str) -> Result<ProjectState, ServiceError> {
        Ok(lock(&self.handle(id)?.inner).state.clone())
    }

    fn mutate_as(&self, id: &str, actor: &str, op: Operation) -> Result<ProjectState, ServiceError> {
        let handle = self.handle(id)?;
        let mut inner = lock(&handle.inner);
        let mut next = inner.state.clone();
        next.apply(&op)?;
        let entry = ChangeLogEntry {
            seq: inner.next_seq,
            timestamp: now(),
            actor: actor.to_string(),
            operation: op,
        };
        self.store.append_change(id, &entry)?;
        self.store.save(&next)?;
        inner.state = next;
        inner.next_seq += 1;
        Ok(inner.state.clone())
    }

    fn mutate(&self, id: &str, op: Operation) -> Result<ProjectState, ServiceError> {
        self.mutate_as(id, &self.actor.clone(), op)
    }

    pub fn upsert_annotation(
        &self,
        id: &str,
        text_id: &str,
        segments: Vec<CodedSegment>,
    ) -> Result<Annotation, ServiceError> {
        let annotation = Annotation::new(text_id, Annotator::Human, segments)?;
        self.mutate(id, Operation::UpsertAnnotation { annotation })?;
        Ok(lock(&self.handle(id)?.inner).state.human_layer[text_id].clone())
    }

    pub fn remove_annotation(&self, id: &str, text_id: &str) -> Result<(), ServiceError> {
        self.mutate(
            id,
            Operation::RemoveAnnotation {
                text_id: text_id.to_string(),
            },
        )
        .map(drop)
    }

    pub fn describe_code(&self, id: &str, label: &str, description: &str) -> Result<(), ServiceError> {
        self.mutate(
            id,
            Operation::DescribeCode {
                label: label.to_string(),
                description: description.to_string(),
            },
        )
        .map(drop)
    }

    pub fn set_examples(&self, id: &str, text_ids: Vec<String>) -> Result<(), ServiceError> {
        self.mutate(id, Operation::SetExamples { text_ids }).map(drop)
    }

    pub fn set_instructions(&self, id: &str, lines: Vec<String>) -> Result<(), ServiceError> {
        self.mutate(id, Operation::SetInstructions { lines }).map(drop)
    }

    pub fn set_test_set(&self, id: &str, text_ids: Vec<String>) -> Result<(), ServiceError> {
        self.mutate(id, Operation::SetTestSet { text_ids }).map(drop)
    }

    pub fn changes(&self, id: &str) -> Result<Vec<ChangeLogEntry>, ServiceError> {
        self.handle(id)?;
        self.store.changes(id)
    }

    pub fn view(&self, id: &str) -> Result<ProjectView, ServiceError> {
        let state = self.state(id)?;
        let runs: Vec<RunProgress> = lock(&self.handle(id)?.runs).values().map(RunProgress::from).collect();
        let validation = state.validation_ids();
        let texts = state
            .corpus
            .iter()
            .map(|t| {
                let human = state.human_layer.get(&t.id).cloned();
                let role = if state.split.is_test(&t.id) {
                    TextRole::Test
                } else if state.split.is_example(&t.id) {
                    TextRole::Example
                } else if human.is_some() {
                    TextRole::Validation
                } else {
                    TextRole::Unannotated
                };
                TextView {
                    id: t.id.clone(),
                    body: t.body.clone(),
                    context: t.context.clone(),
                    created_order: t.created_order,
                    role,
                    human,
                }
            })
            .collect();
        let positive = state.human_layer.values().filter(|a| a.is_positive()).count();
        let counts = Counts {
            texts: state.corpus.len(),
            annotated: state.human_layer.len(),
            positive,
            negative: state.human_layer.len() - positive,
        };
        let mut warnings = Vec::new();
        if counts.annotated < self.min_annotations {
            warnings.push(format!(
                "only {} annotated texts; at least {} are recommended",
                counts.annotated, self.min_annotations
            ));
        }
        Ok(ProjectView {
            project_id: state.project_id.clone(),
            texts,
            split: SplitView {
                examples: state.split.examples().to_vec(),
                validation,
                test: state.split.test().to_vec(),
                test_frozen: state.split.is_test_frozen(),
            },
            custom_instructions: state.custom_instructions.clone(),
            codebook: state.codebook.clone(),
            iteration_history: state.iteration_history.clone(),
            runs,
            counts,
            warnings,
        })
    }

    /// Starts a coding run on a background thread.
    pub fn start_run(self: &Arc<Self>, id: &str, scope: RunScope) -> Result<String, ServiceError> {
        let handle = self.handle(id)?;
        let state = lock(&handle.inner).state.clone();
        if state.split.examples().is_empty() {
            return Err(ServiceError::NoExamples);
        }
        let text_ids = state.scope_ids(scope);
        let run_id = {
            let mut runs = lock(&handle.runs);
            if let Some(active) = runs.values().find(|r| r.status == RunStatus::Running) {
                return Err(ServiceError::RunInProgress(active.run_id.clone()));
            }
            let run_id = format!("run-{:04}", runs.len() + 1);
            let chat = self.chat_for(&state);
            runs.insert(
                run_id.clone(),
                RunRecord {
                    run_id: run_id.clone(),
                    scope,
                    status: RunStatus::Running,
                    done: 0,
                    total: text_ids.len(),
                    started_at: now(),
                    finished_at: None,
                    error: None,
                    warning: text_ids.is_empty().then(|| "no texts in scope".to_string()),
                    provider: chat.id(),
                    text_ids: text_ids.clone(),
                    example_ids: state.split.examples().to_vec(),
                    instruction_snapshot: state.custom_instructions.clone(),
                    codebook: Codebook::new(),
                    results: Vec::new(),
                    report: None,
                    human_snapshot: AnnotationLayer::new(),
                },
            );
            run_id
        };
        let ws = Arc::clone(self);
        let (pid, rid) = (id.to_string(), run_id.clone());
        std::thread::spawn(move || ws.execute_run(&pid, &rid, state, scope, text_ids));
        Ok(run_id)
    }

    fn execute_run(&self, id: &str, run_id: &str, state: ProjectState, scope: RunScope, text_ids: Vec<String>) {
        let Ok(handle) = self.handle(id) else { return };
        let outcome = self.run_inner(&handle, id, run_id, &state, scope, &text_ids);
        let mut runs = lock(&handle.runs);
        let Some(record) = runs.get_mut(run_id) else { return };
        record.finished_at = Some(now());
        match outcome {
            Ok(()) => record.status = RunStatus::Complete,
            Err(e) => {
                log::error!("run {run_id} failed: {e}");
                record.status = RunStatus::Failed;
                record.error = Some(e.to_string());
            }
        }
        if let Err(e) = self.store.save_run(id, record) {
            log::error!("cannot save run {run_id}: {e}");
        }
    }

    fn run_inner(
        &self,
        handle: &ProjectHandle,
        id: &str,
        run_id: &str,
        state: &ProjectState,
        scope: RunScope,
        text_ids: &[String],
    ) -> Result<(), ServiceError> {
        let dataset = Dataset::new(state.corpus.clone(), state.human_layer.clone()).with_codebook(state.codebook.clone());
        let seed = dataset.seed(state.split.examples(), &state.custom_instructions)?;
        let targets: Vec<SourceText> = text_ids
            .iter()
            .map(|t| state.text(t).cloned().ok_or_else(|| ServiceError::UnknownText(t.clone())))
            .collect::<Result<_, _>>()?;
        let chat = self.chat_for(state);
        let run = code_inductively_with_progress(run_id, &targets, &seed, chat.as_ref(), &self.config, |done, total| {
            if let Some(r) = lock(&handle.runs).get_mut(run_id) {
                r.done = done;
                r.total = total;
            }
        })?;
        self.store.save_run_log(id, run_id, &run.log_jsonl())?;

        let scored = scope != RunScope::Remainder;
        let report = if scored {
            let refs: Vec<&SourceText> = targets.iter().collect();
            Some(alignment_report(&state.human_layer, &run.layer, &refs, Some(&self.embedder))?)
        } else {
            None
        };
        let iteration = report.as_ref().filter(|_| !targets.is_empty()).map(|r| IterationRecord {
            run_id: run_id.to_string(),
            scope,
            example_ids: run.example_ids.clone(),
            instruction_snapshot: run.instruction_snapshot.clone(),
            summary: r.summary(),
        });
        self.mutate_as(
            id,
            "runner",
            Operation::RecordRun {
                run_id: run_id.to_string(),
                layer: run.layer.clone(),
                iteration,
            },
        )?;

        let human_snapshot: AnnotationLayer = text_ids
            .iter()
            .filter_map(|t| state.human_layer.get(t).map(|a| (t.clone(), a.clone())))
            .collect();
        let mut runs = lock(&handle.runs);
        if let Some(r) = runs.get_mut(run_id) {
            r.provider = run.provider.clone();
            r.codebook = run.codebook.clone();
            r.results = run.results.clone();
            r.report = report;
            r.human_snapshot = human_snapshot;
            r.done = targets.len();
        }
        Ok(())
    }

    pub fn runs(&self, id: &str) -> Result<Vec<RunProgress>, ServiceError> {
        Ok(lock(&self.handle(id)?.runs).values().map(RunProgress::from).collect())
    }

    pub fn run_status(&self, id: &str, run_id: &str) -> Result<RunProgress, ServiceError> {
        lock(&self.handle(id)?.runs)
            .get(run_id)
            .map(RunProgress::from)
            .ok_or_else(|| ServiceError::UnknownRun(run_id.to_string()))
    }

    pub fn run_record(&self, id: &str, run_id: &str) -> Result<RunRecord, ServiceError> {
        lock(&self.handle(id)?.runs)
            .get(run_id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownRun(run_id.to_string()))
    }

    /// Blocks until the run leaves the running state.
    pub fn wait_for_run(&self, id: &str, run_id: &str) -> Result<RunProgress, ServiceError> {
        loop {
            let status = self.run_status(id, run_id)?;
            if status.status != RunStatus::Running {
                return Ok(status);
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    /// Both annotation layers of a finished run, ordered by `sort`. Viewing a
    /// validation report freezes the test set.
    pub fn report(&self, id: &str, run_id: &str, sort: SortKey) -> Result<ReportResponse, ServiceError> {
        let record = self.run_record(id, run_id)?;
        match record.status {
            RunStatus::Running => return Err(ServiceError::RunIncomplete(run_id.to_string())),
            RunStatus::Failed => {
                return Err(ServiceError::RunFailed(
                    run_id.to_string(),
                    record.error.clone().unwrap_or_default(),
                ))
            }
            RunStatus::Complete => {}
        }
        let mut state = self.state(id)?;
        if record.scope == RunScope::Validation && !state.split.is_test_frozen() {
            state = self.mutate(id, Operation::FreezeTestSet)?;
        }
        let layer = state.llm_layers.get(run_id).cloned().unwrap_or_default();
        let order: Vec<String> = match &record.report {
            Some(report) if !report.per_text.is_empty() => rank_texts(report, sort),
            _ => record.text_ids.clone(),
        };
        let rows = order
            .iter()
            .map(|tid| {
                let text = state.text(tid).ok_or_else(|| ServiceError::UnknownText(tid.clone()))?;
                let result = record.results.iter().find(|r| &r.text_id == tid);
                let metrics = record.report.as_ref().and_then(|r| r.row(tid)).cloned();
                Ok(ReportRow {
                    text_id: tid.clone(),
                    body: text.body.clone(),
                    context: text.context.clone(),
                    outcome: result.map_or(TextOutcome::Failed, |r| r.outcome),
                    error: result.and_then(|r| r.error.clone()),
                    flags: metrics
                        .as_ref()
                        .map(|m| m.flags().into_iter().map(str::to_string).collect())
                        .unwrap_or_default(),
                    metrics,
                    human: record.human_snapshot.get(tid).cloned(),
                    llm: layer
                        .get(tid)
                        .cloned()
                        .unwrap_or_else(|| Annotation::empty(tid, Annotator::Llm)),
                })
            })
            .collect::<Result<Vec<_>, ServiceError>>()?;
        Ok(ReportResponse {
            run_id: run_id.to_string(),
            scope: record.scope,
            sort,
            provider: record.provider.clone(),
            example_ids: record.example_ids.clone(),
            instruction_snapshot: record.instruction_snapshot.clone(),
            summary: record.report.as_ref().map(|r| r.summary()),
            rows,
        })
    }

    /// Human annotations and analysis inputs, with test texts held out.
    pub fn dataset(&self, id: &str) -> Result<Dataset, ServiceError> {
        let state = self.state(id)?;
        Ok(Dataset::new(state.corpus.clone(), state.human_layer.clone())
            .with_codebook(state.codebook.clone())
            .with_excluded(state.split.test().iter().cloned()))
    }

    /// Zip of the project file, the change log and one Markdown rendering per
    /// text.
    pub fn export(&self, id: &str) -> Result<Vec<u8>, ServiceError> {
        let state = self.state(id)?;
        let zip_err = |e: zip::result::ZipError| ServiceError::Storage(e.to_string());
        let mut zip = zip::ZipWriter::new(Cursor::new(Vec::new()));
        let options =
            zip::write::SimpleFileOptions::default().compression_method(zip::CompressionMethod::Deflated);
        zip.start_file("project.json", options).map_err(zip_err)?;
        zip.write_all(canonical_json(&state)?.as_bytes())?;
        zip.start_file("changes.jsonl", options).map_err(zip_err)?;
        for entry in self.store.changes(id)? {
            zip.write_all(format!("{}\n", serde_json::to_string(&entry)?).as_bytes())?;
        }
        for (i, text) in state.corpus.iter().enumerate() {
            zip.start_file(format!("texts/{:04}-{}.md", i + 1, file_stem(&text.id)), options)
                .map_err(zip_err)?;
            zip.write_all(render_markdown(&state, text).as_bytes())?;
        }
        let cursor = zip.finish().map_err(zip_err)?;
        Ok(cursor.into_inner())
    }
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .take(60)
        .collect()
}

fn render_markdown(state: &ProjectState, text: &SourceText) -> String {
    let mut out = format!("# {}\n\n", text.id);
    for line in &text.context {
        out.push_str(&format!("> {line}\n"));
    }
    if !text.context.is_empty() {
        out.push('\n');
    }
    out.push_str("## Human\n\n");
    match state.human_layer.get(&text.id) {
        Some(a) => out.push_str(&serialize_annotated(&text.body, &a.segments)),
        None => out.push_str(&text.body),
    }
    out.push('\n');
    for (run_id, layer) in &state.llm_layers {
        if let Some(a) = layer.get(&text.id) {
            out.push_str(&format!("\n## LLM ({run_id})\n\n"));
            out.push_str(&serialize_annotated(&text.body, &a.segments));
            out.push('\n');
        }
    }
    out
}
