#![allow(dead_code)]

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};

use qualcode_core::annotation::{serialize_annotated, Annotation, Annotator, CodedSegment, SourceText, Span};
use qualcode_core::embedding::Embedder;
use qualcode_core::metrics::AnnotationLayer;
use qualcode_core::provider::{ChatBackend, ChatRequest, ProviderError, ScriptedChat};
use qualcode_service::state::ProjectState;
use qualcode_service::store::Store;
use qualcode_service::workspace::ChatSource;
use qualcode_service::Workspace;

const THINGS: [&str; 6] = ["price", "board", "card art", "rulebook", "table talk", "first round"];
const ADJECTIVES: [&str; 5] = ["too steep", "fun", "confusing", "beautiful", "slow"];
const LABELS: [&str; 4] = ["cost", "enjoyment", "rules clarity", "pacing"];

/// `n` short texts; every fifth one has no codable content.
pub fn corpus(n: usize) -> Vec<SourceText> {
    (0..n)
        .map(|i| {
            let body = if i % 5 == 4 {
                format!("Participant {i} talked about the weather for a while.")
            } else {
                format!(
                    "Participant {i} said the {} was {} and would play again.",
                    THINGS[i % THINGS.len()],
                    ADJECTIVES[i % ADJECTIVES.len()]
                )
            };
            SourceText::new(format!("t{i:02}"), body, i as i64)
        })
        .collect()
}

fn char_find(body: &str, needle: &str) -> Option<Span> {
    let byte = body.find(needle)?;
    let start = body[..byte].chars().count();
    Some(Span::new(start, start + needle.chars().count()))
}

/// The human segments for `text`: "the X was Y" coded with one label.
pub fn human_segments(text: &SourceText) -> Vec<CodedSegment> {
    let i: usize = text.id[1..].parse().unwrap();
    if i % 5 == 4 {
        return Vec::new();
    }
    let phrase = format!("the {} was {}", THINGS[i % THINGS.len()], ADJECTIVES[i % ADJECTIVES.len()]);
    let span = char_find(&text.body, &phrase).unwrap();
    vec![CodedSegment::new(span, &[LABELS[i % LABELS.len()]]).unwrap()]
}

pub fn human_layer(texts: &[SourceText]) -> AnnotationLayer {
    texts
        .iter()
        .map(|t| (t.id.clone(), Annotation::new(&t.id, Annotator::Human, human_segments(t)).unwrap()))
        .collect()
}

/// A model that highlights a shorter span than the human did ("X was Y")
/// under a label of its own, and echoes negatives.
pub fn scripted_chat(texts: &[SourceText]) -> ScriptedChat {
    let mut chat = ScriptedChat::new();
    for t in texts {
        let i: usize = t.id[1..].parse().unwrap();
        if i % 5 == 4 {
            continue;
        }
        let phrase = format!("{} was {}", THINGS[i % THINGS.len()], ADJECTIVES[i % ADJECTIVES.len()]);
        let span = char_find(&t.body, &phrase).unwrap();
        let label = if i % 3 == 0 { LABELS[i % LABELS.len()].to_string() } else { format!("opinion {}", i % 3) };
        let seg = CodedSegment::new(span, &[label]).unwrap();
        chat.insert(t.body.clone(), serialize_annotated(&t.body, &[seg]));
    }
    chat
}

pub fn fixed_chat(chat: impl ChatBackend + 'static) -> ChatSource {
    let chat: Arc<dyn ChatBackend> = Arc::new(chat);
    Arc::new(move |_: &ProjectState| Arc::clone(&chat))
}

pub fn workspace(root: &Path, chat: ChatSource) -> Arc<Workspace> {
    Arc::new(Workspace::new(Store::open(root).unwrap(), chat, Arc::new(Embedder::mock())))
}

/// Creates project `id` with `n` texts and human annotations on the first
/// `annotated` of them.
pub fn seeded_project(ws: &Workspace, id: &str, n: usize, annotated: usize) -> Vec<SourceText> {
    let texts = corpus(n);
    ws.create_project(Some(id.to_string()), texts.clone()).unwrap();
    for t in texts.iter().take(annotated) {
        ws.upsert_annotation(id, &t.id, human_segments(t)).unwrap();
    }
    texts
}

/// Blocks every annotate call until `open` is called.
#[derive(Clone, Default)]
pub struct GateChat {
    gate: Arc<(Mutex<bool>, Condvar)>,
}

impl GateChat {
    pub fn open(&self) {
        let (lock, cv) = &*self.gate;
        *lock.lock().unwrap() = true;
        cv.notify_all();
    }
}

impl ChatBackend for GateChat {
    fn id(&self) -> String {
        "mock:gate".into()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let (lock, cv) = &*self.gate;
        let mut open = lock.lock().unwrap();
        while !*open {
            open = cv.wait(open).unwrap();
        }
        drop(open);
        match &request.task {
            qualcode_core::provider::ChatTask::Annotate { target, .. } => Ok(target.clone()),
            _ => Ok(String::new()),
        }
    }
}

pub fn ids(texts: &[SourceText], range: std::ops::Range<usize>) -> Vec<String> {
    texts[range].iter().map(|t| t.id.clone()).collect()
}

pub fn reference_outputs(texts: &[SourceText]) -> HashMap<String, String> {
    texts
        .iter()
        .map(|t| (t.body.clone(), serialize_annotated(&t.body, &human_segments(t))))
        .collect()
}
