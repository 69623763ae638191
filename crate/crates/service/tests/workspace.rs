mod common;

use std::collections::BTreeSet;
use std::io::Read;

use qualcode_core::annotation::{CodedSegment, SourceText, Span};
use qualcode_core::coder::code_inductively;
use qualcode_core::lab::{Dataset, SplitError};
use qualcode_core::metrics::{alignment_report, SortKey};
use qualcode_core::provider::EchoChat;
use qualcode_service::error::ServiceError;
use qualcode_service::run::RunStatus;
use qualcode_service::state::{ProjectState, RunScope};
use qualcode_service::store::canonical_json;

use common::*;

#[test]
fn create_then_load_is_identical_and_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), fixed_chat(EchoChat));
    seeded_project(&ws, "p", 8, 6);
    ws.describe_code("p", "cost", "money matters").unwrap();

    let on_disk = std::fs::read_to_string(dir.path().join("p/project.json")).unwrap();
    let reopened = workspace(dir.path(), fixed_chat(EchoChat));
    let loaded = reopened.state("p").unwrap();
    assert_eq!(loaded, ws.state("p").unwrap());
    assert_eq!(canonical_json(&loaded).unwrap(), on_disk);
}

#[test]
fn duplicate_corpus_ids_create_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), fixed_chat(EchoChat));
    let texts = vec![SourceText::new("a", "one", 0), SourceText::new("a", "two", 1)];
    let err = ws.create_project(Some("p".into()), texts).unwrap_err();
    assert_eq!(err.code(), "DuplicateId");
    assert!(!dir.path().join("p").exists());
    assert!(ws.list_projects().unwrap().is_empty());
}

#[test]
fn second_create_with_same_id_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), fixed_chat(EchoChat));
    ws.create_project(Some("p".into()), corpus(2)).unwrap();
    assert!(matches!(
        ws.create_project(Some("p".into()), corpus(3)),
        Err(ServiceError::ProjectExists(_))
    ));
    assert_eq!(ws.state("p").unwrap().corpus.len(), 2);
}

#[test]
fn path_like_project_ids_are_unknown() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), fixed_chat(EchoChat));
    assert!(matches!(ws.state("../etc"), Err(ServiceError::UnknownProject(_))));
    assert!(ws.create_project(Some("a/b".into()), corpus(1)).is_err());
}

#[test]
fn annotation_edits_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), fixed_chat(EchoChat));
    seeded_project(&ws, "p", 3, 0);
    let seg = |s, e, c: &str| CodedSegment::new(Span::new(s, e), &[c]).unwrap();

    let stored = ws.upsert_annotation("p", "t00", vec![seg(0, 11, "who")]).unwrap();
    assert_eq!(ws.state("p").unwrap().human_layer["t00"], stored);

    let err = ws.upsert_annotation("p", "t00", vec![seg(0, 5, "a"), seg(3, 8, "b")]).unwrap_err();
    assert_eq!(err.code(), "OverlapRejected");
    let err = ws.upsert_annotation("p", "t00", vec![seg(0, 500, "a")]).unwrap_err();
    assert_eq!(err.code(), "InvalidSpan");
    assert!(matches!(
        ws.upsert_annotation("p", "zz", vec![]),
        Err(ServiceError::UnknownText(_))
    ));
    assert_eq!(ws.state("p").unwrap().human_layer["t00"], stored);
}

#[test]
fn change_log_replays_to_the_saved_state() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), fixed_chat(EchoChat));
    let texts = seeded_project(&ws, "p", 10, 8);
    ws.remove_annotation("p", "t01").unwrap();
    ws.describe_code("p", "enjoyment", "fun had").unwrap();
    ws.set_examples("p", ids(&texts, 2..4)).unwrap();
    ws.set_test_set("p", ids(&texts, 6..8)).unwrap();
    ws.set_instructions("p", vec!["Do not code interviewer questions.".into()]).unwrap();
    let _ = ws.set_examples("p", ids(&texts, 6..7));

    let changes = ws.changes("p").unwrap();
    let seqs: Vec<u64> = changes.iter().map(|c| c.seq).collect();
    assert_eq!(seqs, (1..=changes.len() as u64).collect::<Vec<_>>());
    assert_eq!(ProjectState::replay(&changes).unwrap(), ws.state("p").unwrap());
}

#[test]
fn examples_leave_the_rest_for_validation() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), fixed_chat(EchoChat));
    let texts = seeded_project(&ws, "p", 8, 6);
    ws.set_examples("p", ids(&texts, 0..2)).unwrap();
    assert_eq!(ws.state("p").unwrap().validation_ids(), ids(&texts, 2..6));

    ws.set_test_set("p", ids(&texts, 4..6)).unwrap();
    let err = ws.set_examples("p", ids(&texts, 4..5)).unwrap_err();
    assert!(matches!(err, ServiceError::Split(SplitError::TestSetViolation(_))));
    let err = ws.set_examples("p", ids(&texts, 7..8)).unwrap_err();
    assert_eq!(err.code(), "UnannotatedExample");
}

#[test]
fn runs_need_examples() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), fixed_chat(EchoChat));
    seeded_project(&ws, "p", 4, 4);
    assert!(matches!(ws.start_run("p", RunScope::Validation), Err(ServiceError::NoExamples)));
}

#[test]
fn one_active_run_per_project() {
    let dir = tempfile::tempdir().unwrap();
    let gate = GateChat::default();
    let ws = workspace(dir.path(), fixed_chat(gate.clone()));
    let texts = seeded_project(&ws, "p", 6, 6);
    ws.set_examples("p", ids(&texts, 0..2)).unwrap();

    let first = ws.start_run("p", RunScope::Validation).unwrap();
    match ws.start_run("p", RunScope::Validation) {
        Err(ServiceError::RunInProgress(active)) => assert_eq!(active, first),
        other => panic!("expected RunInProgress, got {other:?}"),
    }
    assert!(matches!(
        ws.report("p", &first, SortKey::Corpus),
        Err(ServiceError::RunIncomplete(_))
    ));
    gate.open();
    assert_eq!(ws.wait_for_run("p", &first).unwrap().status, RunStatus::Complete);
    let second = ws.start_run("p", RunScope::Validation).unwrap();
    assert_ne!(first, second);
    ws.wait_for_run("p", &second).unwrap();
}

#[test]
fn validation_run_matches_direct_engine_call() {
    let dir = tempfile::tempdir().unwrap();
    let texts = corpus(12);
    let ws = workspace(dir.path(), fixed_chat(scripted_chat(&texts)));
    seeded_project(&ws, "p", 12, 12);
    let examples = ids(&texts, 0..3);
    ws.set_examples("p", examples.clone()).unwrap();
    let rid = ws.start_run("p", RunScope::Validation).unwrap();
    assert_eq!(ws.wait_for_run("p", &rid).unwrap().status, RunStatus::Complete);
    let record = ws.run_record("p", &rid).unwrap();

    let state = ws.state("p").unwrap();
    let dataset = Dataset::new(texts.clone(), human_layer(&texts)).with_codebook(state.codebook.clone());
    let seed = dataset.seed(&examples, &[]).unwrap();
    let targets: Vec<SourceText> = texts[3..].to_vec();
    let direct = code_inductively(&rid, &targets, &seed, &scripted_chat(&texts), ws.coding_config()).unwrap();
    let refs: Vec<&SourceText> = targets.iter().collect();
    let report = alignment_report(&human_layer(&texts), &direct.layer, &refs, Some(ws.embedder())).unwrap();

    assert_eq!(record.report.as_ref(), Some(&report));
    assert_eq!(record.codebook, direct.codebook);
    assert_eq!(state.llm_layers[&rid], direct.layer);
    let log = std::fs::read_to_string(ws.store().run_log_path("p", &rid)).unwrap();
    assert_eq!(log, direct.log_jsonl());

    let history = &state.iteration_history;
    assert_eq!(history.len(), 1);
    assert_eq!(history[0].summary, report.summary());
    assert_eq!(history[0].example_ids, examples);
}

#[test]
fn remainder_of_fully_annotated_corpus_is_an_empty_run() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), fixed_chat(EchoChat));
    let texts = seeded_project(&ws, "p", 4, 4);
    ws.set_examples("p", ids(&texts, 0..1)).unwrap();
    let rid = ws.start_run("p", RunScope::Remainder).unwrap();
    let status = ws.wait_for_run("p", &rid).unwrap();
    assert_eq!(status.status, RunStatus::Complete);
    assert_eq!(status.total, 0);
    assert!(status.warning.is_some());
    let report = ws.report("p", &rid, SortKey::Corpus).unwrap();
    assert!(report.rows.is_empty());
    assert!(report.summary.is_none());
    assert!(ws.state("p").unwrap().iteration_history.is_empty());
}

#[test]
fn remainder_run_codes_unannotated_texts_without_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let texts = corpus(8);
    let ws = workspace(dir.path(), fixed_chat(scripted_chat(&texts)));
    seeded_project(&ws, "p", 8, 5);
    ws.set_examples("p", ids(&texts, 0..2)).unwrap();
    let rid = ws.start_run("p", RunScope::Remainder).unwrap();
    ws.wait_for_run("p", &rid).unwrap();
    let report = ws.report("p", &rid, SortKey::IouAsc).unwrap();
    assert_eq!(report.rows.iter().map(|r| r.text_id.clone()).collect::<Vec<_>>(), ids(&texts, 5..8));
    assert!(report.rows.iter().all(|r| r.metrics.is_none() && r.human.is_none()));
}

#[test]
fn reports_are_sorted_immutable_and_freeze_the_test_set() {
    let dir = tempfile::tempdir().unwrap();
    let texts = corpus(12);
    let ws = workspace(dir.path(), fixed_chat(scripted_chat(&texts)));
    seeded_project(&ws, "p", 12, 12);
    ws.set_examples("p", ids(&texts, 0..3)).unwrap();
    ws.set_test_set("p", ids(&texts, 10..12)).unwrap();
    let rid = ws.start_run("p", RunScope::Validation).unwrap();
    ws.wait_for_run("p", &rid).unwrap();

    let first = ws.report("p", &rid, SortKey::IouAsc).unwrap();
    let ious: Vec<f64> = first.rows.iter().map(|r| r.metrics.as_ref().unwrap().iou).collect();
    assert!(ious.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(first.summary.as_ref(), Some(&ws.state("p").unwrap().iteration_history[0].summary));
    assert!(ws.state("p").unwrap().split.is_test_frozen());
    assert_eq!(
        ws.set_test_set("p", ids(&texts, 9..10)).unwrap_err().code(),
        "TestSetFrozen"
    );

    ws.upsert_annotation("p", "t05", vec![]).unwrap();
    let again = ws.report("p", &rid, SortKey::IouAsc).unwrap();
    assert_eq!(serde_json::to_string(&first).unwrap(), serde_json::to_string(&again).unwrap());

    let reopened = workspace(dir.path(), fixed_chat(EchoChat));
    let after_restart = reopened.report("p", &rid, SortKey::IouAsc).unwrap();
    assert_eq!(after_restart, first);
}

#[test]
fn analysis_dataset_holds_out_the_test_set() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), fixed_chat(EchoChat));
    let texts = seeded_project(&ws, "p", 6, 6);
    ws.set_test_set("p", ids(&texts, 4..6)).unwrap();
    let candidates: BTreeSet<String> = ws.dataset("p").unwrap().candidates().into_iter().map(|c| c.text_id).collect();
    assert_eq!(candidates, ids(&texts, 0..4).into_iter().collect());
}

#[test]
fn export_holds_project_log_and_markdown() {
    let dir = tempfile::tempdir().unwrap();
    let texts = corpus(5);
    let ws = workspace(dir.path(), fixed_chat(scripted_chat(&texts)));
    seeded_project(&ws, "p", 5, 5);
    ws.set_examples("p", ids(&texts, 0..2)).unwrap();
    let rid = ws.start_run("p", RunScope::Validation).unwrap();
    ws.wait_for_run("p", &rid).unwrap();

    let bytes = ws.export("p").unwrap();
    let mut zip = zip::ZipArchive::new(std::io::Cursor::new(bytes)).unwrap();
    let mut names: Vec<String> = zip.file_names().map(str::to_string).collect();
    names.sort();
    assert_eq!(names[0], "changes.jsonl");
    assert_eq!(names[1], "project.json");
    assert_eq!(names.len(), 2 + texts.len());

    let mut project = String::new();
    zip.by_name("project.json").unwrap().read_to_string(&mut project).unwrap();
    assert_eq!(project, canonical_json(&ws.state("p").unwrap()).unwrap());

    let mut md = String::new();
    zip.by_name("texts/0003-t02.md").unwrap().read_to_string(&mut md).unwrap();
    assert!(md.contains("**the card art was confusing**<sup>rules clarity</sup>"), "{md}");
    assert!(md.contains(&rid));
}

#[test]
fn stray_temp_files_and_torn_log_lines_do_not_break_loading() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), fixed_chat(EchoChat));
    seeded_project(&ws, "p", 3, 2);
    let expected = ws.state("p").unwrap();
    let pdir = dir.path().join("p");
    std::fs::write(pdir.join(".tmpXYZ"), "{\"project_id\": \"p\", \"corp").unwrap();
    let mut log = std::fs::OpenOptions::new().append(true).open(pdir.join("changes.jsonl")).unwrap();
    std::io::Write::write_all(&mut log, b"{\"seq\": 99, \"timest").unwrap();

    let reopened = workspace(dir.path(), fixed_chat(EchoChat));
    assert_eq!(reopened.state("p").unwrap(), expected);
    assert_eq!(ProjectState::replay(&reopened.changes("p").unwrap()).unwrap(), expected);
}

#[test]
fn appends_after_a_torn_line_stay_readable() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), fixed_chat(EchoChat));
    seeded_project(&ws, "p", 3, 1);
    let log = dir.path().join("p/changes.jsonl");
    let mut f = std::fs::OpenOptions::new().append(true).open(&log).unwrap();
    std::io::Write::write_all(&mut f, b"{\"seq\": 9").unwrap();

    let reopened = workspace(dir.path(), fixed_chat(EchoChat));
    reopened.set_instructions("p", vec!["x".into()]).unwrap();
    let changes = reopened.changes("p").unwrap();
    assert_eq!(changes.len(), 3);
    assert_eq!(ProjectState::replay(&changes).unwrap(), reopened.state("p").unwrap());
}
