//! Corpus and annotation data model, plus the markdown highlight syntax used
//! in prompts and model outputs:
//!
//! ```text
//! **highlighted text**<sup>code one; code two</sup>
//! ```
//!
//! All offsets are Unicode scalar value indices into the plain text.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const BOLD: &str = "**";
const SUP_OPEN: &str = "<sup>";
const SUP_CLOSE: &str = "</sup>";
const CODE_SEPARATOR: &str = "; ";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnnotationError {
    #[error("malformed markup at character {position}: {reason}")]
    MalformedMarkup { position: usize, reason: String },
    #[error("span [{start}, {end}) is invalid for a text of {len} characters")]
    InvalidSpan { start: usize, end: usize, len: usize },
    #[error("invalid code label {label:?}: {reason}")]
    InvalidCode { label: String, reason: &'static str },
    #[error("segments overlap: [{first_start}, {first_end}) and [{second_start}, {second_end})")]
    Overlap {
        first_start: usize,
        first_end: usize,
        second_start: usize,
        second_end: usize,
    },
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus file {path}: {source}")]
    UnreadableFile {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("record {record}: missing field `{field}`")]
    MissingField { record: usize, field: &'static str },
    #[error("record {record}: {reason}")]
    InvalidRecord { record: usize, reason: String },
    #[error("duplicate text id {0:?}")]
    DuplicateId(String),
}

/// One unit of analysis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceText {
    pub id: String,
    /// Preceding texts of the thread, oldest first.
    #[serde(default)]
    pub context: Vec<String>,
    pub body: String,
    pub created_order: i64,
}

impl SourceText {
    pub fn new(id: impl Into<String>, body: impl Into<String>, created_order: i64) -> Self {
        Self {
            id: id.into(),
            context: Vec::new(),
            body: body.into(),
            created_order,
        }
    }

    pub fn with_context(mut self, context: Vec<String>) -> Self {
        self.context = context;
        self
    }

    /// Body length in characters.
    pub fn char_len(&self) -> usize {
        self.body.chars().count()
    }
}

/// Half-open character range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn validate(&self, text_len: usize) -> Result<(), AnnotationError> {
        if self.start < self.end && self.end <= text_len {
            Ok(())
        } else {
            Err(AnnotationError::InvalidSpan {
                start: self.start,
                end: self.end,
                len: text_len,
            })
        }
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// A highlight and the codes applied to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodedSegment {
    pub span: Span,
    pub codes: Vec<String>,
}

impl CodedSegment {
    /// Trims labels and checks them against the wire syntax. Duplicate labels
    /// are rejected.
    pub fn new<S: AsRef<str>>(span: Span, codes: &[S]) -> Result<Self, AnnotationError> {
        let mut out: Vec<String> = Vec::with_capacity(codes.len());
        for code in codes {
            let label = normalize_label(code.as_ref())?;
            if out.contains(&label) {
                return Err(AnnotationError::InvalidCode {
                    label,
                    reason: "duplicate label in segment",
                });
            }
            out.push(label);
        }
        if out.is_empty() {
            return Err(AnnotationError::InvalidCode {
                label: String::new(),
                reason: "segment has no codes",
            });
        }
        if span.is_empty() {
            return Err(AnnotationError::InvalidSpan {
                start: span.start,
                end: span.end,
                len: span.end,
            });
        }
        Ok(Self { span, codes: out })
    }
}

/// Trims a code label and rejects characters reserved by the wire syntax.
pub fn normalize_label(raw: &str) -> Result<String, AnnotationError> {
    let label = raw.trim();
    let reason = if label.is_empty() {
        Some("empty label")
    } else if label.contains(';') {
        Some("contains `;`")
    } else if label.contains('<') || label.contains('>') {
        Some("contains `<` or `>`")
    } else {
        None
    };
    match reason {
        Some(reason) => Err(AnnotationError::InvalidCode {
            label: label.to_string(),
            reason,
        }),
        None => Ok(label.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Annotator {
    Human,
    Llm,
}

/// A set of coded segments for one text by one annotator. Zero segments is a
/// valid negative annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub text_id: String,
    pub annotator: Annotator,
    pub segments: Vec<CodedSegment>,
}

impl Annotation {
    /// Sorts the segments by start and rejects overlapping spans.
    pub fn new(
        text_id: impl Into<String>,
        annotator: Annotator,
        mut segments: Vec<CodedSegment>,
    ) -> Result<Self, AnnotationError> {
        segments.sort_by_key(|s| (s.span.start, s.span.end));
        check_disjoint(&segments)?;
        Ok(Self {
            text_id: text_id.into(),
            annotator,
            segments,
        })
    }

    pub fn empty(text_id: impl Into<String>, annotator: Annotator) -> Self {
        Self {
            text_id: text_id.into(),
            annotator,
            segments: Vec::new(),
        }
    }

    /// True when the annotation has at least one coded segment.
    pub fn is_positive(&self) -> bool {
        !self.segments.is_empty()
    }

    /// Distinct labels in first-appearance order.
    pub fn code_set(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.segments
            .iter()
            .flat_map(|s| s.codes.iter())
            .filter(|c| seen.insert(c.as_str()))
            .cloned()
            .collect()
    }

    pub fn validate_against(&self, text: &SourceText) -> Result<(), AnnotationError> {
        let len = text.char_len();
        for seg in &self.segments {
            seg.span.validate(len)?;
        }
        check_disjoint(&self.segments)
    }
}

fn check_disjoint(sorted: &[CodedSegment]) -> Result<(), AnnotationError> {
    for pair in sorted.windows(2) {
        let (a, b) = (&pair[0].span, &pair[1].span);
        if a.end > b.start {
            return Err(AnnotationError::Overlap {
                first_start: a.start,
                first_end: a.end,
                second_start: b.start,
                second_end: b.end,
            });
        }
    }
    Ok(())
}

/// Ordered label → description mapping, in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Codebook {
    entries: Vec<CodebookEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookEntry {
    pub label: String,
    pub description: String,
}

impl Codebook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.entries.iter().any(|e| e.label == label)
    }

    pub fn description(&self, label: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.label == label)
            .map(|e| e.description.as_str())
    }

    /// Appends a new entry. Returns false (and leaves the codebook untouched)
    /// when the label is already present.
    pub fn insert(&mut self, label: impl Into<String>, description: impl Into<String>) -> bool {
        let label = label.into();
        if self.contains(&label) {
            return false;
        }
        self.entries.push(CodebookEntry {
            label,
            description: description.into(),
        });
        true
    }

    pub fn entries(&self) -> &[CodebookEntry] {
        &self.entries
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.label.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Result of parsing annotated markup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedAnnotation {
    /// The text with all markup removed.
    pub plain: String,
    pub segments: Vec<CodedSegment>,
    /// Whether `plain` reproduces the original text exactly.
    pub matches_original: bool,
}

/// Parses `annotated` and reports whether its plain text matches `original`.
pub fn parse_annotated(original: &str, annotated: &str) -> Result<ParsedAnnotation, AnnotationError> {
    let (plain, segments) = parse_markup(annotated)?;
    let matches_original = plain == original;
    Ok(ParsedAnnotation {
        plain,
        segments,
        matches_original,
    })
}

/// Removes all highlight markup.
pub fn strip_annotations(annotated: &str) -> Result<String, AnnotationError> {
    parse_markup(annotated).map(|(plain, _)| plain)
}

/// Core parser. A `**` immediately followed by `<sup>` closes the innermost
/// open highlight; every other `**` opens one. Nested or overlapping
/// highlights are merged and their codes unioned.
pub fn parse_markup(annotated: &str) -> Result<(String, Vec<CodedSegment>), AnnotationError> {
    let chars: Vec<char> = annotated.chars().collect();
    let mut plain = String::with_capacity(annotated.len());
    let mut plain_len = 0usize;
    let mut open: Vec<(usize, usize)> = Vec::new(); // (plain offset, markup position)
    let mut raw: Vec<(Span, Vec<String>)> = Vec::new();
    let mut i = 0usize;

    while i < chars.len() {
        if starts_with_at(&chars, i, BOLD) {
            let after = i + BOLD.len();
            if starts_with_at(&chars, after, SUP_OPEN) {
                let (start, _) = open.pop().ok_or_else(|| malformed(i, "closing `**` without an opening `**`"))?;
                let codes_start = after + SUP_OPEN.len();
                let codes_end = find_at(&chars, codes_start, SUP_CLOSE)
                    .ok_or_else(|| malformed(after, "`<sup>` without `</sup>`"))?;
                let inner: String = chars[codes_start..codes_end].iter().collect();
                let codes = split_codes(&inner).map_err(|reason| malformed(codes_start, reason))?;
                if start == plain_len {
                    return Err(malformed(i, "empty highlight"));
                }
                raw.push((Span::new(start, plain_len), codes));
                i = codes_end + SUP_CLOSE.len();
            } else {
                open.push((plain_len, i));
                i = after;
            }
            continue;
        }
        if starts_with_at(&chars, i, SUP_OPEN) {
            return Err(malformed(i, "`<sup>` not immediately after a closing `**`"));
        }
        plain.push(chars[i]);
        plain_len += 1;
        i += 1;
    }

    if let Some(&(_, pos)) = open.last() {
        return Err(malformed(pos, "unbalanced `**`"));
    }
    Ok((plain, merge_overlapping(raw)))
}

fn malformed(position: usize, reason: &str) -> AnnotationError {
    AnnotationError::MalformedMarkup {
        position,
        reason: reason.to_string(),
    }
}

fn starts_with_at(chars: &[char], at: usize, pat: &str) -> bool {
    let mut idx = at;
    for p in pat.chars() {
        if chars.get(idx) != Some(&p) {
            return false;
        }
        idx += 1;
    }
    true
}

fn find_at(chars: &[char], from: usize, pat: &str) -> Option<usize> {
    (from..chars.len()).find(|&i| starts_with_at(chars, i, pat))
}

fn split_codes(inner: &str) -> Result<Vec<String>, &'static str> {
    let mut codes: Vec<String> = Vec::new();
    for part in inner.split(';') {
        let label = part.trim();
        if label.is_empty() {
            continue;
        }
        if label.contains('<') || label.contains('>') {
            return Err("code label contains `<` or `>`");
        }
        if !codes.iter().any(|c| c == label) {
            codes.push(label.to_string());
        }
    }
    if codes.is_empty() {
        return Err("empty code list");
    }
    Ok(codes)
}

fn merge_overlapping(mut raw: Vec<(Span, Vec<String>)>) -> Vec<CodedSegment> {
    raw.sort_by_key(|(span, _)| (span.start, span.end));
    let mut merged: Vec<CodedSegment> = Vec::with_capacity(raw.len());
    for (span, codes) in raw {
        match merged.last_mut() {
            Some(last) if last.span.overlaps(&span) => {
                last.span.end = last.span.end.max(span.end);
                for code in codes {
                    if !last.codes.contains(&code) {
                        last.codes.push(code);
                    }
                }
            }
            _ => merged.push(CodedSegment { span, codes }),
        }
    }
    merged
}

/// Renders `segments` onto `body` in the highlight syntax. Segments must be
/// sorted, disjoint and within the body.
pub fn serialize_annotated(body: &str, segments: &[CodedSegment]) -> String {
    let chars: Vec<char> = body.chars().collect();
    let extra: usize = segments
        .iter()
        .map(|s| 4 + SUP_OPEN.len() + SUP_CLOSE.len() + s.codes.iter().map(|c| c.len() + 2).sum::<usize>())
        .sum();
    let mut out = String::with_capacity(body.len() + extra);
    let mut cursor = 0usize;
    for seg in segments {
        out.extend(&chars[cursor..seg.span.start]);
        out.push_str(BOLD);
        out.extend(&chars[seg.span.start..seg.span.end]);
        out.push_str(BOLD);
        out.push_str(SUP_OPEN);
        out.push_str(&seg.codes.join(CODE_SEPARATOR));
        out.push_str(SUP_CLOSE);
        cursor = seg.span.end;
    }
    out.extend(&chars[cursor..]);
    out
}

/// Substring of `body` covered by `span`, by character offsets.
pub fn span_text(body: &str, span: Span) -> String {
    body.chars().skip(span.start).take(span.len()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    Csv,
}

impl CorpusFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "jsonl" | "ndjson" => Some(Self::Jsonl),
            "csv" => Some(Self::Csv),
            _ => None,
        }
    }
}

impl std::str::FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(Self::Jsonl),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown corpus format {other:?}")),
        }
    }
}

/// A raw corpus record before validation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: Option<String>,
    pub text: Option<String>,
    #[serde(default)]
    pub context: Vec<String>,
    pub order: Option<i64>,
}

pub fn import_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<SourceText>, CorpusError> {
    let unreadable = |source| CorpusError::UnreadableFile {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(unreadable)?;
    let records = match format {
        CorpusFormat::Jsonl => read_jsonl_records(BufReader::new(file)).map_err(|e| match e {
            RecordReadError::Io(source) => unreadable(source),
            RecordReadError::Record(e) => e,
        })?,
        CorpusFormat::Csv => read_csv_records(file)?,
    };
    corpus_from_records(records)
}

enum RecordReadError {
    Io(std::io::Error),
    Record(CorpusError),
}

fn read_jsonl_records(reader: impl BufRead) -> Result<Vec<CorpusRecord>, RecordReadError> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(RecordReadError::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(&line).map_err(|e| {
            RecordReadError::Record(CorpusError::InvalidRecord {
                record: idx,
                reason: e.to_string(),
            })
        })?;
        records.push(record);
    }
    Ok(records)
}

fn read_csv_records(file: File) -> Result<Vec<CorpusRecord>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::InvalidRecord {
            record: 0,
            reason: e.to_string(),
        })?
        .clone();
    let column = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (id_col, text_col, context_col, order_col) =
        (column("id"), column("text"), column("context"), column("order"));

    let mut records = Vec::new();
    for (idx, row) in reader.records().enumerate() {
        let row = row.map_err(|e| CorpusError::InvalidRecord {
            record: idx,
            reason: e.to_string(),
        })?;
        let get = |col: Option<usize>| col.and_then(|c| row.get(c)).map(str::to_string);
        let context = match get(context_col) {
            Some(raw) if raw.trim_start().starts_with('[') => {
                serde_json::from_str(&raw).map_err(|e| CorpusError::InvalidRecord {
                    record: idx,
                    reason: format!("context: {e}"),
                })?
            }
            Some(raw) if !raw.is_empty() => vec![raw],
            _ => Vec::new(),
        };
        let order = match get(order_col) {
            Some(raw) if !raw.trim().is_empty() => Some(raw.trim().parse().map_err(|e| {
                CorpusError::InvalidRecord {
                    record: idx,
                    reason: format!("order: {e}"),
                }
            })?),
            _ => None,
        };
        records.push(CorpusRecord {
            id: get(id_col),
            text: get(text_col),
            context,
            order,
        });
    }
    Ok(records)
}

/// Validates records and orders them by `order`, then file position.
/// Records without `order` use their file position.
pub fn corpus_from_records(records: Vec<CorpusRecord>) -> Result<Vec<SourceText>, CorpusError> {
    let mut seen = HashSet::new();
    let mut texts = Vec::with_capacity(records.len());
    for (idx, record) in records.into_iter().enumerate() {
        let id = record.id.ok_or(CorpusError::MissingField {
            record: idx,
            field: "id",
        })?;
        let body = record.text.ok_or(CorpusError::MissingField {
            record: idx,
            field: "text",
        })?;
        if body.is_empty() {
            return Err(CorpusError::InvalidRecord {
                record: idx,
                reason: "empty text".into(),
            });
        }
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId(id));
        }
        let created_order = record.order.unwrap_or(idx as i64);
        texts.push((
            idx,
            SourceText {
                id,
                context: record.context,
                body,
                created_order,
            },
        ));
    }
    texts.sort_by_key(|(idx, t)| (t.created_order, *idx));
    Ok(texts.into_iter().map(|(_, t)| t).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(start: usize, end: usize, codes: &[&str]) -> CodedSegment {
        CodedSegment::new(Span::new(start, end), codes).unwrap()
    }

    #[test]
    fn parses_single_highlight() {
        let original = "I travel quite often, or at least maybe four times a year.";
        let annotated =
            "**I travel quite often**<sup>travel frequency</sup>, or at least maybe four times a year.";
        let parsed = parse_annotated(original, annotated).unwrap();
        assert!(parsed.matches_original);
        assert_eq!(parsed.segments, vec![seg(0, 20, &["travel frequency"])]);
        assert_eq!(span_text(original, parsed.segments[0].span), "I travel quite often");
    }

    #[test]
    fn plain_text_has_no_segments() {
        let parsed = parse_annotated("abc", "abc").unwrap();
        assert!(parsed.segments.is_empty());
        assert_eq!(parsed.plain, "abc");
    }

    #[test]
    fn splits_and_trims_codes() {
        let parsed = parse_annotated("xy", "**xy**<sup>a; b</sup>").unwrap();
        assert_eq!(parsed.segments, vec![seg(0, 2, &["a", "b"])]);
        let parsed = parse_annotated("xy", "**xy**<sup> a ;b;; a</sup>").unwrap();
        assert_eq!(parsed.segments[0].codes, vec!["a", "b"]);
    }

    #[test]
    fn offsets_are_code_points() {
        let parsed = parse_markup("ää **ö€**<sup>x</sup>ü").unwrap();
        assert_eq!(parsed.0, "ää ö€ü");
        assert_eq!(parsed.1, vec![seg(3, 5, &["x"])]);
    }

    #[test]
    fn malformed_inputs() {
        for bad in [
            "**abc",
            "abc**<sup>x</sup>",
            "**abc** <sup>x</sup>",
            "**abc**<sup></sup>",
            "**abc**<sup> ; </sup>",
            "**abc**<sup>x",
            "a<sup>x</sup>",
            "****<sup>x</sup>",
        ] {
            assert!(
                matches!(parse_markup(bad), Err(AnnotationError::MalformedMarkup { .. })),
                "{bad:?} should be malformed"
            );
        }
    }

    #[test]
    fn nested_highlights_are_merged() {
        let (plain, segs) = parse_markup("**a **bc**<sup>x</sup> d**<sup>y</sup> e").unwrap();
        assert_eq!(plain, "a bc d e");
        assert_eq!(segs, vec![seg(0, 6, &["y", "x"])]);
    }

    #[test]
    fn adjacent_highlights_stay_separate() {
        let (_, segs) = parse_markup("**ab**<sup>x</sup>**cd**<sup>y</sup>").unwrap();
        assert_eq!(segs, vec![seg(0, 2, &["x"]), seg(2, 4, &["y"])]);
    }

    #[test]
    fn serialize_examples() {
        assert_eq!(serialize_annotated("abc", &[seg(0, 1, &["x"])]), "**a**<sup>x</sup>bc");
        assert_eq!(serialize_annotated("abc", &[]), "abc");
        assert_eq!(
            serialize_annotated("abcd", &[seg(1, 3, &["p", "q"])]),
            "a**bc**<sup>p; q</sup>d"
        );
    }

    #[test]
    fn strip_examples() {
        assert_eq!(strip_annotations("**a**<sup>x</sup>bc").unwrap(), "abc");
        assert_eq!(strip_annotations("abc").unwrap(), "abc");
    }

    #[test]
    fn annotation_rejects_overlap_and_sorts() {
        let err = Annotation::new("t", Annotator::Human, vec![seg(0, 3, &["a"]), seg(2, 4, &["b"])]);
        assert!(matches!(err, Err(AnnotationError::Overlap { .. })));
        let ok = Annotation::new("t", Annotator::Human, vec![seg(3, 4, &["b"]), seg(0, 3, &["a"])]).unwrap();
        assert_eq!(ok.segments[0].span, Span::new(0, 3));
    }

    #[test]
    fn validate_against_body_length() {
        let text = SourceText::new("t", "abc", 0);
        let ann = Annotation::new("t", Annotator::Human, vec![seg(1, 4, &["a"])]).unwrap();
        assert!(matches!(ann.validate_against(&text), Err(AnnotationError::InvalidSpan { .. })));
    }

    #[test]
    fn labels_reject_reserved_characters() {
        assert!(normalize_label("a;b").is_err());
        assert!(normalize_label("<b>").is_err());
        assert!(normalize_label("   ").is_err());
        assert_eq!(normalize_label("  ok  ").unwrap(), "ok");
        assert!(CodedSegment::new(Span::new(0, 1), &["a", " a"]).is_err());
    }

    #[test]
    fn codebook_keeps_first_appearance_order() {
        let mut book = Codebook::new();
        assert!(book.insert("b", "B"));
        assert!(book.insert("a", "A"));
        assert!(!book.insert("b", "other"));
        assert!(book.insert("B", "case differs"));
        assert_eq!(book.labels().collect::<Vec<_>>(), vec!["b", "a", "B"]);
        assert_eq!(book.description("b"), Some("B"));
    }

    #[test]
    fn code_set_dedups_in_order() {
        let ann = Annotation::new(
            "t",
            Annotator::Llm,
            vec![seg(0, 1, &["x", "y"]), seg(2, 3, &["y", "z"])],
        )
        .unwrap();
        assert_eq!(ann.code_set(), vec!["x", "y", "z"]);
    }

    #[test]
    fn records_sorted_by_order_then_position() {
        let rec = |id: &str, order: Option<i64>| CorpusRecord {
            id: Some(id.into()),
            text: Some(format!("text {id}")),
            context: vec![],
            order,
        };
        let texts = corpus_from_records(vec![rec("a", Some(5)), rec("b", Some(1)), rec("c", Some(5))]).unwrap();
        let ids: Vec<_> = texts.iter().map(|t| t.id.as_str()).collect();
        assert_eq!(ids, vec!["b", "a", "c"]);
    }

    #[test]
    fn record_errors() {
        let missing = CorpusRecord {
            id: Some("x".into()),
            ..Default::default()
        };
        assert!(matches!(
            corpus_from_records(vec![missing]),
            Err(CorpusError::MissingField { field: "text", .. })
        ));
        let rec = CorpusRecord {
            id: Some("x".into()),
            text: Some("t".into()),
            ..Default::default()
        };
        assert!(matches!(
            corpus_from_records(vec![rec.clone(), rec]),
            Err(CorpusError::DuplicateId(id)) if id == "x"
        ));
    }
}
