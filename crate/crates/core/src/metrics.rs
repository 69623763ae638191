//! Human-LLM alignment metrics.
//!
//! * IoU over the character index sets covered by each side's highlights.
//! * Modified Hausdorff distance between the embedded code sets of each side,
//!   using cosine distance, so it lies in `[0, 2]`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{Annotation, SourceText, Span};
use crate::embedding::{cosine_distance, Embedder, EmbeddingError, EmbeddingVector};

/// Annotations of one annotator, keyed by text id.
pub type AnnotationLayer = BTreeMap<String, Annotation>;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("annotations refer to different texts: {0:?} vs {1:?}")]
    TextMismatch(String, String),
    #[error("text {text_id:?} has no {layer} annotation")]
    MissingAnnotation { text_id: String, layer: &'static str },
    #[error("unknown text {0:?}")]
    UnknownText(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Character-level IoU. Both sides empty counts as perfect agreement.
pub fn iou(human: &Annotation, llm: &Annotation) -> Result<f64, MetricsError> {
    if human.text_id != llm.text_id {
        return Err(MetricsError::TextMismatch(human.text_id.clone(), llm.text_id.clone()));
    }
    let h: Vec<Span> = human.segments.iter().map(|s| s.span).collect();
    let l: Vec<Span> = llm.segments.iter().map(|s| s.span).collect();
    Ok(span_iou(&h, &l))
}

/// IoU of two sorted, disjoint span lists.
pub fn span_iou(a: &[Span], b: &[Span]) -> f64 {
    let covered_a = covered(a);
    let covered_b = covered(b);
    if covered_a == 0 && covered_b == 0 {
        return 1.0;
    }
    let inter = intersection(a, b);
    inter as f64 / (covered_a + covered_b - inter) as f64
}

pub fn covered(spans: &[Span]) -> usize {
    spans.iter().map(Span::len).sum()
}

fn intersection(a: &[Span], b: &[Span]) -> usize {
    let (mut i, mut j, mut total) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        let lo = a[i].start.max(b[j].start);
        let hi = a[i].end.min(b[j].end);
        if hi > lo {
            total += hi - lo;
        }
        if a[i].end < b[j].end {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

/// Modified Hausdorff distance between two point clouds under cosine
/// distance: the larger of the two directed mean nearest-neighbour distances.
/// Both sets must be non-empty.
pub fn modified_hausdorff(a: &[EmbeddingVector], b: &[EmbeddingVector]) -> Result<f64, EmbeddingError> {
    assert!(!a.is_empty() && !b.is_empty(), "point sets must be non-empty");
    let mut d = vec![0.0; a.len() * b.len()];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            d[i * b.len() + j] = cosine_distance(x, y)?;
        }
    }
    let forward = (0..a.len())
        .map(|i| d[i * b.len()..(i + 1) * b.len()].iter().copied().fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / a.len() as f64;
    let backward = (0..b.len())
        .map(|j| (0..a.len()).map(|i| d[i * b.len() + j]).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / b.len() as f64;
    Ok(forward.max(backward).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MhdValue {
    pub value: f64,
    /// Exactly one side had no codes; `value` is the maximum, 2.0.
    pub one_sided: bool,
}

/// MHD between the embedded code sets. Codes are deduplicated first; both
/// empty gives 0.0, exactly one empty gives 2.0 with `one_sided` set.
pub fn mhd<S: AsRef<str>>(human_codes: &[S], llm_codes: &[S], embedder: &Embedder) -> Result<MhdValue, MetricsError> {
    let h = dedup(human_codes);
    let l = dedup(llm_codes);
    match (h.is_empty(), l.is_empty()) {
        (true, true) => {
            return Ok(MhdValue {
                value: 0.0,
                one_sided: false,
            })
        }
        (true, false) | (false, true) => {
            return Ok(MhdValue {
                value: 2.0,
                one_sided: true,
            })
        }
        _ => {}
    }
    let eh = embedder.embed(&h)?;
    let el = embedder.embed(&l)?;
    Ok(MhdValue {
        value: modified_hausdorff(&eh, &el)?,
        one_sided: false,
    })
}

/// Sorted distinct codes, so the result does not depend on input order.
fn dedup<S: AsRef<str>>(codes: &[S]) -> Vec<&str> {
    let mut out: Vec<&str> = codes.iter().map(|c| c.as_ref()).collect();
    out.sort_unstable();
    out.dedup();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextAlignment {
    pub text_id: String,
    pub created_order: i64,
    pub iou: f64,
    /// `None` when no embedder was supplied.
    pub mhd: Option<f64>,
    pub human_char_count: usize,
    pub llm_char_count: usize,
    pub one_sided: bool,
    /// Neither side coded anything.
    pub both_uncoded: bool,
}

impl TextAlignment {
    pub fn flags(&self) -> Vec<&'static str> {
        let mut flags = Vec::new();
        if self.one_sided {
            flags.push("one_sided");
        }
        if self.both_uncoded {
            flags.push("both_uncoded");
        }
        if self.mhd.is_none() {
            flags.push("mhd_undefined");
        }
        flags
    }
}

/// Per-text metrics and their means.
///
/// `mean_iou`/`mean_mhd` include every row; the `_coded` variants exclude
/// texts that both sides left uncoded. Means are `None` when there is nothing
/// to average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub per_text: Vec<TextAlignment>,
    pub mean_iou: Option<f64>,
    pub mean_mhd: Option<f64>,
    pub mean_iou_coded: Option<f64>,
    pub mean_mhd_coded: Option<f64>,
    pub n_both_uncoded: usize,
    pub n_one_sided: usize,
    pub n_mhd_undefined: usize,
}

impl AlignmentReport {
    pub fn from_rows(per_text: Vec<TextAlignment>) -> Self {
        let mean_iou = mean(per_text.iter().map(|r| r.iou));
        let mean_mhd = mean(per_text.iter().filter_map(|r| r.mhd));
        let coded = || per_text.iter().filter(|r| !r.both_uncoded);
        let mean_iou_coded = mean(coded().map(|r| r.iou));
        let mean_mhd_coded = mean(coded().filter_map(|r| r.mhd));
        Self {
            n_both_uncoded: per_text.iter().filter(|r| r.both_uncoded).count(),
            n_one_sided: per_text.iter().filter(|r| r.one_sided).count(),
            n_mhd_undefined: per_text.iter().filter(|r| r.mhd.is_none()).count(),
            mean_iou,
            mean_mhd,
            mean_iou_coded,
            mean_mhd_coded,
            per_text,
        }
    }

    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            n_texts: self.per_text.len(),
            mean_iou: self.mean_iou,
            mean_mhd: self.mean_mhd,
            mean_iou_coded: self.mean_iou_coded,
            mean_mhd_coded: self.mean_mhd_coded,
        }
    }

    pub fn row(&self, text_id: &str) -> Option<&TextAlignment> {
        self.per_text.iter().find(|r| r.text_id == text_id)
    }

    /// CSV with columns `text_id,iou,mhd,flags`; flags are `|`-separated.
    pub fn to_csv(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(["text_id", "iou", "mhd", "flags"]).expect("in-memory write");
        for row in &self.per_text {
            let mhd = row.mhd.map(|m| m.to_string()).unwrap_or_default();
            writer
                .write_record([
                    row.text_id.as_str(),
                    &row.iou.to_string(),
                    &mhd,
                    &row.flags().join("|"),
                ])
                .expect("in-memory write");
        }
        String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }
}

/// The headline numbers of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub n_texts: usize,
    pub mean_iou: Option<f64>,
    pub mean_mhd: Option<f64>,
    pub mean_iou_coded: Option<f64>,
    pub mean_mhd_coded: Option<f64>,
}

pub fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Metrics for one text.
pub fn align_text(
    text: &SourceText,
    human: &Annotation,
    llm: &Annotation,
    embedder: Option<&Embedder>,
) -> Result<TextAlignment, MetricsError> {
    let iou_value = iou(human, llm)?;
    let (mhd_value, one_sided) = match embedder {
        Some(e) => {
            let m = mhd(&human.code_set(), &llm.code_set(), e)?;
            (Some(m.value), m.one_sided)
        }
        None => (None, human.is_positive() != llm.is_positive()),
    };
    let human_chars: Vec<Span> = human.segments.iter().map(|s| s.span).collect();
    let llm_chars: Vec<Span> = llm.segments.iter().map(|s| s.span).collect();
    Ok(TextAlignment {
        text_id: text.id.clone(),
        created_order: text.created_order,
        iou: iou_value,
        mhd: mhd_value,
        human_char_count: covered(&human_chars),
        llm_char_count: covered(&llm_chars),
        one_sided,
        both_uncoded: !human.is_positive() && !llm.is_positive(),
    })
}

/// Metrics for each of `texts`, in the given order.
pub fn alignment_report(
    human_layer: &AnnotationLayer,
    llm_layer: &AnnotationLayer,
    texts: &[&SourceText],
    embedder: Option<&Embedder>,
) -> Result<AlignmentReport, MetricsError> {
    let mut rows = Vec::with_capacity(texts.len());
    for text in texts {
        let human = human_layer.get(&text.id).ok_or_else(|| MetricsError::MissingAnnotation {
            text_id: text.id.clone(),
            layer: "human",
        })?;
        let llm = llm_layer.get(&text.id).ok_or_else(|| MetricsError::MissingAnnotation {
            text_id: text.id.clone(),
            layer: "llm",
        })?;
        rows.push(align_text(text, human, llm, embedder)?);
    }
    Ok(AlignmentReport::from_rows(rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortKey {
    IouAsc,
    IouDesc,
    MhdAsc,
    MhdDesc,
    Corpus,
}

impl FromStr for SortKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "iou_asc" => Ok(Self::IouAsc),
            "iou_desc" => Ok(Self::IouDesc),
            "mhd_asc" => Ok(Self::MhdAsc),
            "mhd_desc" => Ok(Self::MhdDesc),
            "corpus" => Ok(Self::Corpus),
            other => Err(format!("unknown sort key {other:?}")),
        }
    }
}

impl fmt::Display for SortKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::IouAsc => "iou_asc",
            Self::IouDesc => "iou_desc",
            Self::MhdAsc => "mhd_asc",
            Self::MhdDesc => "mhd_desc",
            Self::Corpus => "corpus",
        })
    }
}

/// Text ids ordered by `by`; ties (and undefined MHD, which sorts last) fall
/// back to corpus order.
pub fn rank_texts(report: &AlignmentReport, by: SortKey) -> Vec<String> {
    let mut rows: Vec<&TextAlignment> = report.per_text.iter().collect();
    rows.sort_by_key(|r| r.created_order);
    let mhd_key = |r: &TextAlignment, desc: bool| match r.mhd {
        Some(m) if desc => (0u8, -m),
        Some(m) => (0u8, m),
        None => (1u8, 0.0),
    };
    rows.sort_by(|a, b| match by {
        SortKey::IouAsc => a.iou.total_cmp(&b.iou),
        SortKey::IouDesc => b.iou.total_cmp(&a.iou),
        SortKey::MhdAsc | SortKey::MhdDesc => {
            let desc = by == SortKey::MhdDesc;
            let (ka, kb) = (mhd_key(a, desc), mhd_key(b, desc));
            ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1))
        }
        SortKey::Corpus => std::cmp::Ordering::Equal,
    });
    rows.into_iter().map(|r| r.text_id.clone()).collect()
}
