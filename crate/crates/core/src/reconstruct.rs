//! Verification of model output against the original text, and projection of
//! highlight spans back onto the original when the model altered it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{parse_markup, AnnotationError, CodedSegment, Span};

/// Normalized edit distance above which output counts as a rewrite.
pub const DEFAULT_HALLUCINATION_THRESHOLD: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReconstructError {
    #[error(transparent)]
    Markup(#[from] AnnotationError),
    #[error("model output differs from the original by {edit_ratio:.3} (threshold {threshold})")]
    HallucinatedOutput { edit_ratio: f64, threshold: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    /// Segments indexed into the original text.
    pub segments: Vec<CodedSegment>,
    pub edit_distance: usize,
    /// `edit_distance / max(len(original), len(output text))`.
    pub edit_ratio: f64,
    /// True when the output text differed from the original.
    pub reconstructed: bool,
    /// Spans that collapsed during projection.
    pub dropped: usize,
}

/// One step of an alignment between two character sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    /// Both characters present (equal or substituted).
    Align { source: usize, target: usize, equal: bool },
    /// Character present only in the source.
    Insert { source: usize },
    /// Character present only in the target.
    Delete { target: usize },
}

/// Minimal unit-cost alignment turning `source` into `target`, with full
/// traceback. Common prefix and suffix are aligned directly.
pub fn align_chars(source: &[char], target: &[char]) -> (usize, Vec<EditOp>) {
    let prefix = source.iter().zip(target).take_while(|(a, b)| a == b).count();
    let suffix = source[prefix..]
        .iter()
        .rev()
        .zip(target[prefix..].iter().rev())
        .take_while(|(a, b)| a == b)
        .count();
    let s = &source[prefix..source.len() - suffix];
    let t = &target[prefix..target.len() - suffix];
    let (n, m) = (s.len(), t.len());

    // 0 = diagonal, 1 = consume source only, 2 = consume target only
    let width = m + 1;
    let mut trace = vec![0u8; (n + 1) * width];
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for j in 1..=m {
        trace[j] = 2;
    }
    for i in 1..=n {
        cur[0] = i;
        trace[i * width] = 1;
        for j in 1..=m {
            let diag = prev[j - 1] + usize::from(s[i - 1] != t[j - 1]);
            let up = prev[j] + 1;
            let left = cur[j - 1] + 1;
            let (best, dir) = if diag <= up && diag <= left {
                (diag, 0)
            } else if up <= left {
                (up, 1)
            } else {
                (left, 2)
            };
            cur[j] = best;
            trace[i * width + j] = dir;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let distance = prev[m];

    let mut middle = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        match trace[i * width + j] {
            0 => {
                middle.push(EditOp::Align {
                    source: prefix + i - 1,
                    target: prefix + j - 1,
                    equal: s[i - 1] == t[j - 1],
                });
                i -= 1;
                j -= 1;
            }
            1 => {
                middle.push(EditOp::Insert { source: prefix + i - 1 });
                i -= 1;
            }
            _ => {
                middle.push(EditOp::Delete { target: prefix + j - 1 });
                j -= 1;
            }
        }
    }
    middle.reverse();

    let mut ops = Vec::with_capacity(source.len().max(target.len()));
    ops.extend((0..prefix).map(|k| EditOp::Align {
        source: k,
        target: k,
        equal: true,
    }));
    ops.extend(middle);
    ops.extend((0..suffix).map(|k| EditOp::Align {
        source: source.len() - suffix + k,
        target: target.len() - suffix + k,
        equal: true,
    }));
    (distance, ops)
}

/// Checks model output against `original` and returns segments valid for the
/// original text.
pub fn verify_and_reconstruct(original: &str, model_output: &str) -> Result<Reconstruction, ReconstructError> {
    verify_and_reconstruct_with(original, model_output, DEFAULT_HALLUCINATION_THRESHOLD)
}

pub fn verify_and_reconstruct_with(
    original: &str,
    model_output: &str,
    threshold: f64,
) -> Result<Reconstruction, ReconstructError> {
    let (plain, segments) = parse_markup(model_output)?;
    if plain == original {
        return Ok(Reconstruction {
            segments,
            edit_distance: 0,
            edit_ratio: 0.0,
            reconstructed: false,
            dropped: 0,
        });
    }

    let out: Vec<char> = plain.chars().collect();
    let orig: Vec<char> = original.chars().collect();
    let longest = out.len().max(orig.len()).max(1) as f64;
    // length difference is a lower bound on the distance
    let lower = out.len().abs_diff(orig.len()) as f64 / longest;
    if lower > threshold {
        return Err(ReconstructError::HallucinatedOutput {
            edit_ratio: lower,
            threshold,
        });
    }
    let (distance, ops) = align_chars(&out, &orig);
    let edit_ratio = distance as f64 / longest;
    if edit_ratio > threshold {
        return Err(ReconstructError::HallucinatedOutput { edit_ratio, threshold });
    }

    let mut to_original: Vec<Option<usize>> = vec![None; out.len()];
    for op in ops {
        if let EditOp::Align { source, target, .. } = op {
            to_original[source] = Some(target);
        }
    }

    let mut projected = Vec::with_capacity(segments.len());
    let mut dropped = 0;
    for seg in segments {
        let span = seg.span;
        let start = (span.start..span.end).find_map(|p| to_original[p]);
        let last = (span.start..span.end).rev().find_map(|p| to_original[p]);
        match (start, last) {
            (Some(start), Some(last)) if start <= last => projected.push(CodedSegment {
                span: Span::new(start, last + 1),
                codes: seg.codes,
            }),
            _ => {
                log::warn!("dropping highlight {span} that does not map onto the original text");
                dropped += 1;
            }
        }
    }

    Ok(Reconstruction {
        segments: projected,
        edit_distance: distance,
        edit_ratio,
        reconstructed: true,
        dropped,
    })
}
