//! Example-set selection: chronological prefixes and seeded random draws,
//! both optionally balanced between positive and negative examples.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabError;

/// An annotated text eligible as a few-shot example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleCandidate {
    pub text_id: String,
    pub created_order: i64,
    /// Has at least one coded segment.
    pub positive: bool,
}

/// Split of `n` into (positives, negatives); odd sizes favour positives.
pub fn balanced_counts(n: usize) -> (usize, usize) {
    (n - n / 2, n / 2)
}

fn by_class(candidates: &[ExampleCandidate]) -> (Vec<&ExampleCandidate>, Vec<&ExampleCandidate>) {
    let mut sorted: Vec<&ExampleCandidate> = candidates.iter().collect();
    sorted.sort_by_key(|c| c.created_order);
    sorted.into_iter().partition(|c| c.positive)
}

fn chronological_ids(mut chosen: Vec<&ExampleCandidate>) -> Vec<String> {
    chosen.sort_by_key(|c| c.created_order);
    chosen.into_iter().map(|c| c.text_id.clone()).collect()
}

/// The earliest `n` candidates, or the earliest of each class when balanced.
/// Returned in chronological order.
pub fn chronological_examples(
    candidates: &[ExampleCandidate],
    n: usize,
    balance: bool,
) -> Result<Vec<String>, LabError> {
    if !balance {
        if n > candidates.len() {
            return Err(LabError::InsufficientExamples {
                needed: n,
                available: candidates.len(),
            });
        }
        let mut sorted: Vec<&ExampleCandidate> = candidates.iter().collect();
        sorted.sort_by_key(|c| c.created_order);
        sorted.truncate(n);
        return Ok(chronological_ids(sorted));
    }
    let (pos, neg) = by_class(candidates);
    let (want_pos, want_neg) = balanced_counts(n);
    check_class(want_pos, pos.len(), want_neg, neg.len())?;
    let chosen: Vec<&ExampleCandidate> = pos[..want_pos].iter().chain(&neg[..want_neg]).copied().collect();
    Ok(chronological_ids(chosen))
}

fn check_class(want_pos: usize, have_pos: usize, want_neg: usize, have_neg: usize) -> Result<(), LabError> {
    if want_pos > have_pos {
        return Err(LabError::InsufficientExamples {
            needed: want_pos,
            available: have_pos,
        });
    }
    if want_neg > have_neg {
        return Err(LabError::InsufficientExamples {
            needed: want_neg,
            available: have_neg,
        });
    }
    Ok(())
}

/// Uniform balanced draw without replacement, in chronological order.
pub fn sample_balanced(candidates: &[ExampleCandidate], n: usize, seed: u64) -> Result<Vec<String>, LabError> {
    let (pos, neg) = by_class(candidates);
    let (want_pos, want_neg) = balanced_counts(n);
    check_class(want_pos, pos.len(), want_neg, neg.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<&ExampleCandidate> = pos.choose_multiple(&mut rng, want_pos).copied().collect();
    chosen.extend(neg.choose_multiple(&mut rng, want_neg).copied());
    Ok(chronological_ids(chosen))
}

/// Seed for trial `t` of a multi-trial experiment.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed.wrapping_add((trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}
