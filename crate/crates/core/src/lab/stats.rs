use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::LabError;

/// Default number of equal-count time bins.
pub const DEFAULT_BINS: usize = 10;

/// Pearson correlation, `None` when either side has zero variance or fewer
/// than two points.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// One code applied to one segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeApplication {
    pub created_order: i64,
    pub label: String,
}

/// Fraction of code applications in each time bin whose label had not been
/// used in any earlier bin. The log is split into `bins` contiguous
/// equal-count chunks by `created_order`; `bins` is capped at the log length.
pub fn new_code_fraction(log: &[CodeApplication], bins: usize) -> Result<Vec<f64>, LabError> {
    if log.is_empty() {
        return Err(LabError::EmptyLog);
    }
    let bins = bins.clamp(1, log.len());
    let mut ordered: Vec<&CodeApplication> = log.iter().collect();
    ordered.sort_by_key(|a| a.created_order);

    let mut seen_before: HashSet<&str> = HashSet::new();
    let mut out = Vec::with_capacity(bins);
    for b in 0..bins {
        let chunk = &ordered[b * ordered.len() / bins..(b + 1) * ordered.len() / bins];
        let fresh = chunk.iter().filter(|a| !seen_before.contains(a.label.as_str())).count();
        out.push(fresh as f64 / chunk.len() as f64);
        seen_before.extend(chunk.iter().map(|a| a.label.as_str()));
    }
    Ok(out)
}
