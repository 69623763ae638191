//! Least-squares fit of the asymptotic exponential `y = a - b·exp(-c·n)`.
//!
//! For a fixed rate `c` the model is linear in `(a, b)`, so the fit reduces
//! to a one-dimensional search over `c ≥ 0`: a log-spaced grid of starts,
//! each local minimum refined by golden-section search. A negative `b`
//! gives the decaying form used for MHD curves.

use serde::{Deserialize, Serialize};

use super::LabError;

const GRID_MIN_LOG10: f64 = -4.0;
const GRID_MAX_LOG10: f64 = 2.0;
const GRID_POINTS: usize = 241;
const REFINE_STARTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpFitParams {
    /// Asymptote.
    pub a: f64,
    /// Span between the asymptote and the value at `n = 0`.
    pub b: f64,
    /// Rate, non-negative.
    pub c: f64,
    pub residual_sse: f64,
    /// All observations were equal; `b = c = 0`.
    pub degenerate: bool,
}

impl ExpFitParams {
    pub fn predict(&self, n: f64) -> f64 {
        self.a - self.b * (-self.c * n).exp()
    }
}

/// Best `(a, b, sse)` for a fixed rate.
fn linear_part(points: &[(f64, f64)], c: f64) -> (f64, f64, f64) {
    let m = points.len() as f64;
    let u: Vec<f64> = points.iter().map(|&(n, _)| (-c * n).exp()).collect();
    let u_mean = u.iter().sum::<f64>() / m;
    let y_mean = points.iter().map(|p| p.1).sum::<f64>() / m;
    let mut suu = 0.0;
    let mut suy = 0.0;
    for (ui, &(_, y)) in u.iter().zip(points) {
        suu += (ui - u_mean) * (ui - u_mean);
        suy += (ui - u_mean) * (y - y_mean);
    }
    // y ≈ a + slope·u, so b = -slope
    let slope = if suu > 1e-300 { suy / suu } else { 0.0 };
    let a = y_mean - slope * u_mean;
    let sse = u
        .iter()
        .zip(points)
        .map(|(ui, &(_, y))| {
            let r = y - (a + slope * ui);
            r * r
        })
        .sum();
    (a, -slope, sse)
}

fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..200 {
        if (hi - lo).abs() < 1e-13 {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        x1
    } else {
        x2
    }
}

/// Fits `y = a - b·exp(-c·n)` to `(n, y)` points.
pub fn fit_exp_curve(points: &[(f64, f64)]) -> Result<ExpFitParams, LabError> {
    if points.len() < 3 {
        return Err(LabError::TooFewPoints {
            needed: 3,
            got: points.len(),
        });
    }
    let mut ns: Vec<f64> = points.iter().map(|p| p.0).collect();
    ns.sort_by(f64::total_cmp);
    if ns.windows(2).any(|w| w[0] == w[1]) {
        return Err(LabError::DuplicateAbscissa);
    }
    if points.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(LabError::NonFinite);
    }
    let first = points[0].1;
    if points.iter().all(|p| p.1 == first) {
        return Ok(ExpFitParams {
            a: first,
            b: 0.0,
            c: 0.0,
            residual_sse: 0.0,
            degenerate: true,
        });
    }

    let sse_at = |log_c: f64| linear_part(points, 10f64.powf(log_c)).2;
    let step = (GRID_MAX_LOG10 - GRID_MIN_LOG10) / (GRID_POINTS - 1) as f64;
    let grid: Vec<(f64, f64)> = (0..GRID_POINTS)
        .map(|i| {
            let x = GRID_MIN_LOG10 + step * i as f64;
            (x, sse_at(x))
        })
        .collect();

    // local minima of the grid, best first
    let mut starts: Vec<usize> = (0..grid.len())
        .filter(|&i| {
            let left = i == 0 || grid[i - 1].1 >= grid[i].1;
            let right = i + 1 == grid.len() || grid[i + 1].1 >= grid[i].1;
            left && right
        })
        .collect();
    starts.sort_by(|&a, &b| grid[a].1.total_cmp(&grid[b].1));
    starts.truncate(REFINE_STARTS);

    // c = 0 is the constant-mean model
    let (a0, _, sse0) = linear_part(points, 0.0);
    let mut best = ExpFitParams {
        a: a0,
        b: 0.0,
        c: 0.0,
        residual_sse: sse0,
        degenerate: false,
    };
    for i in starts {
        let lo = grid[i.saturating_sub(1)].0;
        let hi = grid[(i + 1).min(grid.len() - 1)].0;
        let log_c = golden_section(sse_at, lo, hi);
        let c = 10f64.powf(log_c);
        let (a, b, sse) = linear_part(points, c);
        if sse < best.residual_sse {
            best = ExpFitParams {
                a,
                b,
                c,
                residual_sse: sse,
                degenerate: false,
            };
        }
    }
    Ok(best)
}
