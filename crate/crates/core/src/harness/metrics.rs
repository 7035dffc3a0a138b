//! One-pass-evaluation metrics.
//!
//! Success is the area under the fraction-of-frames-above-threshold curve
//! over IoU thresholds in [0, 1]; precision the analogue over center
//! distances in [0, 2] m. Both use a fixed 201-point threshold grid with
//! inclusive comparisons (IoU ≥ t passes, distance ≤ t passes), scaled by
//! 100.

use crate::error::{Error, Result};

pub const OPE_GRID: usize = 201;
const DIST_MAX: f64 = 2.0;

fn grid(upper: f64) -> impl Iterator<Item = f64> {
    (0..OPE_GRID).map(move |k| upper * k as f64 / (OPE_GRID - 1) as f64)
}

/// Fraction of frames with IoU at or above each grid threshold.
pub fn success_curve(per_frame: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let n = per_frame.len().max(1) as f64;
    grid(1.0)
        .map(|t| {
            let hits = per_frame.iter().filter(|(iou, _)| *iou >= t).count();
            (t, hits as f64 / n)
        })
        .collect()
}

/// Fraction of frames with center distance at or below each threshold.
pub fn precision_curve(per_frame: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let n = per_frame.len().max(1) as f64;
    grid(DIST_MAX)
        .map(|t| {
            let hits = per_frame.iter().filter(|(_, d)| *d <= t).count();
            (t, hits as f64 / n)
        })
        .collect()
}

/// `(success, precision)` on the fixed grid, scaled to [0, 100].
pub fn compute_ope(per_frame: &[(f64, f64)]) -> Result<(f64, f64)> {
    if per_frame.is_empty() {
        return Err(Error::EmptyInput("compute_ope: no frames".into()));
    }
    let mean = |curve: Vec<(f64, f64)>| {
        100.0 * curve.iter().map(|(_, f)| f).sum::<f64>() / curve.len() as f64
    };
    Ok((
        mean(success_curve(per_frame)),
        mean(precision_curve(per_frame)),
    ))
}
