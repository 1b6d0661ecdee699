//! Grasp rectangles and masks from raw head outputs.

use super::net::ForwardOutputs;
use super::{ModelConfig, GRASP_STRIDE};
use crate::error::Result;
use crate::metrics::{GraspRect, ScoredGrasp, SegMask};
use crate::Scalar;

/// Strict 3x3 local maxima of the quality map, best `top_n` first.
///
/// Scores are sigmoid probabilities; equal scores keep row-major order. A
/// flat map has no strict maximum and yields an empty list.
pub fn decode_grasps<T: Scalar>(out: &ForwardOutputs<T>, top_n: usize, cfg: &ModelConfig) -> Result<Vec<ScoredGrasp>> {
    let (rows, cols) = out.grid;
    out.grasp.expect_shape("decode_grasps", &[rows * cols, 4])?;
    let q: Vec<f64> = out.grasp_quality().iter().map(|v| v.f64()).collect();
    let mut peaks: Vec<(usize, f64)> = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let v = q[r * cols + c];
            if !v.is_finite() {
                continue;
            }
            let mut is_max = true;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if (dr, dc) == (0, 0) || rr < 0 || cc < 0 || rr >= rows as i64 || cc >= cols as i64 {
                        continue;
                    }
                    if q[rr as usize * cols + cc as usize] >= v {
                        is_max = false;
                    }
                }
            }
            if is_max {
                peaks.push((r * cols + c, v));
            }
        }
    }
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let stride = GRASP_STRIDE as f64;
    peaks
        .into_iter()
        .take(top_n)
        .map(|(i, v)| {
            let row = out.grasp.row(i);
            let theta = 0.5 * row[1].f64().atan2(row[2].f64()).to_degrees();
            let width = (row[3].f64() * stride).max(1.0);
            let rect = GraspRect::new(
                ((i % cols) as f64 + 0.5) * stride,
                ((i / cols) as f64 + 0.5) * stride,
                width,
                width * cfg.grasp_aspect,
                theta,
            )?;
            Ok(ScoredGrasp {
                rect,
                score: 1.0 / (1.0 + (-v).exp()),
            })
        })
        .collect()
}

/// Pixels with a positive logit.
pub fn predict_mask<T: Scalar>(out: &ForwardOutputs<T>) -> SegMask {
    let (h, w) = (out.seg_logits.shape()[0], out.seg_logits.shape()[1]);
    let d = out.seg_logits.data();
    SegMask::from_fn(h, w, |y, x| d[y * w + x] > T::zero())
}
