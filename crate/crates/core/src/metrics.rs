//! Rotated grasp rectangles and the evaluation metrics: segmentation IoU,
//! Precision@X and the Jacquard index J@N.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Exec;

/// Grasp IoU must be strictly greater than this.
pub const JACQUARD_IOU: f64 = 0.25;
/// Orientation difference must be at most this many degrees.
pub const JACQUARD_ANGLE_DEG: f64 = 30.0;
/// Supported Precision@X thresholds.
pub const PRECISION_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Planar 4-DoF grasp. `width` is measured along the direction `theta`
/// (degrees, image axes), `height` perpendicular to it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspRect {
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    pub theta: f64,
}

/// Maps any angle into `[0, 180)`.
pub fn normalize_angle(deg: f64) -> f64 {
    let a = deg.rem_euclid(180.0);
    if a >= 180.0 {
        0.0
    } else {
        a
    }
}

impl GraspRect {
    pub fn new(cx: f64, cy: f64, width: f64, height: f64, theta: f64) -> Result<Self> {
        if !(width > 0.0 && height > 0.0) || ![cx, cy, width, height, theta].iter().all(|v| v.is_finite()) {
            return Err(Error::Domain(format!("invalid grasp rectangle {width}x{height} at ({cx}, {cy}) theta {theta}")));
        }
        Ok(GraspRect {
            cx,
            cy,
            width,
            height,
            theta: normalize_angle(theta),
        })
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }
}

pub type Point = [f64; 2];

/// Corners in counter-clockwise order (positive shoelace area).
pub fn rect_corners(r: &GraspRect) -> [Point; 4] {
    let (s, c) = r.theta.to_radians().sin_cos();
    let (hw, hh) = (r.width / 2.0, r.height / 2.0);
    let u = [c * hw, s * hw];
    let v = [-s * hh, c * hh];
    let at = |a: f64, b: f64| [r.cx + a * u[0] + b * v[0], r.cy + a * u[1] + b * v[1]];
    [at(-1.0, -1.0), at(1.0, -1.0), at(1.0, 1.0), at(-1.0, 1.0)]
}

/// Whether `(x, y)` lies inside `r` after scaling its width by `width_frac`.
pub fn rect_contains(r: &GraspRect, x: f64, y: f64, width_frac: f64) -> bool {
    let (s, c) = r.theta.to_radians().sin_cos();
    let (dx, dy) = (x - r.cx, y - r.cy);
    let u = dx * c + dy * s;
    let v = -dx * s + dy * c;
    u.abs() <= r.width * width_frac / 2.0 && v.abs() <= r.height / 2.0
}

/// Signed shoelace area; positive for counter-clockwise vertex order.
pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

fn cross(o: Point, a: Point, p: Point) -> f64 {
    (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0])
}

/// Sutherland–Hodgman: clips `subject` by every edge of the convex `clip`.
pub fn clip_polygon(subject: &[Point], clip: &[Point]) -> Result<Vec<Point>> {
    for poly in [subject, clip] {
        if poly.len() < 3 {
            return Err(Error::DegeneratePolygon { vertices: poly.len() });
        }
    }
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (dc, dp) = (cross(a, b, cur), cross(a, b, prev));
            if dc >= 0.0 {
                if dp < 0.0 {
                    output.push(intersect(prev, cur, dp, dc));
                }
                output.push(cur);
            } else if dp >= 0.0 {
                output.push(intersect(prev, cur, dp, dc));
            }
        }
    }
    Ok(output)
}

/// Point where segment `p -> q` crosses the clip line, from the signed
/// distances of its endpoints.
fn intersect(p: Point, q: Point, dp: f64, dq: f64) -> Point {
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Area of `subject ∩ clip` for convex counter-clockwise polygons.
pub fn convex_clip_area(subject: &[Point], clip: &[Point]) -> Result<f64> {
    let poly = clip_polygon(subject, clip)?;
    if poly.len() < 3 {
        return Ok(0.0);
    }
    Ok(signed_area(&poly).abs())
}

pub fn rotated_iou(a: &GraspRect, b: &GraspRect) -> f64 {
    let inter = convex_clip_area(&rect_corners(a), &rect_corners(b)).expect("rectangles have four corners");
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Angular distance on the 180-degree circle, in `[0, 90]`.
pub fn orientation_diff(a_deg: f64, b_deg: f64) -> f64 {
    let d = (a_deg - b_deg).abs().rem_euclid(180.0);
    d.min(180.0 - d)
}

/// The Jacquard rule on an already measured pair.
pub fn jacquard_criterion(iou: f64, angle_diff_deg: f64) -> bool {
    angle_diff_deg <= JACQUARD_ANGLE_DEG && iou > JACQUARD_IOU
}

/// One pair satisfies the Jacquard criterion.
pub fn grasp_matches(pred: &GraspRect, gt: &GraspRect) -> bool {
    let diff = orientation_diff(pred.theta, gt.theta);
    diff <= JACQUARD_ANGLE_DEG && jacquard_criterion(rotated_iou(pred, gt), diff)
}

/// Success iff any of the first `n` predictions matches any ground truth.
/// `preds` must already be ordered by descending score.
pub fn jacquard_at_n(preds: &[GraspRect], gts: &[GraspRect], n: usize) -> bool {
    preds.iter().take(n).any(|p| gts.iter().any(|g| grasp_matches(p, g)))
}

/// Orders scored grasps by descending score, ties kept in insertion order.
pub fn sort_by_score(grasps: &mut [ScoredGrasp]) {
    grasps.sort_by(|a, b| b.score.total_cmp(&a.score));
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredGrasp {
    #[serde(flatten)]
    pub rect: GraspRect,
    pub score: f64,
}

/// Row-major boolean mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl SegMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape("SegMask::new", format!("{} cells", height * width), format!("{}", bits.len())));
        }
        Ok(SegMask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        SegMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        SegMask {
            height,
            width,
            bits: (0..height * width).map(|i| f(i / width, i % width)).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Inclusive `(y0, x0, y1, x1)` of the set cells.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            let (y, x) = (i / self.width, i % self.width);
            bb = Some(match bb {
                None => (y, x, y, x),
                Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
            });
        }
        bb
    }
}

/// `|pred ∧ gt| / |pred ∨ gt|`, 1.0 when both are empty.
pub fn seg_iou(pred: &SegMask, gt: &SegMask) -> Result<f64> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::shape(
            "seg_iou",
            format!("{}x{}", gt.height, gt.width),
            format!("{}x{}", pred.height, pred.width),
        ));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

fn check_threshold(x: f64) -> Result<()> {
    if PRECISION_THRESHOLDS.iter().any(|t| (t - x).abs() < 1e-12) {
        Ok(())
    } else {
        Err(Error::Threshold(x))
    }
}

/// Fraction of IoUs strictly above `x`.
pub fn precision_at(ious: &[f64], x: f64) -> Result<f64> {
    check_threshold(x)?;
    if ious.is_empty() {
        return Ok(0.0);
    }
    Ok(ious.iter().filter(|&&v| v > x).count() as f64 / ious.len() as f64)
}

/// One sample's predictions or ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub id: String,
    pub mask: SegMask,
    pub grasps: Vec<ScoredGrasp>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_iou: f64,
    /// Keyed by percent: "50", "60", ...
    pub pr_at: BTreeMap<String, f64>,
    pub j_at_1: f64,
    pub j_at_n: f64,
    pub n: usize,
    pub count: usize,
}

impl EvalReport {
    pub fn pr(&self, x: f64) -> Option<f64> {
        self.pr_at.get(&threshold_key(x)).copied()
    }
}

fn threshold_key(x: f64) -> String {
    format!("{}", (x * 100.0).round() as u32)
}

/// Aggregates all metrics over aligned prediction and ground-truth streams.
pub fn evaluate(preds: &[EvalRecord], gts: &[EvalRecord], n: usize) -> Result<EvalReport> {
    evaluate_with(&Exec::sequential(), preds, gts, n)
}

pub fn evaluate_with(exec: &Exec, preds: &[EvalRecord], gts: &[EvalRecord], n: usize) -> Result<EvalReport> {
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.id != g.id {
            return Err(Error::IdMismatch {
                position: i,
                pred: p.id.clone(),
                gt: g.id.clone(),
            });
        }
    }
    if preds.len() != gts.len() {
        let i = preds.len().min(gts.len());
        let name = |r: Option<&EvalRecord>| r.map_or("<missing>".to_string(), |r| r.id.clone());
        return Err(Error::IdMismatch {
            position: i,
            pred: name(preds.get(i)),
            gt: name(gts.get(i)),
        });
    }
    let per_sample = exec.try_map(preds.len(), |i| -> Result<(f64, bool, bool)> {
        let (p, g) = (&preds[i], &gts[i]);
        let iou = seg_iou(&p.mask, &g.mask)?;
        let mut ranked = p.grasps.clone();
        sort_by_score(&mut ranked);
        let rects: Vec<GraspRect> = ranked.iter().map(|s| s.rect).collect();
        let gt_rects: Vec<GraspRect> = g.grasps.iter().map(|s| s.rect).collect();
        Ok((iou, jacquard_at_n(&rects, &gt_rects, 1), jacquard_at_n(&rects, &gt_rects, n)))
    })?;
    let count = per_sample.len();
    let ious: Vec<f64> = per_sample.iter().map(|s| s.0).collect();
    let frac = |k: usize| if count == 0 { 0.0 } else { k as f64 / count as f64 };
    let mut pr_at = BTreeMap::new();
    for x in PRECISION_THRESHOLDS {
        pr_at.insert(threshold_key(x), precision_at(&ious, x)?);
    }
    Ok(EvalReport {
        mean_iou: if count == 0 { 0.0 } else { ious.iter().sum::<f64>() / count as f64 },
        pr_at,
        j_at_1: frac(per_sample.iter().filter(|s| s.1).count()),
        j_at_n: frac(per_sample.iter().filter(|s| s.2).count()),
        n,
        count,
    })
}
