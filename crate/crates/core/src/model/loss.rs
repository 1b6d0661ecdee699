//! Segmentation and grasp-map losses with their gradients.

use super::net::ForwardOutputs;
use super::{ModelConfig, GRASP_STRIDE};
use crate::data::SceneSample;
use crate::error::{Error, Result};
use crate::metrics::{rect_contains, GraspRect, SegMask};
use crate::tensor::Tensor;
use crate::Scalar;

/// Fraction of a ground-truth rectangle's width that counts as positive.
pub const POSITIVE_WIDTH_FRAC: f64 = 1.0 / 3.0;

/// Ground truth rasterized to the output grids.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub height: usize,
    pub width: usize,
    /// Row-major `h*w`, 0 or 1.
    pub mask: Vec<f64>,
    /// One entry per stride-16 cell; `Some([sin 2θ, cos 2θ, width / stride])`
    /// for positive cells.
    pub cells: Vec<Option<[f64; 3]>>,
}

impl Targets {
    pub fn new(mask: &SegMask, grasps: &[GraspRect], cfg: &ModelConfig) -> Result<Self> {
        if (mask.height(), mask.width()) != (cfg.height, cfg.width) {
            return Err(Error::shape(
                "targets",
                format!("{}x{}", cfg.height, cfg.width),
                format!("{}x{}", mask.height(), mask.width()),
            ));
        }
        let (rows, cols) = cfg.grid(GRASP_STRIDE);
        let s = GRASP_STRIDE as f64;
        let cells = (0..rows * cols)
            .map(|i| {
                let (x, y) = (((i % cols) as f64 + 0.5) * s, ((i / cols) as f64 + 0.5) * s);
                grasps.iter().find(|g| rect_contains(g, x, y, POSITIVE_WIDTH_FRAC)).map(|g| {
                    let (sin, cos) = (2.0 * g.theta).to_radians().sin_cos();
                    [sin, cos, g.width / s]
                })
            })
            .collect();
        Ok(Targets {
            height: mask.height(),
            width: mask.width(),
            mask: mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            cells,
        })
    }

    pub fn from_sample(s: &SceneSample, cfg: &ModelConfig) -> Result<Self> {
        Self::new(&s.mask, &s.grasps, cfg)
    }

    pub fn positives(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub seg_bce: f64,
    pub quality_bce: f64,
    pub regression: f64,
}

impl LossBreakdown {
    pub fn grasp(&self) -> f64 {
        self.quality_bce + self.regression
    }
}

/// `dL/d seg_logits` (`[h, w]`) and `dL/d grasp` (`[N', 4]`).
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrads<T> {
    pub seg: Tensor<T>,
    pub grasp: Tensor<T>,
}

/// Binary cross-entropy on a logit, and its derivative.
pub fn bce_with_logits(x: f64, y: f64) -> (f64, f64) {
    let l = x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
    let s = 1.0 / (1.0 + (-x).exp());
    (l, s - y)
}

pub fn loss<T: Scalar>(out: &ForwardOutputs<T>, targets: &Targets, cfg: &ModelConfig) -> Result<(LossBreakdown, LossGrads<T>)> {
    let (h, w) = (targets.height, targets.width);
    out.seg_logits.expect_shape("loss seg_logits", &[h, w])?;
    let n = targets.cells.len();
    out.grasp.expect_shape("loss grasp", &[n, 4])?;

    let inv_pix = 1.0 / (h * w) as f64;
    let mut seg_bce = 0.0;
    let mut d_seg = Vec::with_capacity(h * w);
    for (&x, &y) in out.seg_logits.data().iter().zip(&targets.mask) {
        let (l, g) = bce_with_logits(x.f64(), y);
        seg_bce += l;
        d_seg.push(T::c(g * inv_pix * cfg.seg_weight));
    }
    seg_bce *= inv_pix;

    let inv_cells = 1.0 / n as f64;
    let inv_pos = 1.0 / (targets.positives().max(1) as f64);
    let (mut quality_bce, mut regression) = (0.0, 0.0);
    let mut d_grasp = Tensor::zeros(&[n, 4]);
    for (i, cell) in targets.cells.iter().enumerate() {
        let row = out.grasp.row(i).iter().map(|v| v.f64()).collect::<Vec<_>>();
        let (l, g) = bce_with_logits(row[0], if cell.is_some() { 1.0 } else { 0.0 });
        quality_bce += l;
        let d = d_grasp.row_mut(i);
        d[0] = T::c(g * inv_cells * cfg.grasp_weight);
        if let Some(t) = cell {
            for k in 0..3 {
                let e = row[k + 1] - t[k];
                regression += e * e;
                d[k + 1] = T::c(2.0 * e * inv_pos * cfg.grasp_weight);
            }
        }
    }
    quality_bce *= inv_cells;
    regression *= inv_pos;

    let total = cfg.seg_weight * seg_bce + cfg.grasp_weight * (quality_bce + regression);
    if !total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((
        LossBreakdown {
            total,
            seg_bce,
            quality_bce,
            regression,
        },
        LossGrads {
            seg: Tensor::new(vec![h, w], d_seg)?,
            grasp: d_grasp,
        },
    ))
}

/// Weighted per-pixel then per-cell contributions whose sum is `total`.
pub fn loss_terms<T: Scalar>(out: &ForwardOutputs<T>, targets: &Targets, cfg: &ModelConfig) -> Result<Vec<f64>> {
    let (h, w) = (targets.height, targets.width);
    out.seg_logits.expect_shape("loss_terms seg_logits", &[h, w])?;
    let n = targets.cells.len();
    out.grasp.expect_shape("loss_terms grasp", &[n, 4])?;
    let k_pix = cfg.seg_weight / (h * w) as f64;
    let k_cell = cfg.grasp_weight / n as f64;
    let k_pos = cfg.grasp_weight / (targets.positives().max(1) as f64);
    let mut terms: Vec<f64> = out
        .seg_logits
        .data()
        .iter()
        .zip(&targets.mask)
        .map(|(&x, &y)| k_pix * bce_with_logits(x.f64(), y).0)
        .collect();
    for (i, cell) in targets.cells.iter().enumerate() {
        let row = out.grasp.row(i);
        let mut t = k_cell * bce_with_logits(row[0].f64(), if cell.is_some() { 1.0 } else { 0.0 }).0;
        if let Some(c) = cell {
            t += k_pos * (0..3).map(|k| (row[k + 1].f64() - c[k]).powi(2)).sum::<f64>();
        }
        terms.push(t);
    }
    Ok(terms)
}
