//! Depth-guided geometric attention.
//!
//! Patch depths and grid positions are turned into two `[HW, HW]` relation
//! matrices, mixed into a non-negative geometry prior `G`, and every attention
//! head multiplies its softmax map entry-wise by the decay mask `eta_h ^ G`.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::{GradCheckLayer, LayerIO};
use crate::scalar::Scalar;
use crate::tensor::{self, matmul, matmul_nt, matmul_tn, Tensor};

/// Per-patch mean depth, min-max normalised to `[0, 1]` over the image.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<T> {
    pub rows: usize,
    pub cols: usize,
    /// `[rows, cols]`
    pub pooled_depth: Tensor<T>,
}

/// Average-pools a `[h, w]` depth map (meters) onto a `rows x cols` patch grid.
///
/// Zero pixels count as missing and are excluded from their patch mean; a
/// patch with no valid pixel takes the farthest pooled depth.
pub fn pool_depth<T: Scalar>(depth: &Tensor<T>, rows: usize, cols: usize) -> Result<PatchGrid<T>> {
    let (h, w) = depth.dims2("pool_depth")?;
    if rows == 0 || cols == 0 || h % rows != 0 || w % cols != 0 {
        return Err(Error::shape("pool_depth", format!("grid dividing {h}x{w}"), format!("{rows}x{cols}")));
    }
    let (ph, pw) = (h / rows, w / cols);
    let mut means: Vec<Option<f64>> = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (mut sum, mut n) = (0.0f64, 0usize);
            for y in r * ph..(r + 1) * ph {
                for &v in &depth.row(y)[c * pw..(c + 1) * pw] {
                    let v = v.f64();
                    if !v.is_finite() || v < 0.0 {
                        return Err(Error::Domain(format!("depth value {v} at row {y}")));
                    }
                    if v > 0.0 {
                        sum += v;
                        n += 1;
                    }
                }
            }
            means.push((n > 0).then(|| sum / n as f64));
        }
    }
    let valid = means.iter().flatten();
    let max = valid.clone().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::AllInvalid);
    }
    let min = valid.copied().fold(f64::INFINITY, f64::min);
    let span = max - min;
    let data = means
        .into_iter()
        .map(|m| {
            let m = m.unwrap_or(max);
            T::c(if span > 0.0 { (m - min) / span } else { 0.0 })
        })
        .collect();
    Ok(PatchGrid {
        rows,
        cols,
        pooled_depth: Tensor::new(vec![rows, cols], data)?,
    })
}

/// `|D_i - D_j|` over row-major flattened patches.
pub fn depth_relation<T: Scalar>(grid: &PatchGrid<T>) -> Tensor<T> {
    let d = grid.pooled_depth.data();
    let n = d.len();
    Tensor::from_fn(&[n, n], |k| (d[k / n] - d[k % n]).abs())
}

/// Manhattan distance between patch coordinates, before normalisation.
pub fn manhattan_relation<T: Scalar>(rows: usize, cols: usize) -> Tensor<T> {
    let n = rows * cols;
    Tensor::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        let (ri, ci) = (i / cols, i % cols);
        let (rj, cj) = (j / cols, j % cols);
        T::c((ri.abs_diff(rj) + ci.abs_diff(cj)) as f64)
    })
}

/// Manhattan relation divided by its largest possible value `rows + cols - 2`.
pub fn spatial_relation<T: Scalar>(rows: usize, cols: usize) -> Tensor<T> {
    let raw = manhattan_relation::<T>(rows, cols);
    let span = rows + cols - 2;
    if span == 0 {
        return raw;
    }
    let inv = T::one() / T::c(span as f64);
    raw.map(|v| v * inv)
}

/// Read-mostly cache of [`spatial_relation`] keyed by grid shape.
#[derive(Debug, Default)]
pub struct RelationCache<T> {
    inner: RwLock<HashMap<(usize, usize), Arc<Tensor<T>>>>,
}

impl<T: Scalar> RelationCache<T> {
    pub fn new() -> Self {
        RelationCache {
            inner: RwLock::new(HashMap::new()),
        }
    }

    pub fn get(&self, rows: usize, cols: usize) -> Arc<Tensor<T>> {
        if let Some(hit) = self.inner.read().expect("relation cache poisoned").get(&(rows, cols)) {
            return Arc::clone(hit);
        }
        let mut map = self.inner.write().expect("relation cache poisoned");
        Arc::clone(
            map.entry((rows, cols))
                .or_insert_with(|| Arc::new(spatial_relation(rows, cols))),
        )
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("relation cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// `G = softplus(l1) * dD + softplus(l2) * dS`
pub fn fuse_prior<T: Scalar>(delta_d: &Tensor<T>, delta_s: &Tensor<T>, lambda1_raw: T, lambda2_raw: T) -> Result<Tensor<T>> {
    let a = T::c(softplus(lambda1_raw.f64()));
    let b = T::c(softplus(lambda2_raw.f64()));
    delta_d.zip_map(delta_s, |d, s| a * d + b * s)
}

/// Relations are shared, so cloning a prior does not copy them.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryPrior<T> {
    pub delta_d: Arc<Tensor<T>>,
    pub delta_s: Arc<Tensor<T>>,
    pub lambda1_raw: T,
    pub lambda2_raw: T,
}

impl<T: Scalar> GeometryPrior<T> {
    pub fn new(delta_d: impl Into<Arc<Tensor<T>>>, delta_s: impl Into<Arc<Tensor<T>>>, lambda1_raw: T, lambda2_raw: T) -> Result<Self> {
        let (delta_d, delta_s) = (delta_d.into(), delta_s.into());
        let (n, m) = delta_d.dims2("GeometryPrior")?;
        if n != m {
            return Err(Error::shape("GeometryPrior", "square relation".to_string(), format!("{n}x{m}")));
        }
        delta_s.expect_shape("GeometryPrior", &[n, n])?;
        Ok(GeometryPrior {
            delta_d,
            delta_s,
            lambda1_raw,
            lambda2_raw,
        })
    }

    /// Builds both relations from a depth map at the given patch grid.
    pub fn from_depth(depth: &Tensor<T>, rows: usize, cols: usize, lambda1_raw: T, lambda2_raw: T) -> Result<Self> {
        let grid = pool_depth(depth, rows, cols)?;
        Self::new(depth_relation(&grid), spatial_relation(rows, cols), lambda1_raw, lambda2_raw)
    }

    /// A prior that is identically zero; attention under it is plain attention.
    pub fn zero(tokens: usize) -> Self {
        let z = Arc::new(Tensor::zeros(&[tokens, tokens]));
        GeometryPrior {
            delta_d: Arc::clone(&z),
            delta_s: z,
            lambda1_raw: T::zero(),
            lambda2_raw: T::zero(),
        }
    }

    /// `G`, see [`fuse_prior`].
    pub fn fused(&self) -> Tensor<T> {
        fuse_prior(&self.delta_d, &self.delta_s, self.lambda1_raw, self.lambda2_raw).expect("relation shapes checked on construction")
    }

    pub fn tokens(&self) -> usize {
        self.delta_d.rows()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayMode {
    /// `eta ^ G`, entries in `(0, 1]`, decreasing in `G`.
    #[default]
    Power,
    /// `eta * G`, kept for ablation only.
    Product,
}

/// Entry-wise `eta ^ G`.
pub fn decay_matrix<T: Scalar>(g: &Tensor<T>, eta: f64) -> Result<Tensor<T>> {
    decay_matrix_with(g, eta, DecayMode::Power)
}

pub fn decay_matrix_with<T: Scalar>(g: &Tensor<T>, eta: f64, mode: DecayMode) -> Result<Tensor<T>> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::Domain(format!("decay factor {eta} outside (0, 1)")));
    }
    Ok(match mode {
        DecayMode::Power => {
            let ln_eta = T::c(eta.ln());
            g.map(|v| (v * ln_eta).exp())
        }
        DecayMode::Product => g.scale(T::c(eta)),
    })
}

/// One decay factor per head, each in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecaySchedule {
    etas: Vec<f64>,
}

impl DecaySchedule {
    pub fn new(etas: Vec<f64>) -> Result<Self> {
        if etas.is_empty() {
            return Err(Error::Config("decay schedule needs at least one head".into()));
        }
        if let Some(bad) = etas.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
            return Err(Error::Domain(format!("decay factor {bad} outside (0, 1)")));
        }
        Ok(DecaySchedule { etas })
    }

    /// `eta_h = 1 - 2^-(h+1)`: 0.5, 0.75, 0.875, ...
    pub fn geometric(heads: usize) -> Self {
        DecaySchedule {
            etas: (0..heads).map(|h| 1.0 - 0.5f64.powi(h as i32 + 1)).collect(),
        }
    }

    pub fn etas(&self) -> &[f64] {
        &self.etas
    }

    pub fn heads(&self) -> usize {
        self.etas.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionOptions {
    /// Divide `Q K^T` by `sqrt(d)`.
    pub scale_qk: bool,
    /// Re-normalise rows after the decay mask.
    pub renorm_after_decay: bool,
    pub decay_mode: DecayMode,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        AttentionOptions {
            scale_qk: true,
            renorm_after_decay: false,
            decay_mode: DecayMode::Power,
        }
    }
}

/// Fused multi-head projections; head `h` owns columns `h*d..(h+1)*d`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoAttentionParams<T> {
    pub heads: usize,
    /// `[C, C]`
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    /// `[C, C]`
    pub wo: Tensor<T>,
}

impl<T: Scalar> GeoAttentionParams<T> {
    pub fn new(heads: usize, wq: Tensor<T>, wk: Tensor<T>, wv: Tensor<T>, wo: Tensor<T>) -> Result<Self> {
        let (c, c2) = wq.dims2("GeoAttentionParams")?;
        if c != c2 || heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!("channels {c} must be square and divisible by {heads} heads")));
        }
        for w in [&wk, &wv, &wo] {
            w.expect_shape("GeoAttentionParams", &[c, c])?;
        }
        Ok(GeoAttentionParams { heads, wq, wk, wv, wo })
    }

    pub fn random(channels: usize, heads: usize, std: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut draw = || Tensor::from_fn(&[channels, channels], |_| T::c(std * crate::init::standard_normal(rng)));
        let (wq, wk, wv, wo) = (draw(), draw(), draw(), draw());
        Self::new(heads, wq, wk, wv, wo)
    }

    pub fn channels(&self) -> usize {
        self.wq.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }

    pub fn zeros_like(&self) -> Self {
        GeoAttentionParams {
            heads: self.heads,
            wq: self.wq.zeros_like(),
            wk: self.wk.zeros_like(),
            wv: self.wv.zeros_like(),
            wo: self.wo.zeros_like(),
        }
    }
}

/// Per-head decay masks for a prior, shared by forward and backward.
pub fn decay_masks<T: Scalar>(prior: &GeometryPrior<T>, sched: &DecaySchedule, mode: DecayMode) -> Result<Vec<Tensor<T>>> {
    let g = prior.fused();
    sched.etas().iter().map(|&eta| decay_matrix_with(&g, eta, mode)).collect()
}

/// The [`DecayMode::Power`] masks of the prior built from `grid` by
/// [`depth_relation`] and [`spatial_relation`], using O(HW) exponentials per
/// head instead of one per entry.
///
/// With `k = softplus(l1) ln(eta) < 0`, `eta ^ (softplus(l1) |p_i - p_j|)` is
/// `min(e^(k p_i) e^(-k p_j), e^(k p_j) e^(-k p_i))`, and the spatial term
/// splits into a row factor and a column factor.
pub fn separable_decay_masks<T: Scalar>(grid: &PatchGrid<T>, lambda1_raw: T, lambda2_raw: T, sched: &DecaySchedule) -> Vec<Tensor<T>> {
    let (rows, cols) = (grid.rows, grid.cols);
    let n = rows * cols;
    let p = grid.pooled_depth.data();
    let a = softplus(lambda1_raw.f64());
    let b = softplus(lambda2_raw.f64());
    let span = rows + cols - 2;
    // depth lies in [0, 1], so the factors stay well inside f32 range
    const MAX_RATE: f64 = 30.0;
    sched
        .etas()
        .iter()
        .map(|&eta| {
            let ln_eta = eta.ln();
            let kd = a * ln_eta;
            let ks = if span == 0 { 0.0 } else { b * ln_eta / span as f64 };
            let row_factor: Vec<T> = (0..rows).map(|m| T::c((ks * m as f64).exp())).collect();
            // col_factor[ci * cols + cj] = e^(ks |ci - cj|)
            let col_factor: Vec<T> = (0..cols * cols).map(|k| T::c((ks * (k / cols).abs_diff(k % cols) as f64).exp())).collect();
            let up: Vec<T> = p.iter().map(|&v| T::c((kd * v.f64()).exp())).collect();
            let down: Vec<T> = p.iter().map(|&v| T::c((-kd * v.f64()).exp())).collect();
            let separable = kd.abs() <= MAX_RATE;
            let kd_t = T::c(kd);
            let mut mask = Tensor::zeros(&[n, n]);
            for i in 0..n {
                let (ri, ci) = (i / cols, i % cols);
                let cf = &col_factor[ci * cols..(ci + 1) * cols];
                let row = mask.row_mut(i);
                for rj in 0..rows {
                    let f = row_factor[ri.abs_diff(rj)];
                    let span_j = rj * cols..(rj + 1) * cols;
                    let out = &mut row[span_j.clone()];
                    if separable {
                        let (ui, di) = (up[i], down[i]);
                        for (((o, &u), &d), &c) in out.iter_mut().zip(&up[span_j.clone()]).zip(&down[span_j]).zip(cf) {
                            *o = (ui * d).min(u * di) * f * c;
                        }
                    } else {
                        for ((o, &pj), &c) in out.iter_mut().zip(&p[span_j]).zip(cf) {
                            *o = (kd_t * (p[i] - pj).abs()).exp() * f * c;
                        }
                    }
                }
                row[i] = T::one();
            }
            mask
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct HeadCache<T> {
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// softmax output
    probs: Tensor<T>,
    /// probabilities after masking (and optional re-normalisation)
    weights: Tensor<T>,
    /// row sums before re-normalisation
    row_sums: Option<Vec<T>>,
}

#[derive(Clone, Debug)]
pub struct GeoAttentionCache<T> {
    x: Tensor<T>,
    concat: Tensor<T>,
    heads: Vec<HeadCache<T>>,
    masks: Option<Vec<Tensor<T>>>,
    prior: Option<GeometryPrior<T>>,
    etas: Vec<f64>,
    opts: AttentionOptions,
    scale: T,
}

#[derive(Clone, Debug)]
pub struct GeoAttentionGrads<T> {
    pub x: Tensor<T>,
    pub params: GeoAttentionParams<T>,
    pub lambda1_raw: T,
    pub lambda2_raw: T,
}

fn head_slice<T: Scalar>(t: &Tensor<T>, h: usize, d: usize) -> Tensor<T> {
    let n = t.rows();
    let mut out = Tensor::zeros(&[n, d]);
    for i in 0..n {
        out.row_mut(i).copy_from_slice(&t.row(i)[h * d..(h + 1) * d]);
    }
    out
}

fn head_scatter<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>, h: usize, d: usize) {
    for i in 0..src.rows() {
        dst.row_mut(i)[h * d..(h + 1) * d].copy_from_slice(src.row(i));
    }
}

/// Multi-head attention with optional per-head multiplicative masks.
///
/// Each head computes `softmax(Q K^T / sqrt(d)) ⊙ M_h` and applies it to `V`;
/// head outputs are concatenated and projected by `Wo`. With `masks = None`
/// this is plain scaled dot-product attention.
pub fn attention_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &GeoAttentionParams<T>,
    masks: Option<&[Tensor<T>]>,
    opts: AttentionOptions,
) -> Result<(Tensor<T>, GeoAttentionCache<T>)> {
    attention_owned(x, params, masks.map(<[_]>::to_vec), opts)
}

fn attention_owned<T: Scalar>(
    x: &Tensor<T>,
    params: &GeoAttentionParams<T>,
    masks: Option<Vec<Tensor<T>>>,
    opts: AttentionOptions,
) -> Result<(Tensor<T>, GeoAttentionCache<T>)> {
    let (n, c) = x.dims2("attention_forward")?;
    if c != params.channels() {
        return Err(Error::shape("attention_forward", format!("{} channels", params.channels()), format!("{c}")));
    }
    if let Some(m) = &masks {
        if m.len() != params.heads {
            return Err(Error::shape("attention_forward", format!("{} decay masks", params.heads), format!("{}", m.len())));
        }
        for mask in m {
            mask.expect_shape("attention_forward", &[n, n])?;
        }
    }
    let d = params.head_dim();
    let scale = if opts.scale_qk { T::one() / T::c((d as f64).sqrt()) } else { T::one() };
    let q_all = matmul(x, &params.wq)?;
    let k_all = matmul(x, &params.wk)?;
    let v_all = matmul(x, &params.wv)?;
    let mut concat = Tensor::zeros(&[n, c]);
    let mut heads = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let q = head_slice(&q_all, h, d);
        let k = head_slice(&k_all, h, d);
        let v = head_slice(&v_all, h, d);
        let mut probs = matmul_nt(&q, &k)?;
        if opts.scale_qk {
            probs.data_mut().iter_mut().for_each(|s| *s *= scale);
        }
        let scores = probs;
        let probs = tensor::softmax_rows(&scores)?;
        let (weights, row_sums) = match &masks {
            Some(m) if opts.renorm_after_decay => {
                // Normalise exp(s - max) * M directly. With M = 1 this is the
                // softmax computation itself, so the result is bit-identical.
                let mut w = scores;
                let mut sums = Vec::with_capacity(n);
                for i in 0..n {
                    let row = w.row_mut(i);
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        z += *v;
                    }
                    let mut total = T::zero();
                    for (v, &mk) in row.iter_mut().zip(m[h].row(i)) {
                        *v *= mk;
                        total += *v;
                    }
                    row.iter_mut().for_each(|v| *v /= total);
                    // sum of the masked probabilities
                    sums.push(total / z);
                }
                (w, Some(sums))
            }
            Some(m) => (probs.hadamard(&m[h])?, None),
            None => (probs.clone(), None),
        };
        let out = matmul(&weights, &v)?;
        head_scatter(&mut concat, &out, h, d);
        heads.push(HeadCache {
            q,
            k,
            v,
            probs,
            weights,
            row_sums,
        });
    }
    let y = matmul(&concat, &params.wo)?;
    Ok((
        y,
        GeoAttentionCache {
            x: x.clone(),
            concat,
            heads,
            masks,
            prior: None,
            etas: Vec::new(),
            opts,
            scale,
        },
    ))
}

/// Geometry-aware attention: plain multi-head attention whose probability
/// maps are multiplied by `eta_h ^ G` for each head.
pub fn geo_attention_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &GeoAttentionParams<T>,
    prior: &GeometryPrior<T>,
    sched: &DecaySchedule,
    opts: AttentionOptions,
) -> Result<(Tensor<T>, GeoAttentionCache<T>)> {
    if sched.heads() != params.heads {
        return Err(Error::Config(format!("{} decay factors for {} heads", sched.heads(), params.heads)));
    }
    if prior.tokens() != x.rows() {
        return Err(Error::shape("geo_attention_forward", format!("prior for {} tokens", x.rows()), format!("{}", prior.tokens())));
    }
    let masks = decay_masks(prior, sched, opts.decay_mode)?;
    let (y, mut cache) = attention_owned(x, params, Some(masks), opts)?;
    cache.prior = Some(prior.clone());
    cache.etas = sched.etas().to_vec();
    Ok((y, cache))
}

/// [`geo_attention_forward`] for the prior built from `grid`, taking its
/// masks from [`separable_decay_masks`] under [`DecayMode::Power`].
pub fn geo_attention_forward_grid<T: Scalar>(
    x: &Tensor<T>,
    params: &GeoAttentionParams<T>,
    grid: &PatchGrid<T>,
    prior: GeometryPrior<T>,
    sched: &DecaySchedule,
    opts: AttentionOptions,
) -> Result<(Tensor<T>, GeoAttentionCache<T>)> {
    if opts.decay_mode != DecayMode::Power {
        return geo_attention_forward(x, params, &prior, sched, opts);
    }
    if sched.heads() != params.heads {
        return Err(Error::Config(format!("{} decay factors for {} heads", sched.heads(), params.heads)));
    }
    if prior.tokens() != x.rows() || grid.rows * grid.cols != x.rows() {
        return Err(Error::shape("geo_attention_forward", format!("prior for {} tokens", x.rows()), format!("{}", prior.tokens())));
    }
    let masks = separable_decay_masks(grid, prior.lambda1_raw, prior.lambda2_raw, sched);
    let (y, mut cache) = attention_owned(x, params, Some(masks), opts)?;
    cache.prior = Some(prior);
    cache.etas = sched.etas().to_vec();
    Ok((y, cache))
}

pub fn plain_attention_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &GeoAttentionParams<T>,
    opts: AttentionOptions,
) -> Result<(Tensor<T>, GeoAttentionCache<T>)> {
    attention_forward(x, params, None, opts)
}

/// Analytic gradients of [`geo_attention_forward`] / [`attention_forward`].
///
/// `dD` and `dS` are constants; the prior receives gradient only through the
/// softplus mixing weights.
pub fn geo_attention_backward<T: Scalar>(
    cache: &GeoAttentionCache<T>,
    params: &GeoAttentionParams<T>,
    dy: &Tensor<T>,
) -> Result<GeoAttentionGrads<T>> {
    let n = cache.x.rows();
    let c = params.channels();
    if cache.heads.len() != params.heads || cache.x.cols() != c {
        return Err(Error::CacheMismatch("attention parameters differ from the forward call".into()));
    }
    dy.expect_shape("geo_attention_backward", &[n, c])?;
    let d = params.head_dim();
    let mut grads = params.zeros_like();
    grads.wo = matmul_tn(&cache.concat, dy)?;
    let d_concat = matmul_nt(dy, &params.wo)?;
    let mut dq_all = Tensor::zeros(&[n, c]);
    let mut dk_all = Tensor::zeros(&[n, c]);
    let mut dv_all = Tensor::zeros(&[n, c]);
    let mut d_prior = cache.masks.as_ref().map(|_| Tensor::<T>::zeros(&[n, n]));

    for (h, hc) in cache.heads.iter().enumerate() {
        let d_out = head_slice(&d_concat, h, d);
        let mut d_weights = matmul_nt(&d_out, &hc.v)?;
        let dv = matmul_tn(&hc.weights, &d_out)?;
        if let Some(sums) = &hc.row_sums {
            for (i, &s) in sums.iter().enumerate() {
                let inner = tensor::dot(d_weights.row(i), hc.weights.row(i));
                d_weights.row_mut(i).iter_mut().for_each(|g| *g = (*g - inner) / s);
            }
        }
        let d_probs = match &cache.masks {
            Some(masks) => {
                let mask = &masks[h];
                if let Some(dp) = d_prior.as_mut() {
                    // dM = dW ⊙ P, then through M(G)
                    let eta = cache.etas[h];
                    let (dm_dg, power) = match cache.opts.decay_mode {
                        DecayMode::Power => (T::c(eta.ln()), true),
                        DecayMode::Product => (T::c(eta), false),
                    };
                    for (((g, &dw), &p), &m) in dp
                        .data_mut()
                        .iter_mut()
                        .zip(d_weights.data())
                        .zip(hc.probs.data())
                        .zip(mask.data())
                    {
                        let dm = dw * p;
                        *g += if power { dm * m * dm_dg } else { dm * dm_dg };
                    }
                }
                d_weights.hadamard(mask)?
            }
            None => d_weights,
        };
        let mut d_scores = tensor::softmax_rows_backward(&hc.probs, &d_probs)?;
        if cache.opts.scale_qk {
            d_scores.data_mut().iter_mut().for_each(|g| *g *= cache.scale);
        }
        let dq = matmul(&d_scores, &hc.k)?;
        let dk = matmul_tn(&d_scores, &hc.q)?;
        head_scatter(&mut dq_all, &dq, h, d);
        head_scatter(&mut dk_all, &dk, h, d);
        head_scatter(&mut dv_all, &dv, h, d);
    }

    grads.wq = matmul_tn(&cache.x, &dq_all)?;
    grads.wk = matmul_tn(&cache.x, &dk_all)?;
    grads.wv = matmul_tn(&cache.x, &dv_all)?;
    let mut dx = matmul_nt(&dq_all, &params.wq)?;
    dx.add_assign(&matmul_nt(&dk_all, &params.wk)?)?;
    dx.add_assign(&matmul_nt(&dv_all, &params.wv)?)?;

    let (mut dl1, mut dl2) = (T::zero(), T::zero());
    if let (Some(dg), Some(prior)) = (d_prior, cache.prior.as_ref()) {
        dl1 = dg.dot(&prior.delta_d)? * T::c(sigmoid(prior.lambda1_raw.f64()));
        dl2 = dg.dot(&prior.delta_s)? * T::c(sigmoid(prior.lambda2_raw.f64()));
    }
    Ok(GeoAttentionGrads {
        x: dx,
        params: grads,
        lambda1_raw: dl1,
        lambda2_raw: dl2,
    })
}

/// Finite-difference fixture for geometry-aware attention on a random
/// depth grid; checks `X`, all projections and both mixing weights.
#[derive(Clone, Debug)]
pub struct GeoAttentionCheck {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub heads: usize,
    pub opts: AttentionOptions,
    /// Seed of the random depth map behind `dD`.
    pub depth_seed: u64,
}

impl Default for GeoAttentionCheck {
    fn default() -> Self {
        GeoAttentionCheck {
            rows: 3,
            cols: 3,
            channels: 8,
            heads: 2,
            opts: AttentionOptions::default(),
            depth_seed: 17,
        }
    }
}

impl GeoAttentionCheck {
    fn relations(&self) -> Result<(Tensor<f64>, Tensor<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.depth_seed);
        let depth = Tensor::from_fn(&[self.rows * 2, self.cols * 2], |_| rng.random_range(0.5..1.5));
        let grid = pool_depth(&depth, self.rows, self.cols)?;
        Ok((depth_relation(&grid), spatial_relation(self.rows, self.cols)))
    }

    fn run(&self, x: &Tensor<f64>, params: &[Tensor<f64>]) -> Result<(Tensor<f64>, GeoAttentionCache<f64>, GeoAttentionParams<f64>)> {
        let p = GeoAttentionParams::new(self.heads, params[0].clone(), params[1].clone(), params[2].clone(), params[3].clone())?;
        let (dd, ds) = self.relations()?;
        let prior = GeometryPrior::new(dd, ds, params[4].data()[0], params[5].data()[0])?;
        let (y, cache) = geo_attention_forward(x, &p, &prior, &DecaySchedule::geometric(self.heads), self.opts)?;
        Ok((y, cache, p))
    }
}

impl GradCheckLayer for GeoAttentionCheck {
    fn name(&self) -> String {
        "dggm".into()
    }

    fn analytic(&self, seed: u64) -> Result<LayerIO<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.rows * self.cols;
        let c = self.channels;
        let x = Tensor::from_fn(&[n, c], |_| rng.random_range(-1.0..1.0));
        let std = 1.0 / (c as f64).sqrt();
        let mut params: Vec<Tensor<f64>> = (0..4)
            .map(|_| Tensor::from_fn(&[c, c], |_| std * crate::init::standard_normal(&mut rng)))
            .collect();
        params.push(Tensor::scalar(rng.random_range(-1.0..1.0)));
        params.push(Tensor::scalar(rng.random_range(-1.0..1.0)));
        let (y, cache, p) = self.run(&x, &params)?;
        let g = geo_attention_backward(&cache, &p, &Tensor::ones(y.shape()))?;
        let names = ["wq", "wk", "wv", "wo", "lambda1_raw", "lambda2_raw"];
        Ok(LayerIO {
            inputs: vec![("x".into(), x)],
            params: names.iter().map(|s| s.to_string()).zip(params).collect(),
            output: y,
            input_grads: vec![g.x],
            param_grads: vec![
                g.params.wq,
                g.params.wk,
                g.params.wv,
                g.params.wo,
                Tensor::scalar(g.lambda1_raw),
                Tensor::scalar(g.lambda2_raw),
            ],
        })
    }

    fn forward(&self, inputs: &[Tensor<f64>], params: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(self.run(&inputs[0], params)?.0)
    }
}
