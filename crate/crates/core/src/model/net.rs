//! Forward and analytic backward pass of the toy model.

use std::sync::Arc;

use super::{GeometryMode, ModelConfig, ModelParams, ADCI_TAPS, GRASP_STRIDE, STRIDES};
use crate::adci::{adci_backward, adci_forward, AdciCache};
use crate::data::{SceneSample, PAD_ID};
use crate::dggm::{depth_relation, geo_attention_backward, geo_attention_forward, geo_attention_forward_grid, plain_attention_forward, pool_depth, spatial_relation, GeoAttentionCache, GeometryPrior};
use crate::error::{Error, Result};
use crate::tensor::{bilinear_resample, dot, bilinear_resample_backward, matmul, matmul_nt, matmul_tn, softmax_rows, softmax_rows_backward, Tensor};
use crate::Scalar;

/// One sample as the model sees it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput<T> {
    /// `[h, w, 3]`
    pub rgb: Tensor<T>,
    /// `[h, w]` meters
    pub depth: Tensor<T>,
    pub tokens: Vec<u32>,
}

impl<T: Scalar> ModelInput<T> {
    pub fn from_sample(s: &SceneSample) -> Self {
        ModelInput {
            rgb: s.rgb.cast(),
            depth: s.depth.cast(),
            tokens: s.tokens.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs<T> {
    /// `[h, w]`
    pub seg_logits: Tensor<T>,
    /// `[N', 4]` raw head output per stride-16 cell: quality logit, sin 2θ,
    /// cos 2θ, width in stride units.
    pub grasp: Tensor<T>,
    /// `(rows, cols)` of the stride-16 grid.
    pub grid: (usize, usize),
}

impl<T: Scalar> ForwardOutputs<T> {
    pub fn grasp_quality(&self) -> Vec<T> {
        (0..self.grasp.rows()).map(|i| self.grasp.row(i)[0]).collect()
    }

    /// `[N', 2]` rows scaled onto the unit disk.
    pub fn grasp_angle_sincos(&self) -> Tensor<T> {
        let n = self.grasp.rows();
        let mut out = Tensor::zeros(&[n, 2]);
        for i in 0..n {
            let (s, c) = (self.grasp.row(i)[1], self.grasp.row(i)[2]);
            let norm = (s * s + c * c).sqrt().max(T::one());
            out.row_mut(i).copy_from_slice(&[s / norm, c / norm]);
        }
        out
    }

    pub fn grasp_width(&self) -> Vec<T> {
        (0..self.grasp.rows()).map(|i| self.grasp.row(i)[3]).collect()
    }
}

struct ScaleCache<T> {
    rows: usize,
    cols: usize,
    patches: Tensor<T>,
    blocks: Vec<GeoAttentionCache<T>>,
}

/// Intermediate values kept for [`backward`].
pub struct ForwardCache<T> {
    height: usize,
    width: usize,
    rgb_flat: Tensor<T>,
    scales: Vec<ScaleCache<T>>,
    resampled: Vec<Tensor<T>>,
    adci: AdciCache<T>,
    token_ids: Vec<u32>,
    tv: Tensor<T>,
    mean: Tensor<T>,
    cs: Tensor<T>,
    u: Tensor<T>,
    cv: Tensor<T>,
    z: Tensor<T>,
    hpre: Tensor<T>,
    hact: Tensor<T>,
    cm: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    attn: Tensor<T>,
    o: Tensor<T>,
    cc: Tensor<T>,
    pre: Tensor<T>,
    act: Tensor<T>,
    e: Tensor<T>,
    t: Tensor<T>,
    gpre: Tensor<T>,
    gact: Tensor<T>,
}

/// Gradients of every parameter and of the RGB input.
#[derive(Clone, Debug)]
pub struct ModelGrads<T> {
    pub params: ModelParams<T>,
    pub rgb: Tensor<T>,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// `[rows*cols, s*s*3]`; each row is one patch in (dy, dx, channel) order.
fn patchify<T: Scalar>(rgb: &Tensor<T>, s: usize) -> Tensor<T> {
    let (h, w, _) = (rgb.shape()[0], rgb.shape()[1], 3);
    let (rows, cols) = (h / s, w / s);
    let mut out = Tensor::zeros(&[rows * cols, s * s * 3]);
    let src = rgb.data();
    for r in 0..rows {
        for c in 0..cols {
            let dst = out.row_mut(r * cols + c);
            for dy in 0..s {
                let start = ((r * s + dy) * w + c * s) * 3;
                dst[dy * s * 3..(dy + 1) * s * 3].copy_from_slice(&src[start..start + s * 3]);
            }
        }
    }
    out
}

fn unpatchify_add<T: Scalar>(d: &Tensor<T>, s: usize, drgb: &mut Tensor<T>) {
    let w = drgb.shape()[1];
    let (rows, cols) = (drgb.shape()[0] / s, w / s);
    let dst = drgb.data_mut();
    for r in 0..rows {
        for c in 0..cols {
            let src = d.row(r * cols + c);
            for dy in 0..s {
                let start = ((r * s + dy) * w + c * s) * 3;
                for (a, &b) in dst[start..start + s * 3].iter_mut().zip(&src[dy * s * 3..(dy + 1) * s * 3]) {
                    *a += b;
                }
            }
        }
    }
}

/// `[rows*cols, C]` tokens to the `[out_rows*out_cols, C]` grid.
fn resample_tokens<T: Scalar>(x: &Tensor<T>, rows: usize, cols: usize, out_rows: usize, out_cols: usize) -> Result<Tensor<T>> {
    let c = x.cols();
    bilinear_resample(&x.clone().reshape(&[rows, cols, c])?, out_rows, out_cols)?.reshape(&[out_rows * out_cols, c])
}

fn resample_tokens_backward<T: Scalar>(dy: &Tensor<T>, rows: usize, cols: usize, out_rows: usize, out_cols: usize) -> Result<Tensor<T>> {
    let c = dy.cols();
    bilinear_resample_backward(&dy.clone().reshape(&[out_rows, out_cols, c])?, rows, cols)?.reshape(&[rows * cols, c])
}

fn row_vector<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let n = t.len();
    t.clone().reshape(&[1, n])
}

fn broadcast_rows<T: Scalar>(x: &Tensor<T>, row: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let mut out = x.clone();
    let r = row.data();
    for i in 0..out.rows() {
        for (v, &b) in out.row_mut(i).iter_mut().zip(r) {
            *v = f(*v, b);
        }
    }
    out
}

fn check_input<T: Scalar>(cfg: &ModelConfig, input: &ModelInput<T>) -> Result<Vec<usize>> {
    input.rgb.expect_shape("model forward rgb", &[cfg.height, cfg.width, 3])?;
    input.depth.expect_shape("model forward depth", &[cfg.height, cfg.width])?;
    if input.tokens.len() > cfg.max_tokens {
        return Err(Error::TokenOverflow(input.tokens.len()));
    }
    if let Some(&bad) = input.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Domain(format!("token id {bad} outside a vocabulary of {}", cfg.vocab_size)));
    }
    let valid: Vec<usize> = (0..input.tokens.len()).filter(|&i| input.tokens[i] != PAD_ID).collect();
    if valid.is_empty() {
        return Err(Error::Domain("instruction has no tokens".into()));
    }
    Ok(valid)
}

pub fn forward<T: Scalar>(params: &ModelParams<T>, cfg: &ModelConfig, input: &ModelInput<T>) -> Result<(ForwardOutputs<T>, ForwardCache<T>)> {
    let valid = check_input(cfg, input)?;
    let (h, w) = (cfg.height, cfg.width);
    let c = cfg.channels;
    let opts = cfg.attention();
    let sched = cfg.schedule();

    let mut scales = Vec::with_capacity(STRIDES.len());
    let mut outputs: Vec<Vec<Tensor<T>>> = Vec::with_capacity(STRIDES.len());
    for (sp, &s) in params.scales.iter().zip(&STRIDES) {
        let (rows, cols) = cfg.grid(s);
        let patches = patchify(&input.rgb, s);
        let mut x = sp.embed.forward(&patches)?;
        x.add_assign(&sp.pos)?;
        let relations = match cfg.geometry {
            GeometryMode::Depth => {
                let grid = pool_depth(&input.depth, rows, cols)?;
                Some((Arc::new(depth_relation(&grid)), Arc::new(spatial_relation::<T>(rows, cols)), grid))
            }
            _ => None,
        };
        let mut blocks = Vec::with_capacity(sp.blocks.len());
        let mut outs = Vec::with_capacity(sp.blocks.len());
        for b in &sp.blocks {
            let (y, cache) = match (cfg.geometry, &relations) {
                (GeometryMode::Depth, Some((dd, ds, grid))) => {
                    let l = b.lambda.data();
                    let prior = GeometryPrior::new(Arc::clone(dd), Arc::clone(ds), l[0], l[1])?;
                    geo_attention_forward_grid(&x, &b.attn, grid, prior, &sched, opts)?
                }
                (GeometryMode::Zero, _) => geo_attention_forward(&x, &b.attn, &GeometryPrior::zero(rows * cols), &sched, opts)?,
                _ => plain_attention_forward(&x, &b.attn, opts)?,
            };
            x.add_assign(&y)?;
            outs.push(x.clone());
            blocks.push(cache);
        }
        scales.push(ScaleCache { rows, cols, patches, blocks });
        outputs.push(outs);
    }

    let (gr, gc) = cfg.grid(GRASP_STRIDE);
    let mut resampled = Vec::with_capacity(ADCI_TAPS.len());
    let mut layers = Vec::with_capacity(ADCI_TAPS.len());
    for (&(si, bi), adapter) in ADCI_TAPS.iter().zip(&params.adapters) {
        let sc = &scales[si];
        let r = resample_tokens(&outputs[si][bi], sc.rows, sc.cols, gr, gc)?;
        layers.push(adapter.forward(&r)?);
        resampled.push(r);
    }
    let (cv, adci) = adci_forward(&layers, &cfg.grouping()?, &params.adci)?;

    // text: C_t are the embeddings of the non-pad tokens, C_s a projected mean
    let token_ids: Vec<u32> = valid.iter().map(|&i| input.tokens[i]).collect();
    let mut tv = Tensor::zeros(&[token_ids.len(), c]);
    for (i, &id) in token_ids.iter().enumerate() {
        tv.row_mut(i).copy_from_slice(params.token_embed.row(id as usize));
    }
    let mean = row_vector(&tv.col_sum().scale(T::one() / T::c(token_ids.len() as f64)))?;
    let cs = params.sentence.forward(&mean)?;

    let u = params.fuse_gate.forward(&cs)?;
    let gated = broadcast_rows(&cv, &u, |a, b| a * b);
    let n = cv.rows();
    let mut z = Tensor::zeros(&[n, 2 * c]);
    for i in 0..n {
        z.row_mut(i)[..c].copy_from_slice(gated.row(i));
        z.row_mut(i)[c..].copy_from_slice(cv.row(i));
    }
    let hpre = params.fuse_hidden.forward(&z)?;
    let hact = hpre.map(silu);
    let cm = params.fuse_out.forward(&hact)?;

    let scale = T::one() / T::c((c as f64).sqrt());
    let q = matmul(&cm, &params.dec_q)?;
    let k = matmul(&tv, &params.dec_k)?;
    let v = matmul(&tv, &params.dec_v)?;
    let attn = softmax_rows(&matmul_nt(&q, &k)?.scale(scale))?;
    let o = matmul(&attn, &v)?;
    let mut cc = matmul(&o, &params.dec_o)?;
    cc.add_assign(&cm)?;

    let hs = cfg.seg_hidden;
    let fa = matmul(&cc, &params.seg_feat)?;
    let fa_up = resample_tokens(&fa, gr, gc, h, w)?;
    let rgb_flat = input.rgb.clone().reshape(&[h * w, 3])?;
    let mut pre = params.seg_rgb.forward(&rgb_flat)?;
    pre.add_assign(&fa_up)?;
    let act = pre.map(silu);
    let e = params.seg_pixel.forward(&act)?;
    let t = params.seg_text.forward(&cs)?;
    let bias = params.seg_bias.data()[0];
    let logits: Vec<T> = (0..h * w).map(|p| dot(e.row(p), t.data()) + bias).collect();
    debug_assert_eq!(e.cols(), hs);

    let gpre = params.grasp_hidden.forward(&cc)?;
    let gact = gpre.map(silu);
    let grasp = params.grasp_out.forward(&gact)?;

    let outputs = ForwardOutputs {
        seg_logits: Tensor::new(vec![h, w], logits)?,
        grasp,
        grid: (gr, gc),
    };
    let cache = ForwardCache {
        height: h,
        width: w,
        rgb_flat,
        scales,
        resampled,
        adci,
        token_ids,
        tv,
        mean,
        cs,
        u,
        cv,
        z,
        hpre,
        hact,
        cm,
        q,
        k,
        v,
        attn,
        o,
        cc,
        pre,
        act,
        e,
        t,
        gpre,
        gact,
    };
    Ok((outputs, cache))
}

/// Gradients given `d_seg = dL/d seg_logits` (`[h, w]`) and
/// `d_grasp = dL/d grasp` (`[N', 4]`).
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    cache: &ForwardCache<T>,
    d_seg: &Tensor<T>,
    d_grasp: &Tensor<T>,
) -> Result<ModelGrads<T>> {
    let (h, w) = (cache.height, cache.width);
    let c = cfg.channels;
    let (gr, gc) = cfg.grid(GRASP_STRIDE);
    let n = gr * gc;
    d_seg.expect_shape("model backward seg", &[h, w])?;
    d_grasp.expect_shape("model backward grasp", &[n, 4])?;
    if params.scales.len() != cache.scales.len() || cache.resampled.len() != params.adapters.len() {
        return Err(Error::CacheMismatch("model layout differs from the forward call".into()));
    }
    let mut g = params.zeros_like();

    // grasp head
    let d_gact = params.grasp_out.backward(&cache.gact, d_grasp, &mut g.grasp_out)?;
    let d_gpre = d_gact.zip_map(&cache.gpre, |d, x| d * silu_grad(x))?;
    let mut d_cc = params.grasp_hidden.backward(&cache.cc, &d_gpre, &mut g.grasp_hidden)?;

    // segmentation head: logit_p = e_p . t + bias
    let dl = d_seg.data();
    g.seg_bias.data_mut()[0] = dl.iter().copied().sum();
    let t = cache.t.data();
    let mut d_e = Tensor::zeros(cache.e.shape());
    let mut d_t = vec![T::zero(); t.len()];
    for (p, &d) in dl.iter().enumerate() {
        for ((de, &tv), (dt, &ev)) in d_e.row_mut(p).iter_mut().zip(t).zip(d_t.iter_mut().zip(cache.e.row(p))) {
            *de = d * tv;
            *dt += d * ev;
        }
    }
    let d_t = Tensor::new(vec![1, t.len()], d_t)?;
    let mut d_cs = params.seg_text.backward(&cache.cs, &d_t, &mut g.seg_text)?;
    let d_act = params.seg_pixel.backward(&cache.act, &d_e, &mut g.seg_pixel)?;
    let d_pre = d_act.zip_map(&cache.pre, |d, x| d * silu_grad(x))?;
    let d_rgb_skip = params.seg_rgb.backward(&cache.rgb_flat, &d_pre, &mut g.seg_rgb)?;
    let d_fa = resample_tokens_backward(&d_pre, gr, gc, h, w)?;
    g.seg_feat = matmul_tn(&cache.cc, &d_fa)?;
    d_cc.add_assign(&matmul_nt(&d_fa, &params.seg_feat)?)?;

    // decoder: cc = cm + softmax(q k^T / sqrt(C)) v Wo
    let scale = T::one() / T::c((c as f64).sqrt());
    let mut d_cm = d_cc.clone();
    g.dec_o = matmul_tn(&cache.o, &d_cc)?;
    let d_o = matmul_nt(&d_cc, &params.dec_o)?;
    let d_attn = matmul_nt(&d_o, &cache.v)?;
    let d_v = matmul_tn(&cache.attn, &d_o)?;
    let d_scores = softmax_rows_backward(&cache.attn, &d_attn)?.scale(scale);
    let d_q = matmul(&d_scores, &cache.k)?;
    let d_k = matmul_tn(&d_scores, &cache.q)?;
    g.dec_q = matmul_tn(&cache.cm, &d_q)?;
    g.dec_k = matmul_tn(&cache.tv, &d_k)?;
    g.dec_v = matmul_tn(&cache.tv, &d_v)?;
    d_cm.add_assign(&matmul_nt(&d_q, &params.dec_q)?)?;
    let mut d_tv = matmul_nt(&d_k, &params.dec_k)?;
    d_tv.add_assign(&matmul_nt(&d_v, &params.dec_v)?)?;

    // fusion neck
    let d_hact = params.fuse_out.backward(&cache.hact, &d_cm, &mut g.fuse_out)?;
    let d_hpre = d_hact.zip_map(&cache.hpre, |d, x| d * silu_grad(x))?;
    let d_z = params.fuse_hidden.backward(&cache.z, &d_hpre, &mut g.fuse_hidden)?;
    let mut d_cv = Tensor::zeros(&[n, c]);
    let mut d_u = vec![T::zero(); c];
    let u = cache.u.data();
    for i in 0..n {
        let dz = d_z.row(i);
        let cv = cache.cv.row(i);
        let row = d_cv.row_mut(i);
        for j in 0..c {
            row[j] = dz[j] * u[j] + dz[c + j];
            d_u[j] += dz[j] * cv[j];
        }
    }
    let d_u = Tensor::new(vec![1, c], d_u)?;
    d_cs.add_assign(&params.fuse_gate.backward(&cache.cs, &d_u, &mut g.fuse_gate)?)?;

    // text
    let d_mean = params.sentence.backward(&cache.mean, &d_cs, &mut g.sentence)?;
    let inv = T::one() / T::c(cache.token_ids.len() as f64);
    for (i, &id) in cache.token_ids.iter().enumerate() {
        let dst = g.token_embed.row_mut(id as usize);
        for ((d, &a), &m) in dst.iter_mut().zip(d_tv.row(i)).zip(d_mean.data()) {
            *d += a + m * inv;
        }
    }

    // ADCI and adapters back onto the block outputs
    let ag = adci_backward(&cache.adci, &params.adci, &d_cv)?;
    g.adci = ag.params;
    let mut extra: Vec<Vec<Option<Tensor<T>>>> = cache.scales.iter().map(|s| vec![None; s.blocks.len()]).collect();
    for (l, &(si, bi)) in ADCI_TAPS.iter().enumerate() {
        let d_r = params.adapters[l].backward(&cache.resampled[l], &ag.layers[l], &mut g.adapters[l])?;
        let sc = &cache.scales[si];
        let d_out = resample_tokens_backward(&d_r, sc.rows, sc.cols, gr, gc)?;
        match &mut extra[si][bi] {
            Some(acc) => acc.add_assign(&d_out)?,
            slot => *slot = Some(d_out),
        }
    }

    // encoder scales, residual blocks in reverse
    let mut d_rgb = d_rgb_skip.reshape(&[h, w, 3])?;
    for (si, sc) in cache.scales.iter().enumerate() {
        let sp = &params.scales[si];
        let tokens = sc.rows * sc.cols;
        let mut d_x = Tensor::zeros(&[tokens, c]);
        for bi in (0..sc.blocks.len()).rev() {
            if let Some(e) = &extra[si][bi] {
                d_x.add_assign(e)?;
            }
            let ga = geo_attention_backward(&sc.blocks[bi], &sp.blocks[bi].attn, &d_x)?;
            let gb = &mut g.scales[si].blocks[bi];
            gb.attn = ga.params;
            gb.lambda = Tensor::new(vec![2], vec![ga.lambda1_raw, ga.lambda2_raw])?;
            d_x.add_assign(&ga.x)?;
        }
        g.scales[si].pos = d_x.clone();
        let d_patches = sp.embed.backward(&sc.patches, &d_x, &mut g.scales[si].embed)?;
        unpatchify_add(&d_patches, sp.stride, &mut d_rgb);
    }
    Ok(ModelGrads { params: g, rgb: d_rgb })
}
