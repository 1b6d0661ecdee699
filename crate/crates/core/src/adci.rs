//! Adaptive dense channel integration.
//!
//! `L` same-shape layer features are split into `G` groups of `M = L / G`
//! consecutive layers. Inside each group a gating MLP scores every layer from
//! its pooled descriptor, a softmax turns the scores into convex weights, and
//! the weighted sum forms the group feature. Group features are concatenated
//! with the last layer along channels and projected back to `C` channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::{GradCheckLayer, LayerIO};
use crate::init;
use crate::scalar::Scalar;
use crate::tensor::{self, global_avg_pool, linear, linear_backward, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupingConfig {
    pub layers: usize,
    pub groups: usize,
}

impl GroupingConfig {
    pub fn new(layers: usize, groups: usize) -> Result<Self> {
        let cfg = GroupingConfig { layers, groups };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.layers == 0 || self.layers % self.groups != 0 {
            return Err(Error::Config(format!(
                "{} layers cannot be split into {} equal groups",
                self.layers, self.groups
            )));
        }
        Ok(())
    }

    /// `M`, layers per group.
    pub fn per_group(&self) -> usize {
        self.layers / self.groups
    }

    pub fn group_of(&self, layer: usize) -> usize {
        layer / self.per_group()
    }
}

/// Two-layer scoring MLP `s = W2 relu(W1 z + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingParams<T> {
    /// `[C, Ch]`
    pub w1: Tensor<T>,
    /// `[Ch]`
    pub b1: Tensor<T>,
    /// `[Ch, 1]`
    pub w2: Tensor<T>,
    /// `[1]`
    pub b2: Tensor<T>,
}

impl<T: Scalar> GatingParams<T> {
    pub fn random(channels: usize, hidden: usize, std: f64, rng: &mut impl Rng) -> Self {
        GatingParams {
            w1: init::normal(&[channels, hidden], std, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: init::normal(&[hidden, 1], std, rng),
            b2: Tensor::zeros(&[1]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        GatingParams {
            w1: self.w1.zeros_like(),
            b1: self.b1.zeros_like(),
            w2: self.w2.zeros_like(),
            b2: self.b2.zeros_like(),
        }
    }

    pub fn channels(&self) -> usize {
        self.w1.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdciParams<T> {
    /// One shared scorer, or one per group.
    pub gating: Vec<GatingParams<T>>,
    /// `[(G+1) C, P]`
    pub proj1: Tensor<T>,
    /// `[P]`
    pub proj1_bias: Tensor<T>,
    /// `[P, C]`
    pub proj2: Tensor<T>,
    /// `[C]`
    pub proj2_bias: Tensor<T>,
}

/// Hidden width of the output projection, `(G+1) C / 2`.
pub fn projection_hidden(groups: usize, channels: usize) -> usize {
    ((groups + 1) * channels / 2).max(1)
}

impl<T: Scalar> AdciParams<T> {
    pub fn random(cfg: &GroupingConfig, channels: usize, gate_hidden: usize, per_group_gating: bool, std: f64, rng: &mut impl Rng) -> Self {
        let scorers = if per_group_gating { cfg.groups } else { 1 };
        let cat = (cfg.groups + 1) * channels;
        let hidden = projection_hidden(cfg.groups, channels);
        AdciParams {
            gating: (0..scorers).map(|_| GatingParams::random(channels, gate_hidden, std, rng)).collect(),
            proj1: init::normal(&[cat, hidden], std, rng),
            proj1_bias: Tensor::zeros(&[hidden]),
            proj2: init::normal(&[hidden, channels], std, rng),
            proj2_bias: Tensor::zeros(&[channels]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        AdciParams {
            gating: self.gating.iter().map(GatingParams::zeros_like).collect(),
            proj1: self.proj1.zeros_like(),
            proj1_bias: self.proj1_bias.zeros_like(),
            proj2: self.proj2.zeros_like(),
            proj2_bias: self.proj2_bias.zeros_like(),
        }
    }

    fn scorer(&self, group: usize) -> &GatingParams<T> {
        if self.gating.len() == 1 {
            &self.gating[0]
        } else {
            &self.gating[group]
        }
    }
}

/// `z_i = GAP(C_i)` over the `N` token rows.
pub fn layer_descriptor<T: Scalar>(layer: &Tensor<T>) -> Result<Tensor<T>> {
    layer.dims2("layer_descriptor")?;
    global_avg_pool(layer)
}

/// Hidden pre-activation and score of the gating MLP for one descriptor.
fn gating_forward<T: Scalar>(z: &Tensor<T>, p: &GatingParams<T>) -> Result<(Tensor<T>, T)> {
    let c = p.channels();
    if z.len() != c {
        return Err(Error::shape("gating_scores", format!("{c}-dim descriptor"), format!("{}", z.len())));
    }
    let z_row = z.clone().reshape(&[1, c])?;
    let pre = linear(&z_row, &p.w1, Some(&p.b1))?;
    let hidden = pre.map(relu);
    let score = tensor::dot(hidden.data(), p.w2.data()) + p.b2.data()[0];
    Ok((pre, score))
}

pub fn gating_scores<T: Scalar>(z: &Tensor<T>, p: &GatingParams<T>) -> Result<T> {
    Ok(gating_forward(z, p)?.1)
}

fn relu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

/// Softmax of one group's scores.
pub fn group_weights<T: Scalar>(scores: &[T]) -> Result<Vec<T>> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("group scores".into()));
    }
    if scores.is_empty() {
        return Err(Error::shape("group_weights", "at least one score", "0"));
    }
    let mut w = scores.to_vec();
    tensor::softmax_in_place(&mut w);
    Ok(w)
}

/// `sum_i alpha_i C_i`; the weights must form a probability vector.
pub fn aggregate_group<T: Scalar>(layers: &[&Tensor<T>], alphas: &[T]) -> Result<Tensor<T>> {
    if layers.is_empty() || layers.len() != alphas.len() {
        return Err(Error::shape("aggregate_group", format!("{} weights", layers.len()), format!("{}", alphas.len())));
    }
    let sum: f64 = alphas.iter().map(|a| a.f64()).sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::WeightSumViolation { sum });
    }
    let mut out = layers[0].zeros_like();
    for (layer, &a) in layers.iter().zip(alphas) {
        out.axpy(a, layer)?;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct AdciCache<T> {
    cfg: GroupingConfig,
    layers: Vec<Tensor<T>>,
    descriptors: Vec<Tensor<T>>,
    gate_pre: Vec<Tensor<T>>,
    pub scores: Vec<T>,
    pub alphas: Vec<T>,
    pub group_features: Vec<Tensor<T>>,
    concat: Tensor<T>,
    proj_pre: Tensor<T>,
    proj_hidden: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct AdciGrads<T> {
    pub layers: Vec<Tensor<T>>,
    pub params: AdciParams<T>,
}

fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let n = parts[0].rows();
    let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
    let total: usize = widths.iter().sum();
    let mut out = Tensor::zeros(&[n, total]);
    for i in 0..n {
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            out.row_mut(i)[offset..offset + w].copy_from_slice(p.row(i));
            offset += w;
        }
    }
    Ok(out)
}

fn split_channels<T: Scalar>(t: &Tensor<T>, width: usize) -> Vec<Tensor<T>> {
    let n = t.rows();
    let parts = t.cols() / width;
    (0..parts)
        .map(|k| {
            let mut out = Tensor::zeros(&[n, width]);
            for i in 0..n {
                out.row_mut(i).copy_from_slice(&t.row(i)[k * width..(k + 1) * width]);
            }
            out
        })
        .collect()
}

/// Grouping, descriptors, gating scores, per-group softmax, weighted
/// aggregation, dense concatenation with the last layer, projection.
pub fn adci_forward<T: Scalar>(layers: &[Tensor<T>], cfg: &GroupingConfig, params: &AdciParams<T>) -> Result<(Tensor<T>, AdciCache<T>)> {
    cfg.validate()?;
    if layers.len() != cfg.layers {
        return Err(Error::Config(format!("expected {} layers, got {}", cfg.layers, layers.len())));
    }
    if params.gating.len() != 1 && params.gating.len() != cfg.groups {
        return Err(Error::Config(format!("{} gating networks for {} groups", params.gating.len(), cfg.groups)));
    }
    let (n, c) = layers[0].dims2("adci_forward")?;
    for l in layers {
        l.expect_shape("adci_forward", &[n, c])?;
    }
    params.proj1.expect_shape("adci_forward", &[(cfg.groups + 1) * c, params.proj1_bias.len()])?;

    let m = cfg.per_group();
    let mut descriptors = Vec::with_capacity(cfg.layers);
    let mut gate_pre = Vec::with_capacity(cfg.layers);
    let mut scores = Vec::with_capacity(cfg.layers);
    for (i, layer) in layers.iter().enumerate() {
        let z = layer_descriptor(layer)?;
        let (pre, s) = gating_forward(&z, params.scorer(cfg.group_of(i)))?;
        descriptors.push(z);
        gate_pre.push(pre);
        scores.push(s);
    }
    let mut alphas = Vec::with_capacity(cfg.layers);
    let mut group_features = Vec::with_capacity(cfg.groups);
    for g in 0..cfg.groups {
        let a = group_weights(&scores[g * m..(g + 1) * m])?;
        let members: Vec<&Tensor<T>> = layers[g * m..(g + 1) * m].iter().collect();
        group_features.push(aggregate_group(&members, &a)?);
        alphas.extend(a);
    }
    let mut parts: Vec<&Tensor<T>> = group_features.iter().collect();
    parts.push(&layers[cfg.layers - 1]);
    let concat = concat_channels(&parts)?;
    let proj_pre = linear(&concat, &params.proj1, Some(&params.proj1_bias))?;
    let proj_hidden = proj_pre.map(relu);
    let out = linear(&proj_hidden, &params.proj2, Some(&params.proj2_bias))?;
    Ok((
        out,
        AdciCache {
            cfg: *cfg,
            layers: layers.to_vec(),
            descriptors,
            gate_pre,
            scores,
            alphas,
            group_features,
            concat,
            proj_pre,
            proj_hidden,
        },
    ))
}

pub fn adci_backward<T: Scalar>(cache: &AdciCache<T>, params: &AdciParams<T>, dy: &Tensor<T>) -> Result<AdciGrads<T>> {
    let cfg = cache.cfg;
    let (n, c) = cache.layers[0].dims2("adci_backward")?;
    if params.proj2.cols() != c || params.proj1.rows() != cache.concat.cols() {
        return Err(Error::CacheMismatch("projection shapes differ from the forward call".into()));
    }
    dy.expect_shape("adci_backward", &[n, c])?;
    let mut grads = params.zeros_like();

    let d_hidden = linear_backward(&cache.proj_hidden, &params.proj2, dy, &mut grads.proj2, Some(&mut grads.proj2_bias))?;
    let d_pre = d_hidden.zip_map(&cache.proj_pre, |g, p| if p > T::zero() { g } else { T::zero() })?;
    let d_concat = linear_backward(&cache.concat, &params.proj1, &d_pre, &mut grads.proj1, Some(&mut grads.proj1_bias))?;
    let mut pieces = split_channels(&d_concat, c);
    let d_last = pieces.pop().expect("concat holds the last layer");

    let m = cfg.per_group();
    let mut d_layers: Vec<Tensor<T>> = cache.layers.iter().map(Tensor::zeros_like).collect();
    d_layers[cfg.layers - 1].add_assign(&d_last)?;
    let inv_n = T::one() / T::c(n as f64);
    for (g, d_group) in pieces.iter().enumerate() {
        let range = g * m..(g + 1) * m;
        let alphas = &cache.alphas[range.clone()];
        // direct path and d alpha
        let d_alpha: Vec<T> = range.clone().map(|i| d_group.dot(&cache.layers[i])).collect::<Result<_>>()?;
        for (k, i) in range.clone().enumerate() {
            d_layers[i].axpy(alphas[k], d_group)?;
        }
        // softmax
        let inner: T = alphas.iter().zip(&d_alpha).map(|(&a, &d)| a * d).sum();
        let scorer_idx = if params.gating.len() == 1 { 0 } else { g };
        let scorer = &params.gating[scorer_idx];
        for (k, i) in range.enumerate() {
            let ds = alphas[k] * (d_alpha[k] - inner);
            let pre = &cache.gate_pre[i];
            let gp = &mut grads.gating[scorer_idx];
            gp.b2.data_mut()[0] += ds;
            let hidden_width = pre.len();
            let mut d_pre = Tensor::zeros(&[1, hidden_width]);
            for j in 0..hidden_width {
                let p = pre.data()[j];
                if p > T::zero() {
                    gp.w2.data_mut()[j] += ds * p;
                    d_pre.data_mut()[j] = ds * scorer.w2.data()[j];
                }
            }
            let z_row = cache.descriptors[i].clone().reshape(&[1, c])?;
            let dz = linear_backward(&z_row, &scorer.w1, &d_pre, &mut gp.w1, Some(&mut gp.b1))?;
            // GAP spreads dz evenly over the N rows
            let d_layer = &mut d_layers[i];
            for r in 0..n {
                for (d, &g) in d_layer.row_mut(r).iter_mut().zip(dz.data()) {
                    *d += g * inv_n;
                }
            }
        }
    }
    Ok(AdciGrads { layers: d_layers, params: grads })
}

/// Finite-difference fixture: `L` random layers of `N x C` with random
/// gating and projection parameters.
#[derive(Clone, Debug)]
pub struct AdciCheck {
    pub cfg: GroupingConfig,
    pub tokens: usize,
    pub channels: usize,
    pub gate_hidden: usize,
    pub per_group_gating: bool,
}

impl Default for AdciCheck {
    fn default() -> Self {
        AdciCheck {
            cfg: GroupingConfig { layers: 4, groups: 2 },
            tokens: 6,
            channels: 4,
            gate_hidden: 4,
            per_group_gating: false,
        }
    }
}

impl AdciCheck {
    fn unpack(&self, params: &[Tensor<f64>]) -> AdciParams<f64> {
        let scorers = params.len().saturating_sub(4) / 4;
        AdciParams {
            gating: (0..scorers)
                .map(|s| GatingParams {
                    w1: params[4 * s].clone(),
                    b1: params[4 * s + 1].clone(),
                    w2: params[4 * s + 2].clone(),
                    b2: params[4 * s + 3].clone(),
                })
                .collect(),
            proj1: params[4 * scorers].clone(),
            proj1_bias: params[4 * scorers + 1].clone(),
            proj2: params[4 * scorers + 2].clone(),
            proj2_bias: params[4 * scorers + 3].clone(),
        }
    }

    fn pack(p: &AdciParams<f64>) -> Vec<(String, Tensor<f64>)> {
        let mut out = Vec::new();
        for (s, g) in p.gating.iter().enumerate() {
            out.push((format!("gate{s}.w1"), g.w1.clone()));
            out.push((format!("gate{s}.b1"), g.b1.clone()));
            out.push((format!("gate{s}.w2"), g.w2.clone()));
            out.push((format!("gate{s}.b2"), g.b2.clone()));
        }
        out.push(("proj1".into(), p.proj1.clone()));
        out.push(("proj1_bias".into(), p.proj1_bias.clone()));
        out.push(("proj2".into(), p.proj2.clone()));
        out.push(("proj2_bias".into(), p.proj2_bias.clone()));
        out
    }
}

impl GradCheckLayer for AdciCheck {
    fn name(&self) -> String {
        "adci".into()
    }

    fn analytic(&self, seed: u64) -> Result<LayerIO<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = (self.tokens, self.channels);
        let layers: Vec<Tensor<f64>> = (0..self.cfg.layers).map(|_| init::uniform(&[n, c], -1.0, 1.0, &mut rng)).collect();
        let mut params = AdciParams::random(&self.cfg, c, self.gate_hidden, self.per_group_gating, 0.7, &mut rng);
        // non-zero biases so every bias gradient is exercised away from ReLU kinks
        for g in &mut params.gating {
            g.b1 = init::uniform(g.b1.shape(), 0.1, 0.5, &mut rng);
            g.b2 = init::uniform(&[1], -0.5, 0.5, &mut rng);
        }
        params.proj1_bias = init::uniform(params.proj1_bias.shape(), -0.2, 0.2, &mut rng);
        params.proj2_bias = init::uniform(params.proj2_bias.shape(), -0.2, 0.2, &mut rng);
        let (y, cache) = adci_forward(&layers, &self.cfg, &params)?;
        let g = adci_backward(&cache, &params, &Tensor::ones(y.shape()))?;
        Ok(LayerIO {
            inputs: layers.iter().enumerate().map(|(i, l)| (format!("layer{i}"), l.clone())).collect(),
            params: Self::pack(&params),
            output: y,
            input_grads: g.layers,
            param_grads: Self::pack(&g.params).into_iter().map(|(_, t)| t).collect(),
        })
    }

    fn forward(&self, inputs: &[Tensor<f64>], params: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(adci_forward(inputs, &self.cfg, &self.unpack(params))?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn grouping_validation() {
        assert!(GroupingConfig::new(4, 2).is_ok());
        assert!(matches!(GroupingConfig::new(5, 2), Err(Error::Config(_))));
        assert!(GroupingConfig::new(4, 0).is_err());
        assert_eq!(GroupingConfig::new(6, 3).unwrap().per_group(), 2);
    }

    #[test]
    fn descriptor_cases() {
        let v = Tensor::from_fn(&[5, 3], |i| [1.0, -2.0, 0.5][i % 3]);
        assert_eq!(layer_descriptor(&v).unwrap().data(), &[1.0, -2.0, 0.5]);
        let one = t(&[1, 2], &[3.0, 4.0]);
        assert_eq!(layer_descriptor(&one).unwrap().data(), &[3.0, 4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Tensor<f64> = init::uniform(&[12, 4], -1.0, 1.0, &mut rng);
        let z = layer_descriptor(&x).unwrap();
        for c in 0..4 {
            let mean: f64 = (0..12).map(|r| x.at(&[r, c])).sum::<f64>() / 12.0;
            assert!((z.data()[c] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn gating_cases() {
        let zero = GatingParams::<f64> {
            w1: Tensor::zeros(&[2, 2]),
            b1: Tensor::zeros(&[2]),
            w2: Tensor::zeros(&[2, 1]),
            b2: Tensor::zeros(&[1]),
        };
        assert_eq!(gating_scores(&t(&[2], &[3.0, -7.0]), &zero).unwrap(), 0.0);
        let hand = GatingParams::<f64> {
            w1: t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]),
            b1: Tensor::zeros(&[2]),
            w2: Tensor::ones(&[2, 1]),
            b2: Tensor::zeros(&[1]),
        };
        assert_eq!(gating_scores(&t(&[2], &[1.0, -1.0]), &hand).unwrap(), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = GatingParams::<f64> {
            w1: init::uniform(&[3, 5], -1.0, 1.0, &mut rng),
            b1: init::uniform(&[5], -1.0, 1.0, &mut rng),
            w2: init::uniform(&[5, 1], -1.0, 1.0, &mut rng),
            b2: init::uniform(&[1], -1.0, 1.0, &mut rng),
        };
        let z = init::uniform::<f64>(&[3], -1.0, 1.0, &mut rng);
        let mut expected = p.b2.data()[0];
        for j in 0..5 {
            let mut pre = p.b1.data()[j];
            for i in 0..3 {
                pre += z.data()[i] * p.w1.at(&[i, j]);
            }
            expected += pre.max(0.0) * p.w2.data()[j];
        }
        assert!((gating_scores(&z, &p).unwrap() - expected).abs() < 1e-6);
        assert!(gating_scores(&t(&[2], &[1.0, 1.0]), &p).is_err());
    }

    #[test]
    fn weight_cases() {
        assert_eq!(group_weights(&[0.3f64, 0.3, 0.3]).unwrap(), vec![1.0 / 3.0; 3]);
        assert_eq!(group_weights(&[5.0f64]).unwrap(), vec![1.0]);
        let w = group_weights(&[1.0f64.ln(), 3.0f64.ln()]).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-12 && (w[1] - 0.75).abs() < 1e-12);
        assert!(matches!(group_weights(&[f64::INFINITY, 0.0]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn aggregate_cases() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[-1.0, 0.5, 9.0, 0.0]);
        assert_eq!(aggregate_group(&[&a, &b], &[0.0, 1.0]).unwrap(), b);
        assert_eq!(aggregate_group(&[&a, &a, &a], &[0.2, 0.5, 0.3]).unwrap().data(), a.data());
        assert!(matches!(aggregate_group(&[&a, &b], &[0.5, 0.6]), Err(Error::WeightSumViolation { .. })));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ls: Vec<Tensor<f64>> = (0..3).map(|_| init::uniform(&[4, 3], -1.0, 1.0, &mut rng)).collect();
        let w = [0.2, 0.3, 0.5];
        let out = aggregate_group(&ls.iter().collect::<Vec<_>>(), &w).unwrap();
        for e in 0..12 {
            let expected: f64 = (0..3).map(|k| w[k] * ls[k].data()[e]).sum();
            assert!((out.data()[e] - expected).abs() < 1e-6);
        }
    }

    /// Steps transcribed as plain loops over scalars.
    fn reference(layers: &[Tensor<f64>], cfg: &GroupingConfig, p: &AdciParams<f64>) -> Vec<f64> {
        let (n, c) = (layers[0].rows(), layers[0].cols());
        let m = cfg.per_group();
        let mut cat = vec![vec![0.0; (cfg.groups + 1) * c]; n];
        for g in 0..cfg.groups {
            let mut scores = Vec::new();
            for i in g * m..(g + 1) * m {
                let gp = if p.gating.len() == 1 { &p.gating[0] } else { &p.gating[g] };
                let z: Vec<f64> = (0..c).map(|ch| (0..n).map(|r| layers[i].at(&[r, ch])).sum::<f64>() / n as f64).collect();
                let mut s = gp.b2.data()[0];
                for j in 0..gp.b1.len() {
                    let mut pre = gp.b1.data()[j];
                    for ch in 0..c {
                        pre += z[ch] * gp.w1.at(&[ch, j]);
                    }
                    s += pre.max(0.0) * gp.w2.data()[j];
                }
                scores.push(s);
            }
            let total: f64 = scores.iter().map(|s| s.exp()).sum();
            for (k, i) in (g * m..(g + 1) * m).enumerate() {
                let a = scores[k].exp() / total;
                for r in 0..n {
                    for ch in 0..c {
                        cat[r][g * c + ch] += a * layers[i].at(&[r, ch]);
                    }
                }
            }
        }
        for r in 0..n {
            for ch in 0..c {
                cat[r][cfg.groups * c + ch] = layers[cfg.layers - 1].at(&[r, ch]);
            }
        }
        let hidden = p.proj1_bias.len();
        let mut out = Vec::new();
        for row in &cat {
            let h: Vec<f64> = (0..hidden)
                .map(|j| {
                    let mut v = p.proj1_bias.data()[j];
                    for (k, x) in row.iter().enumerate() {
                        v += x * p.proj1.at(&[k, j]);
                    }
                    v.max(0.0)
                })
                .collect();
            for ch in 0..c {
                let mut v = p.proj2_bias.data()[ch];
                for j in 0..hidden {
                    v += h[j] * p.proj2.at(&[j, ch]);
                }
                out.push(v);
            }
        }
        out
    }

    #[test]
    fn forward_matches_loop_reference() {
        let cfg = GroupingConfig::new(4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for per_group in [false, true] {
            let layers: Vec<Tensor<f64>> = (0..4).map(|_| init::uniform(&[6, 4], -1.0, 1.0, &mut rng)).collect();
            let params = AdciParams::random(&cfg, 4, 3, per_group, 0.8, &mut rng);
            let (y, cache) = adci_forward(&layers, &cfg, &params).unwrap();
            for (a, b) in y.data().iter().zip(reference(&layers, &cfg, &params)) {
                assert!((a - b).abs() < 1e-5);
            }
            assert_eq!(cache.alphas.len(), 4);
        }
    }

    #[test]
    fn degenerate_grouping() {
        let cfg = GroupingConfig::new(1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer: Tensor<f64> = init::uniform(&[3, 2], -1.0, 1.0, &mut rng);
        let params = AdciParams::random(&cfg, 2, 2, false, 0.5, &mut rng);
        let (_, cache) = adci_forward(&[layer.clone()], &cfg, &params).unwrap();
        assert_eq!(cache.alphas, vec![1.0]);
        assert_eq!(cache.group_features[0], layer);
        assert_eq!(cache.concat.cols(), 4);
    }

    #[test]
    fn identical_layers_give_that_layer() {
        let cfg = GroupingConfig::new(4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let shared: Tensor<f64> = init::uniform(&[5, 3], -1.0, 1.0, &mut rng);
        let layers = vec![shared.clone(); 4];
        let params = AdciParams::random(&cfg, 3, 4, true, 2.0, &mut rng);
        let (_, cache) = adci_forward(&layers, &cfg, &params).unwrap();
        for g in &cache.group_features {
            for (a, b) in g.data().iter().zip(shared.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_order_within_group_matters() {
        let cfg = GroupingConfig::new(2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a: Tensor<f64> = init::uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let b: Tensor<f64> = init::uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let params = AdciParams::random(&cfg, 3, 4, false, 1.0, &mut rng);
        let (_, c1) = adci_forward(&[a.clone(), b.clone()], &cfg, &params).unwrap();
        let (_, c2) = adci_forward(&[b, a], &cfg, &params).unwrap();
        // scores follow their layers, but the weight at each position changes
        assert_eq!(c1.scores[0], c2.scores[1]);
        assert_ne!(c1.alphas[0], c2.alphas[0]);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let check = AdciCheck::default();
        let io = check.analytic(5).unwrap();
        let params = check.unpack(&io.params.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>());
        let layers: Vec<Tensor<f64>> = io.inputs.iter().map(|(_, t)| t.clone()).collect();
        let (y, cache) = adci_forward(&layers, &check.cfg, &params).unwrap();
        let g = adci_backward(&cache, &params, &y.zeros_like()).unwrap();
        assert!(g.layers.iter().all(|t| t.max_abs() == 0.0));
        assert!(AdciCheck::pack(&g.params).iter().all(|(_, t)| t.max_abs() == 0.0));
    }

    #[test]
    fn gradients_pass_finite_differences() {
        for per_group in [false, true] {
            let check = AdciCheck {
                per_group_gating: per_group,
                ..AdciCheck::default()
            };
            let r = finite_diff_check(&check, 1e-5, 1e-4, 11).unwrap();
            assert!(r.pass, "{:#?}", r.tensors);
        }
    }

    #[test]
    fn detached_gating_reduces_to_weighted_upstream() {
        // With alpha held fixed, d layer_i = alpha_i * dGC_g (+ dC_L for the
        // last layer). Recover the detached part by subtracting the gating
        // contribution, which is spread uniformly over rows.
        let check = AdciCheck::default();
        let io = check.analytic(13).unwrap();
        let params = check.unpack(&io.params.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>());
        let layers: Vec<Tensor<f64>> = io.inputs.iter().map(|(_, t)| t.clone()).collect();
        let (y, cache) = adci_forward(&layers, &check.cfg, &params).unwrap();
        let dy = Tensor::ones(y.shape());
        let g = adci_backward(&cache, &params, &dy).unwrap();

        let c = 4;
        let d_hidden = tensor::matmul_nt(&dy, &params.proj2).unwrap();
        let d_pre = d_hidden.zip_map(&cache.proj_pre, |g, p| if p > 0.0 { g } else { 0.0 }).unwrap();
        let d_concat = tensor::matmul_nt(&d_pre, &params.proj1).unwrap();
        let pieces = split_channels(&d_concat, c);
        for i in 0..4 {
            let group = i / 2;
            let mut detached = pieces[group].scale(cache.alphas[i]);
            if i == 3 {
                detached.add_assign(&pieces[2]).unwrap();
            }
            let diff = g.layers[i].zip_map(&detached, |a, b| a - b).unwrap();
            // the remainder is the gating path: identical for every row
            for r in 1..diff.rows() {
                for ch in 0..c {
                    assert!((diff.at(&[r, ch]) - diff.at(&[0, ch])).abs() < 1e-12);
                }
            }
        }
    }
}
