//! Toy end-to-end language-guided grasping model.
//!
//! RGB patches at strides 8, 16 and 32 pass through residual geometry-aware
//! attention blocks whose priors come from the depth map. Four block outputs
//! are aligned to the stride-16 grid and fused by ADCI into `C_v`. A word
//! embedding table gives token features `C_t` and a pooled sentence feature
//! `C_s`; a fusion neck and one cross-attention block produce `C_c`, from
//! which a segmentation head (pixel embeddings dotted with a projected `C_s`)
//! and a grasp head (quality, sin 2θ, cos 2θ, width per cell) are read out.

mod check;
mod decode;
mod loss;
mod net;
mod optim;
mod train;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::adci::{AdciParams, GatingParams, GroupingConfig};
use crate::dggm::{softplus_inverse, AttentionOptions, DecayMode, DecaySchedule, GeoAttentionParams};
use crate::error::{Error, Result};
use crate::init::normal;
use crate::tensor::{linear, linear_backward, Tensor};
use crate::Scalar;

pub use check::ModelCheck;
pub use decode::{decode_grasps, predict_mask};
pub use loss::{bce_with_logits, loss, loss_terms, LossBreakdown, LossGrads, Targets};
pub use net::{backward, forward, ForwardCache, ForwardOutputs, ModelGrads, ModelInput};
pub use optim::{AdamConfig, OptimState};
pub use train::{clip_global_norm, evaluate_model, ground_truth_record, predict, train, EpochMetrics, LrSchedule, Prediction, TrainOptions, TrainResult};

/// Patch strides of the three encoder scales.
pub const STRIDES: [usize; 3] = [8, 16, 32];
pub const BLOCKS_PER_SCALE: usize = 2;
/// Grid on which ADCI, the decoder and the grasp head operate.
pub const GRASP_STRIDE: usize = 16;
/// ADCI inputs: (scale index, block index), shallow to deep.
pub const ADCI_TAPS: [(usize, usize); 4] = [(0, 1), (1, 0), (1, 1), (2, 1)];

/// How attention blocks use the depth prior.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometryMode {
    /// Decay masks from the sample's depth map.
    #[default]
    Depth,
    /// A prior of all zeros, so every mask is 1.
    Zero,
    /// Plain attention.
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub heads: usize,
    /// ADCI groups over the four tapped layers.
    pub groups: usize,
    pub gate_hidden: usize,
    pub per_group_gating: bool,
    pub vocab_size: usize,
    pub max_tokens: usize,
    /// Width of the per-pixel segmentation MLP and of the dot-product space.
    pub seg_hidden: usize,
    pub grasp_hidden: usize,
    pub seg_weight: f64,
    pub grasp_weight: f64,
    pub scale_qk: bool,
    pub renorm_after_decay: bool,
    pub decay_mode: DecayMode,
    pub geometry: GeometryMode,
    /// Rectangle height as a fraction of the decoded width.
    pub grasp_aspect: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 64,
            width: 64,
            channels: 32,
            heads: 2,
            groups: 2,
            gate_hidden: 8,
            per_group_gating: false,
            vocab_size: crate::data::Vocab::standard().len(),
            max_tokens: crate::data::MAX_TOKENS,
            seg_hidden: 16,
            grasp_hidden: 32,
            seg_weight: 1.0,
            grasp_weight: 1.0,
            scale_qk: true,
            renorm_after_decay: false,
            decay_mode: DecayMode::Power,
            geometry: GeometryMode::Depth,
            grasp_aspect: 0.5,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.height % 32 != 0 || self.width % 32 != 0 {
            return bad(format!("image size {}x{} must be a positive multiple of 32", self.height, self.width));
        }
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!("{} channels cannot be split over {} heads", self.channels, self.heads));
        }
        if self.max_tokens != crate::data::MAX_TOKENS {
            return bad(format!("max_tokens must be {}", crate::data::MAX_TOKENS));
        }
        if self.vocab_size < 2 || self.seg_hidden == 0 || self.grasp_hidden == 0 || self.gate_hidden == 0 {
            return bad("vocabulary and hidden widths must be positive".into());
        }
        if !(self.grasp_aspect > 0.0) || !(self.init_std > 0.0) || self.seg_weight < 0.0 || self.grasp_weight < 0.0 {
            return bad("aspect, init_std and loss weights must be positive".into());
        }
        self.grouping()?;
        Ok(())
    }

    pub fn grouping(&self) -> Result<GroupingConfig> {
        GroupingConfig::new(ADCI_TAPS.len(), self.groups)
    }

    pub fn attention(&self) -> AttentionOptions {
        AttentionOptions {
            scale_qk: self.scale_qk,
            renorm_after_decay: self.renorm_after_decay,
            decay_mode: self.decay_mode,
        }
    }

    pub fn schedule(&self) -> DecaySchedule {
        DecaySchedule::geometric(self.heads)
    }

    /// `(rows, cols)` of the patch grid at `stride`.
    pub fn grid(&self, stride: usize) -> (usize, usize) {
        (self.height / stride, self.width / stride)
    }
}

/// Affine map `x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Affine<T> {
    fn init(fan_in: usize, fan_out: usize, init: &Init, rng: &mut impl Rng) -> Self {
        Affine {
            w: normal(&[fan_in, fan_out], init.std(fan_in), rng),
            b: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        linear(x, &self.w, Some(&self.b))
    }

    /// Accumulates into `grad` and returns the input gradient.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut Affine<T>) -> Result<Tensor<T>> {
        linear_backward(x, &self.w, dy, &mut grad.w, Some(&mut grad.b))
    }
}

/// One residual attention block and its raw mixing weights `[λ1, λ2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub attn: GeoAttentionParams<T>,
    pub lambda: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleParams<T> {
    pub stride: usize,
    pub embed: Affine<T>,
    pub pos: Tensor<T>,
    pub blocks: Vec<Block<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub scales: Vec<ScaleParams<T>>,
    pub adapters: Vec<Affine<T>>,
    pub adci: AdciParams<T>,
    pub token_embed: Tensor<T>,
    pub sentence: Affine<T>,
    pub fuse_gate: Affine<T>,
    pub fuse_hidden: Affine<T>,
    pub fuse_out: Affine<T>,
    pub dec_q: Tensor<T>,
    pub dec_k: Tensor<T>,
    pub dec_v: Tensor<T>,
    pub dec_o: Tensor<T>,
    /// `C_c` to pixel hidden units, applied before upsampling.
    pub seg_feat: Tensor<T>,
    pub seg_rgb: Affine<T>,
    pub seg_pixel: Affine<T>,
    pub seg_text: Affine<T>,
    pub seg_bias: Tensor<T>,
    pub grasp_hidden: Affine<T>,
    pub grasp_out: Affine<T>,
}

/// Weight initialisation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with one standard deviation for every weight.
    Fixed(f64),
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    FanIn(f64),
}

impl Init {
    fn std(&self, fan_in: usize) -> f64 {
        match *self {
            Init::Fixed(s) => s,
            Init::FanIn(gain) => gain / (fan_in.max(1) as f64).sqrt(),
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(cfg: &ModelConfig, init: Init, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let lambda0 = T::c(softplus_inverse(0.5));
        let mut scales = Vec::with_capacity(STRIDES.len());
        for &s in &STRIDES {
            let (rows, cols) = cfg.grid(s);
            let embed = Affine::init(s * s * 3, c, &init, rng);
            let pos = normal(&[rows * cols, c], init.std(c), rng);
            let blocks = (0..BLOCKS_PER_SCALE)
                .map(|_| {
                    let mut m = || normal(&[c, c], init.std(c), rng);
                    Ok(Block {
                        attn: GeoAttentionParams::new(cfg.heads, m(), m(), m(), m())?,
                        lambda: Tensor::full(&[2], lambda0),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            scales.push(ScaleParams { stride: s, embed, pos, blocks });
        }
        let adapters = (0..ADCI_TAPS.len()).map(|_| Affine::init(c, c, &init, rng)).collect();
        let grouping = cfg.grouping()?;
        let gates = if cfg.per_group_gating { grouping.groups } else { 1 };
        let gating = (0..gates)
            .map(|_| GatingParams {
                w1: normal(&[c, cfg.gate_hidden], init.std(c), rng),
                b1: Tensor::zeros(&[cfg.gate_hidden]),
                w2: normal(&[cfg.gate_hidden, 1], init.std(cfg.gate_hidden), rng),
                b2: Tensor::zeros(&[1]),
            })
            .collect();
        let p = crate::adci::projection_hidden(grouping.groups, c);
        let wide = (grouping.groups + 1) * c;
        let adci = AdciParams {
            gating,
            proj1: normal(&[wide, p], init.std(wide), rng),
            proj1_bias: Tensor::zeros(&[p]),
            proj2: normal(&[p, c], init.std(p), rng),
            proj2_bias: Tensor::zeros(&[c]),
        };
        let hs = cfg.seg_hidden;
        let mut m = |rows: usize, cols: usize| normal(&[rows, cols], init.std(rows), rng);
        let token_embed = m(cfg.vocab_size, c);
        let (dec_q, dec_k, dec_v, dec_o) = (m(c, c), m(c, c), m(c, c), m(c, c));
        let seg_feat = m(c, hs);
        Ok(ModelParams {
            scales,
            adapters,
            adci,
            token_embed,
            sentence: Affine::init(c, c, &init, rng),
            fuse_gate: Affine::init(c, c, &init, rng),
            fuse_hidden: Affine::init(2 * c, c, &init, rng),
            fuse_out: Affine::init(c, c, &init, rng),
            dec_q,
            dec_k,
            dec_v,
            dec_o,
            seg_feat,
            seg_rgb: Affine::init(3, hs, &init, rng),
            seg_pixel: Affine::init(hs, hs, &init, rng),
            seg_text: Affine::init(c, hs, &init, rng),
            seg_bias: Tensor::zeros(&[1]),
            grasp_hidden: Affine::init(c, cfg.grasp_hidden, &init, rng),
            grasp_out: Affine::init(cfg.grasp_hidden, 4, &init, rng),
        })
    }

    /// Same layout, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            t.fill(T::zero());
        }
        z
    }

    /// Every trainable tensor with a stable, unique name.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        for s in &mut self.scales {
            let p = format!("s{}", s.stride);
            out.push((format!("{p}.embed.w"), &mut s.embed.w));
            out.push((format!("{p}.embed.b"), &mut s.embed.b));
            out.push((format!("{p}.pos"), &mut s.pos));
            for (i, b) in s.blocks.iter_mut().enumerate() {
                out.push((format!("{p}.block{i}.wq"), &mut b.attn.wq));
                out.push((format!("{p}.block{i}.wk"), &mut b.attn.wk));
                out.push((format!("{p}.block{i}.wv"), &mut b.attn.wv));
                out.push((format!("{p}.block{i}.wo"), &mut b.attn.wo));
                out.push((format!("{p}.block{i}.lambda"), &mut b.lambda));
            }
        }
        for (i, a) in self.adapters.iter_mut().enumerate() {
            out.push((format!("adapter{i}.w"), &mut a.w));
            out.push((format!("adapter{i}.b"), &mut a.b));
        }
        for (i, g) in self.adci.gating.iter_mut().enumerate() {
            out.push((format!("adci.gate{i}.w1"), &mut g.w1));
            out.push((format!("adci.gate{i}.b1"), &mut g.b1));
            out.push((format!("adci.gate{i}.w2"), &mut g.w2));
            out.push((format!("adci.gate{i}.b2"), &mut g.b2));
        }
        out.push(("adci.proj1.w".into(), &mut self.adci.proj1));
        out.push(("adci.proj1.b".into(), &mut self.adci.proj1_bias));
        out.push(("adci.proj2.w".into(), &mut self.adci.proj2));
        out.push(("adci.proj2.b".into(), &mut self.adci.proj2_bias));
        out.push(("text.embed".into(), &mut self.token_embed));
        for (name, a) in [
            ("text.sentence", &mut self.sentence),
            ("fuse.gate", &mut self.fuse_gate),
            ("fuse.hidden", &mut self.fuse_hidden),
            ("fuse.out", &mut self.fuse_out),
        ] {
            out.push((format!("{name}.w"), &mut a.w));
            out.push((format!("{name}.b"), &mut a.b));
        }
        out.push(("dec.q".into(), &mut self.dec_q));
        out.push(("dec.k".into(), &mut self.dec_k));
        out.push(("dec.v".into(), &mut self.dec_v));
        out.push(("dec.o".into(), &mut self.dec_o));
        out.push(("seg.feat".into(), &mut self.seg_feat));
        for (name, a) in [
            ("seg.rgb", &mut self.seg_rgb),
            ("seg.pixel", &mut self.seg_pixel),
            ("seg.text", &mut self.seg_text),
        ] {
            out.push((format!("{name}.w"), &mut a.w));
            out.push((format!("{name}.b"), &mut a.b));
        }
        out.push(("seg.bias".into(), &mut self.seg_bias));
        for (name, a) in [("grasp.hidden", &mut self.grasp_hidden), ("grasp.out", &mut self.grasp_out)] {
            out.push((format!("{name}.w"), &mut a.w));
            out.push((format!("{name}.b"), &mut a.b));
        }
        out
    }

    /// Owned copies of [`ModelParams::named_mut`], in the same order.
    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        self.clone().named_mut().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.named().into_iter().map(|(n, _)| n).collect()
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Overwrites tensors by name; every name must match and shapes must agree.
    pub fn assign(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        let mut slots = self.named_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Format(format!("{} tensors for a model with {}", tensors.len(), slots.len())));
        }
        for ((name, slot), (src_name, src)) in slots.iter_mut().zip(tensors) {
            if name != src_name {
                return Err(Error::Format(format!("tensor '{src_name}' where '{name}' was expected")));
            }
            if slot.shape() != src.shape() {
                return Err(Error::shape("ModelParams::assign", format!("{name} {:?}", slot.shape()), format!("{:?}", src.shape())));
            }
            **slot = src.clone();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out: ModelParams<U> = ModelParams {
            scales: self
                .scales
                .iter()
                .map(|s| ScaleParams {
                    stride: s.stride,
                    embed: Affine { w: s.embed.w.cast(), b: s.embed.b.cast() },
                    pos: s.pos.cast(),
                    blocks: s
                        .blocks
                        .iter()
                        .map(|b| Block {
                            attn: GeoAttentionParams::new(b.attn.heads, b.attn.wq.cast(), b.attn.wk.cast(), b.attn.wv.cast(), b.attn.wo.cast())
                                .expect("same shapes"),
                            lambda: b.lambda.cast(),
                        })
                        .collect(),
                })
                .collect(),
            adapters: Vec::new(),
            adci: AdciParams {
                gating: self
                    .adci
                    .gating
                    .iter()
                    .map(|g| GatingParams { w1: g.w1.cast(), b1: g.b1.cast(), w2: g.w2.cast(), b2: g.b2.cast() })
                    .collect(),
                proj1: self.adci.proj1.cast(),
                proj1_bias: self.adci.proj1_bias.cast(),
                proj2: self.adci.proj2.cast(),
                proj2_bias: self.adci.proj2_bias.cast(),
            },
            token_embed: self.token_embed.cast(),
            sentence: cast_affine(&self.sentence),
            fuse_gate: cast_affine(&self.fuse_gate),
            fuse_hidden: cast_affine(&self.fuse_hidden),
            fuse_out: cast_affine(&self.fuse_out),
            dec_q: self.dec_q.cast(),
            dec_k: self.dec_k.cast(),
            dec_v: self.dec_v.cast(),
            dec_o: self.dec_o.cast(),
            seg_feat: self.seg_feat.cast(),
            seg_rgb: cast_affine(&self.seg_rgb),
            seg_pixel: cast_affine(&self.seg_pixel),
            seg_text: cast_affine(&self.seg_text),
            seg_bias: self.seg_bias.cast(),
            grasp_hidden: cast_affine(&self.grasp_hidden),
            grasp_out: cast_affine(&self.grasp_out),
        };
        out.adapters = self.adapters.iter().map(cast_affine).collect();
        out
    }
}

fn cast_affine<T: Scalar, U: Scalar>(a: &Affine<T>) -> Affine<U> {
    Affine { w: a.w.cast(), b: a.b.cast() }
}

/// Saves parameters and config as a GLG1 checkpoint.
pub fn save_checkpoint(path: &std::path::Path, params: &ModelParams<f32>, cfg: &ModelConfig) -> Result<()> {
    let tensors: Vec<crate::data::NamedTensor> = params
        .named()
        .into_iter()
        .map(|(name, tensor)| crate::data::NamedTensor { name, tensor })
        .collect();
    crate::data::write_checkpoint(path, &tensors, serde_json::to_value(cfg)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<(ModelParams<f32>, ModelConfig)> {
    let (tensors, cfg) = crate::data::read_checkpoint(path)?;
    let cfg: ModelConfig = serde_json::from_value(cfg.ok_or_else(|| Error::Format("checkpoint has no config".into()))?)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut params = ModelParams::<f32>::init(&cfg, Init::Fixed(cfg.init_std), &mut rng)?;
    let named: Vec<(String, Tensor<f32>)> = tensors.into_iter().map(|t| (t.name, t.tensor)).collect();
    params.assign(&named)?;
    Ok((params, cfg))
}
