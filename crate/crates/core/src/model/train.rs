//! Mini-batch training loop and batch inference.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decode::{decode_grasps, predict_mask};
use super::loss::{loss, Targets};
use super::net::{backward, forward, ModelInput};
use super::optim::{AdamConfig, OptimState};
use super::{Init, ModelConfig, ModelParams};
use crate::data::SceneSample;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_with, jacquard_at_n, seg_iou, EvalRecord, EvalReport, ScoredGrasp, SegMask};
use crate::{Exec, Tensor};

/// Learning-rate multiplier over the run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from 1 down to 0 at the last step.
    Cosine,
}

impl LrSchedule {
    /// Multiplier for 0-based `step` out of `total`.
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine if total <= 1 => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / (total - 1) as f64).cos()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<usize>,
    pub adam: AdamConfig,
    pub lr_schedule: LrSchedule,
    /// Rescales each batch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
    /// N for J@N in the final report.
    pub top_n: usize,
}

impl TrainOptions {
    /// Optimizer steps the run will take over `samples` examples.
    pub fn total_steps(&self, samples: usize) -> usize {
        let per_epoch = samples.div_ceil(self.batch_size.max(1));
        let all = per_epoch * self.epochs;
        self.max_steps.map_or(all, |m| m.min(all))
    }
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 50,
            batch_size: 8,
            max_steps: Some(2000),
            adam: AdamConfig::default(),
            lr_schedule: LrSchedule::Constant,
            clip_norm: None,
            top_n: 5,
        }
    }
}

/// Scales `grads` down to global L2 norm `max_norm` when above it; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut ModelParams<f32>, max_norm: f64) -> f64 {
    let mut all = grads.named_mut();
    let norm = all
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = (max_norm / norm) as f32;
        for (_, a) in all.iter_mut() {
            a.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Averages over one epoch, measured on the outputs each step trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub seg_bce: f64,
    pub grasp_loss: f64,
    pub seg_iou: f64,
    pub j_at_1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub params: ModelParams<f32>,
    pub log: Vec<EpochMetrics>,
    /// Clean evaluation of the final parameters on the training set.
    pub report: EvalReport,
}

/// Model output for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub mask: SegMask,
    pub grasps: Vec<ScoredGrasp>,
}

impl Prediction {
    pub fn into_record(self) -> EvalRecord {
        EvalRecord {
            id: self.id,
            mask: self.mask,
            grasps: self.grasps,
        }
    }
}

pub fn ground_truth_record(s: &SceneSample) -> EvalRecord {
    EvalRecord {
        id: s.id.to_string(),
        mask: s.mask.clone(),
        grasps: s.grasps.iter().map(|&rect| ScoredGrasp { rect, score: 1.0 }).collect(),
    }
}

pub fn predict(exec: &Exec, params: &ModelParams<f32>, cfg: &ModelConfig, samples: &[SceneSample], top_n: usize) -> Result<Vec<Prediction>> {
    exec.try_map(samples.len(), |i| {
        let s = &samples[i];
        let (out, _) = forward(params, cfg, &ModelInput::from_sample(s))?;
        Ok(Prediction {
            id: s.id.to_string(),
            mask: predict_mask(&out),
            grasps: decode_grasps(&out, top_n, cfg)?,
        })
    })
}

pub fn evaluate_model(exec: &Exec, params: &ModelParams<f32>, cfg: &ModelConfig, samples: &[SceneSample], top_n: usize) -> Result<EvalReport> {
    let preds: Vec<EvalRecord> = predict(exec, params, cfg, samples, top_n)?.into_iter().map(Prediction::into_record).collect();
    let gts: Vec<EvalRecord> = samples.iter().map(ground_truth_record).collect();
    evaluate_with(exec, &preds, &gts, top_n)
}

struct StepOut {
    total: f64,
    seg_bce: f64,
    grasp: f64,
    iou: f64,
    hit: bool,
    grads: ModelParams<f32>,
}

fn sample_step(params: &ModelParams<f32>, cfg: &ModelConfig, s: &SceneSample, targets: &Targets) -> Result<StepOut> {
    let (out, cache) = forward(params, cfg, &ModelInput::from_sample(s))?;
    let (l, d) = loss(&out, targets, cfg)?;
    let g = backward(params, cfg, &cache, &d.seg, &d.grasp)?;
    let top = decode_grasps(&out, 1, cfg)?;
    let rects: Vec<_> = top.iter().map(|g| g.rect).collect();
    Ok(StepOut {
        total: l.total,
        seg_bce: l.seg_bce,
        grasp: l.grasp(),
        iou: seg_iou(&predict_mask(&out), &s.mask)?,
        hit: jacquard_at_n(&rects, &s.grasps, 1),
        grads: g.params,
    })
}

fn with_context(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} (epoch {epoch}, step {step})")),
        other => other,
    }
}

/// Trains from a fresh initialisation; `on_epoch` sees each epoch's metrics
/// as soon as they are known.
pub fn train(
    exec: &Exec,
    samples: &[SceneSample],
    cfg: &ModelConfig,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainResult> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training needs at least one sample".into()));
    }
    if opts.batch_size == 0 || opts.epochs == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::<f32>::init(cfg, Init::Fixed(cfg.init_std), &mut rng)?;
    let mut opt = OptimState::new(&params, opts.adam)?;
    let targets = samples.iter().map(|s| Targets::from_sample(s, cfg)).collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    let total = opts.total_steps(samples.len());
    let base_lr = opts.adam.lr;
    'epochs: for epoch in 0..opts.epochs {
        if opts.max_steps.is_some_and(|m| step >= m) {
            break;
        }
        order.shuffle(&mut rng);
        let (mut sums, mut seen, mut steps) = ([0.0; 5], 0usize, 0usize);
        for batch in order.chunks(opts.batch_size) {
            if opts.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let outs = exec
                .try_map(batch.len(), |k| sample_step(&params, cfg, &samples[batch[k]], &targets[batch[k]]))
                .map_err(|e| with_context(e, epoch, step))?;
            let mut grads = params.zeros_like();
            {
                let mut acc = grads.named_mut();
                for o in &outs {
                    for ((_, a), (_, g)) in acc.iter_mut().zip(o.grads.named()) {
                        a.add_assign(&g)?;
                    }
                    for (s, v) in sums.iter_mut().zip([o.total, o.seg_bce, o.grasp, o.iou, if o.hit { 1.0 } else { 0.0 }]) {
                        *s += v;
                    }
                }
                let inv = 1.0 / batch.len() as f32;
                for (_, a) in acc.iter_mut() {
                    let scaled: Tensor<f32> = a.scale(inv);
                    **a = scaled;
                }
            }
            if let Some(c) = opts.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            opt.config.lr = base_lr * opts.lr_schedule.factor(step, total);
            opt.step(&mut params, &grads).map_err(|e| with_context(e, epoch, step))?;
            seen += batch.len();
            steps += 1;
            step += 1;
        }
        if steps == 0 {
            break 'epochs;
        }
        let k = 1.0 / seen as f64;
        let m = EpochMetrics {
            epoch,
            steps: step,
            loss: sums[0] * k,
            seg_bce: sums[1] * k,
            grasp_loss: sums[2] * k,
            seg_iou: sums[3] * k,
            j_at_1: sums[4] * k,
        };
        on_epoch(&m);
        log.push(m);
    }
    let report = evaluate_model(exec, &params, cfg, samples, opts.top_n)?;
    Ok(TrainResult { params, log, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, Difficulty, SceneConfig};
    use crate::model::net::tests::small_cfg;

    fn data(n: usize, size: usize) -> Vec<SceneSample> {
        generate_dataset(&Exec::sequential(), 21, n, Difficulty::Isolated, &SceneConfig::sized(size, size)).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_the_initialisation() {
        let cfg = small_cfg();
        let opts = TrainOptions {
            epochs: 3,
            batch_size: 2,
            max_steps: None,
            adam: AdamConfig { lr: 0.0, ..AdamConfig::default() },
            lr_schedule: LrSchedule::Constant,
            clip_norm: None,
            top_n: 1,
        };
        let r = train(&Exec::sequential(), &data(3, 32), &cfg, &opts, |_| {}).unwrap();
        let init = ModelParams::<f32>::init(&cfg, Init::Fixed(cfg.init_std), &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        assert_eq!(r.params, init);
        assert_eq!(r.log.len(), 3);
        assert_eq!(r.log[2].steps, 6);
    }

    #[test]
    fn repeat_runs_match_and_threads_do_not_matter() {
        let cfg = small_cfg();
        let opts = TrainOptions {
            epochs: 2,
            batch_size: 3,
            max_steps: Some(3),
            adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() },
            lr_schedule: LrSchedule::Constant,
            clip_norm: None,
            top_n: 1,
        };
        let d = data(5, 32);
        let a = train(&Exec::sequential(), &d, &cfg, &opts, |_| {}).unwrap();
        let b = train(&Exec::sequential(), &d, &cfg, &opts, |_| {}).unwrap();
        let c = train(&Exec::with_threads(3), &d, &cfg, &opts, |_| {}).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
        assert_eq!(a.params, c.params);
        assert_eq!(a.log.last().unwrap().steps, 3);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let cfg = small_cfg();
        let mut g = ModelParams::<f32>::init(&cfg, Init::FanIn(1.0), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let before = clip_global_norm(&mut g.clone(), f64::INFINITY);
        let copy = g.clone();
        assert_eq!(clip_global_norm(&mut g, before * 2.0), before);
        assert_eq!(g, copy);
        clip_global_norm(&mut g, 0.5);
        let after = clip_global_norm(&mut g, f64::INFINITY);
        assert!((after - 0.5).abs() < 1e-5, "{after}");
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = LrSchedule::Cosine;
        assert_eq!(c.factor(0, 11), 1.0);
        assert!((c.factor(5, 11) - 0.5).abs() < 1e-15);
        assert!(c.factor(10, 11).abs() < 1e-15);
        assert_eq!(c.factor(0, 1), 1.0);
        assert_eq!(LrSchedule::Constant.factor(7, 11), 1.0);
        let opts = TrainOptions { epochs: 3, batch_size: 4, max_steps: Some(5), ..TrainOptions::default() };
        assert_eq!(opts.total_steps(10), 5);
        assert_eq!(TrainOptions { max_steps: None, ..opts }.total_steps(10), 9);
    }

    #[test]
    fn rejects_empty_data() {
        assert!(train(&Exec::sequential(), &[], &small_cfg(), &TrainOptions::default(), |_| {}).is_err());
    }
}
