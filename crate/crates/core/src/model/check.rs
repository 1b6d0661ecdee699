//! Finite-difference fixture for the whole model.

use std::sync::{Mutex, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{loss, loss_terms, Targets};
use super::net::{backward, forward, ModelInput};
use super::{Init, ModelConfig, ModelParams};
use crate::data::{generate_scene, Difficulty, SceneConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{GradCheckLayer, LayerIO};
use crate::tensor::Tensor;

/// Checks the training loss of one synthetic sample against the RGB input
/// and every named parameter.
///
/// The layer output holds one entry per pixel and per grasp cell: that term
/// of the loss minus its value at the drawn parameters. The sum has the loss
/// gradient, but stays near zero, so central differences are not swamped by
/// the round-off of a total near 2.
///
/// Query and key weights are drawn `qk_gain` times larger than the rest.
/// With near-uniform attention their gradients sit around 1e-8, where
/// round-off in the central difference alone exceeds the tolerance.
///
/// The scene comes from `scene_seed`; the seed passed to the checker only
/// draws the parameters.
#[derive(Debug)]
pub struct ModelCheck {
    pub cfg: ModelConfig,
    pub scene_seed: u64,
    pub init: Init,
    /// Extra factor on every query and key projection.
    pub qk_gain: f64,
    fixture: OnceLock<(ModelInput<f64>, Targets)>,
    reference: Mutex<Vec<f64>>,
}

impl ModelCheck {
    pub fn new(cfg: ModelConfig, scene_seed: u64) -> Self {
        ModelCheck {
            cfg,
            scene_seed,
            init: Init::FanIn(1.0),
            qk_gain: 3.0,
            fixture: OnceLock::new(),
            reference: Mutex::new(Vec::new()),
        }
    }
}

impl Default for ModelCheck {
    fn default() -> Self {
        ModelCheck::new(
            ModelConfig {
                height: 32,
                width: 32,
                channels: 8,
                heads: 2,
                gate_hidden: 4,
                seg_hidden: 6,
                grasp_hidden: 6,
                ..ModelConfig::default()
            },
            3,
        )
    }
}

impl ModelCheck {
    fn fixture(&self) -> Result<&(ModelInput<f64>, Targets)> {
        if let Some(f) = self.fixture.get() {
            return Ok(f);
        }
        let sample = generate_scene(self.scene_seed, Difficulty::Isolated, &SceneConfig::sized(self.cfg.height, self.cfg.width))?;
        let targets = Targets::from_sample(&sample, &self.cfg)?;
        Ok(self.fixture.get_or_init(|| (ModelInput::from_sample(&sample), targets)))
    }
}

impl GradCheckLayer for ModelCheck {
    fn name(&self) -> String {
        "model".into()
    }

    fn analytic(&self, seed: u64) -> Result<LayerIO<f64>> {
        let (input, targets) = self.fixture()?;
        let mut params = ModelParams::init(&self.cfg, self.init, &mut ChaCha8Rng::seed_from_u64(seed))?;
        for (name, t) in params.named_mut() {
            if name.ends_with(".wq") || name.ends_with(".wk") {
                *t = t.scale(self.qk_gain);
            }
        }
        let (out, cache) = forward(&params, &self.cfg, input)?;
        let (_, d) = loss(&out, targets, &self.cfg)?;
        let g = backward(&params, &self.cfg, &cache, &d.seg, &d.grasp)?;
        let terms = loss_terms(&out, targets, &self.cfg)?;
        let n = terms.len();
        *self.reference.lock().expect("reference lock") = terms;
        Ok(LayerIO {
            inputs: vec![("rgb".into(), input.rgb.clone())],
            params: params.named(),
            output: Tensor::zeros(&[n]),
            input_grads: vec![g.rgb],
            param_grads: g.params.named().into_iter().map(|(_, t)| t).collect(),
        })
    }

    fn forward(&self, inputs: &[Tensor<f64>], params: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        let (input, targets) = self.fixture()?;
        let input = ModelInput {
            rgb: inputs[0].clone(),
            ..input.clone()
        };
        let mut p = ModelParams::init(&self.cfg, Init::Fixed(0.0), &mut ChaCha8Rng::seed_from_u64(0))?;
        let names = p.names();
        p.assign(&names.into_iter().zip(params.iter().cloned()).collect::<Vec<_>>())?;
        let (out, _) = forward(&p, &self.cfg, &input)?;
        let terms = loss_terms(&out, targets, &self.cfg)?;
        let reference = self.reference.lock().expect("reference lock");
        if reference.len() != terms.len() {
            return Err(Error::CacheMismatch("model check forward ran before analytic".into()));
        }
        let diff: Vec<f64> = terms.iter().zip(reference.iter()).map(|(a, b)| a - b).collect();
        Tensor::new(vec![diff.len()], diff)
    }
}
