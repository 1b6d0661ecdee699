//! Adam.

use serde::{Deserialize, Serialize};

use super::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 10f64.powf(-4.5),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// Moments for every parameter, in [`ModelParams::named`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ModelParams<T>, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let m: Vec<Tensor<T>> = params.named().iter().map(|(_, t)| t.zeros_like()).collect();
        Ok(OptimState {
            config,
            step: 0,
            v: m.clone(),
            m,
        })
    }

    /// One bias-corrected update. A non-finite gradient aborts the step
    /// before anything is modified.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>) -> Result<()> {
        let grads = grads.named();
        if grads.len() != self.m.len() {
            return Err(Error::CacheMismatch("gradient layout differs from the optimizer".into()));
        }
        for (name, g) in &grads {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::c(beta1), T::c(beta2));
        let mut updated = Vec::with_capacity(grads.len());
        for (i, ((name, p), (_, g))) in params.named().into_iter().zip(&grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut p = p;
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mh = mi.f64() / c1;
                let vh = vi.f64() / c2;
                *x -= T::c(lr * mh / (vh.sqrt() + eps));
            }
            if !p.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name} after step {}", self.step)));
            }
            updated.push((name, p));
        }
        params.assign(&updated)
    }
}
