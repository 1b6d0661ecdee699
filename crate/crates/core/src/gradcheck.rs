//! Central-difference verification of analytic gradients.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::par::Exec;
use crate::tensor::Tensor;

/// Values and gradients of one layer evaluation.
///
/// `input_grads[i]` is the gradient of `sum(output)` with respect to
/// `inputs[i]`; likewise for parameters.
#[derive(Clone, Debug)]
pub struct LayerIO<T> {
    pub inputs: Vec<(String, Tensor<T>)>,
    pub params: Vec<(String, Tensor<T>)>,
    pub output: Tensor<T>,
    pub input_grads: Vec<Tensor<T>>,
    pub param_grads: Vec<Tensor<T>>,
}

impl<T: crate::Scalar> LayerIO<T> {
    pub fn validate(&self) -> Result<()> {
        let pairs = self
            .inputs
            .iter()
            .zip(&self.input_grads)
            .chain(self.params.iter().zip(&self.param_grads));
        if self.inputs.len() != self.input_grads.len() || self.params.len() != self.param_grads.len() {
            return Err(Error::CacheMismatch("gradient count differs from tensor count".into()));
        }
        for ((name, value), grad) in pairs {
            if value.shape() != grad.shape() {
                return Err(Error::shape("LayerIO", format!("{name} gradient {:?}", value.shape()), format!("{:?}", grad.shape())));
            }
        }
        Ok(())
    }
}

/// A layer whose analytic backward pass can be checked numerically in `f64`.
pub trait GradCheckLayer: Sync {
    fn name(&self) -> String;

    /// Draws inputs and parameters from `seed`, runs the forward pass and the
    /// analytic backward pass for the loss `sum(output)`.
    fn analytic(&self, seed: u64) -> Result<LayerIO<f64>>;

    /// Forward pass on (possibly perturbed) copies of the tensors returned by
    /// [`GradCheckLayer::analytic`].
    fn forward(&self, inputs: &[Tensor<f64>], params: &[Tensor<f64>]) -> Result<Tensor<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorRole {
    Input,
    Param,
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub layer: String,
    pub tensor: String,
    pub role: TensorRole,
    pub entries: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub layer: String,
    pub eps: f64,
    pub tol: f64,
    pub max_rel_err: f64,
    pub pass: bool,
    pub tensors: Vec<TensorCheck>,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn finite_diff_check(layer: &dyn GradCheckLayer, eps: f64, tol: f64, seed: u64) -> Result<GradReport> {
    finite_diff_check_with(&Exec::sequential(), layer, eps, tol, seed)
}

const CHUNK: usize = 64;

/// Perturbs every input and parameter entry by `±eps` and compares
/// `(f(x+eps) - f(x-eps)) / (2 eps)` with the analytic gradient.
pub fn finite_diff_check_with(
    exec: &Exec,
    layer: &dyn GradCheckLayer,
    eps: f64,
    tol: f64,
    seed: u64,
) -> Result<GradReport> {
    let io = layer.analytic(seed)?;
    io.validate()?;
    let inputs: Vec<Tensor<f64>> = io.inputs.iter().map(|(_, t)| t.clone()).collect();
    let params: Vec<Tensor<f64>> = io.params.iter().map(|(_, t)| t.clone()).collect();

    // (slot, entry) for every checked scalar; slots index inputs then params.
    let slots: Vec<(&String, TensorRole, &Tensor<f64>)> = io
        .inputs
        .iter()
        .zip(&io.input_grads)
        .map(|((n, _), g)| (n, TensorRole::Input, g))
        .chain(io.params.iter().zip(&io.param_grads).map(|((n, _), g)| (n, TensorRole::Param, g)))
        .collect();
    let work: Vec<(usize, usize)> = slots
        .iter()
        .enumerate()
        .flat_map(|(s, (_, _, g))| (0..g.len()).map(move |e| (s, e)))
        .collect();
    let n_inputs = inputs.len();

    let chunks = work.len().div_ceil(CHUNK);
    let errs: Vec<Vec<f64>> = exec.try_map(chunks, |c| -> Result<Vec<f64>> {
        let mut xs = inputs.clone();
        let mut ps = params.clone();
        let mut out = Vec::with_capacity(CHUNK);
        for &(slot, entry) in &work[c * CHUNK..((c + 1) * CHUNK).min(work.len())] {
            let target = if slot < n_inputs { &mut xs[slot] } else { &mut ps[slot - n_inputs] };
            let orig = target.data()[entry];
            target.data_mut()[entry] = orig + eps;
            let plus = layer.forward(&xs, &ps)?.sum();
            let target = if slot < n_inputs { &mut xs[slot] } else { &mut ps[slot - n_inputs] };
            target.data_mut()[entry] = orig - eps;
            let minus = layer.forward(&xs, &ps)?.sum();
            let target = if slot < n_inputs { &mut xs[slot] } else { &mut ps[slot - n_inputs] };
            target.data_mut()[entry] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("{} perturbing {}[{entry}]", layer.name(), slots[slot].0)));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            out.push(relative_error(slots[slot].2.data()[entry], numeric));
        }
        Ok(out)
    })?;

    let mut per_slot = vec![0.0f64; slots.len()];
    for (&(slot, _), err) in work.iter().zip(errs.into_iter().flatten()) {
        per_slot[slot] = per_slot[slot].max(err);
    }
    let name = layer.name();
    let tensors: Vec<TensorCheck> = slots
        .iter()
        .zip(per_slot)
        .map(|((tensor, role, g), max_rel_err)| TensorCheck {
            layer: name.clone(),
            tensor: (*tensor).clone(),
            role: *role,
            entries: g.len(),
            max_rel_err,
            pass: max_rel_err <= tol,
        })
        .collect();
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradReport {
        layer: name,
        eps,
        tol,
        max_rel_err,
        pass: tensors.iter().all(|t| t.pass),
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matmul, softmax_rows, softmax_rows_backward};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// `y = x W`, optionally with a deliberately wrong weight gradient.
    struct Linear {
        grad_scale: f64,
    }

    impl GradCheckLayer for Linear {
        fn name(&self) -> String {
            "linear".into()
        }

        fn analytic(&self, seed: u64) -> Result<LayerIO<f64>> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[3, 4], &mut rng);
            let w = random(&[4, 2], &mut rng);
            let output = matmul(&x, &w)?;
            let ones = Tensor::ones(output.shape());
            let dx = crate::tensor::matmul_nt(&ones, &w)?;
            let dw = crate::tensor::matmul_tn(&x, &ones)?.scale(self.grad_scale);
            Ok(LayerIO {
                inputs: vec![("x".into(), x)],
                params: vec![("w".into(), w)],
                output,
                input_grads: vec![dx],
                param_grads: vec![dw],
            })
        }

        fn forward(&self, inputs: &[Tensor<f64>], params: &[Tensor<f64>]) -> Result<Tensor<f64>> {
            matmul(&inputs[0], &params[0])
        }
    }

    /// Softmax followed by a fixed weighting so the sum is not constant.
    struct Softmax;

    impl GradCheckLayer for Softmax {
        fn name(&self) -> String {
            "softmax".into()
        }

        fn analytic(&self, seed: u64) -> Result<LayerIO<f64>> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[3, 5], &mut rng);
            let weights = Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.37).sin());
            let y = softmax_rows(&x)?;
            let output = y.hadamard(&weights)?;
            let dx = softmax_rows_backward(&y, &weights)?;
            Ok(LayerIO {
                inputs: vec![("x".into(), x)],
                params: vec![],
                output,
                input_grads: vec![dx],
                param_grads: vec![],
            })
        }

        fn forward(&self, inputs: &[Tensor<f64>], _params: &[Tensor<f64>]) -> Result<Tensor<f64>> {
            let weights = Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.37).sin());
            softmax_rows(&inputs[0])?.hadamard(&weights)
        }
    }

    #[test]
    fn linear_layer_passes_tightly() {
        let r = finite_diff_check(&Linear { grad_scale: 1.0 }, 1e-5, 1e-6, 1).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.tensors.len(), 2);
    }

    #[test]
    fn softmax_passes() {
        let r = finite_diff_check(&Softmax, 1e-5, 1e-4, 2).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn wrong_gradient_fails() {
        let r = finite_diff_check(&Linear { grad_scale: 2.0 }, 1e-5, 1e-4, 1).unwrap();
        assert!(!r.pass);
        let w = r.tensors.iter().find(|t| t.tensor == "w").unwrap();
        assert!(!w.pass && (w.max_rel_err - 0.5).abs() < 1e-6);
        assert!(r.tensors.iter().find(|t| t.tensor == "x").unwrap().pass);
    }

    #[test]
    fn parallel_matches_sequential() {
        let a = finite_diff_check(&Softmax, 1e-5, 1e-4, 9).unwrap();
        let b = finite_diff_check_with(&Exec::with_threads(3), &Softmax, 1e-5, 1e-4, 9).unwrap();
        assert_eq!(a.max_rel_err, b.max_rel_err);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(0.0, 1e-9) - 0.1).abs() < 1e-12);
    }
}
