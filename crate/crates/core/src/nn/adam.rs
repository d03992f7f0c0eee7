use serde::{Deserialize, Serialize};

use super::model::ModelParams;
use super::real::Real;
use super::tensor::Tensor;
use super::NnError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F = f32> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub step: u64,
    pub hyper: AdamHyper,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
        }
    }
}

impl<F: Real> AdamState<F> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor<F>> = shapes.into_iter().map(Tensor::zeros).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
            hyper: AdamHyper::default(),
        }
    }

    pub fn for_params(p: &ModelParams<F>) -> Self {
        Self::new(p.tensors().iter().map(Tensor::shape))
    }

    /// One bias-corrected Adam update. Nothing is modified when any
    /// gradient is non-finite.
    pub fn update(&mut self, params: &mut [Tensor<F>], grads: &[Tensor<F>], names: &[String], lr: f64) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(NnError::Shape(format!(
                "adam: {} parameter tensors, {} gradients, {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("tensor{i}"));
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(NnError::Shape(format!("adam: {name} shape mismatch")));
            }
            if !g.is_finite() {
                return Err(NnError::NonFiniteGradient { layer: name });
            }
        }
        self.step += 1;
        let h = self.hyper;
        let t = self.step as i32;
        let bc1 = F::of(1.0 - h.beta1.powi(t));
        let bc2 = F::of(1.0 - h.beta2.powi(t));
        let (b1, b2) = (F::of(h.beta1), F::of(h.beta2));
        let (c1, c2) = (F::of(1.0 - h.beta1), F::of(1.0 - h.beta2));
        let (lr, eps) = (F::of(lr), F::of(h.eps));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = b1 * *mj + c1 * gj;
                *vj = b2 * *vj + c2 * gj * gj;
                let mh = *mj / bc1;
                let vh = *vj / bc2;
                *pj -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn adam_step<F: Real>(params: &mut ModelParams<F>, grads: &ModelParams<F>, state: &mut AdamState<F>, lr: f64) -> Result<(), NnError> {
    let names = params.names().to_vec();
    state.update(params.tensors_mut(), grads.tensors(), &names, lr)
}
