//! Sharpness-aware two-step updates over a plain or adaptive base optimizer.

use crate::checkpoint::OptimizerState;
use crate::nn::{Params, Real, Tensor};
use crate::ocrnet::OcrModel;

use super::TrainError;

/// Anything that owns a parameter list.
pub trait HasParams<R: Real> {
    fn params(&self) -> &Params<R>;
    fn params_mut(&mut self) -> &mut Params<R>;
}

impl<R: Real> HasParams<R> for Params<R> {
    fn params(&self) -> &Params<R> {
        self
    }

    fn params_mut(&mut self) -> &mut Params<R> {
        self
    }
}

impl<R: Real> HasParams<R> for OcrModel<R> {
    fn params(&self) -> &Params<R> {
        OcrModel::params(self)
    }

    fn params_mut(&mut self) -> &mut Params<R> {
        OcrModel::params_mut(self)
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Update rule applied to the sharpness-aware gradient.
#[derive(Clone, Debug, PartialEq)]
pub enum BaseOptimizer<R: Real> {
    Sgd,
    Adam { step: u64, first: Vec<Tensor<R>>, second: Vec<Tensor<R>> },
}

impl<R: Real> BaseOptimizer<R> {
    pub fn adam(params: &Params<R>) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self::Adam { step: 0, first: zeros(), second: zeros() }
    }

    /// Moves `params` against `grads` with step size `lr` and decoupled weight
    /// decay `lr · weight_decay · w` on parameters flagged for decay.
    pub fn apply(&mut self, params: &mut Params<R>, grads: &[Tensor<R>], lr: f64, weight_decay: f64) {
        match self {
            Self::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    let wd = if p.decay { weight_decay } else { 0.0 };
                    for (w, &gi) in p.value.data_mut().iter_mut().zip(g.data()) {
                        let wv = w.as_f64();
                        *w = R::of(wv - lr * (gi.as_f64() + wd * wv));
                    }
                }
            }
            Self::Adam { step, first, second } => {
                *step += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(*step as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(*step as i32);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(first.iter_mut()).zip(second.iter_mut()) {
                    let wd = if p.decay { weight_decay } else { 0.0 };
                    let w = p.value.data_mut();
                    let (m, v) = (m.data_mut(), v.data_mut());
                    for i in 0..w.len() {
                        let gi = g.data()[i].as_f64();
                        let mi = ADAM_BETA1 * m[i].as_f64() + (1.0 - ADAM_BETA1) * gi;
                        let vi = ADAM_BETA2 * v[i].as_f64() + (1.0 - ADAM_BETA2) * gi * gi;
                        m[i] = R::of(mi);
                        v[i] = R::of(vi);
                        let dir = (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
                        let wv = w[i].as_f64();
                        w[i] = R::of(wv - lr * (dir + wd * wv));
                    }
                }
            }
        }
    }
}

impl BaseOptimizer<f32> {
    pub fn to_state(&self) -> Option<OptimizerState> {
        match self {
            Self::Sgd => None,
            Self::Adam { step, first, second } => Some(OptimizerState { step: *step, first: first.clone(), second: second.clone() }),
        }
    }

    pub fn from_state(state: Option<&OptimizerState>) -> Self {
        match state {
            None => Self::Sgd,
            Some(s) => Self::Adam { step: s.step, first: s.first.clone(), second: s.second.clone() },
        }
    }
}

fn global_norm<R: Real>(grads: &[Tensor<R>]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

fn check_finite<R: Real>(loss: f64, grads: &[Tensor<R>]) -> Result<(), TrainError> {
    if loss.is_finite() && grads.iter().all(|g| g.all_finite()) {
        Ok(())
    } else {
        Err(TrainError::Divergence)
    }
}

/// One sharpness-aware step. `grad` returns the loss and gradient of the
/// objective at the model's current parameters; it is called at the current
/// point and again at `w + rho · g / (‖g‖ + 1e-12)`. The base optimizer then
/// moves the original parameters using the second gradient. Returns the loss
/// before the step. On a non-finite loss or gradient the parameters are left
/// untouched.
pub fn sam_step<R: Real, M: HasParams<R>>(
    model: &mut M,
    mut grad: impl FnMut(&M) -> Result<(f64, Vec<Tensor<R>>), TrainError>,
    lr: f64,
    rho: f64,
    weight_decay: f64,
    base: &mut BaseOptimizer<R>,
) -> Result<f64, TrainError> {
    let (loss, g) = grad(model)?;
    check_finite(loss, &g)?;
    let scale = rho / (global_norm(&g) + 1e-12);
    let original = model.params().clone();
    for (p, gi) in model.params_mut().iter_mut().zip(&g) {
        for (w, &d) in p.value.data_mut().iter_mut().zip(gi.data()) {
            *w = R::of(w.as_f64() + scale * d.as_f64());
        }
    }
    let second = grad(model);
    *model.params_mut() = original;
    let (perturbed_loss, g2) = second?;
    check_finite(perturbed_loss, &g2)?;
    base.apply(model.params_mut(), &g2, lr, weight_decay);
    Ok(loss)
}
