//! SGD with momentum.

use std::collections::BTreeMap;

use indexmap::IndexMap;

use crate::autodiff::Gradients;
use crate::fusion::FusedNetwork;
use crate::nn::NetworkGraph;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::TrainError;

/// Anything whose parameters can be looked up by the names gradients use.
pub trait ParamTable<T: Scalar = f32> {
    fn param_slot(&mut self, name: &str) -> Option<&mut Tensor<T>>;
}

impl<T: Scalar> ParamTable<T> for NetworkGraph<T> {
    fn param_slot(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.param_mut(name)
    }
}

impl<T: Scalar> ParamTable<T> for FusedNetwork<T> {
    fn param_slot(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.param_mut(name)
    }
}

impl<T: Scalar> ParamTable<T> for IndexMap<String, Tensor<T>> {
    fn param_slot(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.get_mut(name)
    }
}

impl<T: Scalar> ParamTable<T> for BTreeMap<String, Tensor<T>> {
    fn param_slot(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.get_mut(name)
    }
}

/// Per-parameter momentum buffers; missing entries start at zero.
pub type Velocity<T = f32> = BTreeMap<String, Tensor<T>>;

/// One update for every parameter that has a gradient:
/// `v ← momentum·v + g`, then `p ← p − lr·v`.
///
/// Everything is checked before anything is written, so a rejected step
/// leaves both the parameters and the velocity untouched.
pub fn sgd_momentum_step<T: Scalar, P: ParamTable<T> + ?Sized>(
    params: &mut P,
    grads: &Gradients<T>,
    velocity: &mut Velocity<T>,
    lr: f64,
    momentum: f64,
) -> Result<(), TrainError> {
    for (name, g) in grads.params() {
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient(name.to_string()));
        }
        let p = params.param_slot(name).ok_or_else(|| TrainError::UnknownParam(name.to_string()))?;
        if p.shape() != g.shape() {
            return Err(TrainError::ShapeMismatch {
                param: name.to_string(),
                param_shape: p.shape().to_vec(),
                other: g.shape().to_vec(),
            });
        }
        if let Some(v) = velocity.get(name) {
            if v.shape() != g.shape() {
                return Err(TrainError::ShapeMismatch {
                    param: name.to_string(),
                    param_shape: p.shape().to_vec(),
                    other: v.shape().to_vec(),
                });
            }
        }
    }
    let (lr, momentum) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum));
    for (name, g) in grads.params() {
        let v = velocity.entry(name.to_string()).or_insert_with(|| Tensor::zeros(g.shape()));
        for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = momentum * *vi + gi;
        }
        let p = params.param_slot(name).expect("checked above");
        for (pi, &vi) in p.data_mut().iter_mut().zip(v.data()) {
            *pi = *pi - lr * vi;
        }
    }
    Ok(())
}
