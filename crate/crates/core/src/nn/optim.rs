use crate::config::OptimizerKind;
use crate::tensor::{Real, Tensor};

use super::ParamStore;

/// First-order update rule for one parameter store.
#[derive(Clone, Debug)]
pub enum Optimizer<T = f32> {
    /// `θ ← θ − γ·∇θ`.
    Sgd { lr: f64 },
    Adam(Adam<T>),
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamStore<T>) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam(Adam {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                step: 0,
                m: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
                v: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            }),
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Sgd { lr } => *lr,
            Optimizer::Adam(a) => a.lr,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>) {
        match self {
            Optimizer::Sgd { lr } => {
                if *lr == 0.0 {
                    return;
                }
                let lr = T::lit(*lr);
                for (p, g) in params.tensors_mut().iter_mut().zip(grads.tensors()) {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
            Optimizer::Adam(a) => {
                if a.lr == 0.0 {
                    return;
                }
                a.step += 1;
                let b1 = T::lit(a.beta1);
                let b2 = T::lit(a.beta2);
                let c1 = 1.0 - a.beta1.powi(a.step as i32);
                let c2 = 1.0 - a.beta2.powi(a.step as i32);
                let step = T::lit(a.lr / c1);
                let c2 = T::lit(c2);
                let eps = T::lit(a.eps);
                for (((p, g), m), v) in params
                    .tensors_mut()
                    .iter_mut()
                    .zip(grads.tensors())
                    .zip(a.m.iter_mut())
                    .zip(a.v.iter_mut())
                {
                    for (((w, &d), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mi = b1 * *mi + (T::one() - b1) * d;
                        *vi = b2 * *vi + (T::one() - b2) * d * d;
                        *w -= step * *mi / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}
