//! First-order optimizers with serializable state.

use dfq_autograd::Tensor;

use crate::params::ParamStore;

/// Momentum SGD with optional Nesterov correction and L2 weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub nesterov: bool,
    pub buffers: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ParamStore, lr: f32, momentum: f32, weight_decay: f32, nesterov: bool) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            nesterov,
            buffers: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        for ((p, g), buf) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.buffers) {
            let (p, g, buf) = (p.data_mut(), g.data(), buf.data_mut());
            for i in 0..p.len() {
                let d = g[i] + self.weight_decay * p[i];
                buf[i] = self.momentum * buf[i] + d;
                let update = if self.nesterov { d + self.momentum * buf[i] } else { buf[i] };
                p[i] -= self.lr * update;
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub steps: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f32, beta1: f32, beta2: f32) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            steps: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        let step_size = self.lr / bc1;
        let iter = params.tensors_mut().iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v));
        for ((p, g), (m, v)) in iter {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let denom = (v[i] / bc2).sqrt() + self.eps;
                p[i] -= step_size * m[i] / denom;
            }
        }
    }
}
