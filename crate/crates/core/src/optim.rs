//! First-order optimizers over flat lists of parameter tensors.

use crate::autodiff::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

fn zeros_like(params: &[&mut Tensor]) -> Vec<Vec<f64>> {
    params.iter().map(|p| vec![0.0; p.len()]).collect()
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, mut params: Vec<&mut Tensor>, grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = zeros_like(&params);
            self.v = zeros_like(&params);
        }
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((w, g), (mi, vi)) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = BETA1 * *mi + (1.0 - BETA1) * g;
                *vi = BETA2 * *vi + (1.0 - BETA2) * g * g;
                *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + EPS);
            }
        }
    }
}

/// Adamax: Adam with the infinity norm in place of the second moment.
#[derive(Clone, Debug)]
pub struct Adamax {
    pub lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
}

impl Adamax {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            step: 0,
            m: Vec::new(),
            u: Vec::new(),
        }
    }

    pub fn step(&mut self, mut params: Vec<&mut Tensor>, grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = zeros_like(&params);
            self.u = zeros_like(&params);
        }
        self.step += 1;
        let lr = self.lr / (1.0 - BETA1.powi(self.step as i32));
        for (i, p) in params.iter_mut().enumerate() {
            let (m, u) = (&mut self.m[i], &mut self.u[i]);
            for ((w, g), (mi, ui)) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m.iter_mut().zip(u.iter_mut())) {
                *mi = BETA1 * *mi + (1.0 - BETA1) * g;
                *ui = (BETA2 * *ui).max(g.abs());
                *w -= lr * *mi / (*ui + EPS);
            }
        }
    }
}
