//! Gradient-descent optimizers over a whole [`ParamStore`].

use thiserror::Error;

use super::{ParamStore, Tensor};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("gradient for parameter {index} has shape {got:?}, expected {expected:?}")]
pub struct ShapeMismatch {
    pub index: usize,
    pub expected: (usize, usize),
    pub got: (usize, usize),
}

pub trait Optimizer {
    /// Applies one update; `grads` is indexed like the store's parameters.
    fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<(), ShapeMismatch>;
}

fn check_shapes(store: &ParamStore, grads: &[Tensor]) -> Result<(), ShapeMismatch> {
    if grads.len() != store.len() {
        return Err(ShapeMismatch {
            index: grads.len().min(store.len()),
            expected: (store.len(), 0),
            got: (grads.len(), 0),
        });
    }
    for (id, g) in store.ids().zip(grads) {
        let expected = store.get(id).shape();
        if g.shape() != expected {
            return Err(ShapeMismatch {
                index: id.0,
                expected,
                got: g.shape(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<(), ShapeMismatch> {
        check_shapes(store, grads)?;
        let ids: Vec<_> = store.ids().collect();
        for (id, g) in ids.into_iter().zip(grads) {
            for (p, d) in store.get_mut(id).data.iter_mut().zip(&g.data) {
                *p -= self.lr * d;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<(), ShapeMismatch> {
        check_shapes(store, grads)?;
        if self.m.is_empty() {
            self.m = store.zeros_like();
            self.v = store.zeros_like();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = &grads[k].data;
            let (m, v) = (&mut self.m[k].data, &mut self.v[k].data);
            let p = &mut store.get_mut(id).data;
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
