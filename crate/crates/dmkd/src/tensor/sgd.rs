//! SGD with classical momentum over a fixed parameter list.

use crate::error::{DmkdError, Result};
use super::Tensor;

/// Velocity-carrying SGD. The parameter list must be the same (same tensors,
/// same order) on every call; velocity buffers are keyed by position.
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Sgd {
        Sgd { lr, momentum, velocity: Vec::new() }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// One update: v ← momentum·v + grad, p ← p − lr·v, then grads are
    /// cleared. Validates every parameter before touching any, so a missing
    /// gradient leaves all parameters unmodified.
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        assert_eq!(self.velocity.len(), params.len(), "parameter list changed between steps");

        let mut grads = Vec::with_capacity(params.len());
        for (index, p) in params.iter().enumerate() {
            match p.grad() {
                Some(g) => grads.push(g),
                None => {
                    return Err(DmkdError::MissingGrad {
                        index,
                        name: format!("shape {:?}", p.shape()),
                    })
                }
            }
        }

        for ((p, v), g) in params.iter().zip(&mut self.velocity).zip(&grads) {
            assert_eq!(v.len(), g.len(), "parameter shape changed between steps");
            let mut data = p.to_vec();
            for i in 0..v.len() {
                v[i] = self.momentum * v[i] + g[i];
                data[i] -= self.lr * v[i];
            }
            p.overwrite_data(&data);
            p.zero_grad();
        }
        Ok(())
    }
}
