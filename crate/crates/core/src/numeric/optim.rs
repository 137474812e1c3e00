use super::param::ParamStore;
use crate::error::{Error, Result};

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter and clears the gradients.
    /// Fails without touching anything if a parameter has no gradient.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some((_, p)) = params.iter().find(|(_, p)| p.tensor().grad().is_none()) {
            return Err(Error::contract(format!(
                "parameter `{}` has no gradient; run backward before stepping",
                p.name()
            )));
        }
        if self.m.len() != params.len() {
            self.m = params.iter().map(|(_, p)| vec![0.0; p.tensor().len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let t = p.tensor_mut();
            let g = t.grad().expect("checked above").to_vec();
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w = *w * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            t.set_grad(None);
        }
        Ok(())
    }
}
