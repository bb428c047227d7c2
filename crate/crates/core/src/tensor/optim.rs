//! Named parameters and the Adam optimizer.

use super::Tensor;
use crate::config::quantize;
use crate::error::{Error, Result};

/// A trainable tensor with a unique dotted-path name
/// (e.g. `layer.3.attn.q.w`).
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Parameter {
            name: name.into(),
            tensor,
        }
    }
}

/// Adam with bias correction. State vectors are kept in registration order,
/// so updates are deterministic for a fixed parameter list.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Parameter]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// One update over all parameters. Parameters without an accumulated
    /// gradient are treated as having zero gradient. Gradients are consumed
    /// (zeroed) by the step.
    pub fn step(&mut self, params: &[Parameter]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer built for {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, p) in params.iter().enumerate() {
            let grad = p.tensor.grad();
            let g = match &grad {
                Some(g) => g.as_slice(),
                None => continue,
            };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter '{}'",
                    p.name
                )));
            }
            let mut data = p.tensor.to_vec();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] = quantize(data[i] - self.lr * mhat / (vhat.sqrt() + self.eps));
            }
            p.tensor.set_data(data);
            p.tensor.zero_grad();
        }
        Ok(())
    }
}

/// Clears accumulated gradients on every parameter.
pub fn zero_grads(params: &[Parameter]) {
    for p in params {
        p.tensor.zero_grad();
    }
}
