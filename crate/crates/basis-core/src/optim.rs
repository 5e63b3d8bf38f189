//! SGD with classical (Polyak) momentum: `v <- beta*v + g`, `p <- p - lr*v`.
//! The gradient is not pre-scaled by `(1 - beta)`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{GradMap, LmModel};

#[derive(Debug, Clone)]
pub struct MomentumSgd {
    pub lr: f64,
    pub beta: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl MomentumSgd {
    pub fn new(lr: f64, beta: f64) -> Result<Self> {
        if !lr.is_finite() || lr <= 0.0 {
            return Err(Error::InvalidArgument {
                op: "momentum_sgd",
                reason: format!("learning rate must be positive, got {lr}"),
            });
        }
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::InvalidArgument {
                op: "momentum_sgd",
                reason: format!("momentum must be in [0, 1), got {beta}"),
            });
        }
        Ok(MomentumSgd { lr, beta, velocity: BTreeMap::new() })
    }

    /// One update over named parameter slices. Every tensor must have a
    /// matching finite gradient; a non-finite gradient aborts with the
    /// tensor's name before any parameter is touched.
    pub fn step_params(
        &mut self,
        params: &mut [(String, &mut [f64])],
        grads: &GradMap,
    ) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads.get(name).ok_or_else(|| Error::InvalidArgument {
                op: "momentum_sgd",
                reason: format!("missing gradient for tensor '{name}'"),
            })?;
            if g.len() != p.len() {
                return Err(Error::InvalidArgument {
                    op: "momentum_sgd",
                    reason: format!(
                        "gradient length {} does not match parameter '{name}' length {}",
                        g.len(),
                        p.len()
                    ),
                });
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient { tensor: name.clone() });
            }
        }
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("validated above");
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            for ((vi, pi), gi) in v.iter_mut().zip(p.iter_mut()).zip(g) {
                *vi = self.beta * *vi + gi;
                *pi -= self.lr * *vi;
            }
        }
        Ok(())
    }

    pub fn step_model(&mut self, model: &mut LmModel, grads: &GradMap) -> Result<()> {
        self.step_params(&mut model.named_params_mut(), grads)
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }
}
