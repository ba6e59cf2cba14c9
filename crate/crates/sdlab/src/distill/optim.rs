//! First-order optimizers for particle parameters. Gradients arrive through
//! the "descent slot": the update is always `theta <- theta - lr * step`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerSpec {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerSpec {
    pub fn adam(lr: f64) -> Self {
        Self::Adam { lr, beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Self::Sgd { lr } | Self::Adam { lr, .. } => *lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Sgd { lr } if lr > 0.0 && lr.is_finite() => Ok(()),
            Self::Adam { lr, beta1, beta2, eps }
                if lr > 0.0
                    && lr.is_finite()
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0 =>
            {
                Ok(())
            }
            _ => Err(Error::Config(format!("invalid optimizer parameters: {self:?}"))),
        }
    }

    pub fn init(&self, dim: usize) -> OptimState {
        OptimState { m: Vector::zeros(dim), v: Vector::zeros(dim), t: 0 }
    }
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self::adam(0.01)
    }
}

/// Per-particle optimizer state (first/second moment accumulators).
#[derive(Debug, Clone)]
pub struct OptimState {
    m: Vector,
    v: Vector,
    t: usize,
}

impl OptimState {
    /// Apply one descent step in place.
    pub fn step(&mut self, spec: &OptimizerSpec, theta: &mut Vector, grad: &Vector) {
        match *spec {
            OptimizerSpec::Sgd { lr } => {
                *theta -= grad * lr;
            }
            OptimizerSpec::Adam { lr, beta1, beta2, eps } => {
                self.t += 1;
                self.m = &self.m * beta1 + grad * (1.0 - beta1);
                self.v = &self.v * beta2 + grad.component_mul(grad) * (1.0 - beta2);
                let bias1 = 1.0 - beta1.powi(self.t as i32);
                let bias2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..theta.len() {
                    let m_hat = self.m[i] / bias1;
                    let v_hat = self.v[i] / bias2;
                    theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}
