//! RMSProp with a plateau learning-rate schedule.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Optimizer state: one squared-gradient moving average per parameter
/// element plus the schedule bookkeeping. Update math runs in f64 and the
/// accumulator is stored wide, so the parameter trajectory is reproducible
/// bit for bit.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub rho: f64,
    pub eps: f64,
    /// Multiplied into the learning rate on plateau (0.7 = decay by 30%).
    pub decay_factor: f64,
    /// Consecutive non-improving epochs tolerated before decaying.
    pub plateau_patience: usize,
    accum: Vec<Vec<f64>>,
    best_val: Option<f64>,
    stale_epochs: usize,
}

impl OptimizerState {
    pub fn new(learning_rate: f64) -> Self {
        OptimizerState {
            learning_rate,
            rho: 0.9,
            eps: 1e-8,
            decay_factor: 0.7,
            plateau_patience: 3,
            accum: Vec::new(),
            best_val: None,
            stale_epochs: 0,
        }
    }

    /// One RMSProp update:
    ///   a <- rho * a + (1 - rho) * g^2
    ///   p <- p - lr * g / (sqrt(a) + eps)
    ///
    /// `grads` lines up with `params` (one gradient vector per parameter
    /// tensor, already averaged over the batch).
    pub fn rmsprop_step<S: Scalar>(
        &mut self,
        params: &mut [&mut Tensor<S>],
        grads: &[Vec<S>],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension {
                op: "rmsprop_step",
                axis: "gradient list length",
                expected: params.len(),
                got: grads.len(),
            });
        }
        if self.accum.is_empty() {
            self.accum = params.iter().map(|p| vec![0.0f64; p.len()]).collect();
        }
        if self.accum.len() != params.len() {
            return Err(Error::Dimension {
                op: "rmsprop_step",
                axis: "optimizer accumulator count",
                expected: self.accum.len(),
                got: params.len(),
            });
        }
        for ((param, grad), acc) in params.iter_mut().zip(grads).zip(&mut self.accum) {
            if param.len() != grad.len() || param.len() != acc.len() {
                return Err(Error::Dimension {
                    op: "rmsprop_step",
                    axis: "parameter element count",
                    expected: param.len(),
                    got: grad.len(),
                });
            }
            for ((p, &g), a) in param.data_mut().iter_mut().zip(grad).zip(acc.iter_mut()) {
                let g = g.as_f64();
                *a = self.rho * *a + (1.0 - self.rho) * g * g;
                let step = self.learning_rate * g / (a.sqrt() + self.eps);
                *p = S::from_f64(p.as_f64() - step);
            }
        }
        Ok(())
    }

    /// Record an epoch's validation loss; decays the learning rate by
    /// `decay_factor` once the loss has failed to improve for
    /// `plateau_patience` consecutive epochs. Returns true when a decay
    /// fired.
    pub fn end_epoch(&mut self, val_loss: f64) -> bool {
        let improved = match self.best_val {
            None => true,
            Some(best) => val_loss < best,
        };
        if improved {
            self.best_val = Some(val_loss);
            self.stale_epochs = 0;
            return false;
        }
        self.stale_epochs += 1;
        if self.stale_epochs >= self.plateau_patience {
            self.learning_rate *= self.decay_factor;
            self.stale_epochs = 0;
            return true;
        }
        false
    }
}
