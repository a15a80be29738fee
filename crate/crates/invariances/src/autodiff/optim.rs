//! RMSprop with the accumulator outside the square root's argument only for
//! the gradient, i.e. the classic form:
//!
//! ```text
//! acc   <- rho * acc + (1 - rho) * grad^2
//! param <- param - lr * grad / (sqrt(acc) + eps)
//! ```

use crate::autodiff::scalar::Scalar;
use crate::autodiff::tape::Param;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Hyperparameters for [`RmsProp`].
#[derive(Debug, Clone, Copy)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            lr: 1e-3,
            rho: 0.9,
            eps: 1e-8,
        }
    }
}

/// RMSprop over a fixed parameter list. Each parameter carries its own
/// squared-gradient accumulator, initialized to zero; the optimizer never
/// zeroes gradients itself (see [`RmsProp::zero_grads`]).
pub struct RmsProp<T: Scalar> {
    cfg: RmsPropConfig,
    slots: Vec<(Param<T>, Tensor<T>)>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(params: Vec<Param<T>>, cfg: RmsPropConfig) -> Self {
        let slots = params
            .into_iter()
            .map(|p| {
                let acc = Tensor::zeros(p.shape());
                (p, acc)
            })
            .collect();
        RmsProp { cfg, slots }
    }

    pub fn config(&self) -> RmsPropConfig {
        self.cfg
    }

    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        self.slots.iter().map(|(p, _)| p)
    }

    /// Apply one update from the currently accumulated gradients. Every
    /// managed parameter must have a gradient; a missing one means the
    /// caller's forward pass silently skipped a parameter, which is a bug
    /// worth failing loudly on.
    pub fn step(&mut self) -> Result<()> {
        let lr = T::from_f64(self.cfg.lr);
        let rho = T::from_f64(self.cfg.rho);
        let one_minus_rho = T::from_f64(1.0 - self.cfg.rho);
        let eps = T::from_f64(self.cfg.eps);
        for (index, (param, acc)) in self.slots.iter_mut().enumerate() {
            let updated = param.update(|value, grad| -> Result<()> {
                let Some(grad) = grad else {
                    return Err(Error::MissingGradient {
                        index,
                        name: String::new(),
                    });
                };
                let acc_data = acc.data_mut();
                for ((v, &g), a) in value
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(acc_data.iter_mut())
                {
                    *a = rho * *a + one_minus_rho * g * g;
                    *v = *v - lr * g / (a.sqrt() + eps);
                }
                Ok(())
            });
            if let Err(Error::MissingGradient { index, .. }) = updated {
                return Err(Error::MissingGradient {
                    index,
                    name: param.name(),
                });
            }
            updated?;
        }
        Ok(())
    }

    /// Zero the gradients of all managed parameters.
    pub fn zero_grads(&self) {
        for (p, _) in &self.slots {
            p.zero_grad();
        }
    }
}
