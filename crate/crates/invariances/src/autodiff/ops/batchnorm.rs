//! Batch normalization over `[n, c, h, w]`, normalizing per channel.
//!
//! Train mode normalizes with the current minibatch's statistics (biased
//! variance, divide by M = n*h*w) and hands those statistics back to the
//! caller, which owns any running-average update. Eval mode normalizes with
//! caller-supplied fixed statistics and is differentiable w.r.t. its input,
//! so optimization *through* a frozen network works.
//!
//! Channel sums are accumulated in f64 regardless of the element type, so
//! the f32 and f64 code paths differ only by the final cast.

use crate::autodiff::scalar::Scalar;
use crate::autodiff::tape::{NodeId, Op, Tape};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Per-channel statistics of one minibatch (biased variance).
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn check_bn_shapes<T: Scalar>(
    op: &'static str,
    tape: &Tape<T>,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
) -> Result<(usize, usize, usize, usize)> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 4 {
        return Err(Error::invalid(op, format!("input must be rank 4, got {xs:?}")));
    }
    let c = xs[1];
    for (name, id) in [("gamma", gamma), ("beta", beta)] {
        if tape.shape(id) != [c] {
            return Err(Error::ShapeMismatch {
                op,
                lhs: tape.shape(id).to_vec(),
                rhs: vec![c],
            });
        }
        let _ = name;
    }
    Ok((xs[0], c, xs[2], xs[3]))
}

/// Per-channel mean and biased variance, accumulated in f64.
fn channel_stats<T: Scalar>(data: &[T], n: usize, c: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * plane) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            let mut s = 0.0;
            for &v in &data[base..base + plane] {
                s += v.as_f64();
            }
            mean[ch] += s;
        }
    }
    for v in &mut mean {
        *v /= m;
    }
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            let mu = mean[ch];
            let mut s = 0.0;
            for &v in &data[base..base + plane] {
                let d = v.as_f64() - mu;
                s += d * d;
            }
            var[ch] += s;
        }
    }
    for v in &mut var {
        *v /= m;
    }
    (mean, var)
}

fn normalize<T: Scalar>(
    data: &[T],
    n: usize,
    c: usize,
    plane: usize,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[T],
    beta: &[T],
) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            let mu = T::from_f64(mean[ch]);
            let is = T::from_f64(inv_std[ch]);
            let g = gamma[ch];
            let b = beta[ch];
            for k in 0..plane {
                out[base + k] = (data[base + k] - mu) * is * g + b;
            }
        }
    }
    out
}

/// Shared backward for train and eval mode; `batch_stats` toggles the
/// through-the-statistics terms.
struct BatchNormOp {
    n: usize,
    c: usize,
    plane: usize,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

impl<T: Scalar> Op<T> for BatchNormOp {
    fn name(&self) -> &'static str {
        if self.batch_stats {
            "batchnorm_train"
        } else {
            "batchnorm_eval"
        }
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        _output: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (n, c, plane) = (self.n, self.c, self.plane);
        let m = (n * plane) as f64;
        let x = inputs[0].data();
        let gamma = inputs[1].data();
        let g = grad.data();

        // Per-channel reductions: sum(g) and sum(g * x_hat).
        let mut sum_g = vec![0.0f64; c];
        let mut sum_gx = vec![0.0f64; c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                let mu = self.mean[ch];
                let is = self.inv_std[ch];
                let (mut sg, mut sgx) = (0.0, 0.0);
                for k in 0..plane {
                    let gv = g[base + k].as_f64();
                    let xh = (x[base + k].as_f64() - mu) * is;
                    sg += gv;
                    sgx += gv * xh;
                }
                sum_g[ch] += sg;
                sum_gx[ch] += sgx;
            }
        }

        let dx = if needs[0] {
            let mut dx = vec![T::zero(); x.len()];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * plane;
                    let mu = self.mean[ch];
                    let is = self.inv_std[ch];
                    let ga = gamma[ch].as_f64();
                    let mg = sum_g[ch] / m;
                    let mgx = sum_gx[ch] / m;
                    for k in 0..plane {
                        let gv = g[base + k].as_f64();
                        let v = if self.batch_stats {
                            let xh = (x[base + k].as_f64() - mu) * is;
                            ga * is * (gv - mg - xh * mgx)
                        } else {
                            ga * is * gv
                        };
                        dx[base + k] = T::from_f64(v);
                    }
                }
            }
            Some(Tensor::new(inputs[0].shape().to_vec(), dx)?)
        } else {
            None
        };

        let dgamma = if needs[1] {
            Some(Tensor::new(
                vec![c],
                sum_gx.iter().map(|&v| T::from_f64(v)).collect(),
            )?)
        } else {
            None
        };
        let dbeta = if needs[2] {
            Some(Tensor::new(
                vec![c],
                sum_g.iter().map(|&v| T::from_f64(v)).collect(),
            )?)
        } else {
            None
        };
        Ok(vec![dx, dgamma, dbeta])
    }
}

impl<T: Scalar> Tape<T> {
    /// Train-mode batch norm: normalize with this minibatch's per-channel
    /// mean and biased variance. Returns the output node and the statistics
    /// (detached); updating any running averages is the caller's business.
    /// Fails if the batch carries fewer than two values per channel.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BatchStats<T>)> {
        let (n, c, h, w) = check_bn_shapes("batchnorm_train", self, x, gamma, beta)?;
        let plane = h * w;
        if n * plane < 2 {
            return Err(Error::invalid(
                "batchnorm_train",
                format!("needs at least 2 values per channel, got {}", n * plane),
            ));
        }
        let (mean, var) = channel_stats(self.value(x).data(), n, c, plane);
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let out = normalize(
            self.value(x).data(),
            n,
            c,
            plane,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let stats = BatchStats {
            mean: mean.iter().map(|&v| T::from_f64(v)).collect(),
            var: var.iter().map(|&v| T::from_f64(v)).collect(),
        };
        let id = self.push_op(
            value,
            vec![x, gamma, beta],
            Box::new(BatchNormOp {
                n,
                c,
                plane,
                mean,
                inv_std,
                batch_stats: true,
            }),
        );
        Ok((id, stats))
    }

    /// Eval-mode batch norm: normalize with fixed statistics. The statistics
    /// are constants; gradients flow to `x`, `gamma` and `beta` only.
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<NodeId> {
        let (n, c, h, w) = check_bn_shapes("batchnorm_eval", self, x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::invalid(
                "batchnorm_eval",
                format!("stats length {}/{} != channels {c}", mean.len(), var.len()),
            ));
        }
        let plane = h * w;
        let mean: Vec<f64> = mean.iter().map(|v| v.as_f64()).collect();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v.as_f64() + eps).sqrt()).collect();
        let out = normalize(
            self.value(x).data(),
            n,
            c,
            plane,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push_op(
            value,
            vec![x, gamma, beta],
            Box::new(BatchNormOp {
                n,
                c,
                plane,
                mean,
                inv_std,
                batch_stats: false,
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::tape::{Param, Tape};
    use crate::autodiff::tensor::Tensor;

    #[test]
    fn train_mode_output_is_standardized() {
        // one channel, M = 4 values: mean 2.5, biased var 1.25
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let gamma = tape.constant(Tensor::full(vec![1], 1.0));
        let beta = tape.constant(Tensor::zeros(vec![1]));
        let (y, stats) = tape.batchnorm_train(x, gamma, beta, 0.0).unwrap();
        assert_eq!(stats.mean, vec![2.5]);
        assert_eq!(stats.var, vec![1.25]);
        let out = tape.value(y).data();
        let s = 1.25f64.sqrt();
        for (o, e) in out.iter().zip([-1.5 / s, -0.5 / s, 0.5 / s, 1.5 / s]) {
            assert!((o - e).abs() < 1e-12);
        }
        // standardized: mean 0, variance 1
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn train_mode_rejects_single_value_batches() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 1, 1]));
        let gamma = tape.constant(Tensor::full(vec![3], 1.0));
        let beta = tape.constant(Tensor::zeros(vec![3]));
        assert!(tape.batchnorm_train(x, gamma, beta, 1e-5).is_err());
    }

    #[test]
    fn eval_mode_applies_fixed_stats() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 1, 2], vec![3.0, 7.0]).unwrap());
        let gamma = tape.constant(Tensor::full(vec![1], 2.0));
        let beta = tape.constant(Tensor::full(vec![1], 1.0));
        let y = tape.batchnorm_eval(x, gamma, beta, &[5.0], &[4.0], 0.0).unwrap();
        // (x - 5) / 2 * 2 + 1
        assert_eq!(tape.value(y).data(), &[-1.0, 3.0]);
    }

    #[test]
    fn eval_mode_passes_gradient_through_fixed_stats() {
        let p = Param::new("x", Tensor::<f64>::new(vec![1, 1, 1, 2], vec![3.0, 7.0]).unwrap());
        let mut tape = Tape::new();
        let x = tape.param(&p);
        let gamma = tape.constant(Tensor::full(vec![1], 2.0));
        let beta = tape.constant(Tensor::zeros(vec![1]));
        let y = tape.batchnorm_eval(x, gamma, beta, &[5.0], &[4.0], 0.0).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        // dy/dx = gamma / sqrt(var) = 1.0 per element
        assert_eq!(p.grad().unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn train_mode_gradient_sums_to_zero_per_channel() {
        // through-the-stats backward: sum of dx over a channel must vanish
        let p = Param::new(
            "x",
            Tensor::<f64>::new(vec![2, 1, 1, 3], vec![0.3, -1.2, 2.0, 0.1, 0.0, 1.4]).unwrap(),
        );
        let mut tape = Tape::new();
        let x = tape.param(&p);
        let gamma = tape.constant(Tensor::full(vec![1], 1.3));
        let beta = tape.constant(Tensor::full(vec![1], -0.4));
        let (y, _) = tape.batchnorm_train(x, gamma, beta, 1e-5).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let dx = p.grad().unwrap();
        let total: f64 = dx.data().iter().sum();
        assert!(total.abs() < 1e-10, "{total}");
    }
}
