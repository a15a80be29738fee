//! Scalar loss heads: softmax cross-entropy, mean squared error, and the
//! clamped binary cross-entropy pieces of the adversarial game.

use crate::autodiff::scalar::Scalar;
use crate::autodiff::tape::{NodeId, Op, Tape};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Probability clamp for the BCE losses: `log` arguments never leave
/// `[BCE_EPS, 1 - BCE_EPS]`, keeping losses finite and gradients bounded
/// even if a sigmoid saturates to exactly 0 or 1.
pub const BCE_EPS: f64 = 1e-7;

struct SoftmaxCrossEntropyOp {
    /// Row-wise softmax probabilities, saved in forward.
    probs: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl<T: Scalar> Op<T> for SoftmaxCrossEntropyOp {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        _output: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        let n = self.labels.len();
        let k = self.classes;
        let g = grad.item().as_f64() / n as f64;
        let mut dx = vec![T::zero(); n * k];
        for (i, &label) in self.labels.iter().enumerate() {
            for j in 0..k {
                let p = self.probs[i * k + j];
                let delta = if j == label { 1.0 } else { 0.0 };
                dx[i * k + j] = T::from_f64(g * (p - delta));
            }
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), dx)?)])
    }
}

struct MseOp {
    batch: usize,
}

impl<T: Scalar> Op<T> for MseOp {
    fn name(&self) -> &'static str {
        "mse"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        _output: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let scale = T::from_f64(2.0 * grad.item().as_f64() / self.batch as f64);
        let diff = inputs[0].zip(inputs[1], "mse backward", |a, b| a - b)?;
        let da = needs[0].then(|| diff.map(|d| d * scale));
        let db = needs[1].then(|| diff.map(|d| -(d * scale)));
        Ok(vec![da, db])
    }
}

/// `-(1/m) * sum(log p_real + log(1 - p_fake))`, the descended form of the
/// discriminator's objective.
struct BceDiscriminatorOp {
    m: usize,
}

fn clamp01(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

impl<T: Scalar> Op<T> for BceDiscriminatorOp {
    fn name(&self) -> &'static str {
        "bce_discriminator"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        _output: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let g = grad.item().as_f64() / self.m as f64;
        // d/dp [-log p] = -1/p, evaluated at the clamped probability so the
        // gradient stays bounded.
        let d_real = needs[0].then(|| {
            inputs[0].map(|p| T::from_f64(-g / clamp01(p.as_f64())))
        });
        // d/dp [-log(1-p)] = 1/(1-p)
        let d_fake = needs[1].then(|| {
            inputs[1].map(|p| T::from_f64(g / (1.0 - clamp01(p.as_f64()))))
        });
        Ok(vec![d_real, d_fake])
    }
}

/// `(1/m) * sum(log(1 - p_fake))`: the generator's adversarial term,
/// descended directly (minimizing it pushes `p_fake` toward 1).
struct BceGeneratorOp {
    m: usize,
}

impl<T: Scalar> Op<T> for BceGeneratorOp {
    fn name(&self) -> &'static str {
        "bce_generator"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        _output: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let g = grad.item().as_f64() / self.m as f64;
        // d/dp [log(1-p)] = -1/(1-p)
        let d_fake = needs[0].then(|| {
            inputs[0].map(|p| T::from_f64(-g / (1.0 - clamp01(p.as_f64()))))
        });
        Ok(vec![d_fake])
    }
}

fn probe_rank2<T: Scalar>(op: &'static str, tape: &Tape<T>, id: NodeId) -> Result<usize> {
    let s = tape.shape(id);
    if s.len() != 2 || s[1] != 1 {
        return Err(Error::invalid(
            op,
            format!("expected probabilities of shape [m, 1], got {s:?}"),
        ));
    }
    Ok(s[0])
}

impl<T: Scalar> Tape<T> {
    /// Mean softmax cross-entropy over the batch. `logits` is `[n, k]`;
    /// `labels[i]` must be `< k`. Uses the max-shifted stable formulation.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("logits must be rank 2, got {s:?}"),
            ));
        }
        let (n, k) = (s[0], s[1]);
        if labels.len() != n {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("{n} logit rows but {} labels", labels.len()),
            ));
        }
        for &label in labels {
            if label >= k {
                return Err(Error::LabelOutOfRange { label, classes: k });
            }
        }
        let data = self.value(logits).data();
        let mut probs = vec![0.0f64; n * k];
        let mut loss = 0.0f64;
        for i in 0..n {
            let row = &data[i * k..(i + 1) * k];
            let max = row
                .iter()
                .map(|v| v.as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..k {
                let e = (row[j].as_f64() - max).exp();
                probs[i * k + j] = e;
                denom += e;
            }
            for j in 0..k {
                probs[i * k + j] /= denom;
            }
            loss += denom.ln() - (row[labels[i]].as_f64() - max);
        }
        loss /= n as f64;
        let value = Tensor::scalar(T::from_f64(loss));
        Ok(self.push_op(
            value,
            vec![logits],
            Box::new(SoftmaxCrossEntropyOp {
                probs,
                labels: labels.to_vec(),
                classes: k,
            }),
        ))
    }

    /// Mean squared error with the batch-mean convention: the squared
    /// differences are summed over all non-batch dimensions and averaged
    /// over the batch (first) dimension only, so for `[m, d]` inputs the
    /// value is `(1/m) * sum ||a_i - b_i||^2`.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let s = self.shape(a);
        if s.is_empty() {
            return Err(Error::invalid("mse", "inputs must have a batch dimension"));
        }
        let batch = s[0];
        let mut acc = 0.0f64;
        for (x, y) in self.value(a).data().iter().zip(self.value(b).data()) {
            let d = x.as_f64() - y.as_f64();
            acc += d * d;
        }
        let value = Tensor::scalar(T::from_f64(acc / batch as f64));
        Ok(self.push_op(value, vec![a, b], Box::new(MseOp { batch })))
    }

    /// Discriminator BCE, descended form:
    /// `-(1/m) * sum(log p_real + log(1 - p_fake))` with both probabilities
    /// clamped to `[BCE_EPS, 1 - BCE_EPS]`. Minimizing this *ascends* the
    /// usual two-sided objective.
    pub fn bce_discriminator(&mut self, p_real: NodeId, p_fake: NodeId) -> Result<NodeId> {
        let m = probe_rank2("bce_discriminator", self, p_real)?;
        let m2 = probe_rank2("bce_discriminator", self, p_fake)?;
        if m != m2 {
            return Err(Error::ShapeMismatch {
                op: "bce_discriminator",
                lhs: self.shape(p_real).to_vec(),
                rhs: self.shape(p_fake).to_vec(),
            });
        }
        let mut acc = 0.0f64;
        for (r, f) in self.value(p_real).data().iter().zip(self.value(p_fake).data()) {
            acc += clamp01(r.as_f64()).ln() + (1.0 - clamp01(f.as_f64())).ln();
        }
        let value = Tensor::scalar(T::from_f64(-acc / m as f64));
        Ok(self.push_op(value, vec![p_real, p_fake], Box::new(BceDiscriminatorOp { m })))
    }

    /// Generator adversarial term `(1/m) * sum(log(1 - p_fake))` (clamped),
    /// descended directly.
    pub fn bce_generator(&mut self, p_fake: NodeId) -> Result<NodeId> {
        let m = probe_rank2("bce_generator", self, p_fake)?;
        let mut acc = 0.0f64;
        for f in self.value(p_fake).data() {
            acc += (1.0 - clamp01(f.as_f64())).ln();
        }
        let value = Tensor::scalar(T::from_f64(acc / m as f64));
        Ok(self.push_op(value, vec![p_fake], Box::new(BceGeneratorOp { m })))
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::tape::{Param, Tape};
    use crate::autodiff::tensor::Tensor;
    use crate::error::Error;

    #[test]
    fn uniform_logits_give_log_k() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(vec![4, 10]));
        let loss = tape.softmax_cross_entropy(logits, &[0, 3, 7, 9]).unwrap();
        assert!((tape.value(loss).item() - 10.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn xent_gradient_is_probs_minus_onehot() {
        let p = Param::new("l", Tensor::<f64>::zeros(vec![1, 3]));
        let mut tape = Tape::new();
        let logits = tape.param(&p);
        let loss = tape.softmax_cross_entropy(logits, &[1]).unwrap();
        tape.backward(loss).unwrap();
        let g = p.grad().unwrap();
        let third = 1.0 / 3.0;
        for (got, want) in g.data().iter().zip([third, third - 1.0, third]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn xent_rejects_out_of_range_label() {
        let mut tape = Tape::<f32>::new();
        let logits = tape.constant(Tensor::zeros(vec![1, 3]));
        let err = tape.softmax_cross_entropy(logits, &[3]).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 3, classes: 3 }));
    }

    #[test]
    fn xent_is_invariant_to_logit_shift() {
        // softmax(l + c) == softmax(l); also exercises the max-shift path
        let l1 = Tensor::<f64>::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let l2 = Tensor::<f64>::new(vec![1, 3], vec![1001.0, 1002.0, 1003.0]).unwrap();
        let mut t1 = Tape::new();
        let a = t1.constant(l1);
        let la = t1.softmax_cross_entropy(a, &[2]).unwrap();
        let mut t2 = Tape::new();
        let b = t2.constant(l2);
        let lb = t2.softmax_cross_entropy(b, &[2]).unwrap();
        assert!((t1.value(la).item() - t2.value(lb).item()).abs() < 1e-12);
        assert!(t1.value(la).item().is_finite());
    }

    #[test]
    fn mse_averages_over_batch_only() {
        // [2, 3] tensors, per-element difference 1: sum of squares = 6,
        // batch = 2 -> mse = 3 (not 1, which per-element averaging would give)
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::full(vec![2, 3], 2.0));
        let b = tape.constant(Tensor::full(vec![2, 3], 1.0));
        let loss = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(loss).item(), 3.0);
    }

    #[test]
    fn mse_gradient_is_two_diff_over_batch() {
        let pa = Param::new("a", Tensor::<f64>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let pb = Param::new("b", Tensor::<f64>::zeros(vec![2, 2]));
        let mut tape = Tape::new();
        let a = tape.param(&pa);
        let b = tape.param(&pb);
        let loss = tape.mse(a, b).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(pa.grad().unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pb.grad().unwrap().data(), &[-1.0, -2.0, -3.0, -4.0]);
    }

    #[test]
    fn bce_stays_finite_at_saturated_probabilities() {
        let p = Param::new("pf", Tensor::<f64>::new(vec![2, 1], vec![0.0, 1.0]).unwrap());
        let mut tape = Tape::new();
        let pf = tape.param(&p);
        let pr = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap());
        let loss = tape.bce_discriminator(pr, pf).unwrap();
        assert!(tape.value(loss).item().is_finite());
        tape.backward(loss).unwrap();
        for g in p.grad().unwrap().data() {
            assert!(g.is_finite());
        }
    }

    #[test]
    fn generator_term_decreases_as_fake_prob_rises() {
        let mut t1 = Tape::<f64>::new();
        let lo = t1.constant(Tensor::new(vec![1, 1], vec![0.1]).unwrap());
        let l_lo = t1.bce_generator(lo).unwrap();
        let mut t2 = Tape::<f64>::new();
        let hi = t2.constant(Tensor::new(vec![1, 1], vec![0.9]).unwrap());
        let l_hi = t2.bce_generator(hi).unwrap();
        assert!(t2.value(l_hi).item() < t1.value(l_lo).item());
    }
}
