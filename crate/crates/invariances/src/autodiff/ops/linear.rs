//! Fully connected layer: `y = x Wᵀ + b`.

use crate::autodiff::scalar::Scalar;
use crate::autodiff::tape::{NodeId, Op, Tape};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// `C[m,n] += alpha * A[m,k] * B[k,n]` over row-major contiguous slices,
/// with optional transposes expressed through strides.
pub(crate) fn gemm_rowmajor<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // An (m×k) view of a row-major (k×m) buffer uses strides (1, m).
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct LinearOp {
    has_bias: bool,
}

impl<T: Scalar> Op<T> for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        _output: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0];
        let w = inputs[1];
        let (n, f_in) = (x.shape()[0], x.shape()[1]);
        let f_out = w.shape()[0];

        let dx = if needs[0] {
            // dX[n,in] = G[n,out] · W[out,in]
            let mut buf = vec![T::zero(); n * f_in];
            gemm_rowmajor(n, f_out, f_in, T::one(), grad.data(), false, w.data(), false, T::zero(), &mut buf);
            Some(Tensor::new(vec![n, f_in], buf)?)
        } else {
            None
        };

        let dw = if needs[1] {
            // dW[out,in] = Gᵀ[out,n] · X[n,in]
            let mut buf = vec![T::zero(); f_out * f_in];
            gemm_rowmajor(f_out, n, f_in, T::one(), grad.data(), true, x.data(), false, T::zero(), &mut buf);
            Some(Tensor::new(vec![f_out, f_in], buf)?)
        } else {
            None
        };

        let db = if self.has_bias && needs[2] {
            let mut buf = vec![T::zero(); f_out];
            for row in 0..n {
                for j in 0..f_out {
                    buf[j] = buf[j] + grad.data()[row * f_out + j];
                }
            }
            Some(Tensor::new(vec![f_out], buf)?)
        } else {
            None
        };

        let mut out = vec![dx, dw];
        if self.has_bias {
            out.push(db);
        }
        Ok(out)
    }
}

impl<T: Scalar> Tape<T> {
    /// Fully connected layer. `x` is `[n, in]`, `weight` is `[out, in]`,
    /// `bias` (optional) is `[out]`; the result is `[n, out]`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: xs,
                rhs: ws,
            });
        }
        let (n, f_in, f_out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != [f_out] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: bs.to_vec(),
                    rhs: vec![f_out],
                });
            }
        }

        let mut buf = vec![T::zero(); n * f_out];
        // Y[n,out] = X[n,in] · Wᵀ[in,out]
        gemm_rowmajor(
            n,
            f_in,
            f_out,
            T::one(),
            self.value(x).data(),
            false,
            self.value(weight).data(),
            true,
            T::zero(),
            &mut buf,
        );
        if let Some(b) = bias {
            let bv = self.value(b).data().to_vec();
            for row in 0..n {
                for j in 0..f_out {
                    buf[row * f_out + j] = buf[row * f_out + j] + bv[j];
                }
            }
        }
        let value = Tensor::new(vec![n, f_out], buf)?;
        let mut parents = vec![x, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(self.push_op(
            value,
            parents,
            Box::new(LinearOp {
                has_bias: bias.is_some(),
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::tape::{Param, Tape};
    use crate::autodiff::tensor::Tensor;

    #[test]
    fn linear_matches_hand_computation() {
        // x = [[1, 2]], W = [[3, 4], [5, 6]], b = [10, 20]
        // y = [1*3 + 2*4 + 10, 1*5 + 2*6 + 20] = [21, 37]
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.constant(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2], vec![10.0, 20.0]).unwrap());
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[21.0, 37.0]);
    }

    #[test]
    fn linear_gradients_match_hand_computation() {
        // L = sum(x W^T), x = [[1, 2], [3, 4]], W = [[5, 6]]
        // dL/dW = sum over batch of x rows = [4, 6]; dL/dx = [[5, 6], [5, 6]]
        let px = Param::new("x", Tensor::<f64>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let pw = Param::new("w", Tensor::<f64>::new(vec![1, 2], vec![5.0, 6.0]).unwrap());
        let mut tape = Tape::new();
        let x = tape.param(&px);
        let w = tape.param(&pw);
        let y = tape.linear(x, w, None).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(pw.grad().unwrap().data(), &[4.0, 6.0]);
        assert_eq!(px.grad().unwrap().data(), &[5.0, 6.0, 5.0, 6.0]);
    }

    #[test]
    fn linear_rejects_inner_dim_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3]));
        let w = tape.constant(Tensor::zeros(vec![2, 4]));
        assert!(tape.linear(x, w, None).is_err());
    }
}
