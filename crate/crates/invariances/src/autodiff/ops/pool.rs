//! Spatial pooling: max pooling (window == stride, exact tiling) and
//! global average pooling.

use crate::autodiff::scalar::Scalar;
use crate::autodiff::tape::{NodeId, Op, Tape};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

struct MaxPoolOp {
    window: usize,
    /// Flat input index of the winning tap for every output element.
    argmax: Vec<usize>,
}

impl<T: Scalar> Op<T> for MaxPoolOp {
    fn name(&self) -> &'static str {
        "maxpool2d"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        _output: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let _ = self.window;
        if !needs[0] {
            return Ok(vec![None]);
        }
        let mut dx = vec![T::zero(); inputs[0].numel()];
        for (g, &src) in grad.data().iter().zip(&self.argmax) {
            dx[src] = dx[src] + *g;
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), dx)?)])
    }
}

struct GlobalAvgPoolOp {
    h: usize,
    w: usize,
}

impl<T: Scalar> Op<T> for GlobalAvgPoolOp {
    fn name(&self) -> &'static str {
        "global_avg_pool"
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
        let area = T::from_f64((self.h * self.w) as f64);
        let mut dx = vec![T::zero(); inputs[0].numel()];
        let plane = self.h * self.w;
        for (nc, &g) in grad.data().iter().enumerate() {
            let v = g / area;
            for d in &mut dx[nc * plane..(nc + 1) * plane] {
                *d = v;
            }
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), dx)?)])
    }
}

impl<T: Scalar> Tape<T> {
    /// Max pooling with square window and stride equal to the window, so
    /// windows tile the input exactly. The input extents must be divisible
    /// by `window`. On ties, the first tap in scan order wins (and receives
    /// the full gradient in backward).
    pub fn maxpool2d(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::invalid(
                "maxpool2d",
                format!("input must be rank 4, got {xs:?}"),
            ));
        }
        if window == 0 {
            return Err(Error::invalid("maxpool2d", "window must be >= 1"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h % window != 0 || w % window != 0 {
            return Err(Error::invalid(
                "maxpool2d",
                format!("extents {h}x{w} not divisible by window {window}"),
            ));
        }
        let (ho, wo) = (h / window, w / window);
        let data = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        let mut argmax = vec![0usize; n * c * ho * wo];
        for nc in 0..n * c {
            let plane = nc * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best_idx = plane + (oy * window) * w + ox * window;
                    let mut best = data[best_idx];
                    for ky in 0..window {
                        for kx in 0..window {
                            let idx = plane + (oy * window + ky) * w + ox * window + kx;
                            if data[idx] > best {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (nc * ho + oy) * wo + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push_op(value, vec![x], Box::new(MaxPoolOp { window, argmax })))
    }

    /// Mean over the spatial extent: `[n, c, h, w]` → `[n, c]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::invalid(
                "global_avg_pool",
                format!("input must be rank 4, got {xs:?}"),
            ));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let plane = h * w;
        let area = T::from_f64(plane as f64);
        let data = self.value(x).data();
        let mut out = vec![T::zero(); n * c];
        for (nc, o) in out.iter_mut().enumerate() {
            let mut s = T::zero();
            for &v in &data[nc * plane..(nc + 1) * plane] {
                s = s + v;
            }
            *o = s / area;
        }
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push_op(value, vec![x], Box::new(GlobalAvgPoolOp { h, w })))
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::tape::{Param, Tape};
    use crate::autodiff::tensor::Tensor;

    #[test]
    fn maxpool_picks_window_maxima() {
        let mut tape = Tape::<f64>::new();
        #[rustfmt::skip]
        let x = tape.constant(Tensor::new(vec![1, 1, 4, 4], vec![
            1.0, 2.0,   5.0, 6.0,
            3.0, 4.0,   8.0, 7.0,

            9.0, 1.0,   0.0, 0.0,
            1.0, 1.0,   0.0, 2.0,
        ]).unwrap());
        let y = tape.maxpool2d(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 8.0, 9.0, 2.0]);
    }

    #[test]
    fn maxpool_gradient_hits_argmax_only_first_on_ties() {
        let p = Param::new(
            "x",
            Tensor::<f64>::new(vec![1, 1, 2, 2], vec![3.0, 3.0, 1.0, 0.0]).unwrap(),
        );
        let mut tape = Tape::new();
        let x = tape.param(&p);
        let y = tape.maxpool2d(x, 2).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        // tie between the two 3.0s: first in scan order wins
        assert_eq!(p.grad().unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_inexact_tiling() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 5, 4]));
        assert!(tape.maxpool2d(x, 2).is_err());
    }

    #[test]
    fn gap_averages_each_plane() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(
            Tensor::new(vec![1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0])
                .unwrap(),
        );
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2]);
        assert_eq!(tape.value(y).data(), &[2.5, 10.0]);
    }

    #[test]
    fn gap_gradient_is_uniform() {
        let p = Param::new("x", Tensor::<f64>::zeros(vec![1, 1, 2, 2]));
        let mut tape = Tape::new();
        let x = tape.param(&p);
        let y = tape.global_avg_pool(x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(p.grad().unwrap().data(), &[0.25, 0.25, 0.25, 0.25]);
    }
}
