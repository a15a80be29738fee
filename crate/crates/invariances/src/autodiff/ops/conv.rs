//! 2-D convolution (shared filters and per-sample filters).
//!
//! Forward lowers each image to an im2col patch matrix and multiplies it
//! with the filter matrix, so almost all time is spent inside gemm. The
//! patch matrices are recomputed in backward instead of being stored on the
//! tape, trading a little compute for a much smaller memory footprint.

use crate::autodiff::scalar::Scalar;
use crate::autodiff::tape::{NodeId, Op, Tape};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

use super::linear::gemm_rowmajor;

/// Geometry of one convolution, shared by forward and backward.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Patch length (gemm K dimension).
    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Output positions per image (gemm N dimension).
    fn p(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Output extent for one spatial axis; errors unless the window tiling is
/// exact, so no silent cropping can occur.
fn out_extent(op: &'static str, extent: usize, k: usize, pad: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid(op, "stride must be >= 1"));
    }
    if k == 0 {
        return Err(Error::invalid(op, "kernel extent must be >= 1"));
    }
    let padded = extent + 2 * pad;
    if padded < k {
        return Err(Error::invalid(
            op,
            format!("kernel {k} larger than padded extent {padded}"),
        ));
    }
    if (padded - k) % stride != 0 {
        return Err(Error::invalid(
            op,
            format!(
                "geometry not exact: extent {extent} + 2*{pad} - {k} not divisible by stride {stride}"
            ),
        ));
    }
    Ok((padded - k) / stride + 1)
}

fn conv_geom(
    op: &'static str,
    xs: &[usize],
    c_out: usize,
    w_c_in: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    if xs.len() != 4 {
        return Err(Error::invalid(op, format!("input must be rank 4, got {xs:?}")));
    }
    let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if w_c_in != c_in {
        return Err(Error::ShapeMismatch {
            op,
            lhs: xs.to_vec(),
            rhs: vec![c_out, w_c_in, kh, kw],
        });
    }
    let h_out = out_extent(op, h, kh, pad, stride)?;
    let w_out = out_extent(op, w, kw, pad, stride)?;
    Ok(ConvGeom {
        n,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        stride,
        pad,
        h_out,
        w_out,
    })
}

/// Lower one image `[c_in, h, w]` into a `[K, P]` patch matrix where
/// `K = c_in*kh*kw` and `P = h_out*w_out`. Out-of-bounds taps read as zero.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    debug_assert_eq!(x.len(), g.c_in * g.h * g.w);
    debug_assert_eq!(col.len(), g.k() * g.p());
    let p = g.p();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut col[row + oy * g.w_out..row + (oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // contiguous copy with edge clipping
                        let ix0 = kj as isize - g.pad as isize;
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ix0 + ox as isize;
                            *d = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *d = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Transpose of [`im2col`]: scatter-add a `[K, P]` gradient back onto an
/// image-shaped `[c_in, h, w]` buffer.
fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], x: &mut [T]) {
    let p = g.p();
    for ci in 0..g.c_in {
        let plane_off = ci * g.h * g.w;
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &col[row + oy * g.w_out..row + (oy + 1) * g.w_out];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let idx = plane_off + iy as usize * g.w + ix as usize;
                        x[idx] = x[idx] + v;
                    }
                }
            }
        }
    }
}

/// Forward convolution of one image given its patch matrix.
fn conv_image_forward<T: Scalar>(
    g: &ConvGeom,
    weights: &[T], // [c_out, K]
    col: &[T],     // [K, P]
    bias: Option<&[T]>,
    out: &mut [T], // [c_out, P]
) {
    gemm_rowmajor(g.c_out, g.k(), g.p(), T::one(), weights, false, col, false, T::zero(), out);
    if let Some(b) = bias {
        let p = g.p();
        for o in 0..g.c_out {
            let bo = b[o];
            for v in &mut out[o * p..(o + 1) * p] {
                *v = *v + bo;
            }
        }
    }
}

/// Shared-filter convolution forward over a batch.
fn conv2d_value<T: Scalar>(
    g: &ConvGeom,
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let mut out = vec![T::zero(); g.n * g.c_out * g.p()];
    let mut col = vec![T::zero(); g.k() * g.p()];
    let image = g.c_in * g.h * g.w;
    let out_image = g.c_out * g.p();
    for i in 0..g.n {
        im2col(g, &x.data()[i * image..(i + 1) * image], &mut col);
        conv_image_forward(
            g,
            w.data(),
            &col,
            bias.map(|b| b.data()),
            &mut out[i * out_image..(i + 1) * out_image],
        );
    }
    Tensor::new(vec![g.n, g.c_out, g.h_out, g.w_out], out)
}

struct Conv2dOp {
    geom: ConvGeom,
    has_bias: bool,
}

impl<T: Scalar> Op<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        _output: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let g = &self.geom;
        let x = inputs[0];
        let w = inputs[1];
        let (k, p) = (g.k(), g.p());
        let image = g.c_in * g.h * g.w;
        let out_image = g.c_out * p;

        let need_x = needs[0];
        let need_w = needs[1];
        let need_b = self.has_bias && needs[2];

        let mut dx = need_x.then(|| vec![T::zero(); x.numel()]);
        let mut dw = need_w.then(|| vec![T::zero(); w.numel()]);
        let mut db = need_b.then(|| vec![T::zero(); g.c_out]);

        let mut col = vec![T::zero(); k * p];
        let mut dcol = vec![T::zero(); k * p];
        for i in 0..g.n {
            let gi = &grad.data()[i * out_image..(i + 1) * out_image];
            if need_w {
                im2col(g, &x.data()[i * image..(i + 1) * image], &mut col);
                // dW[c_out,K] += G_i[c_out,P] · colᵀ[P,K]
                gemm_rowmajor(
                    g.c_out,
                    p,
                    k,
                    T::one(),
                    gi,
                    false,
                    &col,
                    true,
                    T::one(),
                    dw.as_mut().unwrap(),
                );
            }
            if need_x {
                // dcol[K,P] = Wᵀ[K,c_out] · G_i[c_out,P]
                gemm_rowmajor(k, g.c_out, p, T::one(), w.data(), true, gi, false, T::zero(), &mut dcol);
                col2im_add(g, &dcol, &mut dx.as_mut().unwrap()[i * image..(i + 1) * image]);
            }
            if let Some(db) = db.as_mut() {
                for o in 0..g.c_out {
                    let mut s = T::zero();
                    for &v in &gi[o * p..(o + 1) * p] {
                        s = s + v;
                    }
                    db[o] = db[o] + s;
                }
            }
        }

        let mut out: Vec<Option<Tensor<T>>> = vec![
            match dx {
                Some(buf) => Some(Tensor::new(x.shape().to_vec(), buf)?),
                None => None,
            },
            match dw {
                Some(buf) => Some(Tensor::new(w.shape().to_vec(), buf)?),
                None => None,
            },
        ];
        if self.has_bias {
            out.push(match db {
                Some(buf) => Some(Tensor::new(vec![g.c_out], buf)?),
                None => None,
            });
        }
        Ok(out)
    }
}

struct Conv2dPerSampleOp {
    geom: ConvGeom,
    has_bias: bool,
}

impl<T: Scalar> Op<T> for Conv2dPerSampleOp {
    fn name(&self) -> &'static str {
        "conv2d_per_sample"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        _output: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let g = &self.geom;
        let x = inputs[0];
        let w = inputs[1];
        let (k, p) = (g.k(), g.p());
        let image = g.c_in * g.h * g.w;
        let out_image = g.c_out * p;
        let filter = g.c_out * k;

        let need_x = needs[0];
        let need_w = needs[1];
        let need_b = self.has_bias && needs[2];

        let mut dx = need_x.then(|| vec![T::zero(); x.numel()]);
        let mut dw = need_w.then(|| vec![T::zero(); w.numel()]);
        let mut db = need_b.then(|| vec![T::zero(); g.c_out]);

        let mut col = vec![T::zero(); k * p];
        let mut dcol = vec![T::zero(); k * p];
        for i in 0..g.n {
            let gi = &grad.data()[i * out_image..(i + 1) * out_image];
            let wi = &w.data()[i * filter..(i + 1) * filter];
            if need_w {
                im2col(g, &x.data()[i * image..(i + 1) * image], &mut col);
                gemm_rowmajor(
                    g.c_out,
                    p,
                    k,
                    T::one(),
                    gi,
                    false,
                    &col,
                    true,
                    T::zero(),
                    &mut dw.as_mut().unwrap()[i * filter..(i + 1) * filter],
                );
            }
            if need_x {
                gemm_rowmajor(k, g.c_out, p, T::one(), wi, true, gi, false, T::zero(), &mut dcol);
                col2im_add(g, &dcol, &mut dx.as_mut().unwrap()[i * image..(i + 1) * image]);
            }
            if let Some(db) = db.as_mut() {
                for o in 0..g.c_out {
                    let mut s = T::zero();
                    for &v in &gi[o * p..(o + 1) * p] {
                        s = s + v;
                    }
                    db[o] = db[o] + s;
                }
            }
        }

        let mut out: Vec<Option<Tensor<T>>> = vec![
            match dx {
                Some(buf) => Some(Tensor::new(x.shape().to_vec(), buf)?),
                None => None,
            },
            match dw {
                Some(buf) => Some(Tensor::new(w.shape().to_vec(), buf)?),
                None => None,
            },
        ];
        if self.has_bias {
            out.push(match db {
                Some(buf) => Some(Tensor::new(vec![g.c_out], buf)?),
                None => None,
            });
        }
        Ok(out)
    }
}

impl<T: Scalar> Tape<T> {
    /// 2-D convolution. `x` is `[n, c_in, h, w]`, `weight` is
    /// `[c_out, c_in, kh, kw]`, `bias` (optional) is `[c_out]`. Padding is
    /// zero-padding on both sides; the window tiling must be exact or the
    /// call fails (no silent cropping).
    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let ws = self.shape(weight).to_vec();
        if ws.len() != 4 {
            return Err(Error::invalid(
                "conv2d",
                format!("weight must be rank 4, got {ws:?}"),
            ));
        }
        let geom = conv_geom("conv2d", self.shape(x), ws[0], ws[1], ws[2], ws[3], stride, pad)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![geom.c_out],
                });
            }
        }
        let value = conv2d_value(&geom, self.value(x), self.value(weight), bias.map(|b| self.value(b)))?;
        let mut parents = vec![x, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(self.push_op(
            value,
            parents,
            Box::new(Conv2dOp {
                geom,
                has_bias: bias.is_some(),
            }),
        ))
    }

    /// Convolution with a different filter set per sample. `x` is
    /// `[n, c_in, h, w]`, `weight` is `[n, c_out, c_in, kh, kw]` (one filter
    /// bank per image), `bias` (optional, `[c_out]`) is shared. Sample `i`
    /// of the output is `conv2d(x[i], weight[i], bias)`.
    pub fn conv2d_per_sample(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let ws = self.shape(weight).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 5 {
            return Err(Error::invalid(
                "conv2d_per_sample",
                format!("weight must be rank 5 [n, c_out, c_in, kh, kw], got {ws:?}"),
            ));
        }
        if xs.len() != 4 || ws[0] != xs[0] {
            return Err(Error::ShapeMismatch {
                op: "conv2d_per_sample",
                lhs: xs,
                rhs: ws,
            });
        }
        let geom = conv_geom(
            "conv2d_per_sample",
            &xs,
            ws[1],
            ws[2],
            ws[3],
            ws[4],
            stride,
            pad,
        )?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d_per_sample bias",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![geom.c_out],
                });
            }
        }

        let (k, p) = (geom.k(), geom.p());
        let image = geom.c_in * geom.h * geom.w;
        let out_image = geom.c_out * p;
        let filter = geom.c_out * k;
        let mut out = vec![T::zero(); geom.n * out_image];
        let mut col = vec![T::zero(); k * p];
        {
            let xv = self.value(x);
            let wv = self.value(weight);
            let bv = bias.map(|b| self.value(b).data().to_vec());
            for i in 0..geom.n {
                im2col(&geom, &xv.data()[i * image..(i + 1) * image], &mut col);
                conv_image_forward(
                    &geom,
                    &wv.data()[i * filter..(i + 1) * filter],
                    &col,
                    bv.as_deref(),
                    &mut out[i * out_image..(i + 1) * out_image],
                );
            }
        }
        let value = Tensor::new(vec![geom.n, geom.c_out, geom.h_out, geom.w_out], out)?;
        let mut parents = vec![x, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(self.push_op(
            value,
            parents,
            Box::new(Conv2dPerSampleOp {
                geom,
                has_bias: bias.is_some(),
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::autodiff::tape::Tape;
    use crate::autodiff::tensor::Tensor;

    /// Reference convolution: direct quadruple loop, no lowering.
    fn conv_naive(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: Option<&[f64]>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * cout * ho * wo];
        for i in 0..n {
            for o in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.map(|b| b[o]).unwrap_or(0.0);
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()
                                        [((i * cin + ci) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.data()[((o * cin + ci) * kh + ki) * kw + kj];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((i * cout + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, cout, ho, wo], out).unwrap()
    }

    #[test]
    fn ones_kernel_counts_overlap() {
        // 3x3 ones kernel, pad 1, stride 1 over a 3x3 ones image: each output
        // counts the in-bounds taps — 4 at corners, 6 at edges, 9 at center.
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn matches_naive_oracle_across_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // (n, cin, h, w, cout, kh, kw, stride, pad)
        let cases = [
            (2, 3, 7, 7, 4, 3, 3, 1, 1),
            (1, 2, 8, 8, 3, 4, 4, 2, 1),
            (3, 1, 5, 6, 2, 3, 3, 1, 0),
            (2, 2, 9, 9, 5, 3, 3, 2, 0),
            (1, 4, 6, 6, 1, 1, 1, 1, 0),
        ];
        for (n, cin, h, w, cout, kh, kw, stride, pad) in cases {
            let x = Tensor::<f64>::rand_normal(&mut rng, vec![n, cin, h, w]);
            let wt = Tensor::<f64>::rand_normal(&mut rng, vec![cout, cin, kh, kw]);
            let b = Tensor::<f64>::rand_normal(&mut rng, vec![cout]);
            let expected = conv_naive(&x, &wt, Some(b.data()), stride, pad);
            let mut tape = Tape::new();
            let xn = tape.constant(x);
            let wn = tape.constant(wt);
            let bn = tape.constant(b);
            let y = tape.conv2d(xn, wn, Some(bn), stride, pad).unwrap();
            assert_eq!(tape.shape(y), expected.shape());
            for (a, e) in tape.value(y).data().iter().zip(expected.data()) {
                assert!((a - e).abs() < 1e-10, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn per_sample_matches_stacked_single_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 3;
        let x = Tensor::<f64>::rand_normal(&mut rng, vec![n, 2, 6, 6]);
        let w = Tensor::<f64>::rand_normal(&mut rng, vec![n, 4, 2, 3, 3]);
        let b = Tensor::<f64>::rand_normal(&mut rng, vec![4]);

        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let wn = tape.constant(w.clone());
        let bn = tape.constant(b.clone());
        let y = tape.conv2d_per_sample(xn, wn, Some(bn), 1, 1).unwrap();

        for i in 0..n {
            let xi = Tensor::new(vec![1, 2, 6, 6], x.data()[i * 72..(i + 1) * 72].to_vec()).unwrap();
            let wi =
                Tensor::new(vec![4, 2, 3, 3], w.data()[i * 72..(i + 1) * 72].to_vec()).unwrap();
            let mut t2 = Tape::new();
            let x2 = t2.constant(xi);
            let w2 = t2.constant(wi);
            let b2 = t2.constant(b.clone());
            let yi = t2.conv2d(x2, w2, Some(b2), 1, 1).unwrap();
            let per_image = tape.value(y).numel() / n;
            assert_eq!(
                &tape.value(y).data()[i * per_image..(i + 1) * per_image],
                t2.value(yi).data()
            );
        }
    }

    #[test]
    fn rejects_inexact_tiling() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 7, 7]));
        let w = tape.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        // (7 - 2) % 2 != 0
        assert!(tape.conv2d(x, w, None, 2, 0).is_err());
    }

    #[test]
    fn rejects_channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 5, 5]));
        let w = tape.constant(Tensor::zeros(vec![2, 4, 3, 3]));
        assert!(tape.conv2d(x, w, None, 1, 1).is_err());
    }
}
