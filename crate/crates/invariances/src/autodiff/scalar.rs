//! The element type abstraction.
//!
//! Training runs in `f32` for speed; gradient checking runs the *same* code
//! paths in `f64` so finite differences are trustworthy. Everything generic
//! over [`Scalar`] therefore gets verified at high precision for free.

use std::fmt::{Debug, Display};

/// Element dtype tag, used by the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    /// Single-byte on-disk code.
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    /// Bytes per element.
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Floating-point element type: `f32` or `f64`.
///
/// Adds to `num_traits::Float` the pieces the engine needs — a dtype tag,
/// exact f64 round-trips for configuration constants, little-endian
/// serialization, and a dispatch into the appropriate BLAS-style gemm kernel.
pub trait Scalar:
    num_traits::Float + Debug + Display + Default + Send + Sync + 'static
{
    const DTYPE: Dtype;

    /// Exact widening (f32) or identity (f64) conversion. Named to avoid
    /// colliding with `num_traits::ToPrimitive::to_f64`.
    fn as_f64(self) -> f64;
    fn from_f64(x: f64) -> Self;

    /// Append this value to `out` in little-endian byte order.
    fn write_le(self, out: &mut Vec<u8>);

    /// Read one value from the front of `bytes` (must hold enough bytes).
    fn read_le(bytes: &[u8]) -> Self;

    /// C := alpha * A(m×k) * B(k×n) + beta * C(m×n), row-major strides.
    ///
    /// # Safety
    /// `a`, `b`, `c` must point to buffers valid for the given dimensions
    /// and strides; `c` must be writable.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn as_f64(self) -> f64 {
        self
    }

    fn from_f64(x: f64) -> Self {
        x
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}
