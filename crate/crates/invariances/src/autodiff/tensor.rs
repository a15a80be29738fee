//! Dense row-major tensors.
//!
//! A [`Tensor`] is a shape plus a contiguous `Vec` of elements in row-major
//! (C) order. It is a plain value type: cloning copies the buffer, and all
//! autodiff bookkeeping lives in the tape, not here.

use rand::Rng;

use crate::error::{Error, Result};

use super::scalar::Scalar;

/// A dense row-major tensor of `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Build from a shape and matching data buffer.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(
                "Tensor::new",
                format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// All-zero tensor.
    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    /// Constant-filled tensor.
    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    /// Scalar (rank-0) tensor.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Uniform samples in `[lo, hi)`. Sampling is done in `f64` so the value
    /// stream is identical for `f32` and `f64` tensors built from one seed.
    pub fn rand_uniform(rng: &mut impl Rng, shape: impl Into<Vec<usize>>, lo: f64, hi: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Tensor { shape, data }
    }

    /// Standard-normal samples, drawn in `f64` (see [`Tensor::rand_uniform`]).
    pub fn rand_normal(rng: &mut impl Rng, shape: impl Into<Vec<usize>>) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let shape = shape.into();
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let x: f64 = StandardNormal.sample(rng);
                T::from_f64(x)
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Same buffer, new shape (element count must match).
    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise binary op; shapes must match exactly.
    pub fn zip(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self += other` (shapes must match).
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Sum of all elements.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    /// Euclidean norm of the flattened tensor.
    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&x| {
                let v = x.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Squared Euclidean distance to another tensor of the same shape.
    pub fn sq_distance(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum()
    }

    /// Error if any element is NaN or infinite.
    pub fn ensure_finite(&self, what: &str, step: usize) -> Result<()> {
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: what.to_string(),
                step,
            });
        }
        Ok(())
    }

    /// Cast every element through `f64` into another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
        }
    }
}
