//! Elementwise ops and reductions: add, sub, mul, scale, relu, leaky relu,
//! sigmoid, sum.

use crate::autodiff::scalar::Scalar;
use crate::autodiff::tape::{NodeId, Op, Tape};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

struct AddOp;

impl<T: Scalar> Op<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        _output: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![
            needs[0].then(|| grad.clone()),
            needs[1].then(|| grad.clone()),
        ])
    }
}

struct SubOp;

impl<T: Scalar> Op<T> for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        _output: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![
            needs[0].then(|| grad.clone()),
            needs[1].then(|| grad.map(|g| -g)),
        ])
    }
}

struct MulOp;

impl<T: Scalar> Op<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        _output: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let da = if needs[0] {
            Some(grad.zip(inputs[1], "mul backward", |g, b| g * b)?)
        } else {
            None
        };
        let db = if needs[1] {
            Some(grad.zip(inputs[0], "mul backward", |g, a| g * a)?)
        } else {
            None
        };
        Ok(vec![da, db])
    }
}

struct ScaleOp<T> {
    factor: T,
}

impl<T: Scalar> Op<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        _output: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let factor = self.factor;
        Ok(vec![needs[0].then(|| grad.map(|g| g * factor))])
    }
}

struct ReluOp;

impl<T: Scalar> Op<T> for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
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
        // subgradient 0 at x == 0
        let dx = grad.zip(inputs[0], "relu backward", |g, x| {
            if x > T::zero() {
                g
            } else {
                T::zero()
            }
        })?;
        Ok(vec![Some(dx)])
    }
}

struct LeakyReluOp<T> {
    slope: T,
}

impl<T: Scalar> Op<T> for LeakyReluOp<T> {
    fn name(&self) -> &'static str {
        "leaky_relu"
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
        let slope = self.slope;
        let dx = grad.zip(inputs[0], "leaky_relu backward", |g, x| {
            if x > T::zero() {
                g
            } else {
                g * slope
            }
        })?;
        Ok(vec![Some(dx)])
    }
}

struct SigmoidOp;

impl<T: Scalar> Op<T> for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        output: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        let dx = grad.zip(output, "sigmoid backward", |g, y| g * y * (T::one() - y))?;
        Ok(vec![Some(dx)])
    }
}

struct SumOp;

impl<T: Scalar> Op<T> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
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
        let g = grad.item();
        Ok(vec![Some(Tensor::full(inputs[0].shape().to_vec(), g))])
    }
}

struct ReshapeOp {
    from: Vec<usize>,
}

impl<T: Scalar> Op<T> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        _output: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        Ok(vec![Some(grad.reshaped(self.from.clone())?)])
    }
}

impl<T: Scalar> Tape<T> {
    fn binary_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Elementwise `a + b` (shapes must match exactly; no broadcasting).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b)?;
        let value = self.value(a).zip(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push_op(value, vec![a, b], Box::new(AddOp)))
    }

    /// Elementwise `a - b`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b)?;
        let value = self.value(a).zip(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push_op(value, vec![a, b], Box::new(SubOp)))
    }

    /// Elementwise `a * b` (Hadamard product).
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b)?;
        let value = self.value(a).zip(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push_op(value, vec![a, b], Box::new(MulOp)))
    }

    /// `factor * a` with a compile-time-known constant factor.
    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let value = self.value(a).map(|x| x * factor);
        self.push_op(value, vec![a], Box::new(ScaleOp { factor }))
    }

    /// `max(x, 0)`.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push_op(value, vec![a], Box::new(ReluOp))
    }

    /// `x if x > 0 else slope * x`.
    pub fn leaky_relu(&mut self, a: NodeId, slope: T) -> NodeId {
        let value = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        self.push_op(value, vec![a], Box::new(LeakyReluOp { slope }))
    }

    /// Logistic sigmoid `1 / (1 + exp(-x))`.
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let one = T::one();
        let value = self.value(a).map(|x| one / (one + (-x).exp()));
        self.push_op(value, vec![a], Box::new(SigmoidOp))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        self.push_op(value, vec![a], Box::new(SumOp))
    }

    /// View with a new shape (element count must match).
    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let from = self.shape(a).to_vec();
        let value = self.value(a).reshaped(shape)?;
        Ok(self.push_op(value, vec![a], Box::new(ReshapeOp { from })))
    }
}
