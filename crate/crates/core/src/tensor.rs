use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array of rank at most 3 with a lazily allocated gradient.
///
/// Sequence data uses the `[features, length]` convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
}

pub const MAX_RANK: usize = 3;

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::contract(format!(
            "tensor rank must be 1..=3, got shape {shape:?}"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::contract(format!(
            "tensor dims must be positive, got {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], values: Vec<T>) -> Result<Self> {
        let numel = check_shape(shape)?;
        if numel != values.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", values.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            values: vec![T::zero(); numel],
            grad: None,
        })
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Values for writing alongside the gradient for reading.
    pub fn values_mut_with_grad(&mut self) -> (&mut [T], Option<&[T]>) {
        (&mut self.values, self.grad.as_deref())
    }

    /// Gradient buffer, allocated as zeros on first access.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let n = self.values.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    /// Adds `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("{} grads for {} values", delta.len(), self.values.len()),
            ));
        }
        for (g, &d) in self.grad_mut().iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    /// Takes ownership of `grad` as the gradient buffer.
    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::shape(
                "set_grad",
                format!("{} grads for {} values", grad.len(), self.values.len()),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            values: self
                .values
                .iter()
                .map(|v| U::from_f64(v.as_f64()))
                .collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64(v.as_f64())).collect()),
        }
    }
}

/// Clears the gradients of every tensor in `params`.
pub fn zero_grad<'a, T: Scalar + 'a>(params: impl IntoIterator<Item = &'a mut Tensor<T>>) {
    for p in params {
        p.zero_grad();
    }
}
