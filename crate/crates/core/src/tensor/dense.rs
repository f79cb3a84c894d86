use crate::error::{Error, Result};

use super::Scalar;

/// Dense row-major array. Image tensors use `(N, C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "every dimension must be at least 1".into(),
        });
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel = check_shape(&shape)?;
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {numel} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    /// Caller guarantees the shape invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = shape.into();
        let numel = check_shape(&shape)?;
        Ok(Self {
            shape,
            data: vec![value; numel],
        })
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = shape.into();
        let numel = check_shape(&shape)?;
        Ok(Self {
            shape,
            data: (0..numel).map(&mut f).collect(),
        })
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn dtype(&self) -> super::DType {
        T::DTYPE
    }

    /// `(N, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected rank 4 (N, C, H, W)".into(),
            }),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel = check_shape(&shape)?;
        if numel != self.data.len() {
            return Err(Error::mismatch("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest elementwise absolute difference; panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }
}
