//! Dense row-major tensors.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};
use crate::rng;
use crate::Scalar;

/// Fill rule for [`Tensor::create`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Normal draws from the ChaCha8 stream seeded with `seed`.
    Gaussian { mean: f64, std: f64, seed: u64 },
}

/// N-dimensional array with an optional gradient buffer.
///
/// 4-D data is laid out batch × channels × height × width.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_extents(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            ));
        }
        Ok(Self { shape: shape.to_vec(), data, grad: None })
    }

    pub fn create(shape: &[usize], init: Init) -> Result<Self> {
        check_extents(shape)?;
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Constant(c) => vec![T::of(c); n],
            Init::Gaussian { mean, std, seed } => {
                if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
                    return Err(Error::Config(format!("bad gaussian parameters ({mean}, {std})")));
                }
                let mut r = rng::seeded(seed);
                gaussian_values(&mut r, n, mean, std)
            }
        };
        Ok(Self { shape: shape.to_vec(), data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::create(shape, Init::Zeros)
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v], grad: None }
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

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return shape_err(format!(
                "gradient of {} values for tensor of shape {:?}",
                g.len(),
                self.shape
            ));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_extents(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), self.data.len());
        }
        Ok(self)
    }

    /// Extents of a rank-4 tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [b, c, h, w] => Ok([b, c, h, w]),
            _ => shape_err(format!("expected a 4-D tensor, got shape {:?}", self.shape)),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of every element, see [`pairwise_sum`] for the order.
    pub fn sum_all(&self) -> T {
        pairwise_sum(&self.data)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return shape_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect(), grad: None }
    }

    /// Element-type conversion (gradient dropped).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            grad: None,
        }
    }
}

fn check_extents(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return shape_err("a tensor needs at least one extent");
    }
    if let Some(i) = shape.iter().position(|&e| e == 0) {
        return shape_err(format!("extent {i} of {shape:?} is zero"));
    }
    Ok(())
}

pub(crate) fn gaussian_values<T: Scalar>(r: &mut rng::Rng, n: usize, mean: f64, std: f64) -> Vec<T> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(r);
            T::of(mean + std * z)
        })
        .collect()
}

const PAIRWISE_BLOCK: usize = 32;

/// Deterministic pairwise summation.
///
/// Slices of at most 32 values are summed left to right; longer slices are
/// split at `len / 2` and the two halves summed recursively. The result
/// depends only on the values and their order.
pub fn pairwise_sum<T: Scalar>(xs: &[T]) -> T {
    if xs.len() <= PAIRWISE_BLOCK {
        xs.iter().fold(T::zero(), |a, &b| a + b)
    } else {
        let (l, r) = xs.split_at(xs.len() / 2);
        pairwise_sum(l) + pairwise_sum(r)
    }
}
