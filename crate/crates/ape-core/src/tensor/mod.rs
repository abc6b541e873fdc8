//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain value type: shape, data, and an optional gradient
//! buffer. Differentiation happens on a [`tape::Tape`], which owns every
//! intermediate tensor of a forward pass and replays recorded closures in
//! reverse to fill gradients.

pub mod ops;
pub mod tape;

use crate::scalar::Scalar;
use thiserror::Error;

/// Errors produced by tensor construction and tensor operations.
#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, data has {got}")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("matmul shapes incompatible: lhs {lhs:?}, rhs {rhs:?}")]
    MatmulMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("expected rank {expected}, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("axis {axis} invalid for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("shapes differ: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("dropout probability {0} outside [0, 1)")]
    InvalidProbability(f64),
    #[error("label smoothing epsilon {0} outside [0, 1)")]
    InvalidEpsilon(f64),
    #[error("index {index} out of range for dimension of size {bound}")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("{count} targets for {rows} logit rows")]
    TargetCount { count: usize, rows: usize },
    #[error("loss undefined: every target position is padding")]
    AllPadding,
    #[error("attention mask is {mask:?}, scores are {scores:?}")]
    MaskMismatch {
        mask: Vec<usize>,
        scores: Vec<usize>,
    },
    #[error("column range {from}..{to} invalid for width {width}")]
    BadColumnRange {
        from: usize,
        to: usize,
        width: usize,
    },
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeData {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(value: S) -> Self {
        Self::new(Vec::new(), vec![value]).expect("scalar shape")
    }

    pub fn vector(data: Vec<S>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("vector shape")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![S::zero(); n]).expect("zeros shape")
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Drops any accumulated gradient.
    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `contribution` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, contribution: &[S]) {
        debug_assert_eq!(contribution.len(), self.data.len());
        let grad = self
            .grad
            .get_or_insert_with(|| vec![S::zero(); self.data.len()]);
        for (g, c) in grad.iter_mut().zip(contribution) {
            *g += *c;
        }
    }

    pub fn dims1(&self) -> Result<usize, TensorError> {
        match self.shape.as_slice() {
            [n] => Ok(*n),
            _ => Err(TensorError::Rank {
                expected: 1,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(TensorError::Rank {
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn scalar_value(&self) -> Result<S, TensorError> {
        if self.numel() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar {
                shape: self.shape.clone(),
            })
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[S] {
        let (rows, cols) = self.dims2().expect("row access needs rank 2");
        debug_assert!(i < rows);
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Converts element-wise into another scalar type.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::of_f64(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

/// Attention mask over a query-by-key grid; `true` blocks attention.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    q_len: usize,
    k_len: usize,
    blocked: Vec<bool>,
}

impl AttnMask {
    /// Everything visible.
    pub fn none(q_len: usize, k_len: usize) -> Self {
        Self {
            q_len,
            k_len,
            blocked: vec![false; q_len * k_len],
        }
    }

    /// Position `q` may only attend to keys at positions `<= q`.
    pub fn causal(len: usize) -> Self {
        let mut mask = Self::none(len, len);
        for q in 0..len {
            for k in (q + 1)..len {
                mask.blocked[q * len + k] = true;
            }
        }
        mask
    }

    /// Blocks the key positions where `pad` is true, for every query.
    pub fn key_padding(q_len: usize, pad: &[bool]) -> Self {
        let k_len = pad.len();
        let mut mask = Self::none(q_len, k_len);
        for q in 0..q_len {
            for (k, &p) in pad.iter().enumerate() {
                if p {
                    mask.blocked[q * k_len + k] = true;
                }
            }
        }
        mask
    }

    /// Arbitrary mask from a predicate; `true` blocks.
    pub fn from_fn(q_len: usize, k_len: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut mask = Self::none(q_len, k_len);
        for q in 0..q_len {
            for k in 0..k_len {
                mask.blocked[q * k_len + k] = f(q, k);
            }
        }
        mask
    }

    pub fn q_len(&self) -> usize {
        self.q_len
    }

    pub fn k_len(&self) -> usize {
        self.k_len
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.blocked[q * self.k_len..(q + 1) * self.k_len]
    }

    pub fn is_blocked(&self, q: usize, k: usize) -> bool {
        self.blocked[q * self.k_len + k]
    }
}
