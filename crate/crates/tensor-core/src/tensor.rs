use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Result, TensorError};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Immutable dense tensor: a row-major `f64` buffer plus its shape.
///
/// Supported ranks are 1 (vectors) and 2 (matrices). Values are shared via
/// `Arc`, so clones are cheap and tensors are safe to read across threads.
/// Each tensor carries a unique id; gradients are keyed by it.
#[derive(Clone, Debug)]
pub struct Tensor {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data. Rejects empty or
    /// rank>2 shapes, length mismatches, and non-finite values.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() || shape.len() > 2 || shape.contains(&0) {
            return Err(TensorError::BadShape {
                op: "from_vec",
                expected: "rank 1 or 2 with positive dimensions",
                shape: shape.to_vec(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Invalid {
                op: "from_vec",
                msg: format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "from_vec" });
        }
        Ok(Tensor {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
        })
    }

    /// Internal constructor for op outputs; shape is trusted.
    pub(crate) fn new_unchecked(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: Arc::new(data),
            requires_grad,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::from_vec(&[rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Tensor> {
        let n = data.len();
        Tensor::from_vec(&[n], data)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![value]).expect("finite scalar")
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel]).expect("valid zero tensor")
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![1.0; numel]).expect("valid ones tensor")
    }

    /// Marks this tensor as a differentiation leaf. Ops with any
    /// gradient-requiring input are recorded on the tape.
    pub fn requires_grad(mut self) -> Tensor {
        self.requires_grad = true;
        self
    }

    /// A gradient-free view of the same values (shares the buffer).
    /// Ops over detached tensors are not recorded on any tape.
    pub fn detached(&self) -> Tensor {
        Tensor {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            requires_grad: false,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn needs_grad(&self) -> bool {
        self.requires_grad
    }

    /// Row/column view: vectors count as a single row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1]),
        }
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::BadShape {
                op: "item",
                expected: "exactly one element",
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    /// Copies row `i` of a matrix (or the whole vector for rank 1).
    pub fn row_slice(&self, i: usize) -> &[f64] {
        let (_, c) = self.rows_cols();
        &self.data[i * c..(i + 1) * c]
    }
}
