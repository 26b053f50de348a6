//! Dense row-major f64 tensors and the byte-counting gauge behind them.
//!
//! Every tensor buffer is registered with [`mem`], so `mem::peak_bytes()`
//! reports the algorithmic high-water mark of live tensor data rather than
//! process RSS. Tensors are immutable after construction; all arithmetic
//! helpers return new values.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};

/// Live-byte accounting for tensor buffers.
///
/// `current_bytes` is the number of bytes held by live tensors right now,
/// `peak_bytes` the high-water mark since the last [`mem::reset_peak`].
/// Counters are global and thread-safe; simulated workers share them.
pub mod mem {
    use super::*;

    static CURRENT: AtomicUsize = AtomicUsize::new(0);
    static PEAK: AtomicUsize = AtomicUsize::new(0);

    pub(super) fn on_alloc(bytes: usize) {
        let now = CURRENT.fetch_add(bytes, Ordering::Relaxed) + bytes;
        PEAK.fetch_max(now, Ordering::Relaxed);
    }

    pub(super) fn on_free(bytes: usize) {
        CURRENT.fetch_sub(bytes, Ordering::Relaxed);
    }

    pub fn current_bytes() -> usize {
        CURRENT.load(Ordering::Relaxed)
    }

    pub fn peak_bytes() -> usize {
        PEAK.load(Ordering::Relaxed)
    }

    /// Restart the high-water mark at the current live count.
    pub fn reset_peak() {
        PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
    }
}

/// Dense row-major array of f64 with an explicit shape.
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and matching flat data.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidShape(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        mem::on_alloc(data.len() * 8);
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        mem::on_alloc(numel * 8);
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        mem::on_alloc(numel * 8);
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        mem::on_alloc(8);
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|i| f(i)).collect();
        mem::on_alloc(numel * 8);
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        mem::on_alloc(n * 8);
        Tensor {
            shape: vec![n],
            data,
        }
    }

    /// 2-D constructor from nested rows; rows must be equal length.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidShape("ragged rows".into()));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::from_vec(vec![r, c], data)
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::InvalidShape(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a 2-D tensor (1 for vectors).
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_fn(&self.shape, |i| f(self.data[i]))
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape_mismatch("zip", &self.shape, &other.shape));
        }
        Ok(Tensor::from_fn(&self.shape, |i| {
            f(self.data[i], other.data[i])
        }))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| c * x)
    }

    /// self + c * other, elementwise.
    pub fn axpy(&self, c: f64, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + c * b)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape_mismatch("dot", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Eager matrix product: [m,k] x [k,n] -> [m,n], or [m,k] x [k] -> [m].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul_raw(
            &self.data,
            &self.shape,
            &other.data,
            &other.shape,
            "matmul",
        )
    }

    /// selfᵀ · other for a 2-D self: [m,k]ᵀ x [m] -> [k], or [m,k]ᵀ x [m,n] -> [k,n].
    pub fn t_matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::InvalidShape(format!(
                "t_matmul needs a matrix, got {:?}",
                self.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        if other.shape[0] != m {
            return Err(Error::shape_mismatch("t_matmul", &self.shape, &other.shape));
        }
        let n = if other.shape.len() == 2 {
            other.shape[1]
        } else {
            1
        };
        let mut out = vec![0.0; k * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[p * n + j] += a * other.data[i * n + j];
                }
            }
        }
        let shape = if other.shape.len() == 2 {
            vec![k, n]
        } else {
            vec![k]
        };
        Tensor::from_vec(shape, out)
    }
}

pub(crate) fn matmul_raw(
    a: &[f64],
    ashape: &[usize],
    b: &[f64],
    bshape: &[usize],
    op: &str,
) -> Result<Tensor> {
    if ashape.len() != 2 {
        return Err(Error::shape_mismatch(op, ashape, bshape));
    }
    let (m, k) = (ashape[0], ashape[1]);
    let vector_rhs = bshape.len() == 1;
    let (bk, n) = if vector_rhs {
        (bshape[0], 1)
    } else if bshape.len() == 2 {
        (bshape[0], bshape[1])
    } else {
        return Err(Error::shape_mismatch(op, ashape, bshape));
    };
    if k != bk {
        return Err(Error::shape_mismatch(op, ashape, bshape));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    let shape = if vector_rhs { vec![m] } else { vec![m, n] };
    Tensor::from_vec(shape, out)
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        mem::on_alloc(self.data.len() * 8);
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
        }
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        mem::on_free(self.data.len() * 8);
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 8 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(
                f,
                "Tensor{:?}[{} elems, |.|={:.3e}]",
                self.shape,
                self.data.len(),
                self.norm_l2()
            )
        }
    }
}

/// L2 norm over a list of tensors viewed as one flat vector.
pub fn global_norm(tensors: &[Tensor]) -> f64 {
    tensors
        .iter()
        .map(|t| t.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Elementwise a + c*b over matching tensor lists.
pub fn axpy_all(a: &[Tensor], c: f64, b: &[Tensor]) -> Result<Vec<Tensor>> {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.axpy(c, y))
        .collect()
}
