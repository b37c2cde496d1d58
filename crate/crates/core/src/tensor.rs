//! Dense row-major `f64` tensors and the raw kernels the autodiff layer is
//! built on.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Constructor for internal call sites where the length is known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "shape {shape:?}");
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn linf_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Size of one item along the leading (batch) axis.
    pub fn row_len(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn batch_len(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Rows `indices` of the leading axis, stacked in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let row = self.row_len();
        let mut data = Vec::with_capacity(row * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self { shape, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let row = self.row_len();
        &self.data[i * row..(i + 1) * row]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let row = self.row_len();
        &mut self.data[i * row..(i + 1) * row]
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(format!(
                    "stack: {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("cannot concatenate zero tensors"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::shape(format!(
                    "concat: {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
            rows += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Self { shape, data })
    }

    pub fn transpose2(&self) -> Self {
        assert_eq!(self.shape.len(), 2, "transpose2 needs a matrix");
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data,
        }
    }
}

/// `a[m,k] · b[k,n]`, optionally reading either operand transposed.
pub(crate) fn gemm(
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 {
        return c;
    }
    // Row/column strides of the logical (untransposed) operands.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slices are sized m*k, k*n and m*n; strides stay within bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Shape-aware strides for broadcasting `from` (same rank, dims 1 or equal)
/// into `to`.
fn broadcast_strides(from: &[usize], to: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; from.len()];
    let mut acc = 1;
    for i in (0..from.len()).rev() {
        strides[i] = if from[i] == 1 && to[i] != 1 { 0 } else { acc };
        acc *= from[i];
    }
    strides
}

pub(crate) fn broadcast_compatible(from: &[usize], to: &[usize]) -> bool {
    from.len() == to.len() && from.iter().zip(to).all(|(&f, &t)| f == t || f == 1)
}

/// Iterates the row-major index space of `to`, yielding source offsets.
fn for_each_broadcast(from: &[usize], to: &[usize], mut f: impl FnMut(usize, usize)) {
    let strides = broadcast_strides(from, to);
    let rank = to.len();
    let total = numel(to);
    if rank == 0 {
        if total == 1 {
            f(0, 0);
        }
        return;
    }
    let inner = to[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut out = 0;
    while out < total {
        let base: usize = idx[..rank - 1]
            .iter()
            .zip(&strides[..rank - 1])
            .map(|(i, s)| i * s)
            .sum();
        for j in 0..inner {
            f(out + j, base + j * inner_stride);
        }
        out += inner;
        // Advance the outer multi-index.
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            if idx[d] < to[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_to(t: &Tensor, to: &[usize]) -> Tensor {
    let mut data = vec![0.0; numel(to)];
    for_each_broadcast(&t.shape, to, |o, s| data[o] = t.data[s]);
    Tensor::from_parts(to.to_vec(), data)
}

pub(crate) fn sum_to(t: &Tensor, to: &[usize]) -> Tensor {
    let mut data = vec![0.0; numel(to)];
    for_each_broadcast(to, &t.shape, |o, s| data[s] += t.data[o]);
    Tensor::from_parts(to.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let c = gemm(&a, false, &b, false, 2, 3, 4);
        let mut naive = vec![0.0; 8];
        for i in 0..2 {
            for j in 0..4 {
                for p in 0..3 {
                    naive[i * 4 + j] += a[i * 3 + p] * b[p * 4 + j];
                }
            }
        }
        assert_eq!(c, naive);
        let at = Tensor::from_parts(vec![2, 3], a.clone()).transpose2();
        let bt = Tensor::from_parts(vec![3, 4], b.clone()).transpose2();
        assert_eq!(gemm(at.data(), true, bt.data(), true, 2, 3, 4), naive);
    }

    #[test]
    fn broadcast_and_sum_are_adjoint() {
        let bias = Tensor::from_parts(vec![1, 3, 1, 1], vec![1.0, 2.0, 3.0]);
        let full = broadcast_to(&bias, &[2, 3, 2, 2]);
        assert_eq!(full.data()[0..4], [1.0; 4]);
        assert_eq!(full.data()[4..8], [2.0; 4]);
        assert_eq!(full.data()[12..16], [1.0; 4]);
        let back = sum_to(&full, &[1, 3, 1, 1]);
        assert_eq!(back.data(), &[8.0, 16.0, 24.0]);
    }

    #[test]
    fn select_rows_keeps_order() {
        let t = Tensor::from_parts(vec![3, 2], vec![0., 1., 2., 3., 4., 5.]);
        let s = t.select_rows(&[2, 0]);
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[4., 5., 0., 1.]);
    }
}
