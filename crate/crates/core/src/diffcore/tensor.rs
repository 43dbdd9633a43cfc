use std::fmt;

use super::DiffError;

/// Dense row-major matrix of `f64` with an optional gradient slot.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &(self.rows, self.cols))
            .field("values", &self.values)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, DiffError> {
        if values.len() != rows * cols {
            return Err(DiffError::Length {
                rows,
                cols,
                len: values.len(),
            });
        }
        Ok(Tensor {
            rows,
            cols,
            values,
            grad: None,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            values: vec![value; rows * cols],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::filled(1, 1, value)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a tensor from nested rows. Panics on ragged input; meant for fixtures.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Tensor {
            rows: rows.len(),
            cols,
            values: rows.iter().flatten().copied().collect(),
            grad: None,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        Tensor {
            rows,
            cols,
            values,
            grad: None,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    /// The scalar value of a 1×1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.values.len(), 1);
        self.values[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<(), DiffError> {
        if grad.len() != self.values.len() {
            return Err(DiffError::Length {
                rows: self.rows,
                cols: self.cols,
                len: grad.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// A copy without the gradient slot.
    pub fn detached(&self) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            values: self.values.clone(),
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, DiffError> {
        if self.cols != other.rows {
            return Err(DiffError::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = vec![0.0; self.rows * other.cols];
        kernels::matmul_into(
            &self.values,
            &other.values,
            &mut out,
            self.rows,
            self.cols,
            other.cols,
        );
        Ok(Tensor {
            rows: self.rows,
            cols: other.cols,
            values: out,
            grad: None,
        })
    }

    pub fn transpose(&self) -> Tensor {
        let mut values = vec![0.0; self.values.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                values[c * self.rows + r] = self.values[r * self.cols + c];
            }
        }
        Tensor {
            rows: self.cols,
            cols: self.rows,
            values,
            grad: None,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    /// Row-wise softmax with the row max subtracted before exponentiation.
    pub fn softmax_rows(&self) -> Tensor {
        let mut values = self.values.clone();
        if self.cols > 0 {
            for row in values.chunks_mut(self.cols) {
                softmax_in_place(row);
            }
        }
        Tensor {
            rows: self.rows,
            cols: self.cols,
            values,
            grad: None,
        }
    }

    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// Rows selected by `indices`, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Tensor {
            rows: indices.len(),
            cols: self.cols,
            values,
            grad: None,
        }
    }

    pub fn vstack(parts: &[&Tensor]) -> Result<Tensor, DiffError> {
        let cols = parts.first().map_or(0, |t| t.cols);
        let mut values = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(DiffError::Shape {
                    op: "concat_rows",
                    left: (rows, cols),
                    right: p.shape(),
                });
            }
            rows += p.rows;
            values.extend_from_slice(&p.values);
        }
        Ok(Tensor {
            rows,
            cols,
            values,
            grad: None,
        })
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Dense matmul kernels. The parallel path splits the output by rows so every
/// element is accumulated in the same order as the sequential path.
pub mod kernels {
    #[cfg(feature = "parallel")]
    use rayon::prelude::*;

    /// Below this many multiply-adds the sequential kernel is always used.
    pub const PARALLEL_THRESHOLD: usize = 1 << 15;

    #[inline]
    fn row_kernel(a_row: &[f64], b: &[f64], out_row: &mut [f64], n: usize) {
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }

    /// `out += a(m×k) · b(k×n)`, single-threaded.
    pub fn matmul_into_seq(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(out.len(), m * n);
        if n == 0 || k == 0 {
            return;
        }
        for (a_row, out_row) in a.chunks(k).zip(out.chunks_mut(n)) {
            row_kernel(a_row, b, out_row, n);
        }
    }

    /// `out += a(m×k) · b(k×n)`, rows distributed over the rayon pool.
    #[cfg(feature = "parallel")]
    pub fn matmul_into_par(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(out.len(), m * n);
        if n == 0 || k == 0 {
            return;
        }
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(out_row, a_row)| row_kernel(a_row, b, out_row, n));
    }

    pub fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        #[cfg(feature = "parallel")]
        if m * k * n >= PARALLEL_THRESHOLD && m > 1 {
            matmul_into_par(a, b, out, m, k, n);
            return;
        }
        matmul_into_seq(a, b, out, m, k, n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(matches!(
            Tensor::new(2, 2, vec![1.0; 3]),
            Err(DiffError::Length { .. })
        ));
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let t = Tensor::from_rows(&[vec![1000.0, 0.0]]);
        let s = t.softmax_rows();
        assert!(s.is_finite());
        assert!((s.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(s.get(0, 1) < 1e-300);
    }

    #[test]
    fn transpose_twice_is_identity() {
        let t = Tensor::from_fn(3, 5, |r, c| (r * 5 + c) as f64);
        assert_eq!(t.transpose().transpose(), t);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_kernel_matches_sequential_bitwise() {
        let (m, k, n) = (64, 48, 40);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7919) % 97) as f64 / 13.0 - 3.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 104729) % 89) as f64 / 11.0 - 4.0).collect();
        let mut seq = vec![0.0; m * n];
        let mut par = vec![0.0; m * n];
        kernels::matmul_into_seq(&a, &b, &mut seq, m, k, n);
        kernels::matmul_into_par(&a, &b, &mut par, m, k, n);
        assert_eq!(seq, par);
    }
}
