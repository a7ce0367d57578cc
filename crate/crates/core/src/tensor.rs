//! Dense row-major `f64` tensors.
//!
//! Storage is a flat vector with no strides or views. Most of the crate works
//! with rank-2 tensors (`rows x cols`); rank-1 tensors hold layer-norm gains
//! and biases.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Filled in by a backward pass when the tensor is a trained parameter.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) || shape.is_empty() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Tensor {
            shape: vec![rows.len(), cols],
            data,
            grad: None,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count, treating a rank-1 tensor as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
            grad: None,
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.cols() != other.rows() {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (p, q, r) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0; p * r];
        matmul_into(&self.data, &other.data, &mut out, p, q, r);
        Ok(Tensor {
            shape: vec![p, r],
            data: out,
            grad: None,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
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
            grad: None,
        })
    }

    /// Columns `start..start + width` as a new matrix.
    pub fn col_block(&self, start: usize, width: usize) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        assert!(start + width <= c, "column block out of range");
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + start + width]);
        }
        Tensor {
            shape: vec![r, width],
            data: out,
            grad: None,
        }
    }

    /// Rows `start..start + height` as a new matrix.
    pub fn row_block(&self, start: usize, height: usize) -> Tensor {
        let c = self.cols();
        assert!(start + height <= self.rows(), "row block out of range");
        Tensor {
            shape: vec![height, c],
            data: self.data[start * c..(start + height) * c].to_vec(),
            grad: None,
        }
    }

    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let rows = parts[0].rows();
        if let Some(bad) = parts.iter().find(|p| p.rows() != rows) {
            return Err(Error::Shape {
                op: "concat_cols",
                left: parts[0].shape.clone(),
                right: bad.shape.clone(),
            });
        }
        let cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                out.extend_from_slice(p.row(i));
            }
        }
        Tensor::matrix(rows, cols, out)
    }

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let cols = parts[0].cols();
        if let Some(bad) = parts.iter().find(|p| p.cols() != cols) {
            return Err(Error::Shape {
                op: "concat_rows",
                left: parts[0].shape.clone(),
                right: bad.shape.clone(),
            });
        }
        let data: Vec<f64> = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        let rows = data.len() / cols;
        Tensor::matrix(rows, cols, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

const TILE_ROWS: usize = 4;
const TILE_COLS: usize = 8;

/// `out[p x r] += a[p x q] * b[q x r]`.
///
/// Register-tiled: each 4x8 output tile is accumulated over `k` in locals and
/// added to `out` once.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    let full_cols = r - r % TILE_COLS;
    let mut i = 0;
    while i + TILE_ROWS <= p {
        let mut j = 0;
        while j < full_cols {
            let mut acc = [[0.0f64; TILE_COLS]; TILE_ROWS];
            for k in 0..q {
                let b_tile: &[f64; TILE_COLS] =
                    b[k * r + j..k * r + j + TILE_COLS].try_into().unwrap();
                for (ii, acc_row) in acc.iter_mut().enumerate() {
                    let aik = a[(i + ii) * q + k];
                    for jj in 0..TILE_COLS {
                        acc_row[jj] += aik * b_tile[jj];
                    }
                }
            }
            for (ii, acc_row) in acc.iter().enumerate() {
                let o = &mut out[(i + ii) * r + j..(i + ii) * r + j + TILE_COLS];
                for jj in 0..TILE_COLS {
                    o[jj] += acc_row[jj];
                }
            }
            j += TILE_COLS;
        }
        for ii in i..i + TILE_ROWS {
            edge_cols(a, b, out, ii, q, r, full_cols);
        }
        i += TILE_ROWS;
    }
    for ii in i..p {
        edge_cols(a, b, out, ii, q, r, 0);
    }
}

fn edge_cols(a: &[f64], b: &[f64], out: &mut [f64], i: usize, q: usize, r: usize, from: usize) {
    if from == r {
        return;
    }
    let out_row = &mut out[i * r + from..(i + 1) * r];
    for k in 0..q {
        let aik = a[i * q + k];
        for (o, &bv) in out_row.iter_mut().zip(&b[k * r + from..(k + 1) * r]) {
            *o += aik * bv;
        }
    }
}

fn transposed(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; m.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = m[i * cols + j];
        }
    }
    t
}

/// `out[p x r] += a[p x q] * b[r x q]^T`.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    matmul_into(a, &transposed(b, r, q), out, p, q, r);
}

/// `out[q x r] += a[p x q]^T * b[p x r]`.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    matmul_into(&transposed(a, p, q), b, out, q, p, r);
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators keep the loop vectorizable without reordering across runs.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn identity_matmul() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = RngStream::new(7, 0);
        let a = rng.uniform_tensor(&[3, 4], -1.0, 1.0);
        let b = rng.uniform_tensor(&[4, 5], -1.0, 1.0);
        let c = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - s).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        assert_eq!(
            err,
            Error::Shape {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn rejects_inconsistent_data_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn blocks_round_trip() {
        let mut rng = RngStream::new(1, 0);
        let t = rng.uniform_tensor(&[4, 6], -1.0, 1.0);
        let cols: Vec<_> = (0..3).map(|i| t.col_block(2 * i, 2)).collect();
        assert_eq!(Tensor::concat_cols(&cols).unwrap(), t);
        let rows: Vec<_> = (0..2).map(|i| t.row_block(2 * i, 2)).collect();
        assert_eq!(Tensor::concat_rows(&rows).unwrap(), t);
    }

    #[test]
    fn transposed_kernels_agree_with_explicit_transpose() {
        let mut rng = RngStream::new(3, 0);
        let a = rng.uniform_tensor(&[3, 4], -1.0, 1.0);
        let b = rng.uniform_tensor(&[5, 4], -1.0, 1.0);
        let mut out = vec![0.0; 15];
        matmul_nt_into(a.data(), b.data(), &mut out, 3, 4, 5);
        let want = a.matmul(&b.transpose()).unwrap();
        assert!(Tensor::matrix(3, 5, out).unwrap().max_abs_diff(&want) < 1e-14);

        let c = rng.uniform_tensor(&[3, 5], -1.0, 1.0);
        let mut out = vec![0.0; 20];
        matmul_tn_into(a.data(), c.data(), &mut out, 3, 4, 5);
        let want = a.transpose().matmul(&c).unwrap();
        assert!(Tensor::matrix(4, 5, out).unwrap().max_abs_diff(&want) < 1e-14);
    }
}
