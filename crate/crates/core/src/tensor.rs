//! Dense row-major `f64` tensors and the raw kernels the tape builds on.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};

/// A dense tensor stored row-major with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(alloc::format!("tensor extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector tensor");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Rows and columns when viewed as a matrix: the last extent is the
    /// column count, everything before it folds into rows.
    pub fn as_matrix_dims(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        (self.data.len() / cols, cols)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, cols) = self.as_matrix_dims();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(dim_err(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += other`; shapes must agree.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(dim_err("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs())))
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(dim_err("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(&[m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(dim_err("transpose", &self.shape, &[2]));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(&[c, r], out)
    }

    /// Softmax over the last axis of every row, stabilized by subtracting the
    /// row maximum.
    pub fn softmax_rows(&self) -> Tensor {
        let (rows, cols) = self.as_matrix_dims();
        let mut out = self.data.clone();
        for r in 0..rows {
            softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }
}

/// Softmax of a vector. Outputs are nonnegative and sum to one.
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    if v.is_empty() {
        return Err(dim_err("softmax", v.shape(), &[1]));
    }
    let mut out = v.data().to_vec();
    softmax_in_place(&mut out);
    Tensor::new(v.shape(), out)
}

/// Matrix product, dimension-checked. Free-function form of [`Tensor::matmul`].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.matmul(b)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_bt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn matmul_at_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// 3×3 convolution with zero padding 1 and stride 1.
///
/// `input` is `[c_in, h, w]`, `kernel` is `[c_out, c_in, 3, 3]`; the result
/// is `[c_out, h, w]`.
pub(crate) fn conv3x3(input: &[f64], kernel: &[f64], c_in: usize, c_out: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c_out * h * w];
    for co in 0..c_out {
        let plane = &mut out[co * h * w..(co + 1) * h * w];
        for ci in 0..c_in {
            let src = &input[ci * h * w..(ci + 1) * h * w];
            let k = &kernel[(co * c_in + ci) * 9..(co * c_in + ci + 1) * 9];
            for (ky, krow) in k.chunks_exact(3).enumerate() {
                for (kx, &kv) in krow.iter().enumerate() {
                    if kv == 0.0 {
                        continue;
                    }
                    accumulate_shifted(src, plane, h, w, ky as isize - 1, kx as isize - 1, kv);
                }
            }
        }
    }
    out
}

/// Gradients of [`conv3x3`] with respect to its input and kernel.
pub(crate) fn conv3x3_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut g_in = vec![0.0; c_in * h * w];
    let mut g_k = vec![0.0; c_out * c_in * 9];
    for co in 0..c_out {
        let go = &grad_out[co * h * w..(co + 1) * h * w];
        for ci in 0..c_in {
            let src = &input[ci * h * w..(ci + 1) * h * w];
            let gi = &mut g_in[ci * h * w..(ci + 1) * h * w];
            let base = (co * c_in + ci) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                    g_k[base + ky * 3 + kx] += shifted_dot(src, go, h, w, dy, dx);
                    let kv = kernel[base + ky * 3 + kx];
                    if kv != 0.0 {
                        // out[y,x] += k * in[y+dy, x+dx]  =>  gin[y+dy, x+dx] += k * gout[y,x]
                        accumulate_shifted(go, gi, h, w, -dy, -dx, kv);
                    }
                }
            }
        }
    }
    (g_in, g_k)
}

/// `dst[y,x] += scale * src[y+dy, x+dx]` where the source index is in range.
fn accumulate_shifted(src: &[f64], dst: &mut [f64], h: usize, w: usize, dy: isize, dx: isize, scale: f64) {
    let (y0, y1) = shifted_range(h, dy);
    let (x0, x1) = shifted_range(w, dx);
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let drow = &mut dst[y * w..(y + 1) * w];
        let srow = &src[sy * w..(sy + 1) * w];
        for x in x0..x1 {
            drow[x] += scale * srow[(x as isize + dx) as usize];
        }
    }
}

/// `Σ_{y,x} src[y+dy, x+dx] * g[y,x]` over in-range positions.
fn shifted_dot(src: &[f64], g: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let (y0, y1) = shifted_range(h, dy);
    let (x0, x1) = shifted_range(w, dx);
    let mut acc = 0.0;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        for x in x0..x1 {
            acc += src[sy * w + (x as isize + dx) as usize] * g[y * w + x];
        }
    }
    acc
}

fn shifted_range(n: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { n.saturating_sub(d as usize) } else { n };
    (lo.min(n), hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let i = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(i.matmul(&b).unwrap(), b);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&a).unwrap_err();
        assert_eq!(
            err,
            Error::Dimension {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(alloc::format!("{err}").contains("[2, 3]"));
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&Tensor::vector(vec![0.0; 3])).unwrap();
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&Tensor::vector(vec![core::f64::consts::LN_2, 0.0])).unwrap();
        assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let big = softmax(&Tensor::vector(vec![1000.0, 0.0])).unwrap();
        assert!(big.is_finite());
        assert!((big.data()[0] - 1.0).abs() < 1e-300_f64.max(1e-15));
        assert!(big.data()[1] < 1e-300);
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn conv_identity_kernel() {
        // centre tap 1 copies the input
        let input: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        assert_eq!(conv3x3(&input, &k, 1, 1, 3, 3), input);
        // top-left tap reads the up-left neighbour
        let mut k = vec![0.0; 9];
        k[0] = 1.0;
        let out = conv3x3(&input, &k, 1, 1, 3, 3);
        assert_eq!(out, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 3.0, 4.0]);
    }
}
