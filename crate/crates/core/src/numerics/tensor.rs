//! Dense row-major `f64` tensor.
//!
//! The tensor is deliberately small: it carries a shape and a flat buffer and
//! implements only the operations the estimators, attention kernels and the
//! autodiff tape need. Reductions always run left to right so results are
//! reproducible bit for bit.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Magic bytes opening every serialized tensor.
pub const TENSOR_MAGIC: &[u8; 4] = b"FTNS";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {expected} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
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
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
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

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Number of rows when viewed as a matrix. Vectors count as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Number of columns when viewed as a matrix (the trailing extent).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let c = self.cols();
        self.data[i * c + j] = value;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    fn require_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    fn require_matrix(&self, what: &str) -> Result<()> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "{what} expects a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.require_same_shape(other, "elementwise op")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    /// In-place `self += other`.
    pub fn accumulate(&mut self, other: &Tensor) -> Result<()> {
        self.require_same_shape(other, "accumulate")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.require_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        self.require_matrix("transpose")?;
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }

    /// Selects a contiguous block of rows.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        self.require_matrix("slice_rows")?;
        if start > end || end > self.shape[0] {
            return Err(Error::Dimension(format!(
                "row range {start}..{end} out of bounds for {} rows",
                self.shape[0]
            )));
        }
        let c = self.shape[1];
        Ok(Tensor {
            shape: vec![end - start, c],
            data: self.data[start * c..end * c].to_vec(),
        })
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let m = first.rows();
        for p in parts {
            p.require_matrix("concat_cols")?;
            if p.rows() != m {
                return Err(Error::Dimension(format!(
                    "concat_cols row mismatch: {} vs {m}",
                    p.rows()
                )));
            }
        }
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Tensor {
            shape: vec![m, total],
            data,
        })
    }

    /// Writes the binary form: magic, `u32` rank, `u64` extents, then the
    /// payload as little-endian `f64`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let rank = u32::from_le_bytes(b4) as usize;
        if rank > 16 {
            return Err(Error::Format(format!("rank {rank} is implausible")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut b8 = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut b8)?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        Tensor::new(shape, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(8 + 8 * self.shape.len() + 8 * self.data.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// CSV export: one line per row; rank-1 tensors become a single line.
    pub fn to_csv(&self) -> String {
        let c = self.cols().max(1);
        let mut out = String::new();
        for row in self.data.chunks(c) {
            let line: Vec<String> = row.iter().map(|x| format!("{x:e}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Matrix product with a fixed accumulation order: every output element sums
/// its `K` products from `k = 0` upwards.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.require_matrix("matmul lhs")?;
    b.require_matrix("matmul rhs")?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, p) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions disagree: {m}x{k} * {k2}x{p}"
        )));
    }
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        let arow = &a.data[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b.data[kk * p..(kk + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, p],
        data: out,
    })
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.require_matrix("matmul_nt lhs")?;
    b.require_matrix("matmul_nt rhs")?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (p, k2) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul_nt inner dimensions disagree: {m}x{k} * ({p}x{k2})^T"
        )));
    }
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..p {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * p + j] = dot(arow, brow);
        }
    }
    Ok(Tensor {
        shape: vec![m, p],
        data: out,
    })
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.require_matrix("matmul_tn lhs")?;
    b.require_matrix("matmul_tn rhs")?;
    let (k, m) = (a.shape[0], a.shape[1]);
    let (k2, p) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul_tn inner dimensions disagree: ({k}x{m})^T * {k2}x{p}"
        )));
    }
    let mut out = vec![0.0; m * p];
    for kk in 0..k {
        let arow = &a.data[kk * m..(kk + 1) * m];
        let brow = &b.data[kk * p..(kk + 1) * p];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * p..(i + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, p],
        data: out,
    })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable `ln Σ exp(xᵢ)`. Returns `-inf` when every entry is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax of one row in place. `-inf` entries become exact zeros.
pub(crate) fn softmax_in_place(row: &mut [f64]) -> bool {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return false;
    }
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = if *x == f64::NEG_INFINITY {
            0.0
        } else {
            (*x - m).exp()
        };
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
    true
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    x.require_matrix("softmax_rows")?;
    let mut out = x.clone();
    for i in 0..out.rows() {
        if !softmax_in_place(out.row_mut(i)) {
            return Err(Error::DegenerateRow { row: i });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);
    }

    #[test]
    fn projector_matmul() {
        let p = Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[[5.0, 6.0], [7.0, 8.0]]).unwrap();
        let expected = Tensor::from_rows(&[[5.0, 6.0], [0.0, 0.0]]).unwrap();
        assert_eq!(matmul(&p, &b).unwrap(), expected);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn transposed_products_agree() {
        let a = Tensor::from_rows(&[[1.0, -2.0, 0.5], [3.0, 0.25, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[[2.0, 1.0, -1.0], [0.0, 3.0, 5.0]]).unwrap();
        let nt = matmul_nt(&a, &b).unwrap();
        assert_eq!(nt, matmul(&a, &b.transpose().unwrap()).unwrap());
        let tn = matmul_tn(&a, &b).unwrap();
        assert_eq!(tn, matmul(&a.transpose().unwrap(), &b).unwrap());
    }

    #[test]
    fn softmax_uniform_row() {
        let s = softmax_rows(&Tensor::from_rows(&[[0.0, 0.0, 0.0]]).unwrap()).unwrap();
        for &p in s.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_masked_entry_is_exact_zero() {
        let s = softmax_rows(&Tensor::from_rows(&[[f64::NEG_INFINITY, 0.0]]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_of_logs_recovers_proportions() {
        let row = [1f64.ln(), 2f64.ln(), 3f64.ln()];
        let s = softmax_rows(&Tensor::from_rows(&[row]).unwrap()).unwrap();
        // direct exponentiation
        let e: Vec<f64> = row.iter().map(|x| x.exp()).collect();
        let z: f64 = e.iter().sum();
        for (p, q) in s.data().iter().zip(&e) {
            assert!((p - q / z).abs() < 1e-15);
        }
        assert!((s.data()[0] - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_all_masked_row_is_degenerate() {
        let x = Tensor::from_rows(&[[0.0, 1.0], [f64::NEG_INFINITY, f64::NEG_INFINITY]]).unwrap();
        assert!(matches!(softmax_rows(&x), Err(Error::DegenerateRow { row: 1 })));
    }

    #[test]
    fn binary_format_is_little_endian_with_header() {
        let t = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], TENSOR_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(bytes[24..32].try_into().unwrap()), 1.0);
        assert_eq!(Tensor::read_from(&bytes[..]).unwrap(), t);
    }

    #[test]
    fn truncated_stream_is_rejected() {
        let bytes = Tensor::vector(vec![1.0, 2.0, 3.0]).to_bytes();
        assert!(Tensor::read_from(&bytes[..bytes.len() - 3]).is_err());
        assert!(matches!(Tensor::read_from(&b"NOPE"[..]), Err(Error::Format(_))));
    }

    #[test]
    fn csv_export_has_one_line_per_row() {
        let t = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.5]]).unwrap();
        assert_eq!(t.to_csv(), "1e0,2e0\n3e0,4.5e0\n");
    }

    #[test]
    fn new_rejects_inconsistent_buffer() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
