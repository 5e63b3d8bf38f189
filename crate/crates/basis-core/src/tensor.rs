//! Dense row-major matrix kernel.
//!
//! Minimal linear algebra for the rest of the crate: products, transposes,
//! Frobenius norms, and signed segment sums. Storage is always `f64`
//! row-major with no broadcasting; every shape coercion is explicit and
//! violations are contract errors, not silent adjustments.

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DataLength { rows, cols, len: data.len() });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Build from nested row slices; rows must all have the same length.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::InvalidArgument {
                    op: "from_rows",
                    reason: format!("ragged rows: expected {c} columns, got {}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Matrix::new(r, c, data)
    }

    /// Standard-normal entries scaled by `std`.
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        Matrix::from_fn(rows, cols, |_, _| rng.next_normal() * std)
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Standard matrix product `self * rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape("matmul", self.shape(), rhs.shape()));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        // i-k-j order: the inner loop walks contiguous rows of rhs and out.
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// (i, j) -> (j, i); `m.transposed().transposed() == m`.
    pub fn transposed(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// sqrt of the sum of squared entries; 0 iff all entries are zero.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("add", self.shape(), rhs.shape()));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn add_in_place(&mut self, rhs: &Matrix) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("add_in_place", self.shape(), rhs.shape()));
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("sub", self.shape(), rhs.shape()));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Round every entry through 32-bit precision (the reduced-precision
    /// training option; accumulation upstream stays 64-bit).
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    /// Largest absolute entrywise difference to `rhs`.
    pub fn max_abs_diff(&self, rhs: &Matrix) -> f64 {
        debug_assert_eq!(self.shape(), rhs.shape());
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `||self - rhs||_F / max(||rhs||_F, floor)`.
    pub fn rel_frobenius_diff(&self, rhs: &Matrix) -> f64 {
        debug_assert_eq!(self.shape(), rhs.shape());
        let diff: f64 = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        diff / rhs.frobenius_norm().max(1e-300)
    }
}

/// Row `r` of the output is the signed sum of the rows of `x` assigned to
/// bin `r`: `out[r, :] = sum over b with bins[b] == r of signs[b] * x[b, :]`.
/// Bins with no members stay zero.
pub fn signed_segment_sum(
    x: &Matrix,
    bins: &[usize],
    signs: &[f64],
    r_bins: usize,
) -> Result<Matrix> {
    if bins.len() != x.rows() || signs.len() != x.rows() {
        return Err(Error::InvalidArgument {
            op: "signed_segment_sum",
            reason: format!(
                "bins ({}) and signs ({}) must match row count {}",
                bins.len(),
                signs.len(),
                x.rows()
            ),
        });
    }
    if r_bins == 0 {
        return Err(Error::InvalidArgument {
            op: "signed_segment_sum",
            reason: "r_bins must be positive".into(),
        });
    }
    let mut out = Matrix::zeros(r_bins, x.cols());
    for (b, (&bin, &sign)) in bins.iter().zip(signs).enumerate() {
        if bin >= r_bins {
            return Err(Error::BinOutOfRange { bin, r_bins });
        }
        debug_assert!(sign == 1.0 || sign == -1.0);
        let src = x.row(b);
        let dst = out.row_mut(bin);
        if sign == 1.0 {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        } else {
            for (d, s) in dst.iter_mut().zip(src) {
                *d -= s;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        Matrix::random_normal(rows, cols, 1.0, &mut rng)
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Matrix::new(2, 3, vec![0.0; 5]).is_err());
        assert!(Matrix::new(2, 3, vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_identity_is_noop() {
        let m = random_matrix(3, 3, 1);
        let out = Matrix::identity(3).matmul(&m).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn matmul_zeros_gives_zeros() {
        let z = Matrix::zeros(2, 3);
        let m = random_matrix(3, 4, 2);
        assert_eq!(z.matmul(&m).unwrap(), Matrix::zeros(2, 4));
    }

    #[test]
    fn matmul_hand_example() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[&[5.0], &[6.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c, Matrix::from_rows(&[&[17.0], &[39.0]]).unwrap());
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("4x2"), "{err}");
    }

    #[test]
    fn matmul_associativity() {
        let a = random_matrix(4, 5, 3);
        let b = random_matrix(5, 6, 4);
        let c = random_matrix(6, 3, 5);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        assert!(left.rel_frobenius_diff(&right) < 1e-10);
    }

    #[test]
    fn transpose_is_involution() {
        let m = random_matrix(3, 7, 6);
        assert_eq!(m.transposed().transposed(), m);
    }

    #[test]
    fn transpose_row_to_column() {
        let row = Matrix::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap();
        let col = row.transposed();
        assert_eq!(col.shape(), (3, 1));
        assert_eq!(col.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn transpose_hand_example() {
        let m = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let t = Matrix::from_rows(&[&[1.0, 3.0], &[2.0, 4.0]]).unwrap();
        assert_eq!(m.transposed(), t);
    }

    #[test]
    fn frobenius_norm_cases() {
        assert_eq!(Matrix::zeros(4, 4).frobenius_norm(), 0.0);
        let m = Matrix::from_rows(&[&[3.0, 4.0]]).unwrap();
        assert_eq!(m.frobenius_norm(), 5.0);
    }

    #[test]
    fn frobenius_norm_homogeneity() {
        let m = random_matrix(5, 5, 7);
        let c = -2.5;
        let lhs = m.scaled(c).frobenius_norm();
        let rhs = c.abs() * m.frobenius_norm();
        assert!((lhs - rhs).abs() <= 1e-12 * rhs);
    }

    #[test]
    fn segment_sum_permutation_of_rows() {
        // B == R with a permutation and +1 signs: output is a row permutation.
        let x = random_matrix(4, 3, 8);
        let bins = [2usize, 0, 3, 1];
        let signs = [1.0; 4];
        let out = signed_segment_sum(&x, &bins, &signs, 4).unwrap();
        for (b, &bin) in bins.iter().enumerate() {
            assert_eq!(out.row(bin), x.row(b));
        }
    }

    #[test]
    fn segment_sum_zero_input() {
        let x = Matrix::zeros(5, 2);
        let bins = [0usize, 1, 0, 1, 0];
        let signs = [1.0, -1.0, 1.0, -1.0, 1.0];
        assert_eq!(signed_segment_sum(&x, &bins, &signs, 2).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn segment_sum_manual_example() {
        // B=2 rows into one bin with signs [+1, -1].
        let x = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let out = signed_segment_sum(&x, &[0, 0], &[1.0, -1.0], 1).unwrap();
        assert_eq!(out, Matrix::from_rows(&[&[-2.0, -2.0]]).unwrap());
    }

    #[test]
    fn segment_sum_identity_bins_is_exact_identity() {
        let x = random_matrix(6, 5, 9);
        let bins: Vec<usize> = (0..6).collect();
        let signs = vec![1.0; 6];
        let out = signed_segment_sum(&x, &bins, &signs, 6).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn segment_sum_signed_permutation_preserves_norm() {
        let x = random_matrix(6, 4, 10);
        let bins = [3usize, 1, 5, 0, 2, 4];
        let signs = [1.0, -1.0, -1.0, 1.0, -1.0, 1.0];
        let out = signed_segment_sum(&x, &bins, &signs, 6).unwrap();
        let (a, b) = (out.frobenius_norm(), x.frobenius_norm());
        assert!((a - b).abs() <= 1e-12 * b);
    }

    #[test]
    fn segment_sum_rejects_out_of_range_bin() {
        let x = Matrix::zeros(2, 2);
        let err = signed_segment_sum(&x, &[0, 2], &[1.0, 1.0], 2).unwrap_err();
        assert!(matches!(err, Error::BinOutOfRange { bin: 2, r_bins: 2 }));
    }

    #[test]
    fn f32_rounding_quantizes() {
        let mut m = Matrix::from_rows(&[&[0.1, 1.0 + 1e-12]]).unwrap();
        m.round_to_f32();
        assert_eq!(m.get(0, 0), 0.1f32 as f64);
        assert_eq!(m.get(0, 1), 1.0);
    }
}
