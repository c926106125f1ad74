//! Dense row-major matrices and mixed-precision matrix multiplication.
//!
//! A mixed-precision product quantizes both operands element-wise and then
//! multiplies them with full f64 accumulation, which is what a low-precision
//! multiplier feeding a wide accumulator computes.

use std::fmt;

use crate::error::{Error, Result};
use crate::quant::{Quantizer, ThresholdStream};

#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            for c in 0..self.cols {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{}", self[(r, c)])?;
            }
        }
        write!(f, "]")
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dim(format!("empty shape {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "entry ({}, {}) = {}",
                i / cols,
                i % cols,
                data[i]
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dim("ragged rows".to_string()));
        }
        Self::from_vec(r, c, rows.concat())
    }

    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Self::from_vec(1, values.len(), values.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Mat {
        self.map(|v| v * k)
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        self.zip(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        self.zip(other, |a, b| a + b)
    }

    fn zip(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += k * other`.
    pub fn axpy(&mut self, k: f64, other: &Mat) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Exact (f64-accumulated) product.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return Err(Error::dim(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Quantize every entry of `m` in row-major order, drawing a fresh threshold
/// per element when the policy is SR.
pub fn quantize_mat(m: &Mat, q: &Quantizer, stream: &mut ThresholdStream) -> Result<Mat> {
    if q.is_passthrough() {
        return Ok(m.clone());
    }
    let mut data = Vec::with_capacity(m.data.len());
    for (i, &v) in m.data.iter().enumerate() {
        let v = q.apply(v, stream).map_err(|e| Error::Element {
            row: i / m.cols,
            col: i % m.cols,
            source: Box::new(e),
        })?;
        data.push(v);
    }
    Ok(Mat {
        rows: m.rows,
        cols: m.cols,
        data,
    })
}

/// Element-wise stochastic rounding of a matrix.
pub fn sr_matrix(
    m: &Mat,
    grid: &crate::quant::QuantGrid,
    stream: &mut ThresholdStream,
) -> Result<Mat> {
    quantize_mat(m, &Quantizer::sr(*grid), stream)
}

/// `quantize(a) * quantize(b)` with f64 accumulation. `a` is quantized in
/// full before `b`, both from the same stream.
pub fn mp_matmul(
    a: &Mat,
    b: &Mat,
    qa: &Quantizer,
    qb: &Quantizer,
    stream: &mut ThresholdStream,
) -> Result<Mat> {
    if a.cols != b.rows {
        return Err(Error::dim(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let a_hat = quantize_mat(a, qa, stream)?;
    let b_hat = quantize_mat(b, qb, stream)?;
    matmul(&a_hat, &b_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{QuantGrid, RoundingPolicy};

    fn m(rows: &[&[f64]]) -> Mat {
        Mat::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let b = m(&[&[1.0, 2.0], &[3.0, -4.0]]);
        assert_eq!(matmul(&Mat::identity(2), &b).unwrap(), b);
        assert_eq!(
            matmul(&m(&[&[1.0, 2.0], &[3.0, 4.0]]), &m(&[&[1.0], &[1.0]])).unwrap(),
            m(&[&[3.0], &[7.0]])
        );
        assert_eq!(matmul(&b, &Mat::zeros(2, 3)).unwrap(), Mat::zeros(2, 3));
        assert!(matches!(
            matmul(&b, &Mat::zeros(3, 1)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(Mat::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Mat::from_vec(1, 1, vec![f64::NAN]).is_err());
        assert!(Mat::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn transpose_round_trip() {
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        assert_eq!(a.transpose().shape(), (3, 2));
        assert_eq!(a.transpose()[(2, 1)], 6.0);
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn mp_matmul_identity_knobs_is_exact() {
        let a = m(&[&[0.3, -1.7], &[2.2, 0.01]]);
        let b = m(&[&[1.1], &[-0.9]]);
        let mut s = ThresholdStream::seeded(1);
        let exact = matmul(&a, &b).unwrap();
        let mp = mp_matmul(&a, &b, &Quantizer::IDENTITY, &Quantizer::IDENTITY, &mut s).unwrap();
        assert_eq!(
            exact.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            mp.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn mp_matmul_rtn_ties() {
        let g = QuantGrid::uniform(1.0).unwrap();
        let q = Quantizer::rtn(g);
        let mut s = ThresholdStream::seeded(1);
        let out = mp_matmul(&m(&[&[0.5]]), &m(&[&[0.5]]), &q, &q, &mut s).unwrap();
        assert_eq!(out, m(&[&[1.0]]));
    }

    #[test]
    fn mp_matmul_on_grid_inputs_is_exact() {
        let g = QuantGrid::uniform(0.25).unwrap();
        let q = Quantizer::sr(g);
        let a = m(&[&[0.25, -1.5], &[2.0, 0.75]]);
        let b = m(&[&[1.25, 0.5], &[-0.25, 3.0]]);
        let mut s = ThresholdStream::seeded(9);
        assert_eq!(mp_matmul(&a, &b, &q, &q, &mut s).unwrap(), matmul(&a, &b).unwrap());
        // One threshold per element of both operands.
        assert_eq!(s.draws(), 8);
    }

    #[test]
    fn sr_matrix_row_major_draw_order() {
        let g = QuantGrid::uniform(1.0).unwrap();
        let x = m(&[&[0.5, 0.25], &[0.75, 0.1]]);
        let mut a = ThresholdStream::seeded(77);
        let got = sr_matrix(&x, &g, &mut a).unwrap();
        let mut b = ThresholdStream::seeded(77);
        for (i, &v) in x.as_slice().iter().enumerate() {
            let eps = b.next_eps();
            let want = crate::quant::threshold_quantize(v, &g, eps).unwrap();
            assert_eq!(got.as_slice()[i], want);
        }
    }

    #[test]
    fn sr_matrix_on_grid_identity() {
        let g = QuantGrid::uniform(1.0).unwrap();
        let x = m(&[&[1.0, -2.0], &[0.0, 5.0]]);
        let mut s = ThresholdStream::seeded(0);
        assert_eq!(sr_matrix(&x, &g, &mut s).unwrap(), x);
    }

    #[test]
    fn quantize_reports_element_location() {
        // Bypass the constructor to plant a non-finite entry.
        let bad = Mat {
            rows: 2,
            cols: 2,
            data: vec![0.0, 1.0, f64::NAN, 2.0],
        };
        let mut s = ThresholdStream::seeded(0);
        let q = Quantizer::new(QuantGrid::uniform(1.0).unwrap(), RoundingPolicy::Rtn);
        match quantize_mat(&bad, &q, &mut s) {
            Err(Error::Element { row: 1, col: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rtn_product_error_within_expansion_bound() {
        // |AB - ÂB̂| <= sum_k |A_ik| dB/2 + |B_kj| dA/2 + dA dB / 4.
        let da = 0.5;
        let db = 0.25;
        let qa = Quantizer::rtn(QuantGrid::uniform(da).unwrap());
        let qb = Quantizer::rtn(QuantGrid::uniform(db).unwrap());
        let a = m(&[&[0.33, -1.12, 2.71], &[0.9, 0.05, -0.6]]);
        let b = m(&[&[1.3, -0.2], &[0.77, 0.4], &[-2.1, 0.11]]);
        let mut s = ThresholdStream::seeded(0);
        let approx = mp_matmul(&a, &b, &qa, &qb, &mut s).unwrap();
        let exact = matmul(&a, &b).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let bound: f64 = (0..3)
                    .map(|k| a[(i, k)].abs() * db / 2.0 + b[(k, j)].abs() * da / 2.0 + da * db / 4.0)
                    .sum();
                assert!((approx[(i, j)] - exact[(i, j)]).abs() <= bound);
            }
        }
    }
}
