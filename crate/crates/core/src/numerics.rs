//! Dense complex matrices, SVD-based pseudoinverse and STFT-domain
//! covariance estimation.

use std::ops::{Index, IndexMut, Range};

use faer::Mat;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::signal::Spectrogram;

/// Default relative singular-value cutoff for pseudoinversion.
pub const DEFAULT_RCOND: f64 = 1e-10;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Row-major dense complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "{} entries given for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::invalid("matrix entries must be finite"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = Complex64::new(*v, 0.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[Complex64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<Complex64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    pub fn matmul(&self, rhs: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!(self.cols, rhs.rows, "matmul dimension mismatch");
        let mut out = Self::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * rhs.cols..(r + 1) * rhs.cols];
            for (k, a) in self.row(r).iter().enumerate() {
                if *a == ZERO {
                    continue;
                }
                for (o, b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * x` for a column vector `x`.
    pub fn mul_vec(&self, x: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(self.cols, x.len(), "matrix-vector dimension mismatch");
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn sub(&self, rhs: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn scaled(&self, k: Complex64) -> ComplexMatrix {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * k).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.norm()))
    }

    /// Columns at `indices`, in order.
    pub fn select_columns(&self, indices: &[usize]) -> ComplexMatrix {
        Self::from_fn(self.rows, indices.len(), |r, c| self[(r, indices[c])])
    }

    fn to_faer(&self) -> Mat<Complex64> {
        Mat::from_fn(self.rows, self.cols, |r, c| self[(r, c)])
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = Complex64;

    fn index(&self, (r, c): (usize, usize)) -> &Complex64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut Complex64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Thin singular value decomposition `M = U diag(s) V^H`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: ComplexMatrix,
    pub singular_values: Vec<f64>,
    pub v_adjoint: ComplexMatrix,
}

impl Svd {
    pub fn new(m: &ComplexMatrix) -> Result<Self> {
        if m.is_empty() {
            return Err(Error::invalid("cannot decompose an empty matrix"));
        }
        if !m.is_finite() {
            return Err(Error::NumericalFailure {
                bin: None,
                reason: "matrix has non-finite entries".into(),
            });
        }
        let svd = m.to_faer().thin_svd().map_err(|e| Error::NumericalFailure {
            bin: None,
            reason: format!("SVD of {}x{} matrix failed: {e:?}", m.rows, m.cols),
        })?;
        let (u, s, v) = (svd.U(), svd.S(), svd.V());
        let k = s.dim();
        Ok(Self {
            u: ComplexMatrix::from_fn(m.rows, k, |r, c| u[(r, c)]),
            singular_values: (0..k).map(|i| s[i].re).collect(),
            v_adjoint: ComplexMatrix::from_fn(k, m.cols, |r, c| v[(c, r)].conj()),
        })
    }

    pub fn max_singular_value(&self) -> f64 {
        self.singular_values.iter().fold(0.0, |m, s| m.max(*s))
    }

    pub fn min_singular_value(&self) -> f64 {
        self.singular_values
            .iter()
            .fold(f64::INFINITY, |m, s| m.min(*s))
    }

    /// `sigma_max / sigma_min`. Singular values at or below the numerical
    /// rank tolerance `sigma_max * eps * max(rows, cols)` count as zero and
    /// give `f64::INFINITY`.
    pub fn condition_number(&self) -> f64 {
        let max = self.max_singular_value();
        let min = self.min_singular_value();
        let dim = self.u.rows().max(self.v_adjoint.cols()) as f64;
        if max == 0.0 || min <= max * f64::EPSILON * dim {
            f64::INFINITY
        } else {
            max / min
        }
    }

    /// Condition number restricted to the singular values kept by a
    /// pseudoinverse with cutoff `rcond`. Infinite when nothing is kept.
    pub fn truncated_condition_number(&self, rcond: f64) -> f64 {
        let max = self.max_singular_value();
        if max == 0.0 {
            return f64::INFINITY;
        }
        let min_kept = self
            .singular_values
            .iter()
            .copied()
            .filter(|s| *s > rcond * max)
            .fold(f64::INFINITY, f64::min);
        max / min_kept
    }

    /// Number of singular values above `rcond * sigma_max`.
    pub fn rank(&self, rcond: f64) -> usize {
        let max = self.max_singular_value();
        self.singular_values
            .iter()
            .filter(|s| max > 0.0 && **s > rcond * max)
            .count()
    }

    /// `V diag(1/s) U^H` over the singular values above `rcond * sigma_max`.
    pub fn pseudoinverse(&self, rcond: f64) -> ComplexMatrix {
        let rows = self.v_adjoint.cols();
        let cols = self.u.rows();
        let max = self.max_singular_value();
        let mut out = ComplexMatrix::zeros(rows, cols);
        if max == 0.0 {
            return out;
        }
        for (k, s) in self.singular_values.iter().enumerate() {
            if *s <= rcond * max {
                continue;
            }
            let inv = 1.0 / s;
            for r in 0..rows {
                let v = self.v_adjoint[(k, r)].conj() * inv;
                for c in 0..cols {
                    out[(r, c)] += v * self.u[(c, k)].conj();
                }
            }
        }
        out
    }
}

/// Moore-Penrose pseudoinverse with relative truncation: singular values at
/// or below `rcond * sigma_max` are treated as zero.
pub fn pseudoinverse(m: &ComplexMatrix, rcond: f64) -> Result<ComplexMatrix> {
    if !(rcond > 0.0 && rcond < 1.0) {
        return Err(Error::invalid(format!("rcond {rcond} outside (0, 1)")));
    }
    Ok(Svd::new(m)?.pseudoinverse(rcond))
}

/// `sigma_max / sigma_min`, or `f64::INFINITY` for a numerically
/// rank-deficient (or undecomposable) matrix.
pub fn condition_number(m: &ComplexMatrix) -> f64 {
    match Svd::new(m) {
        Ok(svd) => svd.condition_number(),
        Err(_) => f64::INFINITY,
    }
}

/// Second-order statistics of one frequency bin.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariancePair {
    /// `(1/T) sum_t a a^H`, `Q_A x Q_A`.
    pub p_aa: ComplexMatrix,
    /// `(1/T) sum_t b a^H`, `Q_B x Q_A`.
    pub p_ba: ComplexMatrix,
    pub frame_count: usize,
}

pub(crate) fn check_compatible(a: &Spectrogram, b: &Spectrogram) -> Result<()> {
    if a.params() != b.params() || a.bins() != b.bins() || a.frames() != b.frames() {
        return Err(Error::invalid(format!(
            "spectrogram shapes differ: {}x{} vs {}x{} (bins x frames)",
            a.bins(),
            a.frames(),
            b.bins(),
            b.frames()
        )));
    }
    if a.sample_rate_hz() != b.sample_rate_hz() {
        return Err(Error::invalid("spectrogram sample rates differ"));
    }
    Ok(())
}

pub(crate) fn check_frame_range(range: &Range<usize>, frames: usize) -> Result<()> {
    if range.start >= range.end {
        return Err(Error::invalid(format!("empty frame range {range:?}")));
    }
    if range.end > frames {
        return Err(Error::invalid(format!(
            "frame range {range:?} exceeds {frames} frames"
        )));
    }
    Ok(())
}

/// Covariance of a single bin over `frames`.
pub fn bin_covariance(
    spec_a: &Spectrogram,
    spec_b: &Spectrogram,
    bin: usize,
    frames: Range<usize>,
) -> CovariancePair {
    let qa = spec_a.channels();
    let qb = spec_b.channels();
    let mut p_aa = ComplexMatrix::zeros(qa, qa);
    let mut p_ba = ComplexMatrix::zeros(qb, qa);
    let count = frames.len();
    for t in frames {
        let a = spec_a.point(bin, t);
        let b = spec_b.point(bin, t);
        for (i, ai) in a.iter().enumerate() {
            let row = &mut p_aa.data[i * qa..(i + 1) * qa];
            for (dst, aj) in row.iter_mut().zip(a) {
                *dst += ai * aj.conj();
            }
        }
        for (i, bi) in b.iter().enumerate() {
            let row = &mut p_ba.data[i * qa..(i + 1) * qa];
            for (dst, aj) in row.iter_mut().zip(a) {
                *dst += bi * aj.conj();
            }
        }
    }
    let inv = 1.0 / count as f64;
    p_aa.data.iter_mut().for_each(|v| *v *= inv);
    p_ba.data.iter_mut().for_each(|v| *v *= inv);
    CovariancePair {
        p_aa,
        p_ba,
        frame_count: count,
    }
}

/// Per-bin auto- and cross-covariance of two microphone groups, averaged
/// over the frames in `frames`.
pub fn cross_covariance(
    spec_a: &Spectrogram,
    spec_b: &Spectrogram,
    frames: Range<usize>,
) -> Result<Vec<CovariancePair>> {
    check_compatible(spec_a, spec_b)?;
    check_frame_range(&frames, spec_a.frames())?;
    Ok((0..spec_a.bins())
        .map(|bin| bin_covariance(spec_a, spec_b, bin, frames.clone()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::StftParams;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn identity_pinv() {
        let i3 = ComplexMatrix::identity(3);
        let p = pseudoinverse(&i3, DEFAULT_RCOND).unwrap();
        assert!(p.sub(&i3).max_abs() < 1e-15);
    }

    #[test]
    fn rank_deficient_diagonal() {
        let m = ComplexMatrix::diagonal(&[2.0, 0.0]);
        let p = pseudoinverse(&m, DEFAULT_RCOND).unwrap();
        assert!(p.sub(&ComplexMatrix::diagonal(&[0.5, 0.0])).max_abs() < 1e-15);
    }

    #[test]
    fn rcond_bounds() {
        let m = ComplexMatrix::identity(2);
        assert!(pseudoinverse(&m, 0.0).is_err());
        assert!(pseudoinverse(&m, 1.0).is_err());
        assert!(pseudoinverse(&ComplexMatrix::zeros(0, 0), 0.1).is_err());
    }

    #[test]
    fn zero_matrix_pinv_is_zero() {
        let p = pseudoinverse(&ComplexMatrix::zeros(3, 2), DEFAULT_RCOND).unwrap();
        assert_eq!((p.rows(), p.cols()), (2, 3));
        assert_eq!(p.max_abs(), 0.0);
    }

    #[test]
    fn condition_numbers() {
        assert!((condition_number(&ComplexMatrix::identity(4)) - 1.0).abs() < 1e-12);
        assert!((condition_number(&ComplexMatrix::diagonal(&[10.0, 1.0])) - 10.0).abs() < 1e-12);
        let rank1 = ComplexMatrix::from_fn(3, 3, |r, k| c((r + 1) as f64, 0.5) * (k + 1) as f64);
        assert_eq!(condition_number(&rank1), f64::INFINITY);
        assert_eq!(condition_number(&ComplexMatrix::zeros(2, 2)), f64::INFINITY);
    }

    fn spec_from(points: &[Vec<Complex64>], params: StftParams) -> Spectrogram {
        // One bin is enough for these tests: params.fft_len = 2 gives 2 bins,
        // the second is left at zero.
        let channels = points[0].len();
        let frames = points.len();
        let mut s = Spectrogram::zeros(frames, channels, params, 8000, 2);
        for (t, p) in points.iter().enumerate() {
            s.point_mut(0, t).copy_from_slice(p);
        }
        s
    }

    #[test]
    fn single_frame_outer_product() {
        let params = StftParams::new(2).with_hop(1);
        let a = spec_from(&[vec![c(1.0, 0.0), c(0.0, 1.0)]], params);
        let cov = cross_covariance(&a, &a, 0..1).unwrap();
        let expected = ComplexMatrix::from_row_major(
            2,
            2,
            vec![c(1.0, 0.0), c(0.0, -1.0), c(0.0, 1.0), c(1.0, 0.0)],
        )
        .unwrap();
        assert_eq!(cov[0].p_aa, expected);
        assert_eq!(cov[0].frame_count, 1);
        assert_eq!(cov[1].p_aa.max_abs(), 0.0);
    }

    #[test]
    fn covariance_range_errors() {
        let params = StftParams::new(2).with_hop(1);
        let a = spec_from(&[vec![c(1.0, 0.0)], vec![c(2.0, 0.0)]], params);
        assert!(cross_covariance(&a, &a, 1..1).is_err());
        assert!(cross_covariance(&a, &a, 0..3).is_err());
        let b = spec_from(&[vec![c(1.0, 0.0)]], params);
        assert!(cross_covariance(&a, &b, 0..1).is_err());
    }
}
