//! Dense row-major `f64` matrices and the few primitives the model needs.
//!
//! Loops are naive on purpose: the toy model stays below `T = 1024` tokens
//! and `D = 128` features.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::rng::SeededRng;
use crate::{Error, Result};

/// A `rows × cols` matrix of token features. Every entry is finite.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "RawFeatureMap"))]
pub struct FeatureMap {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[cfg(feature = "serde")]
#[derive(serde::Deserialize)]
struct RawFeatureMap {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[cfg(feature = "serde")]
impl TryFrom<RawFeatureMap> for FeatureMap {
    type Error = Error;

    fn try_from(raw: RawFeatureMap) -> Result<Self> {
        FeatureMap::new(raw.rows, raw.cols, raw.data)
    }
}

impl FeatureMap {
    /// Builds a matrix from row-major data, checking shape and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("FeatureMap::new", "rows, cols >= 1", format!("{rows}x{cols}")));
        }
        if rows * cols != data.len() {
            return Err(Error::shape(
                "FeatureMap::new",
                format!("{} values", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("FeatureMap::new"));
        }
        Ok(Self { rows, cols, data })
    }

    /// Constructor for internal results whose finiteness follows from finite inputs.
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("FeatureMap::from_rows", "equal row lengths", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "empty FeatureMap");
        Self::from_parts(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(value.is_finite());
        let mut m = Self::zeros(rows, cols);
        m.data.fill(value);
        m
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Overwrites one row. The values must be finite.
    pub fn set_row(&mut self, r: usize, values: &[f64]) -> Result<()> {
        if values.len() != self.cols {
            return Err(Error::shape("set_row", format!("{}", self.cols), format!("{}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("set_row"));
        }
        self.row_mut(r).copy_from_slice(values);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_parts(self.rows, self.cols, data))
    }

    pub fn transpose(&self) -> Self {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Self::from_parts(self.cols, self.rows, out)
    }

    /// Copies the listed rows, in order, into a new matrix. `indices` must be non-empty.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::Bounds {
                    index: i,
                    len: self.rows,
                });
            }
            data.extend_from_slice(self.row(i));
        }
        if indices.is_empty() {
            return Err(Error::shape("select_rows", "at least one index", "none"));
        }
        Ok(Self::from_parts(indices.len(), self.cols, data))
    }

    /// Columns `start..start + width` as a new matrix.
    pub(crate) fn column_block(&self, start: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Self::from_parts(self.rows, width, data)
    }
}

/// Matrix product `a · b`.
pub fn matmul(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("lhs cols == rhs rows ({})", a.cols),
            format!("{}", b.rows),
        ));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    // i-k-j order keeps the inner loop on contiguous rows; four output rows
    // share each load of a `b` row. Every output element still accumulates
    // over `p` in ascending order.
    let mut blocks = out.chunks_exact_mut(4 * m);
    let mut i = 0;
    for block in &mut blocks {
        let (o0, rest) = block.split_at_mut(m);
        let (o1, rest) = rest.split_at_mut(m);
        let (o2, o3) = rest.split_at_mut(m);
        for p in 0..k {
            let a0 = a.data[i * k + p];
            let a1 = a.data[(i + 1) * k + p];
            let a2 = a.data[(i + 2) * k + p];
            let a3 = a.data[(i + 3) * k + p];
            let b_row = &b.data[p * m..(p + 1) * m];
            for j in 0..m {
                let bv = b_row[j];
                o0[j] += a0 * bv;
                o1[j] += a1 * bv;
                o2[j] += a2 * bv;
                o3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    let tail = blocks.into_remainder();
    for out_row in tail.chunks_exact_mut(m) {
        for p in 0..k {
            let aip = a.data[i * k + p];
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
        i += 1;
    }
    Ok(FeatureMap::from_parts(n, m, out))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &FeatureMap) -> FeatureMap {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Per-row normalisation to zero mean and unit (population) variance,
/// followed by `gain ⊙ x + bias`.
pub fn layer_norm(m: &FeatureMap, gain: &[f64], bias: &[f64], eps: f64) -> Result<FeatureMap> {
    if gain.len() != m.cols || bias.len() != m.cols {
        return Err(Error::shape(
            "layer_norm",
            format!("gain/bias of length {}", m.cols),
            format!("{}/{}", gain.len(), bias.len()),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::config("eps", "must be > 0"));
    }
    let mut out = m.clone();
    for r in 0..out.rows {
        layer_norm_row(out.row_mut(r), gain, bias, eps);
    }
    Ok(out)
}

pub(crate) fn layer_norm_row(row: &mut [f64], gain: &[f64], bias: &[f64], eps: f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / libm::sqrt(var + eps);
    for ((v, g), b) in row.iter_mut().zip(gain).zip(bias) {
        *v = (*v - mean) * inv * g + b;
    }
}

/// Standard-normal matrix filled row-major from `rng` (Box-Muller).
pub fn seeded_gaussian(rows: usize, cols: usize, rng: &mut SeededRng) -> FeatureMap {
    assert!(rows > 0 && cols > 0, "empty FeatureMap");
    let data = (0..rows * cols).map(|_| rng.standard_normal()).collect();
    FeatureMap::from_parts(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Stream;
    use proptest::prelude::*;

    fn fm(rows: &[&[f64]]) -> FeatureMap {
        FeatureMap::from_rows(rows).unwrap()
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(FeatureMap::new(2, 2, vec![1.0; 3]).is_err());
        assert!(FeatureMap::new(0, 2, vec![]).is_err());
        assert_eq!(
            FeatureMap::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite("FeatureMap::new"))
        );
    }

    #[test]
    fn matmul_examples() {
        let m = fm(&[&[1.5, -2.0], &[0.25, 7.0]]);
        assert_eq!(matmul(&FeatureMap::identity(2), &m).unwrap(), m);

        let a = fm(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = fm(&[&[5.0], &[6.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), fm(&[&[17.0], &[39.0]]));

        assert_eq!(matmul(&FeatureMap::zeros(2, 2), &m).unwrap(), FeatureMap::zeros(2, 2));
    }

    #[test]
    fn matmul_shape_error() {
        let a = FeatureMap::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&fm(&[&[0.0, 0.0]]));
        assert_eq!(s.row(0), &[0.5, 0.5]);

        let s = softmax_rows(&fm(&[&[libm::log(1.0), libm::log(3.0)]]));
        assert!((s.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-15);

        for c in [-1e3, 0.0, 42.0, 1e300] {
            let s = softmax_rows(&fm(&[&[c, c, c]]));
            for &v in s.row(0) {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let ones = [1.0, 1.0];
        let zero = [0.0, 0.0];
        let out = layer_norm(&fm(&[&[4.0, 4.0]]), &ones, &zero, 1e-6).unwrap();
        assert_eq!(out.row(0), &[0.0, 0.0]);

        let out = layer_norm(&fm(&[&[1.0, 3.0]]), &ones, &zero, 1e-14).unwrap();
        assert!((out.get(0, 0) + 1.0).abs() < 1e-12);
        assert!((out.get(0, 1) - 1.0).abs() < 1e-12);

        let out = layer_norm(&fm(&[&[-2.0, -2.0]]), &ones, &[0.5, -3.0], 1e-6).unwrap();
        assert_eq!(out.row(0), &[0.5, -3.0]);

        assert!(layer_norm(&fm(&[&[1.0, 3.0]]), &[1.0], &zero, 1e-6).is_err());
    }

    #[test]
    fn gaussian_is_deterministic_and_seed_sensitive() {
        let a = seeded_gaussian(4, 5, &mut SeededRng::new(11, Stream::Noise));
        let b = seeded_gaussian(4, 5, &mut SeededRng::new(11, Stream::Noise));
        let c = seeded_gaussian(4, 5, &mut SeededRng::new(12, Stream::Noise));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_moments() {
        let g = seeded_gaussian(1000, 100, &mut SeededRng::new(2024, Stream::Analysis));
        let n = g.data().len() as f64;
        let mean = g.data().iter().sum::<f64>() / n;
        let var = g.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = FeatureMap> {
        proptest::collection::vec(-10.0..10.0f64, rows * cols)
            .prop_map(move |d| FeatureMap::new(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(a in small_matrix(3, 4), b in small_matrix(4, 2), c in small_matrix(2, 5)) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let diff = left.sub(&right).unwrap().frobenius_norm();
            let scale = left.frobenius_norm().max(1e-300);
            prop_assert!(diff <= 1e-9 * scale.max(1.0));
        }

        #[test]
        fn softmax_rows_sum_to_one(row in proptest::collection::vec(-700.0..700.0f64, 1..32)) {
            let m = FeatureMap::new(1, row.len(), row).unwrap();
            let s = softmax_rows(&m);
            let sum: f64 = s.row(0).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(s.row(0).iter().all(|&v| v >= 0.0));
        }
    }
}
