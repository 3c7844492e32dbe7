//! Dense vector and matrix primitives plus the unit-vector dissimilarity
//! metric used by every scoring stage.
//!
//! All reductions accumulate in `f64`. Vectors whose L2 norm falls below
//! [`NORM_EPS`] normalize to the zero vector, which keeps every operation
//! total on padded or blank input.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norm below which a vector is treated as having no direction.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MathError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    ShapeMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("matrix of {rows}x{cols} needs {expected} values, got {got}")]
    BadLength {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("empty matrix")]
    Empty,
}

pub type Result<T> = std::result::Result<T, MathError>;

/// Rejects NaN and infinities.
pub fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(MathError::NonFinite { index }),
        None => Ok(()),
    }
}

/// Row-major dense matrix of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let expected = rows.checked_mul(cols).ok_or(MathError::BadLength {
            rows,
            cols,
            expected: usize::MAX,
            got: data.len(),
        })?;
        if expected != data.len() {
            return Err(MathError::BadLength {
                rows,
                cols,
                expected,
                got: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(MathError::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // chunks_exact(0) panics, and a zero-column matrix has no data anyway
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    /// Copies rows `[start, end)` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Mat {
        Mat {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Stacks matrices vertically. All inputs must share a column count.
    pub fn vstack(parts: &[&Mat]) -> Result<Mat> {
        let cols = parts.first().map(|m| m.cols).ok_or(MathError::Empty)?;
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(MathError::DimensionMismatch {
                    expected: cols,
                    got: m.cols,
                });
            }
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Ok(Mat { rows, cols, data })
    }

    /// Multiplies every entry by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * alpha).collect(),
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Returns `v / ‖v‖₂`, or the zero vector when `‖v‖₂ < NORM_EPS`.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let norm = l2_norm(v);
    if norm < NORM_EPS {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| x / norm).collect()
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(MathError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

/// Euclidean distance between the unit directions of `a` and `b`, in `[0, 2]`.
///
/// Computed as normalize, subtract, norm rather than `sqrt(2 - 2cos)`, which
/// can go negative under rounding for nearly parallel vectors.
pub fn dissim(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    Ok(dissim_unchecked(a, b))
}

fn dissim_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let a = l2_normalize(a);
    let b = l2_normalize(b);
    unit_distance(&a, &b)
}

fn unit_distance(a_hat: &[f64], b_hat: &[f64]) -> f64 {
    let sq: f64 = a_hat
        .iter()
        .zip(b_hat)
        .map(|(x, y)| {
            let diff = x - y;
            diff * diff
        })
        .sum();
    sq.sqrt().min(2.0)
}

/// Cosine of the angle between `a` and `b`; 0 when either has no direction.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    let na2 = dot(a, a);
    let nb2 = dot(b, b);
    if na2.sqrt() < NORM_EPS || nb2.sqrt() < NORM_EPS {
        return Ok(0.0);
    }
    // sqrt(x·x) == x in IEEE arithmetic, so cos(v, v) is exactly 1
    Ok((dot(a, b) / (na2 * nb2).sqrt()).clamp(-1.0, 1.0))
}

/// Dissimilarity of every row of `m` against one broadcast reference vector.
pub fn row_dissim(m: &Mat, reference: &[f64]) -> Result<Vec<f64>> {
    if reference.len() != m.cols() {
        return Err(MathError::DimensionMismatch {
            expected: m.cols(),
            got: reference.len(),
        });
    }
    let ref_hat = l2_normalize(reference);
    Ok(m.row_iter()
        .map(|row| unit_distance(&l2_normalize(row), &ref_hat))
        .collect())
}

/// Dissimilarity between corresponding rows of two equally shaped matrices.
pub fn paired_row_dissim(a: &Mat, b: &Mat) -> Result<Vec<f64>> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(MathError::ShapeMismatch {
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: b.rows(),
            right_cols: b.cols(),
        });
    }
    Ok(a.row_iter()
        .zip(b.row_iter())
        .map(|(x, y)| dissim_unchecked(x, y))
        .collect())
}

/// Arithmetic mean of the rows.
///
/// Uses a running-mean update, so a matrix of identical rows yields that row
/// bit-for-bit.
pub fn mean_rows(m: &Mat) -> Result<Vec<f64>> {
    if m.rows() == 0 {
        return Err(MathError::Empty);
    }
    let mut mean = m.row(0).to_vec();
    for (k, row) in m.row_iter().enumerate().skip(1) {
        let count = (k + 1) as f64;
        for (acc, x) in mean.iter_mut().zip(row) {
            *acc += (x - *acc) / count;
        }
    }
    Ok(mean)
}
