//! Dense row-major matrices, row softmax, similarity metrics, and
//! deterministic fixture generation.
//!
//! Everything here is plain `f64` with a fixed left-to-right accumulation
//! order so results are bit-reproducible across runs and platforms.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense row-major matrix of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Build a matrix from row-major data. Fails if the data length does not
    /// equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} does not match {}x{} (expected {})",
                data.len(),
                rows,
                cols,
                rows * cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    /// Row `i` as a slice.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// Standard matrix product. Accumulation runs left-to-right over the
    /// inner dimension so the result is deterministic.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0;
                for t in 0..self.cols {
                    acc += self.get(i, t) * other.get(t, j);
                }
                out.set(i, j, acc);
            }
        }
        Ok(out)
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry-wise difference against `other`.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Serialize to the plain text format: first line `rows cols`, then one
    /// row per line of space-separated decimals (13 significant digits).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {}", self.rows, self.cols);
        for i in 0..self.rows {
            let mut first = true;
            for j in 0..self.cols {
                if !first {
                    s.push(' ');
                }
                let _ = write!(s, "{:.12e}", self.get(i, j));
                first = false;
            }
            s.push('\n');
        }
        s
    }

    /// Parse the text format produced by [`Matrix::to_text`].
    pub fn from_text(text: &str) -> Result<Matrix> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("matrix text: empty input".into()))?;
        let mut parts = header.split_whitespace();
        let rows: usize = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Parse("matrix text: bad row count".into()))?;
        let cols: usize = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Parse("matrix text: bad column count".into()))?;
        let mut data = Vec::with_capacity(rows * cols);
        for (li, line) in lines.enumerate() {
            if li >= rows {
                return Err(Error::Parse(format!(
                    "matrix text: expected {} rows, found more",
                    rows
                )));
            }
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| {
                    Error::Parse(format!("matrix text: bad value {:?} on row {}", tok, li + 1))
                })?;
                data.push(v);
            }
        }
        Matrix::from_vec(rows, cols, data)
            .map_err(|_| Error::Parse("matrix text: value count does not match header".into()))
    }
}

/// Similarity metric used for query matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    Cosine,
    Pearson,
    Euclidean,
}

impl SimilarityMetric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(SimilarityMetric::Cosine),
            "pearson" => Ok(SimilarityMetric::Pearson),
            "euclidean" => Ok(SimilarityMetric::Euclidean),
            other => Err(Error::Config(format!(
                "metric: unknown value {:?} (expected cosine|pearson|euclidean)",
                other
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SimilarityMetric::Cosine => "cosine",
            SimilarityMetric::Pearson => "pearson",
            SimilarityMetric::Euclidean => "euclidean",
        }
    }
}

/// Numerically stable row softmax with max subtraction.
///
/// Outputs are positive and sum to 1. Fails on an empty input.
pub fn softmax_row(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Shape("softmax_row: empty vector".into()));
    }
    let max = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|&e| e / sum).collect())
}

/// Similarity between two equal-length vectors; higher means more similar
/// for every metric.
///
/// Euclidean distance `D` is mapped to `1 / (1 + D)` so that argmax-style
/// selection works uniformly. Zero-norm (or zero-variance, for Pearson)
/// vectors yield similarity 0 rather than an error.
pub fn similarity(u: &[f64], v: &[f64], metric: SimilarityMetric) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::Shape(format!(
            "similarity: lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let n = u.len();
    Ok(match metric {
        SimilarityMetric::Cosine => {
            let mut dot = 0.0;
            let mut nu = 0.0;
            let mut nv = 0.0;
            for t in 0..n {
                dot += u[t] * v[t];
                nu += u[t] * u[t];
                nv += v[t] * v[t];
            }
            let denom = nu.sqrt() * nv.sqrt();
            if denom == 0.0 {
                0.0
            } else {
                dot / denom
            }
        }
        SimilarityMetric::Pearson => {
            let mean_u: f64 = u.iter().sum::<f64>() / n as f64;
            let mean_v: f64 = v.iter().sum::<f64>() / n as f64;
            let mut cov = 0.0;
            let mut var_u = 0.0;
            let mut var_v = 0.0;
            for t in 0..n {
                let du = u[t] - mean_u;
                let dv = v[t] - mean_v;
                cov += du * dv;
                var_u += du * du;
                var_v += dv * dv;
            }
            let denom = var_u.sqrt() * var_v.sqrt();
            if denom == 0.0 {
                0.0
            } else {
                cov / denom
            }
        }
        SimilarityMetric::Euclidean => {
            let mut sq = 0.0;
            for t in 0..n {
                let d = u[t] - v[t];
                sq += d * d;
            }
            1.0 / (1.0 + sq.sqrt())
        }
    })
}

/// Deterministic 64-bit linear congruential generator.
///
/// Constants are Knuth's MMIX multiplier and increment. The top 53 bits of
/// each state are mapped to a dyadic rational in `[0, 1)`, which makes every
/// drawn value exactly representable and bit-identical across platforms.
#[derive(Debug, Clone)]
pub struct FixtureRng {
    state: u64,
}

const LCG_MUL: u64 = 6364136223846793005;
const LCG_ADD: u64 = 1442695040888963407;

impl FixtureRng {
    pub fn new(seed: u64) -> Self {
        FixtureRng { state: seed }
    }

    /// Next value in `[-1, 1)`.
    pub fn next_signed_unit(&mut self) -> f64 {
        self.state = self.state.wrapping_mul(LCG_MUL).wrapping_add(LCG_ADD);
        let unit = (self.state >> 11) as f64 / (1u64 << 53) as f64;
        2.0 * unit - 1.0
    }
}

/// Reproducible pseudo-random `n x d` token matrix with entries in `[-1, 1)`.
/// The same seed yields a bit-identical matrix on every run and platform.
pub fn fixture_tokens(seed: u64, n: usize, d: usize) -> Matrix {
    let mut rng = FixtureRng::new(seed);
    let data: Vec<f64> = (0..n * d).map(|_| rng.next_signed_unit()).collect();
    Matrix::from_vec(n, d, data).expect("fixture dimensions are consistent")
}
