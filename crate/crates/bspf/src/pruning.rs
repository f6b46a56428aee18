//! Score smoothing, top-k block splitting, and symmetric mask mirroring.
//!
//! A block is split into a reserved part and a pruned part by ranking its
//! entries with a 3x3-smoothed score matrix and keeping the top fraction.

use crate::attention::AttentionBlock;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// A 3x3 smoothing kernel whose weights sum to 1.
///
/// Construction renormalizes the supplied weights by their sum; a sum too
/// close to zero is rejected because it cannot be normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    w: [f64; 9],
}

impl ConvKernel {
    pub fn new(weights: [f64; 9]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if sum.abs() < 1e-12 {
            return Err(Error::Config(
                "kernel: weight sum is too close to zero to normalize".into(),
            ));
        }
        let mut w = weights;
        for v in &mut w {
            *v /= sum;
        }
        Ok(ConvKernel { w })
    }

    /// Uniform 3x3 average, every weight 1/9.
    pub fn uniform() -> Self {
        ConvKernel::new([1.0; 9]).expect("uniform kernel normalizes")
    }

    /// Identity kernel: center weight 1, zeros elsewhere.
    pub fn delta() -> Self {
        let mut w = [0.0; 9];
        w[4] = 1.0;
        ConvKernel::new(w).expect("delta kernel normalizes")
    }

    /// Weight at offset `(k, l)`, each in `{-1, 0, 1}`.
    #[inline]
    pub fn at(&self, k: isize, l: isize) -> f64 {
        self.w[((k + 1) * 3 + (l + 1)) as usize]
    }

    pub fn weights(&self) -> &[f64; 9] {
        &self.w
    }

    /// True when `w[k][l] == w[l][k]` exactly, i.e. mirroring a mask across
    /// the transpose commutes with smoothing.
    pub fn is_symmetric(&self) -> bool {
        self.at(-1, 0) == self.at(0, -1)
            && self.at(-1, 1) == self.at(1, -1)
            && self.at(0, 1) == self.at(1, 0)
    }

    /// Parse the one-line kernel file format: nine space-separated decimals
    /// in row-major order.
    pub fn from_text(text: &str) -> Result<Self> {
        let values: Vec<f64> = text
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("kernel: bad value {:?}", t)))
            })
            .collect::<Result<_>>()?;
        if values.len() != 9 {
            return Err(Error::Parse(format!(
                "kernel: expected 9 values, got {}",
                values.len()
            )));
        }
        let mut w = [0.0; 9];
        w.copy_from_slice(&values);
        ConvKernel::new(w)
    }

    pub fn to_text(&self) -> String {
        self.w
            .iter()
            .map(|v| format!("{:.12e}", v))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A binary matrix marking reserved (true) versus pruned (false) entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.cols + j] = v;
    }

    /// Row `i` as a slice; this is the prune string of that query row.
    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn transpose(&self) -> Mask {
        let mut out = Mask::new(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }
}

/// Disjoint-support decomposition of a block into reserved and pruned parts.
///
/// `reserved + pruned` reconstructs the original logits exactly, and the
/// mask pins which side each entry went to.
#[derive(Debug, Clone)]
pub struct PruneSplit {
    pub reserved: Matrix,
    pub pruned: Matrix,
    pub mask: Mask,
    pub keep_ratio: f64,
}

/// Number of entries retained by a split: `round(keep_ratio * omega^2)`,
/// rounding half up.
pub fn retained_count(keep_ratio: f64, omega: usize) -> usize {
    (keep_ratio * (omega * omega) as f64).round() as usize
}

/// Smooth a block's logits with a zero-padded 3x3 convolution:
/// `S(i,j) = sum over k,l in {-1,0,1} of w[k][l] * A(i-k, j-l)`.
///
/// Reads outside the block contribute zero; the output has the block's shape.
pub fn smooth_scores(block: &AttentionBlock, kernel: &ConvKernel) -> Matrix {
    let a = &block.logits;
    let rows = a.rows() as isize;
    let cols = a.cols() as isize;
    let mut scores = Matrix::zeros(a.rows(), a.cols());
    for i in 0..rows {
        for j in 0..cols {
            let mut acc = 0.0;
            for k in -1..=1 {
                for l in -1..=1 {
                    let src_i = i - k;
                    let src_j = j - l;
                    if src_i >= 0 && src_i < rows && src_j >= 0 && src_j < cols {
                        acc += kernel.at(k, l) * a.get(src_i as usize, src_j as usize);
                    }
                }
            }
            scores.set(i as usize, j as usize, acc);
        }
    }
    scores
}

/// Split a block into reserved and pruned parts, keeping exactly
/// `round(keep_ratio * omega^2)` entries with the highest scores. Ties keep
/// the lexicographically smallest `(i, j)` in row-major order.
pub fn split_topk(block: &AttentionBlock, scores: &Matrix, keep_ratio: f64) -> Result<PruneSplit> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::Config(format!(
            "keep_ratio: {} is outside (0, 1]",
            keep_ratio
        )));
    }
    let a = &block.logits;
    if (scores.rows(), scores.cols()) != (a.rows(), a.cols()) {
        return Err(Error::Shape(format!(
            "split_topk: scores {}x{} do not match block {}x{}",
            scores.rows(),
            scores.cols(),
            a.rows(),
            a.cols()
        )));
    }
    let total = a.rows() * a.cols();
    let keep = retained_count(keep_ratio, a.rows()).min(total);

    // Stable sort by descending score keeps row-major order among ties.
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&x, &y| {
        scores.data()[y]
            .partial_cmp(&scores.data()[x])
            .expect("scores are finite")
    });

    let mut mask = Mask::new(a.rows(), a.cols());
    for &idx in order.iter().take(keep) {
        mask.set(idx / a.cols(), idx % a.cols(), true);
    }

    let mut reserved = Matrix::zeros(a.rows(), a.cols());
    let mut pruned = Matrix::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            if mask.get(i, j) {
                reserved.set(i, j, a.get(i, j));
            } else {
                pruned.set(i, j, a.get(i, j));
            }
        }
    }
    Ok(PruneSplit {
        reserved,
        pruned,
        mask,
        keep_ratio,
    })
}

/// A split whose mask is all ones: the block is kept dense.
pub fn dense_split(block: &AttentionBlock) -> PruneSplit {
    let a = &block.logits;
    PruneSplit {
        reserved: a.clone(),
        pruned: Matrix::zeros(a.rows(), a.cols()),
        mask: Mask::ones(a.rows(), a.cols()),
        keep_ratio: 1.0,
    }
}

/// Mirror the split of upper block `(m, n)` onto block `(n, m)` by
/// transposing mask, reserved, and pruned parts.
///
/// Valid only under shared query/key weights, where the lower block's logits
/// are exactly the transpose of the upper block's.
pub fn mirror_split(upper: &PruneSplit, shared_qk: bool) -> Result<PruneSplit> {
    if !shared_qk {
        return Err(Error::Config(
            "mirror_split: mirroring requires shared_qk (logits are not symmetric otherwise)"
                .into(),
        ));
    }
    Ok(PruneSplit {
        reserved: upper.reserved.transpose(),
        pruned: upper.pruned.transpose(),
        mask: upper.mask.transpose(),
        keep_ratio: upper.keep_ratio,
    })
}
