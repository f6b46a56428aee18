//! Token projection, chunk partitioning, per-block scaled logits, and the
//! exact dense-attention reference used as ground truth by every sparse path.

use crate::error::{Error, Result};
use crate::matrix::{fixture_tokens, softmax_row, Matrix};

/// Square projection weights for queries, keys, and values.
///
/// With `shared_qk` the key weights are the query weights, which makes the
/// full logit matrix symmetric.
#[derive(Debug, Clone)]
pub struct ProjectionWeights {
    w_q: Matrix,
    w_k: Matrix,
    w_v: Matrix,
    shared_qk: bool,
}

impl ProjectionWeights {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix, shared_qk: bool) -> Result<Self> {
        let d = w_q.rows();
        for (name, m) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v)] {
            if m.rows() != d || m.cols() != d {
                return Err(Error::Shape(format!(
                    "{}: expected {}x{}, got {}x{}",
                    name,
                    d,
                    d,
                    m.rows(),
                    m.cols()
                )));
            }
        }
        let w_k = if shared_qk { w_q.clone() } else { w_k };
        Ok(ProjectionWeights {
            w_q,
            w_k,
            w_v,
            shared_qk,
        })
    }

    /// Deterministic pseudo-random weights for a model dimension `d`.
    pub fn fixture(seed: u64, d: usize, shared_qk: bool) -> Self {
        let w_q = fixture_tokens(seed.wrapping_mul(3).wrapping_add(101), d, d);
        let w_k = fixture_tokens(seed.wrapping_mul(3).wrapping_add(102), d, d);
        let w_v = fixture_tokens(seed.wrapping_mul(3).wrapping_add(103), d, d);
        ProjectionWeights::new(w_q, w_k, w_v, shared_qk).expect("fixture weights are square")
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn shared_qk(&self) -> bool {
        self.shared_qk
    }

    pub fn w_q(&self) -> &Matrix {
        &self.w_q
    }

    pub fn w_k(&self) -> &Matrix {
        &self.w_k
    }

    pub fn w_v(&self) -> &Matrix {
        &self.w_v
    }
}

/// Projected query/key/value features, all `N x d`.
#[derive(Debug, Clone)]
pub struct ProjectionSet {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

/// Project tokens through the weight matrices. With shared weights the key
/// features reuse the query product, so `q == k` bit-for-bit.
pub fn project(tokens: &Matrix, weights: &ProjectionWeights) -> Result<ProjectionSet> {
    if tokens.cols() != weights.dim() {
        return Err(Error::Shape(format!(
            "project: token dim {} does not match weight dim {}",
            tokens.cols(),
            weights.dim()
        )));
    }
    let q = tokens.matmul(&weights.w_q)?;
    let k = if weights.shared_qk {
        q.clone()
    } else {
        tokens.matmul(&weights.w_k)?
    };
    let v = tokens.matmul(&weights.w_v)?;
    Ok(ProjectionSet { q, k, v })
}

/// An exact split of `n_tokens` into `n_chunks` chunks of `chunk_size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkPartition {
    n_tokens: usize,
    chunk_size: usize,
    n_chunks: usize,
}

impl ChunkPartition {
    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn n_chunks(&self) -> usize {
        self.n_chunks
    }

    /// First token index of chunk `m`.
    pub fn chunk_start(&self, m: usize) -> usize {
        m * self.chunk_size
    }
}

/// Partition `n_tokens` into chunks of `chunk_size`. Token counts that do
/// not divide evenly are rejected; the error names the padded size the
/// caller would need.
pub fn make_partition(n_tokens: usize, chunk_size: usize) -> Result<ChunkPartition> {
    if chunk_size == 0 {
        return Err(Error::Config("chunk_size: must be at least 1".into()));
    }
    if n_tokens == 0 {
        return Err(Error::Config("n_tokens: must be at least 1".into()));
    }
    if n_tokens % chunk_size != 0 {
        let padded = n_tokens + (chunk_size - n_tokens % chunk_size);
        return Err(Error::Config(format!(
            "n_tokens: {} is not divisible by chunk_size {}; pad tokens to {}",
            n_tokens, chunk_size, padded
        )));
    }
    Ok(ChunkPartition {
        n_tokens,
        chunk_size,
        n_chunks: n_tokens / chunk_size,
    })
}

/// Pre-softmax scaled logits for one chunk pair.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub m: usize,
    pub n: usize,
    pub logits: Matrix,
}

/// Scaled logits for query chunk `m` against key chunk `n`:
/// `logits(i, j) = Q[m*O + i] . K[n*O + j] / sqrt(d)`. Softmax is deferred
/// until full rows are assembled.
pub fn block_logits(
    proj: &ProjectionSet,
    part: &ChunkPartition,
    m: usize,
    n: usize,
) -> Result<AttentionBlock> {
    let c = part.n_chunks();
    if m >= c || n >= c {
        return Err(Error::Shape(format!(
            "block_logits: block ({}, {}) out of range for {} chunks",
            m, n, c
        )));
    }
    let omega = part.chunk_size();
    let d = proj.q.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let q_base = part.chunk_start(m);
    let k_base = part.chunk_start(n);
    let mut logits = Matrix::zeros(omega, omega);
    for i in 0..omega {
        let q_row = proj.q.row(q_base + i);
        for j in 0..omega {
            let k_row = proj.k.row(k_base + j);
            let mut acc = 0.0;
            for t in 0..d {
                acc += q_row[t] * k_row[t];
            }
            logits.set(i, j, acc * scale);
        }
    }
    Ok(AttentionBlock { m, n, logits })
}

/// Exact dense attention: `rowsoftmax(Q K^T / sqrt(d)) V`.
///
/// This is the ground-truth oracle every pruned path is compared against.
pub fn dense_attention(tokens: &Matrix, weights: &ProjectionWeights) -> Result<Matrix> {
    let proj = project(tokens, weights)?;
    let probs = dense_attention_map(&proj)?;
    probs.matmul(&proj.v)
}

/// The dense `N x N` row-stochastic attention map for projected features.
pub fn dense_attention_map(proj: &ProjectionSet) -> Result<Matrix> {
    let n = proj.q.rows();
    let d = proj.q.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut probs = Matrix::zeros(n, n);
    let mut row = vec![0.0; n];
    for i in 0..n {
        let q_row = proj.q.row(i);
        for j in 0..n {
            let k_row = proj.k.row(j);
            let mut acc = 0.0;
            for t in 0..d {
                acc += q_row[t] * k_row[t];
            }
            row[j] = acc * scale;
        }
        let soft = softmax_row(&row)?;
        for j in 0..n {
            probs.set(i, j, soft[j]);
        }
    }
    Ok(probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::fixture_tokens;

    #[test]
    fn identity_tokens_reproduce_weights() {
        let w = ProjectionWeights::fixture(3, 4, false);
        let tokens = Matrix::identity(4);
        let proj = project(&tokens, &w).unwrap();
        assert!(proj.q.max_abs_diff(w.w_q()) < 1e-15);
        assert!(proj.k.max_abs_diff(w.w_k()) < 1e-15);
        assert!(proj.v.max_abs_diff(w.w_v()) < 1e-15);
    }

    #[test]
    fn shared_weights_force_equal_projections() {
        let w = ProjectionWeights::fixture(5, 4, true);
        let tokens = fixture_tokens(9, 6, 4);
        let proj = project(&tokens, &w).unwrap();
        assert_eq!(proj.q, proj.k);
    }

    #[test]
    fn projection_matches_per_row_oracle() {
        let w = ProjectionWeights::fixture(17, 4, false);
        let tokens = fixture_tokens(18, 6, 4);
        let proj = project(&tokens, &w).unwrap();
        for i in 0..6 {
            for j in 0..4 {
                let mut acc = 0.0;
                for t in 0..4 {
                    acc += tokens.get(i, t) * w.w_q().get(t, j);
                }
                assert!((proj.q.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn partition_arithmetic() {
        let p = make_partition(8, 4).unwrap();
        assert_eq!(p.n_chunks(), 2);
        assert_eq!(p.chunk_start(1), 4);
        assert_eq!(make_partition(8, 8).unwrap().n_chunks(), 1);
        let err = make_partition(10, 4).unwrap_err();
        assert!(err.to_string().contains("12"), "error was: {}", err);
    }

    #[test]
    fn zero_queries_give_zero_logits() {
        let proj = ProjectionSet {
            q: Matrix::zeros(4, 3),
            k: fixture_tokens(4, 4, 3),
            v: fixture_tokens(5, 4, 3),
        };
        let part = make_partition(4, 2).unwrap();
        let block = block_logits(&proj, &part, 0, 1).unwrap();
        assert!(block.logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_qk_blocks_transpose() {
        let w = ProjectionWeights::fixture(21, 4, true);
        let tokens = fixture_tokens(22, 8, 4);
        let proj = project(&tokens, &w).unwrap();
        let part = make_partition(8, 4).unwrap();
        let upper = block_logits(&proj, &part, 0, 1).unwrap();
        let lower = block_logits(&proj, &part, 1, 0).unwrap();
        assert!(upper.logits.transpose().max_abs_diff(&lower.logits) < 1e-12);
    }

    #[test]
    fn block_logits_match_double_loop_oracle() {
        let w = ProjectionWeights::fixture(31, 4, false);
        let tokens = fixture_tokens(32, 8, 4);
        let proj = project(&tokens, &w).unwrap();
        let part = make_partition(8, 4).unwrap();
        let block = block_logits(&proj, &part, 1, 0).unwrap();
        let scale = 1.0 / 2.0; // 1/sqrt(4)
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for t in 0..4 {
                    acc += proj.q.get(4 + i, t) * proj.k.get(j, t);
                }
                assert!((block.logits.get(i, j) - acc * scale).abs() < 1e-12);
            }
        }
        assert!(block_logits(&proj, &part, 2, 0).is_err());
    }

    #[test]
    fn dense_single_token_returns_value_row() {
        let w = ProjectionWeights::fixture(41, 3, false);
        let tokens = fixture_tokens(42, 1, 3);
        let proj = project(&tokens, &w).unwrap();
        let out = dense_attention(&tokens, &w).unwrap();
        assert!(out.max_abs_diff(&proj.v) < 1e-15);
    }

    #[test]
    fn duplicate_tokens_give_duplicate_outputs() {
        let w = ProjectionWeights::fixture(43, 3, false);
        let mut tokens = fixture_tokens(44, 4, 3);
        for t in 0..3 {
            let v = tokens.get(0, t);
            tokens.set(2, t, v);
        }
        let out = dense_attention(&tokens, &w).unwrap();
        for t in 0..3 {
            assert!((out.get(0, t) - out.get(2, t)).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_qk_full_logits_symmetric() {
        let w = ProjectionWeights::fixture(51, 4, true);
        let tokens = fixture_tokens(52, 12, 4);
        let proj = project(&tokens, &w).unwrap();
        let scale = 0.5;
        let mut worst: f64 = 0.0;
        for i in 0..12 {
            for j in 0..12 {
                let mut a = 0.0;
                let mut b = 0.0;
                for t in 0..4 {
                    a += proj.q.row(i)[t] * proj.k.row(j)[t];
                    b += proj.q.row(j)[t] * proj.k.row(i)[t];
                }
                worst = worst.max((a * scale - b * scale).abs());
            }
        }
        assert!(worst < 1e-9);
    }

    #[test]
    fn dense_output_rows_stay_in_value_envelope() {
        let w = ProjectionWeights::fixture(61, 4, false);
        let tokens = fixture_tokens(62, 8, 4);
        let proj = project(&tokens, &w).unwrap();
        let out = dense_attention(&tokens, &w).unwrap();
        for t in 0..4 {
            let lo = (0..8).map(|i| proj.v.get(i, t)).fold(f64::INFINITY, f64::min);
            let hi = (0..8)
                .map(|i| proj.v.get(i, t))
                .fold(f64::NEG_INFINITY, f64::max);
            for i in 0..8 {
                let v = out.get(i, t);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
