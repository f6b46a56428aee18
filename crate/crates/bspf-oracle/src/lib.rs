//! Brute-force reference implementations used to validate the optimized
//! kernels. Everything here is written as plain loops with no early exits
//! and deliberately shares no computation code with the main crate, only
//! its data types. Single-threaded; readability over speed.

use bspf::{
    BspfConfig, ConvKernel, Error, FusionSource, Mask, MatchEntry, MatchTable, Matrix,
    Normalization, ProjectionWeights, Result, SimilarityMetric,
};

/// 3x3 convolution with explicit zero-padding branches.
///
/// `out(i, j) = sum over k, l in {-1, 0, 1} of w[k][l] * a(i-k, j-l)`,
/// where reads outside the matrix contribute zero.
pub fn naive_conv3x3(a: &Matrix, kernel: &ConvKernel) -> Matrix {
    let rows = a.rows();
    let cols = a.cols();
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let mut acc = 0.0;
            for k in -1isize..=1 {
                for l in -1isize..=1 {
                    let src_i = i as isize - k;
                    let src_j = j as isize - l;
                    let inside = src_i >= 0
                        && src_i < rows as isize
                        && src_j >= 0
                        && src_j < cols as isize;
                    if inside {
                        acc += kernel.at(k, l) * a.get(src_i as usize, src_j as usize);
                    }
                    // Outside the matrix the padded value is zero, so the
                    // term is skipped entirely.
                }
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// Mark the `k` highest-scoring positions. Ties keep the smallest `(i, j)`
/// in row-major order. Sorts every entry; no selection shortcuts.
pub fn exhaustive_topk(scores: &Matrix, k: usize) -> Mask {
    let mut triples: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..scores.rows() {
        for j in 0..scores.cols() {
            triples.push((scores.get(i, j), i, j));
        }
    }
    triples.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("scores are finite")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut mask = Mask::new(scores.rows(), scores.cols());
    for &(_, i, j) in triples.iter().take(k.min(triples.len())) {
        mask.set(i, j, true);
    }
    mask
}

fn oracle_similarity(u: &[f64], v: &[f64], metric: SimilarityMetric) -> f64 {
    let n = u.len();
    match metric {
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
            let mut sum_u = 0.0;
            let mut sum_v = 0.0;
            for t in 0..n {
                sum_u += u[t];
                sum_v += v[t];
            }
            let mean_u = sum_u / n as f64;
            let mean_v = sum_v / n as f64;
            let mut cov = 0.0;
            let mut var_u = 0.0;
            let mut var_v = 0.0;
            for t in 0..n {
                cov += (u[t] - mean_u) * (v[t] - mean_v);
                var_u += (u[t] - mean_u) * (u[t] - mean_u);
                var_v += (v[t] - mean_v) * (v[t] - mean_v);
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
                sq += (u[t] - v[t]) * (u[t] - v[t]);
            }
            1.0 / (1.0 + sq.sqrt())
        }
    }
}

/// Best match for every query row by scanning all candidate pairs.
/// Ties keep the smallest candidate index.
pub fn exhaustive_best_match(queries: &Matrix, metric: SimilarityMetric) -> MatchTable {
    let omega = queries.rows();
    if omega < 2 {
        return MatchTable::default();
    }
    let mut entries = Vec::new();
    for i in 0..omega {
        let mut best = usize::MAX;
        let mut best_sim = f64::NEG_INFINITY;
        for j in 0..omega {
            if j == i {
                continue;
            }
            let s = oracle_similarity(queries.row(i), queries.row(j), metric);
            if s > best_sim {
                best_sim = s;
                best = j;
            }
        }
        entries.push(MatchEntry {
            best,
            rho: best_sim,
        });
    }
    MatchTable { entries }
}

/// Line-by-line transcription of the block pruning, matching, and fusion
/// procedure. Computes every block directly (no mirroring, no symmetric
/// shortcut) and normalizes per the configured mode. Used only to validate
/// the optimized pipeline.
pub fn reference_pipeline(
    tokens: &Matrix,
    weights: &ProjectionWeights,
    config: &BspfConfig,
) -> Result<Matrix> {
    config.validate()?;
    let n = tokens.rows();
    let d = weights.dim();
    if tokens.cols() != d {
        return Err(Error::Shape(format!(
            "reference: token dim {} vs weight dim {}",
            tokens.cols(),
            d
        )));
    }
    let omega = config.chunk_size;
    if n % omega != 0 {
        return Err(Error::Config(format!(
            "reference: {} tokens not divisible by chunk size {}",
            n, omega
        )));
    }
    let c = n / omega;

    // Projection: one explicit loop per output entry.
    let mut q = Matrix::zeros(n, d);
    let mut k_mat = Matrix::zeros(n, d);
    let mut v = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let mut acc_q = 0.0;
            let mut acc_k = 0.0;
            let mut acc_v = 0.0;
            for t in 0..d {
                acc_q += tokens.get(i, t) * weights.w_q().get(t, j);
                acc_k += tokens.get(i, t) * weights.w_k().get(t, j);
                acc_v += tokens.get(i, t) * weights.w_v().get(t, j);
            }
            q.set(i, j, acc_q);
            k_mat.set(i, j, acc_k);
            v.set(i, j, acc_v);
        }
    }
    // Shared weights mean the key features are the query features.
    if weights.shared_qk() {
        k_mat = q.clone();
    }

    let scale = 1.0 / (d as f64).sqrt();
    let keep = (config.keep_ratio * (omega * omega) as f64).round() as usize;

    // Matching per query chunk.
    let mut match_tables: Vec<MatchTable> = Vec::new();
    for m in 0..c {
        let mut chunk = Matrix::zeros(omega, d);
        for i in 0..omega {
            for t in 0..d {
                chunk.set(i, t, q.get(m * omega + i, t));
            }
        }
        match_tables.push(exhaustive_best_match(&chunk, config.metric));
    }

    let mut fused_blocks: Vec<Matrix> = Vec::with_capacity(c * c);
    let mut masks: Vec<Mask> = Vec::with_capacity(c * c);

    for m in 0..c {
        for nn in 0..c {
            // Pruning: raw block logits.
            let mut a = Matrix::zeros(omega, omega);
            for i in 0..omega {
                for j in 0..omega {
                    let mut acc = 0.0;
                    for t in 0..d {
                        acc += q.get(m * omega + i, t) * k_mat.get(nn * omega + j, t);
                    }
                    a.set(i, j, acc * scale);
                }
            }

            let prune_this = m != nn || config.prune_diagonal;
            let (mut reserved, pruned, mask) = if prune_this {
                let s = naive_conv3x3(&a, &config.kernel);
                let mask = exhaustive_topk(&s, keep);
                let mut reserved = Matrix::zeros(omega, omega);
                let mut pruned = Matrix::zeros(omega, omega);
                for i in 0..omega {
                    for j in 0..omega {
                        if mask.get(i, j) {
                            reserved.set(i, j, a.get(i, j));
                        } else {
                            pruned.set(i, j, a.get(i, j));
                        }
                    }
                }
                (reserved, pruned, mask)
            } else {
                (
                    a.clone(),
                    Matrix::zeros(omega, omega),
                    Mask::ones(omega, omega),
                )
            };

            // Fusion: each query contributes into its best match's row,
            // guarded by positive reserved entries of the pre-fusion state.
            if prune_this && omega >= 2 {
                let snapshot = reserved.clone();
                let table = &match_tables[m];
                for i in 0..omega {
                    let i_b = table.entries[i].best;
                    let rho = table.entries[i].rho;
                    let mut distance = 0usize;
                    for j in 0..omega {
                        if mask.get(i, j) != mask.get(i_b, j) {
                            distance += 1;
                        }
                    }
                    let s_h = 1.0 - distance as f64 / omega as f64;
                    let rho_clamped = if rho < 0.0 {
                        0.0
                    } else if rho > 1.0 {
                        1.0
                    } else {
                        rho
                    };
                    let alpha = rho_clamped * s_h;
                    let src = match config.fusion_source {
                        FusionSource::MatchedRow => i_b,
                        FusionSource::SelfRow => i,
                    };
                    for j in 0..omega {
                        if snapshot.get(i_b, j) > 0.0 {
                            let increment = alpha * pruned.get(src, j);
                            if increment != 0.0 {
                                reserved.set(i_b, j, reserved.get(i_b, j) + increment);
                            }
                        }
                    }
                }
            }

            fused_blocks.push(reserved);
            masks.push(mask);
        }
    }

    // Normalize rows and aggregate values.
    let mut probs = Matrix::zeros(n, n);
    for m in 0..c {
        for i in 0..omega {
            let r = m * omega + i;
            match config.normalization {
                Normalization::GlobalRow => {
                    let mut cols = Vec::new();
                    let mut logits = Vec::new();
                    for nn in 0..c {
                        let b = m * c + nn;
                        for j in 0..omega {
                            if masks[b].get(i, j) {
                                cols.push(nn * omega + j);
                                logits.push(fused_blocks[b].get(i, j));
                            }
                        }
                    }
                    if cols.is_empty() {
                        for j in 0..omega {
                            probs.set(r, m * omega + j, 1.0 / omega as f64);
                        }
                        continue;
                    }
                    let mut max = f64::NEG_INFINITY;
                    for &x in &logits {
                        if x > max {
                            max = x;
                        }
                    }
                    let mut sum = 0.0;
                    let mut exps = Vec::new();
                    for &x in &logits {
                        let e = (x - max).exp();
                        exps.push(e);
                        sum += e;
                    }
                    for (idx, &col) in cols.iter().enumerate() {
                        probs.set(r, col, exps[idx] / sum);
                    }
                }
                Normalization::PerBlock => {
                    let mut row_sum = 0.0;
                    for nn in 0..c {
                        let b = m * c + nn;
                        let mut cols = Vec::new();
                        let mut logits = Vec::new();
                        for j in 0..omega {
                            if masks[b].get(i, j) {
                                cols.push(nn * omega + j);
                                logits.push(fused_blocks[b].get(i, j));
                            }
                        }
                        if cols.is_empty() {
                            continue;
                        }
                        let mut max = f64::NEG_INFINITY;
                        for &x in &logits {
                            if x > max {
                                max = x;
                            }
                        }
                        let mut sum = 0.0;
                        let mut exps = Vec::new();
                        for &x in &logits {
                            let e = (x - max).exp();
                            exps.push(e);
                            sum += e;
                        }
                        for (idx, &col) in cols.iter().enumerate() {
                            let p = exps[idx] / sum;
                            probs.set(r, col, p);
                            row_sum += p;
                        }
                    }
                    if row_sum == 0.0 {
                        for j in 0..omega {
                            probs.set(r, m * omega + j, 1.0 / omega as f64);
                        }
                        continue;
                    }
                    for col in 0..n {
                        let p = probs.get(r, col);
                        if p != 0.0 {
                            probs.set(r, col, p / row_sum);
                        }
                    }
                }
            }
        }
    }

    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let mut acc = 0.0;
            for t in 0..n {
                acc += probs.get(i, t) * v.get(t, j);
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}
