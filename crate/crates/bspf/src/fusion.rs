//! Query matching, prune-string similarity, fusion of pruned mass into
//! reserved entries, row assembly, and the end-to-end pruned attention
//! pipeline.

use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{flops_attention, FlopReport};
use crate::attention::{
    block_logits, make_partition, project, ChunkPartition, ProjectionSet, ProjectionWeights,
};
use crate::error::{Error, Result};
use crate::matrix::{similarity, Matrix, SimilarityMetric};
use crate::pruning::{dense_split, mirror_split, smooth_scores, split_topk, ConvKernel, Mask, PruneSplit};

/// Where fused values are read from, for query `i` matched to `i_b`.
///
/// `MatchedRow` adds the matched row's own pruned values (the update formula
/// as printed); `SelfRow` adds query `i`'s pruned values into the matched
/// row (the narrative reading where a query contributes its information to
/// its best match). Both are exposed because they genuinely differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionSource {
    MatchedRow,
    SelfRow,
}

impl FusionSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "matched_row" => Ok(FusionSource::MatchedRow),
            "self_row" => Ok(FusionSource::SelfRow),
            other => Err(Error::Config(format!(
                "fusion_source: unknown value {:?} (expected matched_row|self_row)",
                other
            ))),
        }
    }
}

/// How assembled rows are normalized into a distribution.
///
/// `GlobalRow` runs one softmax over the union of retained entries of the
/// full row; it is the mode that reproduces dense attention exactly at
/// keep-ratio 1. `PerBlock` softmaxes each block row independently and then
/// rescales the concatenated row to sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    GlobalRow,
    PerBlock,
}

impl Normalization {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global_row" => Ok(Normalization::GlobalRow),
            "per_block" => Ok(Normalization::PerBlock),
            other => Err(Error::Config(format!(
                "normalization: unknown value {:?} (expected global_row|per_block)",
                other
            ))),
        }
    }
}

/// Full configuration of the pruned-attention pipeline.
#[derive(Debug, Clone)]
pub struct BspfConfig {
    pub chunk_size: usize,
    pub keep_ratio: f64,
    pub metric: SimilarityMetric,
    pub shared_qk: bool,
    pub prune_diagonal: bool,
    pub fusion_source: FusionSource,
    pub normalization: Normalization,
    pub kernel: ConvKernel,
}

impl BspfConfig {
    /// Defaults: cosine metric, shared query/key weights, dense diagonal
    /// blocks, fusion from the matched row, one softmax per full row, and a
    /// uniform smoothing kernel.
    pub fn new(chunk_size: usize, keep_ratio: f64) -> Self {
        BspfConfig {
            chunk_size,
            keep_ratio,
            metric: SimilarityMetric::Cosine,
            shared_qk: true,
            prune_diagonal: false,
            fusion_source: FusionSource::MatchedRow,
            normalization: Normalization::GlobalRow,
            kernel: ConvKernel::uniform(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size: must be at least 1".into()));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "keep_ratio: {} is outside (0, 1]",
                self.keep_ratio
            )));
        }
        Ok(())
    }
}

/// Best match of each query within its chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchEntry {
    /// Index of the most similar other query in the chunk.
    pub best: usize,
    /// Similarity to that query under the configured metric.
    pub rho: f64,
}

/// Per-chunk match table; empty when the chunk has a single query.
#[derive(Debug, Clone, Default)]
pub struct MatchTable {
    pub entries: Vec<MatchEntry>,
}

/// For each query row, find the most similar *other* query row. Ties keep
/// the smallest index. A single-row input yields an empty table.
pub fn best_match(chunk_queries: &Matrix, metric: SimilarityMetric) -> Result<MatchTable> {
    let omega = chunk_queries.rows();
    if omega < 2 {
        return Ok(MatchTable::default());
    }
    let mut entries = Vec::with_capacity(omega);
    for i in 0..omega {
        let mut best = usize::MAX;
        let mut best_sim = f64::NEG_INFINITY;
        for j in 0..omega {
            if j == i {
                continue;
            }
            let s = similarity(chunk_queries.row(i), chunk_queries.row(j), metric)?;
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
    Ok(MatchTable { entries })
}

/// Similarity of two prune strings: `1 - hamming_distance / length`.
pub fn hamming_similarity(p: &[bool], q: &[bool]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Shape(format!(
            "hamming_similarity: lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    let distance = p.iter().zip(q.iter()).filter(|(a, b)| a != b).count();
    Ok(1.0 - distance as f64 / p.len() as f64)
}

/// Fuse pruned information into the reserved part of one block.
///
/// For each query `i` with best match `i_b`, every target entry
/// `reserved(i_b, j)` that is strictly positive in the pre-fusion snapshot
/// is incremented by `clamp(rho, 0, 1) * S_H * source(., j)`, where `S_H` is
/// the prune-string similarity of rows `i` and `i_b` and the source row is
/// picked by `FusionSource`. All reads come from the snapshot, so the result
/// does not depend on query order. Returns the fused matrix and the number
/// of nonzero transfers applied.
pub fn fuse_block(
    split: &PruneSplit,
    matches: &MatchTable,
    source: FusionSource,
) -> (Matrix, u64) {
    let omega = split.reserved.rows();
    let mut fused = split.reserved.clone();
    let mut events = 0u64;
    if matches.entries.len() != omega {
        // No matches (single-query chunks): nothing to fuse.
        return (fused, events);
    }
    for i in 0..omega {
        let entry = &matches.entries[i];
        let i_b = entry.best;
        let s_h = hamming_similarity(split.mask.row(i), split.mask.row(i_b))
            .expect("mask rows share the block width");
        // A negative similarity would subtract information; clamp to [0, 1].
        let alpha = entry.rho.clamp(0.0, 1.0) * s_h;
        let src_row = match source {
            FusionSource::MatchedRow => i_b,
            FusionSource::SelfRow => i,
        };
        for j in 0..omega {
            if split.reserved.get(i_b, j) > 0.0 {
                let increment = alpha * split.pruned.get(src_row, j);
                if increment != 0.0 {
                    fused.set(i_b, j, fused.get(i_b, j) + increment);
                    events += 1;
                }
            }
        }
    }
    (fused, events)
}

/// Result of assembling all fused blocks into one attention map.
#[derive(Debug, Clone)]
pub struct AssembledAttention {
    /// Row-stochastic `N x N` matrix, zero outside the retained support.
    pub probs: Matrix,
    /// Effective support of `probs` (retained union, plus diagonal entries
    /// for rows that had nothing retained).
    pub support: Mask,
    /// Rows that had no retained entries and fell back to a uniform
    /// distribution over their diagonal-block columns.
    pub empty_row_fallbacks: u64,
}

/// Assemble fused block matrices into a full row-stochastic attention map.
///
/// `GlobalRow` softmaxes each full row over its retained entries.
/// `PerBlock` softmaxes each block row independently, concatenates, and
/// rescales the full row by its sum so it stays a distribution. A row with
/// no retained entries anywhere falls back to uniform weight over its
/// diagonal-block columns (impossible while diagonal blocks stay dense).
pub fn assemble_and_normalize(
    fused: &[Matrix],
    masks: &[Mask],
    part: &ChunkPartition,
    mode: Normalization,
) -> Result<AssembledAttention> {
    let c = part.n_chunks();
    let omega = part.chunk_size();
    let n = part.n_tokens();
    if fused.len() != c * c || masks.len() != c * c {
        return Err(Error::Shape(format!(
            "assemble: expected {} blocks, got {} fused / {} masks",
            c * c,
            fused.len(),
            masks.len()
        )));
    }

    let mut probs = Matrix::zeros(n, n);
    let mut support = Mask::new(n, n);
    let mut fallbacks = 0u64;

    for m in 0..c {
        for i in 0..omega {
            let r = part.chunk_start(m) + i;
            match mode {
                Normalization::GlobalRow => {
                    // Gather retained logits across the whole row in column order.
                    let mut cols: Vec<usize> = Vec::new();
                    let mut logits: Vec<f64> = Vec::new();
                    for nn in 0..c {
                        let b = m * c + nn;
                        for j in 0..omega {
                            if masks[b].get(i, j) {
                                cols.push(part.chunk_start(nn) + j);
                                logits.push(fused[b].get(i, j));
                            }
                        }
                    }
                    if cols.is_empty() {
                        fill_fallback_row(&mut probs, &mut support, part, m, r);
                        fallbacks += 1;
                        continue;
                    }
                    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let mut sum = 0.0;
                    for v in logits.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for (col, v) in cols.iter().zip(logits.iter()) {
                        probs.set(r, *col, v / sum);
                        support.set(r, *col, true);
                    }
                }
                Normalization::PerBlock => {
                    let mut row_sum = 0.0;
                    for nn in 0..c {
                        let b = m * c + nn;
                        let mut cols: Vec<usize> = Vec::new();
                        let mut logits: Vec<f64> = Vec::new();
                        for j in 0..omega {
                            if masks[b].get(i, j) {
                                cols.push(part.chunk_start(nn) + j);
                                logits.push(fused[b].get(i, j));
                            }
                        }
                        if cols.is_empty() {
                            continue;
                        }
                        let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                        let mut sum = 0.0;
                        for v in logits.iter_mut() {
                            *v = (*v - max).exp();
                            sum += *v;
                        }
                        for (col, v) in cols.iter().zip(logits.iter()) {
                            let p = v / sum;
                            probs.set(r, *col, p);
                            support.set(r, *col, true);
                            row_sum += p;
                        }
                    }
                    if row_sum == 0.0 {
                        fill_fallback_row(&mut probs, &mut support, part, m, r);
                        fallbacks += 1;
                        continue;
                    }
                    // Each nonempty block row contributes 1; dividing by the
                    // actual sum keeps the row stochastic even when some
                    // block rows are empty.
                    for col in 0..n {
                        let v = probs.get(r, col);
                        if v != 0.0 {
                            probs.set(r, col, v / row_sum);
                        }
                    }
                }
            }
        }
    }

    Ok(AssembledAttention {
        probs,
        support,
        empty_row_fallbacks: fallbacks,
    })
}

fn fill_fallback_row(probs: &mut Matrix, support: &mut Mask, part: &ChunkPartition, m: usize, r: usize) {
    let omega = part.chunk_size();
    let base = part.chunk_start(m);
    for j in 0..omega {
        probs.set(r, base + j, 1.0 / omega as f64);
        support.set(r, base + j, true);
    }
}

/// Observability counters for one pipeline run.
#[derive(Debug, Clone, Serialize)]
pub struct AttentionStats {
    /// Fraction of the `N x N` attention map retained by the masks.
    pub retained_fraction: f64,
    /// Number of nonzero fusion transfers applied.
    pub fusion_events: u64,
    /// Mask entries where mirroring disagreed with recomputing the lower
    /// block directly. Zero for symmetric kernels and for unshared weights.
    pub mirror_mask_disagreement: u64,
    /// Rows that fell back to uniform diagonal weight.
    pub empty_row_fallbacks: u64,
    /// Analytic per-stage cost model for this configuration.
    pub flops: FlopReport,
}

/// Everything a pipeline run produces, including diagnostics.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    /// Attention output, `N x d`.
    pub output: Matrix,
    /// Assembled row-stochastic attention map, `N x N`.
    pub attention: Matrix,
    /// Effective support of the attention map.
    pub support: Mask,
    pub stats: AttentionStats,
}

/// Run the full pruned-attention pipeline and keep the assembled map and
/// support for inspection.
///
/// Stages: project, partition, per-block logits, smoothing, top-k split
/// (with the upper-triangular mirror fast path under shared weights), query
/// matching, fusion, row assembly, and value aggregation. Per-block work
/// runs in parallel on the current rayon pool; results are deterministic
/// for any thread count.
pub fn run_pipeline(
    tokens: &Matrix,
    weights: &ProjectionWeights,
    config: &BspfConfig,
) -> Result<PipelineRun> {
    config.validate()?;
    if weights.shared_qk() != config.shared_qk {
        return Err(Error::Config(format!(
            "shared_qk: config says {} but weights were built with {}",
            config.shared_qk,
            weights.shared_qk()
        )));
    }
    let proj = project(tokens, weights)?;
    let part = make_partition(tokens.rows(), config.chunk_size)?;
    let c = part.n_chunks();
    let omega = part.chunk_size();
    let n = part.n_tokens();

    // Matching is per query chunk and shared by every block in that row.
    let matches: Vec<MatchTable> = (0..c)
        .map(|m| best_match(&chunk_queries(&proj, &part, m), config.metric))
        .collect::<Result<_>>()?;

    // Blocks computed directly; under shared weights only the upper triangle.
    let direct: Vec<(usize, usize)> = if config.shared_qk {
        (0..c)
            .flat_map(|m| (m..c).map(move |nn| (m, nn)))
            .collect()
    } else {
        (0..c)
            .flat_map(|m| (0..c).map(move |nn| (m, nn)))
            .collect()
    };

    let computed: Vec<Result<((usize, usize), PruneSplit)>> = direct
        .par_iter()
        .map(|&(m, nn)| {
            let block = block_logits(&proj, &part, m, nn)?;
            let split = if is_pruned_block(m, nn, config) {
                let scores = smooth_scores(&block, &config.kernel);
                split_topk(&block, &scores, config.keep_ratio)?
            } else {
                dense_split(&block)
            };
            Ok(((m, nn), split))
        })
        .collect();

    let mut grid: Vec<Option<PruneSplit>> = vec![None; c * c];
    for item in computed {
        let ((m, nn), split) = item?;
        grid[m * c + nn] = Some(split);
    }

    // Mirror pass for the lower triangle, plus the disagreement diagnostic
    // when the kernel does not commute with transposition.
    let mut mirror_disagreement = 0u64;
    if config.shared_qk {
        let check_mirror = !config.kernel.is_symmetric();
        for m in 0..c {
            for nn in (m + 1)..c {
                let upper = grid[m * c + nn].as_ref().expect("upper block computed");
                let mirrored = mirror_split(upper, true)?;
                if check_mirror {
                    let lower_block = crate::attention::AttentionBlock {
                        m: nn,
                        n: m,
                        logits: transposed_block_logits(upper),
                    };
                    let scores = smooth_scores(&lower_block, &config.kernel);
                    let direct_split = split_topk(&lower_block, &scores, config.keep_ratio)?;
                    for i in 0..omega {
                        for j in 0..omega {
                            if direct_split.mask.get(i, j) != mirrored.mask.get(i, j) {
                                mirror_disagreement += 1;
                            }
                        }
                    }
                }
                grid[nn * c + m] = Some(mirrored);
            }
        }
    }

    let splits: Vec<PruneSplit> = grid
        .into_iter()
        .map(|s| s.expect("all blocks populated"))
        .collect();

    // Fusion per block, reading the per-chunk match tables.
    let fused_pairs: Vec<(Matrix, u64)> = splits
        .par_iter()
        .enumerate()
        .map(|(b, split)| {
            let (m, nn) = (b / c, b % c);
            if is_pruned_block(m, nn, config) && omega >= 2 {
                fuse_block(split, &matches[m], config.fusion_source)
            } else {
                (split.reserved.clone(), 0)
            }
        })
        .collect();

    let fusion_events: u64 = fused_pairs.iter().map(|(_, e)| e).sum();
    let fused: Vec<Matrix> = fused_pairs.into_iter().map(|(f, _)| f).collect();
    let masks: Vec<Mask> = splits.iter().map(|s| s.mask.clone()).collect();

    let assembled = assemble_and_normalize(&fused, &masks, &part, config.normalization)?;
    let output = assembled.probs.matmul(&proj.v)?;

    let retained: usize = masks.iter().map(|m| m.popcount()).sum();
    let stats = AttentionStats {
        retained_fraction: retained as f64 / (n * n) as f64,
        fusion_events,
        mirror_mask_disagreement: mirror_disagreement,
        empty_row_fallbacks: assembled.empty_row_fallbacks,
        flops: flops_attention(n, proj.q.cols(), config)?,
    };

    Ok(PipelineRun {
        output,
        attention: assembled.probs,
        support: assembled.support,
        stats,
    })
}

/// Pruned attention end to end: returns the `N x d` output and run stats.
pub fn bspf_attention(
    tokens: &Matrix,
    weights: &ProjectionWeights,
    config: &BspfConfig,
) -> Result<(Matrix, AttentionStats)> {
    let run = run_pipeline(tokens, weights, config)?;
    Ok((run.output, run.stats))
}

fn is_pruned_block(m: usize, n: usize, config: &BspfConfig) -> bool {
    m != n || config.prune_diagonal
}

/// Lower-block logits reconstructed from an upper split. Reserved and pruned
/// parts have disjoint supports, so their sum is the original block exactly.
fn transposed_block_logits(split: &PruneSplit) -> Matrix {
    let r = &split.reserved;
    let mut out = Matrix::zeros(r.cols(), r.rows());
    for i in 0..r.rows() {
        for j in 0..r.cols() {
            out.set(j, i, r.get(i, j) + split.pruned.get(i, j));
        }
    }
    out
}

fn chunk_queries(proj: &ProjectionSet, part: &ChunkPartition, m: usize) -> Matrix {
    let omega = part.chunk_size();
    let d = proj.q.cols();
    let base = part.chunk_start(m);
    let mut out = Matrix::zeros(omega, d);
    for i in 0..omega {
        for t in 0..d {
            out.set(i, t, proj.q.get(base + i, t));
        }
    }
    out
}
