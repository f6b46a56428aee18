//! Block-based symmetric pruning and fusion for attention maps.
//!
//! The pipeline chunks tokens, computes per-block scaled logits, smooths
//! each block with a 3x3 kernel, keeps the top-scoring fraction of entries,
//! fuses pruned mass into the best-matching retained rows, and normalizes
//! the assembled rows into a sparse attention map. Shared query/key weights
//! make the logit matrix symmetric, so pruning decisions are made for the
//! upper triangle only and mirrored.
//!
//! Everything is deterministic: fixtures come from a fixed-constant LCG,
//! accumulations run in one documented order, and per-block parallelism
//! never changes results.

pub mod analysis;
pub mod attention;
pub mod error;
pub mod fusion;
pub mod matrix;
pub mod pruning;

pub use analysis::{
    dense_attention_tally, dense_vit_tally, flops_attention, flops_vit, sparsity_report,
    FlopReport, FlopStages, ModelDims, SparsityReport, FLOP_CONVENTION,
};
pub use attention::{
    block_logits, dense_attention, dense_attention_map, make_partition, project, AttentionBlock,
    ChunkPartition, ProjectionSet, ProjectionWeights,
};
pub use error::{Error, Result};
pub use fusion::{
    assemble_and_normalize, best_match, bspf_attention, fuse_block, hamming_similarity,
    run_pipeline, AssembledAttention, AttentionStats, BspfConfig, FusionSource, MatchEntry,
    MatchTable, Normalization, PipelineRun,
};
pub use matrix::{fixture_tokens, similarity, softmax_row, FixtureRng, Matrix, SimilarityMetric};
pub use pruning::{
    dense_split, mirror_split, retained_count, smooth_scores, split_topk, ConvKernel, Mask,
    PruneSplit,
};
