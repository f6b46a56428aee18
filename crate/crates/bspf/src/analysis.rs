//! Analytic cost model for dense, chunked, and pruned attention, plus a
//! whole-transformer-stack roll-up and a sparsity summary.
//!
//! Counting convention (also embedded in every report): one multiply-add
//! costs 2 ops, one exponential costs 10, comparisons and other scalar ops
//! (add, divide, square root) cost 1. `total_multiply_adds` additionally
//! exposes the raw multiply-add count, which is the unit transformer papers
//! usually quote as "FLOPs".

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{AttentionStats, BspfConfig};
use crate::pruning::retained_count;

pub const FLOP_CONVENTION: &str =
    "multiply-add=2 ops, exp=10 ops, compare/add/div/sqrt=1 op; total_multiply_adds counts multiply-adds only";

/// Transformer stack dimensions for the whole-model roll-up.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ModelDims {
    pub n_tokens: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub mlp_ratio: f64,
}

impl ModelDims {
    pub fn new(
        n_tokens: usize,
        model_dim: usize,
        n_heads: usize,
        n_layers: usize,
        mlp_ratio: f64,
    ) -> Result<Self> {
        if n_tokens == 0 || model_dim == 0 || n_heads == 0 || n_layers == 0 || mlp_ratio <= 0.0 {
            return Err(Error::Config("model dims: all values must be positive".into()));
        }
        if model_dim % n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim: {} is not divisible by n_heads {}",
                model_dim, n_heads
            )));
        }
        Ok(ModelDims {
            n_tokens,
            model_dim,
            n_heads,
            n_layers,
            mlp_ratio,
        })
    }

    /// DeiT-S encoder stack: 197 tokens, width 384, 6 heads, 12 layers.
    pub fn deit_small() -> Self {
        ModelDims::new(197, 384, 6, 12, 4.0).expect("preset is valid")
    }

    /// DeiT-T encoder stack: 197 tokens, width 192, 3 heads, 12 layers.
    pub fn deit_tiny() -> Self {
        ModelDims::new(197, 192, 3, 12, 4.0).expect("preset is valid")
    }
}

/// Per-stage op counts under the documented convention.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct FlopStages {
    pub qkv_projection: u64,
    pub logits: u64,
    pub score_conv: u64,
    pub topk: u64,
    pub matching: u64,
    pub fusion: u64,
    pub softmax: u64,
    pub value_aggregation: u64,
    pub mlp: u64,
}

impl FlopStages {
    fn sum(&self) -> u64 {
        self.qkv_projection
            + self.logits
            + self.score_conv
            + self.topk
            + self.matching
            + self.fusion
            + self.softmax
            + self.value_aggregation
            + self.mlp
    }
}

/// Analytic cost report for one configuration.
#[derive(Debug, Clone, Serialize)]
pub struct FlopReport {
    pub convention: &'static str,
    pub stages: FlopStages,
    /// Sum of all stages, in ops.
    pub total: u64,
    /// Multiply-adds only, across all stages.
    pub total_multiply_adds: u64,
    /// Multiply-adds spent aggregating values of off-diagonal blocks;
    /// proportional to the retained fraction of those blocks.
    pub offdiag_value_multiply_adds: u64,
    /// `total` divided by the dense baseline's total for the same shape.
    pub ratio_vs_dense: f64,
    pub notes: Vec<String>,
}

// Internal tally in primitive units, converted to ops at the end.
#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    mul_add: u64,
    exp: u64,
    scalar: u64, // compares, adds, divides, square roots
}

impl Tally {
    fn ops(&self) -> u64 {
        2 * self.mul_add + 10 * self.exp + self.scalar
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct StageTallies {
    qkv_projection: Tally,
    logits: Tally,
    score_conv: Tally,
    topk: Tally,
    matching: Tally,
    fusion: Tally,
    softmax: Tally,
    value_aggregation: Tally,
    mlp: Tally,
    offdiag_value_mul_add: u64,
}

impl StageTallies {
    fn to_stages(self) -> FlopStages {
        FlopStages {
            qkv_projection: self.qkv_projection.ops(),
            logits: self.logits.ops(),
            score_conv: self.score_conv.ops(),
            topk: self.topk.ops(),
            matching: self.matching.ops(),
            fusion: self.fusion.ops(),
            softmax: self.softmax.ops(),
            value_aggregation: self.value_aggregation.ops(),
            mlp: self.mlp.ops(),
        }
    }

    fn mul_adds(&self) -> u64 {
        self.qkv_projection.mul_add
            + self.logits.mul_add
            + self.score_conv.mul_add
            + self.topk.mul_add
            + self.matching.mul_add
            + self.fusion.mul_add
            + self.softmax.mul_add
            + self.value_aggregation.mul_add
            + self.mlp.mul_add
    }
}

fn ceil_log2(x: u64) -> u64 {
    if x <= 1 {
        0
    } else {
        64 - (x - 1).leading_zeros() as u64
    }
}

/// Stage tallies for one single-head attention pass of `n` tokens at
/// feature width `d`. Closed forms, block-counted:
///
/// - projections: 3 (or 2 with shared weights) `n*d*d` products
/// - logits: `omega^2 * d` per computed block; the symmetric fast path
///   computes only upper-triangular plus diagonal blocks
/// - smoothing: 9 multiply-adds per entry of each scored block; the
///   symmetric path scores upper off-diagonal blocks once
/// - top-k: `omega^2 * ceil(log2(omega^2))` comparisons per scored block
/// - matching: pairwise dots and norms per chunk, charged once pruning is
///   active and chunks have at least two queries
/// - fusion: per pruned block, one hamming pass, one guard pass, and one
///   multiply-add per entry
/// - softmax: 10 (exp) + 3 (max scan, accumulate, divide) ops per retained
///   entry
/// - value aggregation: `d` multiply-adds per retained entry
fn attention_tallies(n: usize, d: usize, config: &BspfConfig) -> Result<StageTallies> {
    config.validate()?;
    let omega = config.chunk_size;
    if n % omega != 0 {
        return Err(Error::Config(format!(
            "n_tokens: {} is not divisible by chunk_size {}",
            n, omega
        )));
    }
    let c = (n / omega) as u64;
    let o2 = (omega * omega) as u64;
    let du = d as u64;
    let nu = n as u64;

    let pruned_blocks = c * c - c + if config.prune_diagonal { c } else { 0 };
    let scored_blocks = if config.shared_qk {
        (c * c - c) / 2 + if config.prune_diagonal { c } else { 0 }
    } else {
        pruned_blocks
    };
    let computed_blocks = if config.shared_qk {
        c * (c + 1) / 2
    } else {
        c * c
    };
    let dense_blocks = if config.prune_diagonal { 0 } else { c };
    let keep = retained_count(config.keep_ratio, omega) as u64;
    let retained = dense_blocks * o2 + pruned_blocks * keep;

    let mut t = StageTallies::default();

    let projections = if config.shared_qk { 2 } else { 3 };
    t.qkv_projection.mul_add = projections * nu * du * du;

    t.logits.mul_add = computed_blocks * o2 * du;

    t.score_conv.mul_add = scored_blocks * o2 * 9;

    t.topk.scalar = scored_blocks * o2 * ceil_log2(o2);

    let fusion_active = pruned_blocks > 0 && omega >= 2;
    if fusion_active {
        let ou = omega as u64;
        // Pairwise dots plus per-row norms, then a sqrt, divide, and compare
        // per candidate pair.
        t.matching.mul_add = c * (ou * (ou - 1) * du + ou * du);
        t.matching.scalar = c * (ou + 2 * ou * (ou - 1));
        t.fusion.mul_add = pruned_blocks * o2;
        t.fusion.scalar = pruned_blocks * 2 * o2;
    }

    t.softmax.exp = retained;
    t.softmax.scalar = 3 * retained;

    t.value_aggregation.mul_add = retained * du;
    t.offdiag_value_mul_add = (c * c - c) * keep * du;

    Ok(t)
}

/// Dense single-head baseline for `n` tokens at width `d`: three
/// projections, full logits, full softmax, full value aggregation.
pub fn dense_attention_tally(n: usize, d: usize) -> u64 {
    let nu = n as u64;
    let du = d as u64;
    let mut t = Tally::default();
    t.mul_add = 3 * nu * du * du + nu * nu * du + nu * nu * du;
    t.exp = nu * nu;
    t.scalar = 3 * nu * nu;
    t.ops()
}

/// Cost model for one single-head attention pass under `config`.
pub fn flops_attention(n: usize, d: usize, config: &BspfConfig) -> Result<FlopReport> {
    let t = attention_tallies(n, d, config)?;
    let stages = t.to_stages();
    let total = stages.sum();
    let dense = dense_attention_tally(n, d);
    Ok(FlopReport {
        convention: FLOP_CONVENTION,
        stages,
        total,
        total_multiply_adds: t.mul_adds(),
        offdiag_value_multiply_adds: t.offdiag_value_mul_add,
        ratio_vs_dense: total as f64 / dense as f64,
        notes: vec![],
    })
}

/// Cost model for a full transformer stack: per-layer attention across all
/// heads, the four width-by-width projections, and the MLP.
///
/// The MLP is charged at the full token count; pruning here reduces only
/// attention-internal work, not the number of tokens flowing through the
/// MLP, and the report says so.
pub fn flops_vit(dims: &ModelDims, config: &BspfConfig) -> Result<FlopReport> {
    let head_dim = dims.model_dim / dims.n_heads;
    let per_head = attention_tallies(dims.n_tokens, head_dim, config)?;
    let heads = dims.n_heads as u64;
    let layers = dims.n_layers as u64;
    let nu = dims.n_tokens as u64;
    let du = dims.model_dim as u64;

    let mut t = StageTallies::default();
    let scale = |x: Tally| Tally {
        mul_add: x.mul_add * heads * layers,
        exp: x.exp * heads * layers,
        scalar: x.scalar * heads * layers,
    };
    t.logits = scale(per_head.logits);
    t.score_conv = scale(per_head.score_conv);
    t.topk = scale(per_head.topk);
    t.matching = scale(per_head.matching);
    t.fusion = scale(per_head.fusion);
    t.softmax = scale(per_head.softmax);
    t.value_aggregation = scale(per_head.value_aggregation);
    t.offdiag_value_mul_add = per_head.offdiag_value_mul_add * heads * layers;

    // Model-width projections: Q, K (skipped when shared), V, and the
    // attention output projection.
    let projections = if config.shared_qk { 3 } else { 4 };
    t.qkv_projection.mul_add = layers * projections * nu * du * du;

    let hidden = (dims.mlp_ratio * du as f64).round() as u64;
    t.mlp.mul_add = layers * 2 * nu * du * hidden;

    let stages = t.to_stages();
    let total = stages.sum();
    let dense = dense_vit_tally(dims);
    Ok(FlopReport {
        convention: FLOP_CONVENTION,
        stages,
        total,
        total_multiply_adds: t.mul_adds(),
        offdiag_value_multiply_adds: t.offdiag_value_mul_add,
        ratio_vs_dense: total as f64 / dense as f64,
        notes: vec![
            "mlp charged at full token count; pruning reduces attention work only".into(),
        ],
    })
}

/// Dense transformer-stack baseline in ops.
pub fn dense_vit_tally(dims: &ModelDims) -> u64 {
    let nu = dims.n_tokens as u64;
    let du = dims.model_dim as u64;
    let layers = dims.n_layers as u64;
    let hidden = (dims.mlp_ratio * du as f64).round() as u64;
    let mut t = Tally::default();
    // 4 projections + QK^T + AV per layer, all heads together, plus MLP.
    t.mul_add = layers * (4 * nu * du * du + 2 * nu * nu * du + 2 * nu * du * hidden);
    t.exp = layers * nu * nu;
    t.scalar = layers * 3 * nu * nu;
    t.ops()
}

/// Human- and machine-readable sparsity summary for one run.
#[derive(Debug, Clone, Serialize)]
pub struct SparsityReport {
    pub chunk_size: usize,
    pub keep_ratio: f64,
    pub metric: &'static str,
    pub shared_qk: bool,
    pub prune_diagonal: bool,
    pub retained_fraction: f64,
    pub fusion_events: u64,
    pub mirror_mask_disagreement: u64,
    pub empty_row_fallbacks: u64,
    pub flops_total: u64,
    pub flops_ratio_vs_dense: f64,
}

pub fn sparsity_report(stats: &AttentionStats, config: &BspfConfig) -> SparsityReport {
    SparsityReport {
        chunk_size: config.chunk_size,
        keep_ratio: config.keep_ratio,
        metric: config.metric.name(),
        shared_qk: config.shared_qk,
        prune_diagonal: config.prune_diagonal,
        retained_fraction: stats.retained_fraction,
        fusion_events: stats.fusion_events,
        mirror_mask_disagreement: stats.mirror_mask_disagreement,
        empty_row_fallbacks: stats.empty_row_fallbacks,
        flops_total: stats.flops.total,
        flops_ratio_vs_dense: stats.flops.ratio_vs_dense,
    }
}

impl std::fmt::Display for SparsityReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "chunk_size={} keep_ratio={} metric={} shared_qk={} prune_diagonal={}",
            self.chunk_size, self.keep_ratio, self.metric, self.shared_qk, self.prune_diagonal
        )?;
        writeln!(f, "retained_fraction = {:.9}", self.retained_fraction)?;
        writeln!(f, "fusion_events = {}", self.fusion_events)?;
        writeln!(
            f,
            "mirror_mask_disagreement = {}",
            self.mirror_mask_disagreement
        )?;
        writeln!(f, "empty_row_fallbacks = {}", self.empty_row_fallbacks)?;
        write!(
            f,
            "flops_total = {} (x{:.6} vs dense)",
            self.flops_total, self.flops_ratio_vs_dense
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config(omega: usize, keep: f64, shared: bool) -> BspfConfig {
        let mut c = BspfConfig::new(omega, keep);
        c.shared_qk = shared;
        c
    }

    #[test]
    fn dense_equivalence_of_closed_forms() {
        // One full-size chunk with a dense diagonal is exactly the dense
        // attention cost.
        let n = 16;
        let d = 8;
        let report = flops_attention(n, d, &base_config(n, 1.0, false)).unwrap();
        assert_eq!(report.total, dense_attention_tally(n, d));
        assert_eq!(report.stages.logits, 2 * (n * n * d) as u64);
        assert_eq!(report.stages.score_conv, 0);
        assert_eq!(report.stages.matching, 0);
        assert!((report.ratio_vs_dense - 1.0).abs() < 1e-12);
    }

    #[test]
    fn halving_keep_halves_offdiag_value_cost() {
        let full = flops_attention(16, 8, &base_config(4, 1.0, false)).unwrap();
        let half = flops_attention(16, 8, &base_config(4, 0.5, false)).unwrap();
        assert_eq!(
            2 * half.offdiag_value_multiply_adds,
            full.offdiag_value_multiply_adds
        );
    }

    #[test]
    fn symmetric_mode_scales_scoring_by_block_ratio() {
        let mut asym = base_config(4, 0.5, false);
        asym.prune_diagonal = true;
        let mut sym = base_config(4, 0.5, true);
        sym.prune_diagonal = true;
        let a = flops_attention(16, 8, &asym).unwrap();
        let s = flops_attention(16, 8, &sym).unwrap();
        // C = 4: scored blocks 16 vs 4*3/2 + 4 = 10.
        let expect = (4 * 3 / 2 + 4) as f64 / 16.0;
        let got = (s.stages.score_conv + s.stages.topk) as f64
            / (a.stages.score_conv + a.stages.topk) as f64;
        assert!((got - expect).abs() < 1e-12);
        assert!(s.total <= a.total);
    }

    #[test]
    fn symmetric_total_never_exceeds_asymmetric() {
        for omega in [2, 4, 8] {
            for keep in [0.25, 0.5, 1.0] {
                for prune_diag in [false, true] {
                    let mut a = base_config(omega, keep, false);
                    a.prune_diagonal = prune_diag;
                    let mut s = base_config(omega, keep, true);
                    s.prune_diagonal = prune_diag;
                    let ra = flops_attention(16, 8, &a).unwrap();
                    let rs = flops_attention(16, 8, &s).unwrap();
                    assert!(rs.total <= ra.total);
                }
            }
        }
    }

    #[test]
    fn ratio_is_scale_free_in_width() {
        let c1 = base_config(4, 1.0, false);
        let r1 = flops_attention(16, 8, &c1).unwrap();
        let r2 = flops_attention(16, 16, &c1).unwrap();
        // Dense logits and value stages double with d on both sides.
        assert_eq!(2 * r1.stages.logits, r2.stages.logits);
        assert_eq!(2 * r1.stages.value_aggregation, r2.stages.value_aggregation);
    }

    #[test]
    fn deit_anchors_in_multiply_adds() {
        let dense = BspfConfig {
            chunk_size: 197,
            keep_ratio: 1.0,
            shared_qk: false,
            ..BspfConfig::new(197, 1.0)
        };
        let s = flops_vit(&ModelDims::deit_small(), &dense).unwrap();
        let t = flops_vit(&ModelDims::deit_tiny(), &dense).unwrap();
        let s_g = s.total_multiply_adds as f64 / 1e9;
        let t_g = t.total_multiply_adds as f64 / 1e9;
        assert!((s_g - 4.6).abs() <= 0.46, "DeiT-S landed at {} G", s_g);
        assert!((t_g - 1.3).abs() <= 0.13, "DeiT-T landed at {} G", t_g);
    }

    #[test]
    fn vit_total_is_monotone_in_keep_ratio() {
        let dims = ModelDims::new(192, 384, 6, 12, 4.0).unwrap();
        let mut prev = 0u64;
        for keep in [0.4, 0.5, 0.6, 0.7, 0.8, 0.9] {
            let mut config = BspfConfig::new(4, keep);
            config.shared_qk = true;
            let r = flops_vit(&dims, &config).unwrap();
            assert!(r.total >= prev);
            prev = r.total;
        }
    }

    #[test]
    fn report_total_is_stage_sum_and_json_shape() {
        let r = flops_attention(16, 8, &base_config(4, 0.5, true)).unwrap();
        let sum = r.stages.qkv_projection
            + r.stages.logits
            + r.stages.score_conv
            + r.stages.topk
            + r.stages.matching
            + r.stages.fusion
            + r.stages.softmax
            + r.stages.value_aggregation
            + r.stages.mlp;
        assert_eq!(r.total, sum);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json.get("stages").is_some());
        assert!(json.get("total").is_some());
        assert!(json.get("ratio_vs_dense").is_some());
    }

    #[test]
    fn indivisible_tokens_are_rejected() {
        assert!(flops_attention(10, 4, &base_config(4, 0.5, false)).is_err());
        assert!(ModelDims::new(197, 384, 5, 12, 4.0).is_err());
    }
}
