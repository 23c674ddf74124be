//! Closed-form work and cache-size model of a predictor pass.

use serde::{Deserialize, Serialize};
use taco_tensor::flops::FlopCounts;

use crate::config::ModelConfig;

/// Shape of one predictor call.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostQuery {
    /// Context rows (N for the uncompressed context, K otherwise).
    pub context_rows: usize,
    /// Feature columns M.
    pub features: usize,
    pub test_rows: usize,
    pub cached: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub counts: FlopCountsDto,
    /// Bytes of the key/value cache over the context (0 when uncached).
    pub cache_bytes: u64,
}

/// Serializable mirror of [`FlopCounts`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCountsDto {
    pub linear_macs: u64,
    pub context_pairs: u64,
    pub query_context_pairs: u64,
    pub query_self_pairs: u64,
    pub col_pairs: u64,
    pub attention_macs: u64,
}

impl From<FlopCounts> for FlopCountsDto {
    fn from(c: FlopCounts) -> Self {
        Self {
            linear_macs: c.linear_macs,
            context_pairs: c.context_pairs,
            query_context_pairs: c.query_context_pairs,
            query_self_pairs: c.query_self_pairs,
            col_pairs: c.col_pairs,
            attention_macs: c.attention_macs,
        }
    }
}

/// Work of one predict call through `cfg.blocks` predictor blocks and the
/// class head, matching what the kernels count. The cached variant runs
/// only the query rows against stored keys and values.
pub fn cost_model(cfg: &ModelConfig, q: CostQuery) -> CostEstimate {
    let (r, t, b, l) = (
        q.context_rows as u64,
        q.test_rows as u64,
        cfg.blocks as u64,
        cfg.embed_dim as u64,
    );
    let cols = q.features as u64 + 1;
    let rows = if q.cached { t } else { r + t };
    let context_pairs = if q.cached { 0 } else { b * cols * r * r };
    let query_context_pairs = b * cols * t * r;
    let query_self_pairs = b * cols * t;
    let col_pairs = b * rows * cols * cols;
    let attention_macs = 2 * l * (context_pairs + query_context_pairs + query_self_pairs + col_pairs);
    // Row and column attention each project q, k, v and o.
    let per_token = 8 * l * l + 2 * l * (cfg.ffn_dim() as u64);
    let linear_macs = b * rows * cols * per_token + t * l * cfg.num_classes_max as u64;
    let cache_bytes = if q.cached { 2 * b * r * cols * l * 8 } else { 0 };
    CostEstimate {
        counts: FlopCountsDto {
            linear_macs,
            context_pairs,
            query_context_pairs,
            query_self_pairs,
            col_pairs,
            attention_macs,
        },
        cache_bytes,
    }
}

/// Largest single activation (bytes) of an uncached or cached predict call:
/// the feed-forward hidden layer over every token in the pass.
pub fn peak_activation_bytes(cfg: &ModelConfig, q: CostQuery) -> usize {
    let rows = if q.cached { q.test_rows } else { q.context_rows + q.test_rows };
    rows * (q.features + 1) * cfg.ffn_dim() * 8
}
