//! Compressing large tables chunk by chunk and stitching the summaries.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use taco_tensor::Tensor;

use crate::compressor::{compress, k_for_rate_with, CompressedContext, KRounding};
use crate::error::{Error, Result};
use crate::model::TacoModel;
use crate::table::Table;

/// Chunk size for a training table of `n` rows.
pub fn chunk_policy(n: usize) -> usize {
    match n {
        0..2000 => 500,
        2000..10000 => 1000,
        10000..20000 => 5000,
        _ => 10000,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub chunk_size: usize,
    /// Half-open row ranges covering `0..n` in order.
    pub bounds: Vec<(usize, usize)>,
    pub ks: Vec<usize>,
}

impl ChunkPlan {
    /// Consecutive chunks of `chunk_size` rows (the last may be shorter),
    /// each compressed to `max(min_k, round_half_up(rate * rows))` rows.
    pub fn new(n: usize, chunk_size: usize, rate: f64, min_k: usize) -> Result<Self> {
        Self::with_rounding(n, chunk_size, rate, min_k, KRounding::HalfUp)
    }

    pub fn with_rounding(n: usize, chunk_size: usize, rate: f64, min_k: usize, rounding: KRounding) -> Result<Self> {
        if n == 0 || chunk_size == 0 {
            return Err(Error::Config("chunking needs rows and a positive chunk size".into()));
        }
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::Config(format!("compression rate {rate} outside (0, 1]")));
        }
        let bounds: Vec<(usize, usize)> = (0..n)
            .step_by(chunk_size)
            .map(|s| (s, (s + chunk_size).min(n)))
            .collect();
        let ks = bounds.iter().map(|&(s, e)| k_for_rate_with(e - s, rate, min_k, rounding)).collect();
        Ok(Self { chunk_size, bounds, ks })
    }

    pub fn total_k(&self) -> usize {
        self.ks.iter().sum()
    }
}

/// Shuffles the rows into the disjoint chunks of `plan`, compresses each
/// one on its own and concatenates the summaries in chunk order. Only one
/// chunk's activations are alive at a time.
pub fn chunk_and_stitch(
    train: &Table,
    plan: &ChunkPlan,
    model: &TacoModel,
    rng: &mut impl Rng,
) -> Result<CompressedContext> {
    let n = train.n_rows();
    if plan.bounds.last().map(|b| b.1) != Some(n) {
        return Err(Error::Config(format!("chunk plan does not cover {n} rows")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let (cols, l) = (train.n_features() + 1, model.cfg.embed_dim);
    let mut data = Vec::with_capacity(plan.total_k() * cols * l);
    for (&(s, e), &k) in plan.bounds.iter().zip(&plan.ks) {
        let chunk = train.select_rows(&order[s..e]);
        let ctx = compress(&chunk, k, model, rng)?;
        data.extend_from_slice(ctx.latents.data());
    }
    let latents = Tensor::new(vec![plan.total_k(), cols, l], data)?;
    let ctx = CompressedContext {
        latents,
        n_train: n,
        source_fingerprint: train.fingerprint(),
        compressor_version: model.compressor_version(),
        bridged: false,
    };
    Ok(ctx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_regimes() {
        assert_eq!(chunk_policy(1), 500);
        assert_eq!(chunk_policy(1999), 500);
        assert_eq!(chunk_policy(2000), 1000);
        assert_eq!(chunk_policy(9999), 1000);
        assert_eq!(chunk_policy(10000), 5000);
        assert_eq!(chunk_policy(19999), 5000);
        assert_eq!(chunk_policy(20000), 10000);
    }

    #[test]
    fn plan_covers_every_row() {
        let p = ChunkPlan::new(1234, 500, 0.01, 1).unwrap();
        assert_eq!(p.bounds, vec![(0, 500), (500, 1000), (1000, 1234)]);
        assert_eq!(p.ks, vec![5, 5, 2]);
        assert_eq!(p.total_k(), 12);
    }

    #[test]
    fn million_rows_at_one_percent() {
        let p = ChunkPlan::new(1_000_000, chunk_policy(1_000_000), 0.01, 1).unwrap();
        assert_eq!(p.bounds.len(), 100);
        assert!(p.ks.iter().all(|&k| k == 100));
        assert_eq!(p.total_k(), 10_000);
    }
}
