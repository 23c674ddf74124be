//! Compressor: summarizes a labeled training table into `K` latent rows.

use std::collections::HashSet;
use std::path::Path;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};
use taco_tensor::{RowMask, Tensor};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::model::TacoModel;
use crate::tab2d::{Backend, CellCodes, EagerBackend, TargetCode};
use crate::table::Table;

/// How a fractional row budget `rate * n` becomes a count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KRounding {
    #[default]
    HalfUp,
    Up,
}

/// `K = max(min_k, round_half_up(rate * n))`, capped at `n`.
pub fn k_for_rate(n: usize, rate: f64, min_k: usize) -> usize {
    k_for_rate_with(n, rate, min_k, KRounding::HalfUp)
}

pub fn k_for_rate_with(n: usize, rate: f64, min_k: usize, rounding: KRounding) -> usize {
    let x = rate * n as f64;
    let raw = match rounding {
        KRounding::HalfUp => (x + 0.5 + 1e-9).floor(),
        KRounding::Up => (x - 1e-9).ceil(),
    } as usize;
    raw.max(min_k).max(1).min(n)
}

/// Feature rows seeding the compressor's dummy rows. The target of every
/// dummy row is the mask placeholder, so no labels are stored.
#[derive(Clone, Debug, PartialEq)]
pub struct DummyTable {
    pub features: Table,
    pub source_indices: Vec<usize>,
}

fn distinct_rows(table: &Table) -> usize {
    let mut seen = HashSet::new();
    for i in 0..table.n_rows() {
        let key: Vec<u64> = table.row(i).iter().map(|v| v.to_bits()).collect();
        seen.insert(key);
    }
    seen.len()
}

/// Picks `k` training rows uniformly without replacement. Only feature cells
/// are read.
pub fn init_dummy(train: &Table, k: usize, rng: &mut impl Rng) -> Result<DummyTable> {
    let n = train.n_rows();
    if k == 0 || k > n {
        return Err(Error::Config(format!("dummy row count {k} outside 1..={n}")));
    }
    let distinct = distinct_rows(train);
    let source_indices: Vec<usize> = if k > distinct {
        warn!("{k} dummy rows requested from {distinct} distinct rows; sampling with replacement");
        (0..k).map(|_| rng.random_range(0..n)).collect()
    } else {
        rand::seq::index::sample(rng, n, k).into_vec()
    };
    let features = train.without_target().select_rows(&source_indices);
    Ok(DummyTable {
        features,
        source_indices,
    })
}

/// Codes for `[train rows with labels; dummy rows with the mask placeholder]`.
pub fn compressor_codes(model: &TacoModel, train: &Table, labels: &[usize], dummy: &DummyTable) -> Result<CellCodes> {
    let mut codes = CellCodes::from_table(train, TargetCode::Labels(labels), &model.cfg)?;
    let d = CellCodes::from_table(&dummy.features, TargetCode::Mask, &model.cfg)?;
    if d.cols != codes.cols {
        return Err(Error::Schema(format!("dummy rows have {} columns, train has {}", d.cols, codes.cols)));
    }
    codes.rows += d.rows;
    codes.scalars.extend(d.scalars);
    codes.slots.extend(d.slots);
    Ok(codes)
}

/// Compressor forward pass; returns the final latents of the dummy rows.
pub fn compress_forward<B: Backend>(be: &mut B, model: &TacoModel, codes: &CellCodes, k: usize) -> Result<B::Value> {
    let x = be.embed(codes, model.compressor.encoder)?;
    let x = crate::tab2d::run_blocks(be, &x, &model.compressor, &RowMask::Full)?;
    let x = be.slice_rows(&x, codes.rows - k, codes.rows)?;
    be.layer_norm(&x, model.compressor.final_g, model.compressor.final_b)
}

/// Residual two-layer MLP applied to every latent cell.
pub fn bridge_forward<B: Backend>(be: &mut B, model: &TacoModel, x: &B::Value) -> Result<B::Value> {
    let ids = model.bridge;
    let h = be.linear(x, ids.w1, Some(ids.b1))?;
    let h = be.gelu(&h);
    let h = be.linear(&h, ids.w2, Some(ids.b2))?;
    be.add(x, &h)
}

/// `K x (M+1) x L` latent summary of a training table.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedContext {
    pub latents: Tensor,
    pub n_train: usize,
    pub source_fingerprint: String,
    pub compressor_version: String,
    pub bridged: bool,
}

#[derive(Serialize, Deserialize)]
struct ContextHeader {
    kind: String,
    n_train: usize,
    rate: f64,
    source_fingerprint: String,
    compressor_version: String,
    bridged: bool,
}

impl CompressedContext {
    pub fn k(&self) -> usize {
        self.latents.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.latents.shape()[1]
    }

    pub fn rate(&self) -> f64 {
        self.k() as f64 / self.n_train as f64
    }

    pub fn to_container(&self) -> Result<Container> {
        let header = ContextHeader {
            kind: "compressed-context".into(),
            n_train: self.n_train,
            rate: self.rate(),
            source_fingerprint: self.source_fingerprint.clone(),
            compressor_version: self.compressor_version.clone(),
            bridged: self.bridged,
        };
        let mut c = Container::new(serde_json::to_value(header)?);
        c.push("latents", self.latents.clone());
        Ok(c)
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        let header: ContextHeader = serde_json::from_value(c.header.clone())?;
        if header.kind != "compressed-context" {
            return Err(Error::CorruptCheckpoint(format!("expected a compressed context, found {}", header.kind)));
        }
        let latents = c
            .take("latents")
            .ok_or_else(|| Error::CorruptCheckpoint("context has no latents".into()))?;
        Ok(Self {
            latents,
            n_train: header.n_train,
            source_fingerprint: header.source_fingerprint,
            compressor_version: header.compressor_version,
            bridged: header.bridged,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

/// Compresses a preprocessed, labeled training table into `k` latent rows.
pub fn compress(train: &Table, k: usize, model: &TacoModel, rng: &mut impl Rng) -> Result<CompressedContext> {
    let labels = train
        .labels()
        .ok_or_else(|| Error::Data("training table has no target".into()))?;
    let dummy = init_dummy(train, k, rng)?;
    let codes = compressor_codes(model, train, labels, &dummy)?;
    let mut be = EagerBackend::new(&model.store, &model.cfg);
    let latents = compress_forward(&mut be, model, &codes, k)?;
    if !latents.all_finite() {
        return Err(Error::Data("compressor produced non-finite latents".into()));
    }
    Ok(CompressedContext {
        latents,
        n_train: train.n_rows(),
        source_fingerprint: train.fingerprint(),
        compressor_version: model.compressor_version(),
        bridged: false,
    })
}

/// Applies the bridge MLP. Bridging twice is rejected.
pub fn bridge(ctx: &CompressedContext, model: &TacoModel) -> Result<CompressedContext> {
    if ctx.bridged {
        return Err(Error::Config("context already passed through the bridge".into()));
    }
    let mut be = EagerBackend::new(&model.store, &model.cfg);
    let latents = bridge_forward(&mut be, model, &ctx.latents)?;
    Ok(CompressedContext {
        latents,
        bridged: true,
        ..ctx.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn train(n: usize) -> Table {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64, (i * 7 % 5) as f64]).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        Table::from_numeric(&rows, Some((&labels, 2))).unwrap()
    }

    #[test]
    fn rate_rounds_half_up_with_floor() {
        assert_eq!(k_for_rate(100, 0.04, 1), 4);
        assert_eq!(k_for_rate(1000, 0.04, 1), 40);
        assert_eq!(k_for_rate(500, 0.001, 1), 1);
        assert_eq!(k_for_rate(248, 0.001, 1), 1);
        assert_eq!(k_for_rate(248, 0.001, 2), 2);
        assert_eq!(k_for_rate(150, 0.01, 1), 2);
        assert_eq!(k_for_rate(3, 1.0, 1), 3);
    }

    #[test]
    fn dummy_with_k_equal_n_is_a_permutation() {
        let t = train(10);
        let d = init_dummy(&t, 10, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let mut idx = d.source_indices.clone();
        idx.sort();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
        assert!(d.features.target().is_none());
    }

    #[test]
    fn dummy_indices_are_deterministic() {
        let t = train(10);
        let a = init_dummy(&t, 3, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = init_dummy(&t, 3, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
        assert!(init_dummy(&t, 11, &mut ChaCha8Rng::seed_from_u64(42)).is_err());
    }

    #[test]
    fn compress_emits_k_rows() {
        let m = TacoModel::init(&ModelConfig::tiny(), 1).unwrap();
        let t = train(100);
        let k = k_for_rate(100, 0.04, 1);
        let ctx = compress(&t, k, &m, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(ctx.latents.shape(), &[4, 3, 8]);
        assert_eq!(ctx.rate(), 0.04);
    }

    #[test]
    fn zero_bridge_is_identity() {
        let m = TacoModel::init(&ModelConfig::tiny(), 1).unwrap();
        let ctx = compress(&train(12), 3, &m, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = bridge(&ctx, &m).unwrap();
        assert_eq!(b.latents, ctx.latents);
    }

    #[test]
    fn identical_rows_give_identical_latents() {
        let m = TacoModel::init(&ModelConfig::tiny(), 5).unwrap();
        let t = Table::from_numeric(&vec![vec![0.3, -1.2, 0.7]; 9], Some((&[1; 9], 2))).unwrap();
        let ctx = compress(&t, 3, &m, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let row = 3 * 4 * 8 / 3;
        let d = ctx.latents.data();
        for r in 1..3 {
            for i in 0..row {
                assert!((d[i] - d[r * row + i]).abs() < 1e-6);
            }
        }
    }
}
