//! Fit once, predict many: the deployment-facing engine.
//!
//! `fit` builds the context a predictor conditions on (compressed latents,
//! the embedded full table or a random subset) and optionally its key/value
//! cache. `predict` streams query batches against that fixed context.

pub mod baselines;
pub mod chunk;
pub mod cost;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use taco_tensor::Tensor;

pub use baselines::{baseline_knn, baseline_random, knn_indices};
pub use chunk::{chunk_and_stitch, chunk_policy, ChunkPlan};
pub use cost::{cost_model, peak_activation_bytes, CostEstimate, CostQuery};

use crate::compressor::{bridge, compress, k_for_rate_with, KRounding};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::memory::measure_peak;
use crate::model::TacoModel;
use crate::predictor::{build_kv_cache, embed_context, embed_queries, predict_cached, predict_logits, probabilities};
pub use crate::tab2d::KvCache;
use crate::tab2d::EagerBackend;
use crate::table::{preprocess, ColumnSchema, PreprocessStats, Table};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Taco,
    Pot,
    Random,
    Knn,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Taco => "taco",
            Mode::Pot => "pot",
            Mode::Random => "random",
            Mode::Knn => "knn",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "taco" => Ok(Mode::Taco),
            "pot" => Ok(Mode::Pot),
            "random" => Ok(Mode::Random),
            "knn" => Ok(Mode::Knn),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub mode: Mode,
    /// Compression rate for taco, random and knn.
    pub rate: f64,
    pub min_k: usize,
    pub k_rounding: KRounding,
    pub kv_cache: bool,
    pub chunking: bool,
    /// Overrides the size-based chunk policy.
    pub chunk_size: Option<usize>,
    /// Byte budget for the largest activation; exceeding it is a capacity
    /// error instead of an allocation.
    pub memory_limit: Option<usize>,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Taco,
            rate: 0.04,
            min_k: 1,
            k_rounding: KRounding::HalfUp,
            kv_cache: false,
            chunking: false,
            chunk_size: None,
            memory_limit: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Fit,
    FirstPredict,
    SubsequentPredict,
}

/// One timing/memory measurement, written as a JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub phase: Phase,
    pub wall_ms: f64,
    pub peak_bytes: usize,
    pub mode: Mode,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub cached: bool,
}

/// Immutable result of [`fit`]. Safe to share across threads.
#[derive(Debug)]
pub struct FittedState {
    pub mode: Mode,
    /// Embedded context rows (`rows x (M+1) x L`); empty for knn, which picks
    /// its context per batch.
    pub context: Option<Tensor>,
    pub kv: Option<KvCache>,
    pub stats: PreprocessStats,
    pub columns: Vec<ColumnSchema>,
    pub n_classes: usize,
    pub n_train: usize,
    pub k: usize,
    pub chunk_plan: Option<ChunkPlan>,
    /// Preprocessed training table, kept only in knn mode.
    train: Option<Table>,
    options: FitOptions,
    calls: AtomicUsize,
}

fn check_budget(limit: Option<usize>, requested: usize) -> Result<()> {
    match limit {
        Some(limit) if requested > limit => Err(Error::Capacity { requested, limit }),
        _ => Ok(()),
    }
}

impl FittedState {
    pub fn context_rows(&self) -> usize {
        match self.mode {
            Mode::Pot => self.n_train,
            _ => self.k,
        }
    }

    pub fn options(&self) -> &FitOptions {
        &self.options
    }

    fn query_cost(&self, test_rows: usize) -> CostQuery {
        CostQuery {
            context_rows: self.context_rows(),
            features: self.columns.len(),
            test_rows,
            cached: self.kv.is_some(),
        }
    }

    /// Class probabilities for `test` plus a timing record. The first call
    /// is tagged separately from later ones.
    pub fn predict(&self, model: &TacoModel, test: &Table) -> Result<(Tensor, TimingRecord)> {
        let start = Instant::now();
        let (probs, peak) = measure_peak(|| self.predict_inner(model, test));
        let probs = probs?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let phase = if self.calls.fetch_add(1, Ordering::SeqCst) == 0 {
            Phase::FirstPredict
        } else {
            Phase::SubsequentPredict
        };
        let rec = TimingRecord {
            phase,
            wall_ms,
            peak_bytes: peak,
            mode: self.mode,
            n: self.n_train,
            m: self.columns.len(),
            k: self.context_rows(),
            cached: self.kv.is_some(),
        };
        Ok((probs, rec))
    }

    fn predict_inner(&self, model: &TacoModel, test: &Table) -> Result<Tensor> {
        if model.cfg.embed_dim != self.context.as_ref().map_or(model.cfg.embed_dim, |c| c.shape()[2]) {
            return Err(Error::Schema("model does not match the fitted context".into()));
        }
        let (test, _) = preprocess(&test.without_target(), Some(&self.stats))?;
        if test.n_rows() == 0 {
            return Err(Error::Data("empty test batch".into()));
        }
        check_budget(self.options.memory_limit, peak_activation_bytes(&model.cfg, self.query_cost(test.n_rows())))?;
        let mut be = EagerBackend::new(&model.store, &model.cfg);
        let logits = match (self.mode, &self.kv, &self.context) {
            (Mode::Knn, _, _) => {
                let train = self.train.as_ref().ok_or(Error::NotFitted)?;
                let mut rng = ChaCha8Rng::seed_from_u64(self.options.seed);
                let subset = baseline_knn(train, &test, self.k, &mut rng)?;
                let ctx = embed_context(&mut be, model, &subset, subset.labels().unwrap())?;
                let q = embed_queries(&mut be, model, &test)?;
                predict_logits(&mut be, model, &ctx, &q, self.n_classes)?
            }
            (_, Some(cache), _) => {
                let q = embed_queries(&mut be, model, &test)?;
                predict_cached(model, cache, &q, self.n_classes)?
            }
            (_, None, Some(ctx)) => {
                let q = embed_queries(&mut be, model, &test)?;
                predict_logits(&mut be, model, ctx, &q, self.n_classes)?
            }
            (_, None, None) => return Err(Error::NotFitted),
        };
        Ok(probabilities(&logits))
    }

    /// Writes the context and, if present, the cache.
    pub fn save_context(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(json!({
            "kind": "fitted-context",
            "mode": self.mode,
            "n_train": self.n_train,
            "k": self.k,
            "n_classes": self.n_classes,
            "stats": self.stats,
        }));
        if let Some(ctx) = &self.context {
            c.push("context", ctx.clone());
        }
        if let Some(kv) = &self.kv {
            for (i, (k, v)) in kv.layers.iter().enumerate() {
                c.push(format!("kv.{i}.k"), k.clone());
                c.push(format!("kv.{i}.v"), v.clone());
            }
        }
        c.save(path)
    }
}

/// Builds the context for `train` (raw or preprocessed, with labels).
pub fn fit(model: &TacoModel, train: &Table, opts: &FitOptions) -> Result<(FittedState, TimingRecord)> {
    let start = Instant::now();
    let (state, peak) = measure_peak(|| fit_inner(model, train, opts));
    let state = state?;
    let rec = TimingRecord {
        phase: Phase::Fit,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        peak_bytes: peak,
        mode: state.mode,
        n: state.n_train,
        m: state.columns.len(),
        k: state.context_rows(),
        cached: state.kv.is_some(),
    };
    Ok((state, rec))
}

fn fit_inner(model: &TacoModel, train: &Table, opts: &FitOptions) -> Result<FittedState> {
    if !(opts.rate > 0.0 && opts.rate <= 1.0) {
        return Err(Error::Config(format!("compression rate {} outside (0, 1]", opts.rate)));
    }
    let n_classes = train
        .n_classes()
        .ok_or_else(|| Error::Data("training table has no target".into()))?;
    if n_classes > model.cfg.num_classes_max {
        return Err(Error::Config(format!(
            "{n_classes} classes exceed num_classes_max {}",
            model.cfg.num_classes_max
        )));
    }
    let (train, stats) = preprocess(train, None)?;
    let n = train.n_rows();
    let m = train.n_features();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let k = match opts.mode {
        Mode::Pot => n,
        _ => k_for_rate_with(n, opts.rate, opts.min_k, opts.k_rounding),
    };
    let fit_rows = match opts.mode {
        Mode::Taco if opts.chunking => opts.chunk_size.unwrap_or_else(|| chunk_policy(n)).min(n) + k,
        Mode::Taco => n + k,
        Mode::Pot => n,
        _ => k,
    };
    check_budget(opts.memory_limit, fit_rows * (m + 1) * model.cfg.ffn_dim() * 8)?;
    let mut chunk_plan = None;
    let mut be = EagerBackend::new(&model.store, &model.cfg);
    let labels = train.labels().expect("checked above");
    let context = match opts.mode {
        Mode::Taco => {
            let ctx = if opts.chunking {
                let size = opts.chunk_size.unwrap_or_else(|| chunk_policy(n));
                let plan = ChunkPlan::with_rounding(n, size, opts.rate, opts.min_k, opts.k_rounding)?;
                let ctx = chunk_and_stitch(&train, &plan, model, &mut rng)?;
                chunk_plan = Some(plan);
                ctx
            } else {
                compress(&train, k, model, &mut rng)?
            };
            Some(bridge(&ctx, model)?.latents)
        }
        Mode::Pot => Some(embed_context(&mut be, model, &train, labels)?),
        Mode::Random => {
            let subset = baseline_random(&train, k, &mut rng)?;
            Some(embed_context(&mut be, model, &subset, subset.labels().unwrap())?)
        }
        Mode::Knn => None,
    };
    let k = context.as_ref().map_or(k, |c| if opts.mode == Mode::Pot { k } else { c.shape()[0] });
    let kv = match (&context, opts.kv_cache) {
        (Some(ctx), true) => Some(build_kv_cache(model, ctx)?),
        (None, true) => return Err(Error::Config("knn mode selects its context per batch and cannot be cached".into())),
        _ => None,
    };
    Ok(FittedState {
        mode: opts.mode,
        context,
        kv,
        stats,
        columns: train.columns().to_vec(),
        n_classes,
        n_train: n,
        k,
        chunk_plan,
        train: (opts.mode == Mode::Knn).then_some(train),
        options: opts.clone(),
        calls: AtomicUsize::new(0),
    })
}
