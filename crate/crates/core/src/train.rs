//! Episodic meta-training with AdamW, warmup plus cosine decay and global
//! gradient clipping.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use taco_tensor::{Graph, Tensor, Var};

use crate::compressor::{bridge_forward, compress_forward, compressor_codes, init_dummy, k_for_rate};
use crate::config::ModelConfig;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::model::{TacoModel, PREDICTOR};
use crate::predictor::{embed_queries, predict_from_table, predict_logits};
use crate::prior::{self, task_rng, Episode, PriorConfig};
use crate::tab2d::TapeBackend;
use crate::table::{preprocess, Table};

/// Rates sampled uniformly in multi-rate mode.
pub const MULTI_RATES: [f64; 5] = [0.01, 0.02, 0.04, 0.08, 0.16];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "rates")]
pub enum RateMode {
    Fixed(f64),
    Multi(Vec<f64>),
}

impl RateMode {
    pub fn multi() -> Self {
        RateMode::Multi(MULTI_RATES.to_vec())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            RateMode::Fixed(r) => *r,
            RateMode::Multi(rates) => rates[rng.random_range(0..rates.len())],
        }
    }
}

/// What the loss trains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Compressor, bridge and predictor end to end.
    #[default]
    Taco,
    /// Predictor alone on the uncompressed context.
    Pot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub prior: PriorConfig,
    pub steps: u64,
    /// Episodes per micro-batch.
    pub micro_batch: usize,
    /// Micro-batches summed into one optimizer step.
    pub accumulation: usize,
    pub peak_lr: f64,
    pub warmup: u64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub rate_mode: RateMode,
    pub objective: Objective,
    pub freeze_predictor: bool,
    /// Smallest compressed row count.
    pub min_k: usize,
    /// Reuse the first `n` tasks of the stream cyclically.
    pub episode_pool: Option<u64>,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    /// Episode generator threads.
    pub workers: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            prior: PriorConfig {
                n_features: (2, 20),
                ..PriorConfig::default()
            },
            steps: 20_000,
            micro_batch: 8,
            accumulation: 4,
            peak_lr: 1e-4,
            warmup: 1000,
            weight_decay: 1e-2,
            clip_norm: 1.0,
            rate_mode: RateMode::Fixed(0.04),
            objective: Objective::Taco,
            freeze_predictor: false,
            min_k: 1,
            episode_pool: None,
            checkpoint_every: 1000,
            workers: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.prior.validate()?;
        if self.steps == 0 || self.micro_batch == 0 || self.accumulation == 0 || self.workers == 0 {
            return Err(Error::Config("steps, micro_batch, accumulation and workers must be positive".into()));
        }
        if self.warmup >= self.steps {
            return Err(Error::Config(format!("warmup {} must be below steps {}", self.warmup, self.steps)));
        }
        if self.clip_norm <= 0.0 || !self.clip_norm.is_finite() {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.peak_lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("peak_lr and weight_decay must be nonnegative".into()));
        }
        let bad_rate = |r: f64| !(r > 0.0 && r <= 1.0);
        let rates_ok = match &self.rate_mode {
            RateMode::Fixed(r) => !bad_rate(*r),
            RateMode::Multi(rs) => !rs.is_empty() && !rs.iter().any(|&r| bad_rate(r)),
        };
        if !rates_ok {
            return Err(Error::Config("compression rates must lie in (0, 1]".into()));
        }
        if self.prior.n_classes.1 > self.model.num_classes_max {
            return Err(Error::Config(format!(
                "prior draws up to {} classes, model.num_classes_max is {}",
                self.prior.n_classes.1, self.model.num_classes_max
            )));
        }
        Ok(())
    }

    pub fn episodes_per_step(&self) -> usize {
        self.micro_batch * self.accumulation
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay to
/// 0 at `steps`.
pub fn lr_schedule(step: u64, peak: f64, warmup: u64, steps: u64) -> f64 {
    let step = step.min(steps);
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let t = (step - warmup) as f64 / (steps - warmup) as f64;
    peak * 0.5 * (1.0 + (PI * t).cos())
}

/// Task tables after preprocessing with train statistics.
#[derive(Clone, Debug)]
pub struct PreparedEpisode {
    pub task_id: u64,
    pub train: Table,
    pub test: Table,
    pub n_classes: usize,
}

impl PreparedEpisode {
    pub fn new(ep: &Episode) -> Result<Self> {
        let (train, stats) = preprocess(&ep.train, None)?;
        let (test, _) = preprocess(&ep.test, Some(&stats))?;
        Ok(Self {
            task_id: ep.task_id,
            train,
            test,
            n_classes: ep.n_classes(),
        })
    }

    pub fn train_labels(&self) -> &[usize] {
        self.train.labels().expect("prepared episodes carry labels")
    }

    pub fn test_labels(&self) -> &[usize] {
        self.test.labels().expect("prepared episodes carry labels")
    }
}

/// Records the test-set logits of one task on `be`'s graph.
///
/// For [`Objective::Taco`] the context is `k` compressed rows seeded from
/// `dummy_rng`.
pub fn episode_logits(
    be: &mut TapeBackend<'_>,
    model: &TacoModel,
    ep: &PreparedEpisode,
    objective: Objective,
    k: usize,
    dummy_rng: &mut impl Rng,
) -> Result<Var> {
    match objective {
        Objective::Pot => predict_from_table(be, model, &ep.train, ep.train_labels(), &ep.test, ep.n_classes),
        Objective::Taco => {
            let dummy = init_dummy(&ep.train, k, dummy_rng)?;
            let codes = compressor_codes(model, &ep.train, ep.train_labels(), &dummy)?;
            let z = compress_forward(be, model, &codes, k)?;
            let z = bridge_forward(be, model, &z)?;
            let q = embed_queries(be, model, &ep.test)?;
            predict_logits(be, model, &z, &q, ep.n_classes)
        }
    }
}

pub fn episode_loss(
    be: &mut TapeBackend<'_>,
    model: &TacoModel,
    ep: &PreparedEpisode,
    objective: Objective,
    k: usize,
    dummy_rng: &mut impl Rng,
) -> Result<Var> {
    let logits = episode_logits(be, model, ep, objective, k, dummy_rng)?;
    Ok(be.graph.cross_entropy(logits, ep.test_labels())?)
}

/// Per-step record written to the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    /// Global gradient norm after clipping.
    pub grad_norm: f64,
    pub raw_grad_norm: f64,
    pub lr: f64,
    pub rate: f64,
    pub episodes_per_sec: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer state plus the model being trained.
#[derive(Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: TacoModel,
    adam: AdamState,
    /// Completed optimizer steps.
    pub step: u64,
}

fn episode_index(cfg: &TrainConfig, step: u64, slot: usize) -> u64 {
    let i = step * cfg.episodes_per_step() as u64 + slot as u64;
    match cfg.episode_pool {
        Some(p) => i % p.max(1),
        None => i,
    }
}

/// Seed stream for per-step draws (rates, dummy rows), separate from tasks.
const STEP_STREAM: u64 = 0x005e_ed0f_57e9;

/// Compression rate drawn for optimizer step `step`.
pub fn step_rate(cfg: &TrainConfig, step: u64) -> f64 {
    cfg.rate_mode.sample(&mut task_rng(cfg.seed ^ STEP_STREAM, step))
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: TacoModel) -> Result<Self> {
        cfg.validate()?;
        if model.cfg != cfg.model {
            return Err(Error::Config("model parameters were built for a different config".into()));
        }
        let zeros: Vec<Tensor> = model.store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Ok(Self {
            adam: AdamState {
                m: zeros.clone(),
                v: zeros,
            },
            cfg,
            model,
            step: 0,
        })
    }

    pub fn from_scratch(cfg: TrainConfig) -> Result<Self> {
        let model = TacoModel::init(&cfg.model, cfg.seed)?;
        Self::new(cfg, model)
    }

    /// Task `slot` of the optimizer step `step`, as the generator yields it.
    pub fn prepared_episode(cfg: &TrainConfig, step: u64, slot: usize) -> Result<PreparedEpisode> {
        let idx = episode_index(cfg, step, slot);
        PreparedEpisode::new(&prior::episode(&cfg.prior, idx)?)
    }

    /// One optimizer step over the given tasks (in order).
    pub fn step_on(&mut self, episodes: &[PreparedEpisode]) -> Result<StepStats> {
        let started = Instant::now();
        let cfg = &self.cfg;
        let step = self.step;
        let rate = step_rate(cfg, step);
        let mut sums: Vec<Option<Tensor>> = vec![None; self.model.store.len()];
        let mut total_loss = 0.0;
        for ep in episodes {
            let mut graph = Graph::new();
            let mut be = TapeBackend::new(&mut graph, &self.model.store, &self.model.cfg);
            if cfg.freeze_predictor {
                be.freeze_prefix(PREDICTOR);
            }
            let k = k_for_rate(ep.train.n_rows(), rate, cfg.min_k);
            // Keyed by task rather than slot so the order of tasks in a step
            // does not change which dummy rows each one draws.
            let mut dummy_rng = task_rng(cfg.seed ^ STEP_STREAM ^ ep.task_id.wrapping_mul(0x9e37_79b9_7f4a_7c15), step | (1 << 62));
            let loss = episode_loss(&mut be, &self.model, ep, cfg.objective, k, &mut dummy_rng)?;
            let bound: Vec<_> = be.bound().collect();
            let value = graph.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    episode: ep.task_id,
                });
            }
            total_loss += value;
            let mut grads = graph.backward(loss)?;
            for (id, var) in bound {
                if !graph.requires_grad(var) {
                    continue;
                }
                let g = grads.remove(var).expect("backward covers every leaf");
                match &mut sums[id.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        let n = episodes.len() as f64;
        let mut sq = 0.0;
        for g in sums.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x /= n);
            sq += g.data().iter().map(|x| x * x).sum::<f64>();
        }
        let raw_norm = sq.sqrt();
        let scale = if raw_norm > cfg.clip_norm { cfg.clip_norm / raw_norm } else { 1.0 };
        let lr = lr_schedule(step + 1, cfg.peak_lr, cfg.warmup, cfg.steps);
        let t = (step + 1) as i32;
        let (bc1, bc2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        let mut post_sq = 0.0;
        for (i, g) in sums.iter().enumerate() {
            let Some(g) = g else { continue };
            let id = crate::params::ParamId(i);
            let decay = self.model.store.get(id).shape().len() >= 2;
            let p = self.model.store.get_mut(id).data_mut();
            let m = self.adam.m[i].data_mut();
            let v = self.adam.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j] * scale;
                post_sq += gj * gj;
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                if decay {
                    p[j] -= lr * cfg.weight_decay * p[j];
                }
                p[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + ADAM_EPS);
            }
        }
        self.step += 1;
        let secs = started.elapsed().as_secs_f64().max(1e-9);
        Ok(StepStats {
            step: self.step,
            loss: total_loss / n,
            grad_norm: post_sq.sqrt(),
            raw_grad_norm: raw_norm,
            lr,
            rate,
            episodes_per_sec: n / secs,
        })
    }

    /// Generates this step's tasks on the calling thread and steps.
    pub fn step(&mut self) -> Result<StepStats> {
        let eps = (0..self.cfg.episodes_per_step())
            .map(|slot| Self::prepared_episode(&self.cfg, self.step, slot))
            .collect::<Result<Vec<_>>>()?;
        self.step_on(&eps)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(json!({
            "kind": "training-checkpoint",
            "step": self.step,
            "train_config": serde_json::to_value(&self.cfg)?,
            "config": self.model.cfg,
        }));
        for (name, t) in self.model.store.iter() {
            c.push(name, t.clone());
        }
        for (i, (name, _)) in self.model.store.iter().enumerate() {
            c.push(format!("adam.m.{name}"), self.adam.m[i].clone());
            c.push(format!("adam.v.{name}"), self.adam.v[i].clone());
        }
        Ok(c)
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        let kind = c.header.get("kind").and_then(|v| v.as_str()).unwrap_or_default();
        if kind != "training-checkpoint" {
            return Err(Error::CorruptCheckpoint(format!("expected a training checkpoint, found {kind:?}")));
        }
        let step = c
            .header
            .get("step")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::CorruptCheckpoint("checkpoint has no step".into()))?;
        let cfg: TrainConfig = serde_json::from_value(c.header["train_config"].clone())?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut params = Vec::new();
        for (name, t) in std::mem::take(&mut c.tensors) {
            if let Some(rest) = name.strip_prefix("adam.m.") {
                m.push((rest.to_string(), t));
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                v.push((rest.to_string(), t));
            } else {
                params.push((name, t));
            }
        }
        let mut model_c = Container::new(json!({"config": cfg.model}));
        model_c.tensors = params;
        let model = TacoModel::from_container(model_c)?;
        let order = |list: Vec<(String, Tensor)>| -> Result<Vec<Tensor>> {
            let mut out = Vec::with_capacity(model.store.len());
            for (name, _) in model.store.iter() {
                let t = list
                    .iter()
                    .find(|(n, _)| n == name)
                    .ok_or_else(|| Error::CorruptCheckpoint(format!("no optimizer state for {name}")))?;
                out.push(t.1.clone());
            }
            Ok(out)
        };
        let adam = AdamState { m: order(m)?, v: order(v)? };
        let mut trainer = Self::new(cfg, model)?;
        trainer.adam = adam;
        trainer.step = step;
        Ok(trainer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

/// Produces prepared tasks for consecutive steps on worker threads. Worker
/// `w` builds every slot whose position in the global stream is congruent to
/// `w`; the consumer reads workers round-robin, so the sequence does not
/// depend on the worker count.
pub struct EpisodeQueue {
    receivers: Vec<Receiver<Result<PreparedEpisode>>>,
    handles: Vec<JoinHandle<()>>,
    next: usize,
}

impl EpisodeQueue {
    pub fn spawn(cfg: &TrainConfig, first_step: u64, capacity: usize) -> Self {
        let workers = cfg.workers;
        let per_step = cfg.episodes_per_step();
        let start = first_step as usize * per_step;
        let end = cfg.steps as usize * per_step;
        let mut receivers = Vec::with_capacity(workers);
        let mut handles = Vec::with_capacity(workers);
        for w in 0..workers {
            let (tx, rx) = sync_channel(capacity.max(1));
            let cfg = cfg.clone();
            handles.push(std::thread::spawn(move || {
                let mut pos = start + w;
                while pos < end {
                    let (step, slot) = ((pos / per_step) as u64, pos % per_step);
                    if tx.send(Trainer::prepared_episode(&cfg, step, slot)).is_err() {
                        return;
                    }
                    pos += workers;
                }
            }));
            receivers.push(rx);
        }
        Self {
            receivers,
            handles,
            next: 0,
        }
    }

    pub fn take(&mut self, n: usize) -> Result<Vec<PreparedEpisode>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let rx = &self.receivers[self.next % self.receivers.len()];
            self.next += 1;
            let ep = rx
                .recv()
                .map_err(|_| Error::Data("episode generator stopped early".into()))??;
            out.push(ep);
        }
        Ok(out)
    }
}

impl Drop for EpisodeQueue {
    fn drop(&mut self) {
        self.receivers.clear();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:06}.bin"))
}

/// Result of [`run_training`].
#[derive(Debug)]
pub struct TrainReport {
    pub checkpoints: Vec<PathBuf>,
    pub metrics_path: PathBuf,
    pub final_loss: f64,
    pub trainer: Trainer,
}

/// Trains until `cfg.steps`, writing `metrics.ndjson` and periodic
/// checkpoints into `out_dir`. Starting from a checkpoint continues its
/// episode stream exactly; the final step always checkpoints.
pub fn run_training(
    trainer: Trainer,
    out_dir: &Path,
    mut on_step: impl FnMut(&StepStats),
) -> Result<TrainReport> {
    let mut trainer = trainer;
    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.ndjson");
    let file = fs::OpenOptions::new().create(true).append(true).open(&metrics_path)?;
    let mut log = BufWriter::new(file);
    let cfg = trainer.cfg.clone();
    let mut queue = EpisodeQueue::spawn(&cfg, trainer.step, 2 * cfg.episodes_per_step());
    let mut checkpoints = Vec::new();
    let mut final_loss = f64::NAN;
    while trainer.step < cfg.steps {
        let eps = queue.take(cfg.episodes_per_step())?;
        let stats = trainer.step_on(&eps)?;
        serde_json::to_writer(&mut log, &stats)?;
        log.write_all(b"\n")?;
        on_step(&stats);
        final_loss = stats.loss;
        let last = trainer.step == cfg.steps;
        if last || (cfg.checkpoint_every > 0 && trainer.step.is_multiple_of(cfg.checkpoint_every)) {
            log.flush()?;
            let path = checkpoint_path(out_dir, trainer.step);
            trainer.save(&path)?;
            checkpoints.push(path);
        }
    }
    log.flush()?;
    Ok(TrainReport {
        checkpoints,
        metrics_path,
        final_loss,
        trainer,
    })
}

/// Reads a metrics log back.
pub fn read_metrics(path: &Path) -> Result<Vec<StepStats>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
