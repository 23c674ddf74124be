//! Parameter layout of a full compressor + bridge + predictor model.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use taco_tensor::Tensor;

use crate::config::ModelConfig;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::params::{normal, ParamId, ParamStore};
use crate::tab2d::Stack;

pub const COMPRESSOR: &str = "compressor.";
pub const BRIDGE: &str = "bridge.";
pub const PREDICTOR: &str = "predictor.";

#[derive(Clone, Copy, Debug)]
pub struct BridgeIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadIds {
    pub w: ParamId,
    pub b: ParamId,
}

/// Every learnable tensor of the model with typed handles into the store.
/// Predictor-only models use the same layout and leave the compressor and
/// bridge untouched.
#[derive(Clone, Debug)]
pub struct TacoModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub compressor: Stack,
    pub bridge: BridgeIds,
    pub predictor: Stack,
    pub head: HeadIds,
}

impl TacoModel {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let l = cfg.embed_dim;
        let compressor = Stack::init(&mut store, "compressor", cfg, &mut rng);
        let bridge = BridgeIds {
            w1: store.add("bridge.w1", normal(&mut rng, &[l, l], 1.0 / (l as f64).sqrt())),
            b1: store.add("bridge.b1", Tensor::zeros(&[l])),
            w2: store.add("bridge.w2", Tensor::zeros(&[l, l])),
            b2: store.add("bridge.b2", Tensor::zeros(&[l])),
        };
        let predictor = Stack::init(&mut store, "predictor", cfg, &mut rng);
        let head = HeadIds {
            w: store.add("predictor.head.w", normal(&mut rng, &[l, cfg.num_classes_max], 1.0 / (l as f64).sqrt())),
            b: store.add("predictor.head.b", Tensor::zeros(&[cfg.num_classes_max])),
        };
        Ok(Self {
            cfg: cfg.clone(),
            store,
            compressor,
            bridge,
            predictor,
            head,
        })
    }

    /// Rebuilds handles for a store with the standard names.
    pub fn from_store(cfg: &ModelConfig, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let find = |name: &str| {
            store
                .find(name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing parameter {name}")))
        };
        let bridge = BridgeIds {
            w1: find("bridge.w1")?,
            b1: find("bridge.b1")?,
            w2: find("bridge.w2")?,
            b2: find("bridge.b2")?,
        };
        let head = HeadIds {
            w: find("predictor.head.w")?,
            b: find("predictor.head.b")?,
        };
        let compressor = Stack::find(&store, "compressor", cfg)?;
        let predictor = Stack::find(&store, "predictor", cfg)?;
        let fresh = Self::init(cfg, 0)?;
        for (name, t) in fresh.store.iter() {
            let id = find(name)?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "parameter {name} has shape {:?}, config implies {:?}",
                    store.get(id).shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            store,
            compressor,
            bridge,
            predictor,
            head,
        })
    }

    /// Copies every parameter under `prefix` from `other`.
    pub fn copy_prefix(&mut self, other: &TacoModel, prefix: &str) -> Result<()> {
        for (name, t) in other.store.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let id = self
                .store
                .find(name)
                .ok_or_else(|| Error::Config(format!("parameter {name} not in target model")))?;
            *self.store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(json!({
            "kind": "model",
            "config": self.cfg,
        }));
        for (name, t) in self.store.iter() {
            c.push(name, t.clone());
        }
        c
    }

    /// Accepts model files and training checkpoints (optimizer state is
    /// skipped).
    pub fn from_container(c: Container) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_value(
            c.header
                .get("config")
                .cloned()
                .ok_or_else(|| Error::CorruptCheckpoint("header has no model config".into()))?,
        )?;
        let mut store = ParamStore::new();
        for (name, t) in c.tensors {
            if !name.starts_with("adam.") {
                store.add(name, t);
            }
        }
        Self::from_store(&cfg, store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    /// Short id of the compressor and bridge weights.
    pub fn compressor_version(&self) -> String {
        let mut h = self.store.hash_prefix(COMPRESSOR);
        h.push_str(&self.store.hash_prefix(BRIDGE));
        h[..16].to_string()
    }
}
