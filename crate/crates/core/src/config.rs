use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters shared by the compressor and the predictor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Latent width of every cell (L).
    pub embed_dim: usize,
    /// Transformer blocks per module; each is row attention, column attention
    /// and a feed-forward layer.
    pub blocks: usize,
    pub heads: usize,
    /// Feed-forward hidden width as a multiple of `embed_dim`.
    pub ffn_mult: usize,
    pub num_classes_max: usize,
    /// Embedding slots for categorical values; larger ids share the last slot.
    #[serde(default = "default_categories")]
    pub max_categories: usize,
}

fn default_categories() -> usize {
    32
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            blocks: 3,
            heads: 4,
            ffn_mult: 4,
            num_classes_max: 10,
            max_categories: 32,
        }
    }
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self {
            embed_dim: 8,
            blocks: 2,
            heads: 2,
            ffn_mult: 4,
            num_classes_max: 4,
            max_categories: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.embed_dim == 0 || self.heads == 0 || self.ffn_mult == 0 || self.blocks == 0 {
            return fail("embed_dim, blocks, heads and ffn_mult must be positive");
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return fail("embed_dim must be divisible by heads");
        }
        if self.num_classes_max < 2 {
            return fail("num_classes_max must be at least 2");
        }
        if self.max_categories == 0 {
            return fail("max_categories must be positive");
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.embed_dim
    }

    /// Encoder table slot for a numeric feature cell.
    pub fn numeric_slot(&self) -> usize {
        0
    }

    pub fn category_slot(&self, id: usize) -> usize {
        1 + id.min(self.max_categories - 1)
    }

    pub fn class_slot(&self, class: usize) -> usize {
        1 + self.max_categories + class
    }

    /// Slot of the sentinel carried by test rows whose label is unknown.
    pub fn missing_target_slot(&self) -> usize {
        1 + self.max_categories + self.num_classes_max
    }

    /// Slot of the placeholder written into the compressor's dummy rows.
    pub fn mask_placeholder_slot(&self) -> usize {
        2 + self.max_categories + self.num_classes_max
    }

    pub fn encoder_slots(&self) -> usize {
        3 + self.max_categories + self.num_classes_max
    }
}
