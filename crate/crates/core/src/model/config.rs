use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of an [`Encoder`](super::Encoder).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden_size: usize,
    pub ffn_size: usize,
    pub heads: usize,
    pub head_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Relative distances are clipped to `±max_relative_distance`.
    pub max_relative_distance: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale preset: 2 layers, d=64, ffn=256, 4 heads, k=8.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            hidden_size: 64,
            ffn_size: 256,
            heads: 4,
            head_size: 16,
            vocab_size,
            max_seq_len: 64,
            max_relative_distance: 8,
            seed: 0,
        }
    }

    /// The 6B-scale architecture. Validated but never instantiated here.
    pub fn large_preset() -> Self {
        Self {
            layers: 24,
            hidden_size: 4096,
            ffn_size: 16384,
            heads: 32,
            head_size: 128,
            vocab_size: 128_000,
            max_seq_len: 512,
            max_relative_distance: 256,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden_size", self.hidden_size),
            ("ffn_size", self.ffn_size),
            ("heads", self.heads),
            ("head_size", self.head_size),
            ("vocab_size", self.vocab_size),
            ("max_relative_distance", self.max_relative_distance),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.heads * self.head_size != self.hidden_size {
            return Err(Error::Config(format!(
                "heads ({}) x head_size ({}) must equal hidden_size ({})",
                self.heads, self.head_size, self.hidden_size
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        Ok(())
    }

    pub fn relative_buckets(&self) -> usize {
        2 * self.max_relative_distance + 1
    }

    /// Closed-form number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let (v, d, f) = (self.vocab_size, self.hidden_size, self.ffn_size);
        let per_layer = 6 * d * d + 2 * d * f + 9 * d + f;
        v * d + self.relative_buckets() * d + 2 * d + v + self.layers * per_layer
    }
}
