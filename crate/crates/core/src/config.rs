//! Run configuration, read from a TOML file with one table per stage.
//!
//! Every key is optional and falls back to its default. Unknown keys and
//! ill-typed values are rejected.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::commembed::BprConfig;
use crate::error::{GastonError, Result};
use crate::finetune::FinetuneConfig;
use crate::hgt::HgtConfig;
use crate::ingest::FilterConfig;
use crate::pretrain::PretrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    pub min_score: i64,
    pub max_depth: usize,
    /// Community allow-list; empty keeps every community.
    pub communities: Vec<String>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        let f = FilterConfig::default();
        IngestConfig {
            min_score: f.min_score,
            max_depth: f.max_depth,
            communities: Vec::new(),
        }
    }
}

impl IngestConfig {
    pub fn filter(&self) -> FilterConfig {
        FilterConfig {
            min_score: self.min_score,
            max_depth: self.max_depth,
            communities: if self.communities.is_empty() {
                None
            } else {
                Some(self.communities.iter().cloned().collect::<BTreeSet<_>>())
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextencConfig {
    /// Width of the hashed text embeddings written by `ingest`.
    pub dim: usize,
}

impl Default for TextencConfig {
    fn default() -> Self {
        TextencConfig { dim: 768 }
    }
}

/// Encoder shape. Input widths come from the feature tables at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d: 768,
            layers: 3,
            heads: 8,
        }
    }
}

impl EncoderConfig {
    pub fn with_inputs(&self, d_in: [usize; 3]) -> Result<HgtConfig> {
        let c = HgtConfig {
            d: self.d,
            layers: self.layers,
            heads: self.heads,
            d_in,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub ingest: IngestConfig,
    pub textenc: TextencConfig,
    pub bpr: BprConfig,
    pub hgt: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    /// Seed for encoder initialization.
    pub seed: u64,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| GastonError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| GastonError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.textenc.dim < 8 {
            return Err(GastonError::Config("textenc dim must be at least 8".into()));
        }
        self.bpr.validate()?;
        self.hgt.with_inputs([1, 1, 1])?;
        self.pretrain.validate()?;
        self.finetune.validate()
    }

    /// Points every stage's random stream at `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.bpr.rng_seed = seed;
        self.pretrain.rng_seed = seed;
        self.finetune.rng_seed = seed;
    }
}
