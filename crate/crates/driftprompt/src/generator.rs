//! Drift forecaster: a small transformer encoder that maps the sequence of
//! past domain prompts to the prompt for the next domain.
//!
//! The encoder always runs with a causal attention mask and the output is
//! read at the last history position. Masking costs nothing for single-step
//! generation (the last position may attend to all of its past) and it makes
//! the batched variant exactly equivalent to running each prefix separately,
//! at any encoder depth.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positions, EncoderLayer, Module};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorMode {
    /// Train on one history prefix at a time (the default).
    Sequential,
    /// Train on all prefixes at once via the causal mask.
    NonSequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Width of one flattened domain prompt (tokens_per_prompt * embed_dim).
    pub prompt_width: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ff_depth: usize,
    pub mode: GeneratorMode,
}

impl GeneratorConfig {
    pub fn new(prompt_width: usize, mode: GeneratorMode) -> GeneratorConfig {
        GeneratorConfig {
            prompt_width,
            num_layers: 1,
            num_heads: 1,
            hidden_dim: 128,
            ff_depth: 1,
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt_width == 0 {
            return Err(Error::Config("prompt width must be positive".into()));
        }
        if self.num_heads == 0 || self.prompt_width % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "prompt width {} must be divisible by num_heads {}",
                self.prompt_width, self.num_heads
            )));
        }
        if self.num_layers == 0 {
            return Err(Error::Config("generator needs at least one layer".into()));
        }
        if !(self.ff_depth == 1 || self.ff_depth == 2) {
            return Err(Error::Config(format!(
                "ff_depth must be 1 or 2, got {}",
                self.ff_depth
            )));
        }
        Ok(())
    }
}

pub struct TemporalGenerator {
    pub config: GeneratorConfig,
    pub encoder: Vec<EncoderLayer>,
}

impl Module for TemporalGenerator {
    fn visit_parameters(&self, prefix: &str, visit: &mut dyn FnMut(String, &Tensor)) {
        for (i, layer) in self.encoder.iter().enumerate() {
            let name = if prefix.is_empty() {
                format!("encoder.{i}")
            } else {
                format!("{prefix}.encoder.{i}")
            };
            layer.visit_parameters(&name, visit);
        }
    }
}

impl TemporalGenerator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<TemporalGenerator> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = (0..config.num_layers)
            .map(|_| {
                EncoderLayer::new(
                    config.prompt_width,
                    config.num_heads,
                    config.hidden_dim,
                    config.ff_depth,
                    true,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TemporalGenerator { config, encoder })
    }

    fn check_history(&self, history: &Tensor) -> Result<usize> {
        let shape = history.shape();
        if shape.len() != 2 || shape[1] != self.config.prompt_width {
            return Err(Error::InvalidShape {
                op: "generator history",
                detail: format!(
                    "expected [domains, {}], got {shape:?}",
                    self.config.prompt_width
                ),
            });
        }
        if shape[0] == 0 {
            return Err(Error::Data("prompt history is empty".into()));
        }
        Ok(shape[0])
    }

    /// Full encoder pass over the history rows: `[len, width]` in and out.
    /// Position encodings over the domain index are added first; without
    /// them the encoder could not tell drift direction.
    fn encode(&self, history: &Tensor) -> Result<Tensor> {
        let len = self.check_history(history)?;
        let w = self.config.prompt_width;
        let mut h = history
            .add(&sinusoidal_positions(len, w))?
            .reshape(&[1, len, w])?;
        for layer in &self.encoder {
            h = layer.forward(&h, None)?;
        }
        h.reshape(&[len, w])
    }

    /// Next-domain prompt from the full history `[P_S1 .. P_S(t-1)]`,
    /// read at the last (most recent) position. Returns `[1, width]`.
    pub fn generate(&self, history: &Tensor) -> Result<Tensor> {
        let len = self.check_history(history)?;
        self.encode(history)?.slice_axis(0, len - 1, len)
    }

    /// One encoder pass over all `tau` history rows; thanks to the causal
    /// mask, row `i` of the result equals `generate` on the prefix
    /// `history[..=i]` and is the prompt for domain `i + 2`.
    /// Only available in non-sequential mode.
    pub fn generate_all_causal(&self, history: &Tensor) -> Result<Tensor> {
        if self.config.mode != GeneratorMode::NonSequential {
            return Err(Error::Config(
                "generate_all_causal requires non_sequential mode".into(),
            ));
        }
        self.encode(history)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut meta = std::collections::BTreeMap::new();
        meta.insert(
            "config".to_string(),
            serde_json::to_string(&self.config)
                .map_err(|e| Error::Checkpoint(format!("generator config: {e}")))?,
        );
        Ok(Checkpoint::from_named(&self.named_parameters(), meta))
    }

    pub fn from_checkpoint(cp: &Checkpoint) -> Result<TemporalGenerator> {
        let config_json = cp
            .meta
            .get("config")
            .ok_or_else(|| Error::Checkpoint("missing generator config in metadata".into()))?;
        let config: GeneratorConfig = serde_json::from_str(config_json)
            .map_err(|e| Error::Checkpoint(format!("generator config: {e}")))?;
        let gen = TemporalGenerator::new(config, 0)?;
        cp.apply_to(&gen.named_parameters())?;
        Ok(gen)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<TemporalGenerator> {
        TemporalGenerator::from_checkpoint(&Checkpoint::load(path)?)
    }
}
