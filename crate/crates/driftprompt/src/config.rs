//! Experiment configuration: TOML schema, validation, derived model configs,
//! and the shipped preset files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, TaskKind};
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, GeneratorMode};
use crate::synthetic::{DriftKind, SeriesFamily};

fn default_window() -> usize {
    20
}
fn default_horizon() -> usize {
    1
}
fn default_t_max() -> usize {
    2600
}
fn default_tokens_per_prompt() -> usize {
    1
}
fn default_lr() -> f64 {
    1e-4
}
fn default_batch_size() -> usize {
    32
}
fn default_runs() -> usize {
    3
}
fn default_gen_layers() -> usize {
    1
}
fn default_gen_heads() -> usize {
    1
}
fn default_gen_hidden() -> usize {
    128
}
fn default_gen_ff_depth() -> usize {
    1
}
fn default_gen_mode() -> GeneratorMode {
    GeneratorMode::Sequential
}

/// Where the domains come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        family: SeriesFamily,
        drift: DriftKind,
        /// Count of source domains (tau); domain tau + 1 is the future
        /// target.
        num_source_domains: usize,
        #[serde(default = "default_window")]
        window: usize,
        #[serde(default = "default_horizon")]
        horizon: usize,
        #[serde(default = "default_t_max")]
        t_max: usize,
        /// When set, windows become a binary task: does the next value
        /// exceed the threshold.
        #[serde(default)]
        classification_threshold: Option<f64>,
        /// Draw per-window lengths in [window/2, window] instead of fixed.
        #[serde(default)]
        variable_length: bool,
        /// Evenly-spaced row cap per domain, applied after splitting.
        #[serde(default)]
        max_rows_per_domain: Option<usize>,
    },
    Csv {
        /// Dataset manifest path, resolved relative to the config file.
        manifest: PathBuf,
        /// Declared layout; validated against the file when loaded and used
        /// for offline parameter accounting.
        input_dim: usize,
        output_dim: usize,
        num_source_domains: usize,
    },
}

impl DatasetConfig {
    pub fn num_source_domains(&self) -> usize {
        match self {
            DatasetConfig::Synthetic {
                num_source_domains, ..
            }
            | DatasetConfig::Csv {
                num_source_domains, ..
            } => *num_source_domains,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub num_encoder_layers: usize,
    pub ff_depth: usize,
    pub task: TaskKind,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSection {
    #[serde(default = "default_tokens_per_prompt")]
    pub tokens_per_prompt: usize,
}

impl Default for PromptSection {
    fn default() -> Self {
        PromptSection {
            tokens_per_prompt: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    #[serde(default = "default_gen_layers")]
    pub num_layers: usize,
    #[serde(default = "default_gen_heads")]
    pub num_heads: usize,
    #[serde(default = "default_gen_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_gen_ff_depth")]
    pub ff_depth: usize,
    #[serde(default = "default_gen_mode")]
    pub mode: GeneratorMode,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        GeneratorSection {
            num_layers: 1,
            num_heads: 1,
            hidden_dim: 128,
            ff_depth: 1,
            mode: GeneratorMode::Sequential,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub pretrain_epochs: usize,
    pub prompt_epochs: usize,
    pub temporal_epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Step size for the prompt phases (domain prompts, then generator and
    /// general prompt). Prompt vectors are a handful of values steering a
    /// frozen network, so they tolerate much larger steps than backbone
    /// weights; unset falls back to `learning_rate`.
    #[serde(default)]
    pub prompt_learning_rate: Option<f64>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Early-stop patience for pretraining, driven by the last source
    /// domain's held-out split.
    #[serde(default)]
    pub early_stop_patience: Option<usize>,
}

impl TrainingSection {
    pub fn prompt_lr(&self) -> f64 {
        self.prompt_learning_rate.unwrap_or(self.learning_rate)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Independent repetitions with derived seeds, reported as mean and std.
    #[serde(default = "default_runs")]
    pub runs: usize,
    pub dataset: DatasetConfig,
    pub backbone: BackboneSection,
    #[serde(default)]
    pub prompt: PromptSection,
    #[serde(default)]
    pub generator: GeneratorSection,
    pub training: TrainingSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Parse a config file, resolving a relative CSV manifest path against
    /// the config's own directory.
    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut config = Self::from_toml_str(&text)?;
        if let DatasetConfig::Csv { manifest, .. } = &mut config.dataset {
            if manifest.is_relative() {
                if let Some(dir) = path.as_ref().parent() {
                    *manifest = dir.join(&manifest);
                }
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("experiment name must not be empty".into()));
        }
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        let tau = self.dataset.num_source_domains();
        if tau < 2 {
            return Err(Error::Config(format!(
                "need at least 2 source domains for temporal learning, got {tau}"
            )));
        }
        match &self.dataset {
            DatasetConfig::Synthetic {
                family,
                drift,
                window,
                horizon,
                t_max,
                classification_threshold,
                max_rows_per_domain,
                ..
            } => {
                drift.check_family(*family)?;
                if *window == 0 || *horizon == 0 {
                    return Err(Error::Config("window and horizon must be positive".into()));
                }
                if window + horizon > *t_max {
                    return Err(Error::Config(format!(
                        "window {window} + horizon {horizon} exceeds series length {t_max}"
                    )));
                }
                if classification_threshold.is_some() {
                    if self.backbone.task != TaskKind::BinaryClassification {
                        return Err(Error::Config(
                            "classification_threshold requires task = \"binary_classification\""
                                .into(),
                        ));
                    }
                    if *horizon != 1 {
                        return Err(Error::Config(
                            "threshold labels are defined for horizon 1 only".into(),
                        ));
                    }
                } else if self.backbone.task != TaskKind::Forecasting {
                    return Err(Error::Config(
                        "synthetic series without a threshold use task = \"forecasting\"".into(),
                    ));
                }
                if *max_rows_per_domain == Some(0) {
                    return Err(Error::Config("max_rows_per_domain must be positive".into()));
                }
            }
            DatasetConfig::Csv {
                input_dim,
                output_dim,
                ..
            } => {
                if *input_dim == 0 || *output_dim == 0 {
                    return Err(Error::Config(
                        "declared input_dim and output_dim must be positive".into(),
                    ));
                }
            }
        }
        if self.prompt.tokens_per_prompt == 0 {
            return Err(Error::Config("tokens_per_prompt must be positive".into()));
        }
        if self.training.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.training.learning_rate.is_finite() && self.training.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if let Some(lr) = self.training.prompt_learning_rate {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config("prompt_learning_rate must be positive".into()));
            }
        }
        self.backbone_config()?.validate()?;
        self.generator_config().validate()?;
        Ok(())
    }

    pub fn tau(&self) -> usize {
        self.dataset.num_source_domains()
    }

    pub fn input_dim(&self) -> usize {
        match &self.dataset {
            DatasetConfig::Synthetic { .. } => 1,
            DatasetConfig::Csv { input_dim, .. } => *input_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match &self.dataset {
            DatasetConfig::Synthetic {
                horizon,
                classification_threshold,
                ..
            } => {
                if classification_threshold.is_some() {
                    1
                } else {
                    *horizon
                }
            }
            DatasetConfig::Csv { output_dim, .. } => *output_dim,
        }
    }

    pub fn backbone_config(&self) -> Result<BackboneConfig> {
        let c = BackboneConfig {
            input_dim: self.input_dim(),
            embed_dim: self.backbone.embed_dim,
            num_heads: self.backbone.num_heads,
            hidden_dim: self.backbone.hidden_dim,
            num_encoder_layers: self.backbone.num_encoder_layers,
            output_dim: self.output_dim(),
            task_kind: self.backbone.task,
            ff_depth: self.backbone.ff_depth,
        };
        c.validate()?;
        Ok(c)
    }

    /// Width of one flattened prompt, the generator's token size.
    pub fn prompt_width(&self) -> usize {
        self.prompt.tokens_per_prompt * self.backbone.embed_dim
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            prompt_width: self.prompt_width(),
            num_layers: self.generator.num_layers,
            num_heads: self.generator.num_heads,
            hidden_dim: self.generator.hidden_dim,
            ff_depth: self.generator.ff_depth,
            mode: self.generator.mode,
        }
    }
}

/// Configs shipped with the crate. CSV-based entries are architecture
/// templates: their declared layouts support parameter accounting and must
/// match whatever data file the user points the manifest at.
pub const PRESETS: &[(&str, &str)] = &[
    (
        "mg-alternation",
        include_str!("../presets/mg-alternation.toml"),
    ),
    ("mg-addition", include_str!("../presets/mg-addition.toml")),
    (
        "cos-alternation",
        include_str!("../presets/cos-alternation.toml"),
    ),
    ("cos-addition", include_str!("../presets/cos-addition.toml")),
    (
        "cos-threshold",
        include_str!("../presets/cos-threshold.toml"),
    ),
    ("crypto", include_str!("../presets/crypto.toml")),
    ("elec2", include_str!("../presets/elec2.toml")),
    ("moons", include_str!("../presets/moons.toml")),
    ("onp", include_str!("../presets/onp.toml")),
    ("house", include_str!("../presets/house.toml")),
    ("appliance", include_str!("../presets/appliance.toml")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| ExperimentConfig::from_toml_str(text))
        .unwrap_or_else(|| {
            Err(Error::Config(format!(
                "unknown preset {name:?}; available: {}",
                preset_names().join(", ")
            )))
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_parses_and_validates() {
        for (name, _) in PRESETS {
            let config = preset(name).unwrap_or_else(|e| panic!("preset {name}: {e}"));
            assert_eq!(&config.name, name);
            config.backbone_config().unwrap();
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn synthetic_presets_use_paper_scale_domains() {
        let mg = preset("mg-alternation").unwrap();
        assert_eq!(mg.tau(), 19);
        assert_eq!(mg.output_dim(), 1);
        assert_eq!(mg.input_dim(), 1);
        match mg.dataset {
            DatasetConfig::Synthetic { window, t_max, .. } => {
                assert_eq!(window, 20);
                assert_eq!(t_max, 2600);
            }
            _ => panic!("mg preset must be synthetic"),
        }
    }

    #[test]
    fn threshold_preset_is_binary() {
        let c = preset("cos-threshold").unwrap();
        assert_eq!(c.backbone.task, TaskKind::BinaryClassification);
        assert_eq!(c.output_dim(), 1);
    }

    #[test]
    fn validation_rejects_inconsistent_combinations() {
        let mut c = preset("mg-alternation").unwrap();
        c.backbone.task = TaskKind::BinaryClassification;
        assert!(c.validate().is_err());

        let mut c = preset("cos-threshold").unwrap();
        if let DatasetConfig::Synthetic { horizon, .. } = &mut c.dataset {
            *horizon = 3;
        }
        assert!(c.validate().is_err());

        let mut c = preset("mg-alternation").unwrap();
        if let DatasetConfig::Synthetic {
            num_source_domains, ..
        } = &mut c.dataset
        {
            *num_source_domains = 1;
        }
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_round_trip_preserves_config() {
        let c = preset("crypto").unwrap();
        let text = toml::to_string(&c).unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.name, c.name);
        assert_eq!(back.tau(), c.tau());
        assert_eq!(back.prompt_width(), c.prompt_width());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = r#"
name = "x"
typo_field = 1
[dataset]
kind = "synthetic"
family = "mackey_glass"
drift = "mg_sigma_alternation"
num_source_domains = 3
[backbone]
embed_dim = 8
num_heads = 2
hidden_dim = 8
num_encoder_layers = 1
ff_depth = 1
task = "forecasting"
[training]
pretrain_epochs = 1
prompt_epochs = 1
temporal_epochs = 1
"#;
        let err = ExperimentConfig::from_toml_str(text).unwrap_err();
        assert!(err.to_string().contains("typo_field"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(128))]

        #[test]
        fn parser_never_panics(text in "\\PC*") {
            let _ = ExperimentConfig::from_toml_str(&text);
        }

        // single-byte corruptions of a known-good preset
        #[test]
        fn parser_never_panics_near_valid(idx in 0usize..700, byte in proptest::prelude::any::<u8>()) {
            let mut bytes = PRESETS[0].1.as_bytes().to_vec();
            if idx < bytes.len() {
                bytes[idx] = byte;
            }
            if let Ok(text) = std::str::from_utf8(&bytes) {
                if let Ok(config) = ExperimentConfig::from_toml_str(text) {
                    let _ = config.validate();
                }
            }
        }
    }
}
