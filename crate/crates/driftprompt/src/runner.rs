//! Experiment drivers: seeded multi-run evaluation against the vanilla
//! baseline, and the four ablation grids.

use crate::config::{DatasetConfig, ExperimentConfig};
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::generator::GeneratorMode;
use crate::metrics::{compute_metric, mean_std, Method, MetricKind, MetricRecord};
use crate::pipeline::{self, TemporalVariant};
use crate::report::SeriesPlot;

/// Seed for repetition `r`; runs share the schedule across methods and
/// ablation cells so comparisons are paired.
pub fn run_seed(base: u64, r: usize) -> u64 {
    pipeline::derive_seed(base, 4, r as u64)
}

/// Records plus qualitative plots for one experiment.
#[derive(Default)]
pub struct EvalResult {
    pub records: Vec<MetricRecord>,
    pub plots: Vec<SeriesPlot>,
}

impl EvalResult {
    pub fn merge(&mut self, other: EvalResult) {
        self.records.extend(other.records);
        self.plots.extend(other.plots);
    }

    /// Mean for one (dataset, method) cell; errors when absent.
    pub fn mean_of(&self, dataset: &str, method: Method) -> Result<f64> {
        self.records
            .iter()
            .find(|r| r.dataset == dataset && r.method == method)
            .map(|r| r.mean)
            .ok_or_else(|| {
                Error::Data(format!("no record for {dataset} / {}", method.as_str()))
            })
    }
}

fn first_coordinate(values: &[f64], output_dim: usize) -> Vec<f64> {
    values.iter().step_by(output_dim).copied().collect()
}

struct MethodScores {
    method: Method,
    per_target: Vec<Vec<f64>>,
}

fn record_rows(
    dataset_label: &str,
    metric: MetricKind,
    targets: &[DomainDataset],
    scores: Vec<MethodScores>,
) -> Vec<MetricRecord> {
    let mut records = Vec::new();
    for s in scores {
        for (target, runs) in targets.iter().zip(&s.per_target) {
            let (mean, std) = mean_std(runs);
            records.push(MetricRecord {
                dataset: dataset_label.to_string(),
                method: s.method,
                domain: target.domain_index,
                metric,
                mean,
                std,
                runs: runs.len(),
            });
        }
    }
    records
}

/// Train `config.runs` times with derived seeds and score the vanilla
/// backbone and the prompted model on every target domain.
pub fn evaluate_experiment(config: &ExperimentConfig) -> Result<EvalResult> {
    Ok(evaluate_labeled(config, &config.name, TemporalVariant::Full)?.0)
}

/// [`evaluate_experiment`] that also returns the last run's trained
/// artifacts, so callers can persist them without retraining.
pub fn evaluate_experiment_keeping(
    config: &ExperimentConfig,
) -> Result<(EvalResult, pipeline::TrainedArtifacts)> {
    let (result, artifacts) = evaluate_labeled(config, &config.name, TemporalVariant::Full)?;
    Ok((result, artifacts.expect("runs >= 1 validated")))
}

fn prompted_method(config: &ExperimentConfig, variant: TemporalVariant) -> Method {
    match variant {
        TemporalVariant::NoGeneral => Method::OursNoPg,
        TemporalVariant::NoTemporal => Method::OursNoPt,
        TemporalVariant::Full => match config.generator.mode {
            GeneratorMode::Sequential => Method::Ours,
            GeneratorMode::NonSequential => Method::OursNonsequential,
        },
    }
}

fn evaluate_labeled(
    config: &ExperimentConfig,
    label: &str,
    variant: TemporalVariant,
) -> Result<(EvalResult, Option<pipeline::TrainedArtifacts>)> {
    config.validate()?;
    let data = pipeline::prepare_data(config)?;
    let metric = MetricKind::for_task(config.backbone.task);
    let method = prompted_method(config, variant);
    let n_targets = data.targets.len();
    let mut vanilla_scores = vec![Vec::with_capacity(config.runs); n_targets];
    let mut ours_scores = vec![Vec::with_capacity(config.runs); n_targets];
    let mut plots = Vec::new();
    let mut last_artifacts = None;
    for r in 0..config.runs {
        let artifacts =
            pipeline::train_all_variant(config, &data, run_seed(config.seed, r), variant)?;
        for (ti, target) in data.targets.iter().enumerate() {
            let vanilla = pipeline::predict_vanilla(&artifacts.backbone, target)?;
            let ours = pipeline::infer_target_variant(&artifacts, variant, target)?;
            vanilla_scores[ti].push(compute_metric(&vanilla, &target.y, metric)?);
            ours_scores[ti].push(compute_metric(&ours, &target.y, metric)?);
            if r + 1 == config.runs {
                plots.push(SeriesPlot {
                    title: format!("{label} domain {} {}", target.domain_index, method.as_str()),
                    truth: first_coordinate(&target.y, target.output_dim),
                    prediction: first_coordinate(&ours, target.output_dim),
                });
            }
        }
        if r + 1 == config.runs {
            last_artifacts = Some(artifacts);
        }
    }
    let records = record_rows(
        label,
        metric,
        &data.targets,
        vec![
            MethodScores {
                method: Method::Vanilla,
                per_target: vanilla_scores,
            },
            MethodScores {
                method,
                per_target: ours_scores,
            },
        ],
    );
    Ok((EvalResult { records, plots }, last_artifacts))
}

/// The studied ablation dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    PromptComponents,
    NumDomains,
    PromptSize,
    GeneratorLayers,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [
        AblationAxis::PromptComponents,
        AblationAxis::NumDomains,
        AblationAxis::PromptSize,
        AblationAxis::GeneratorLayers,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::PromptComponents => "prompt_components",
            AblationAxis::NumDomains => "num_domains",
            AblationAxis::PromptSize => "prompt_size",
            AblationAxis::GeneratorLayers => "generator_layers",
        }
    }

    pub fn parse(s: &str) -> Result<AblationAxis> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|a| a.as_str()).collect();
                Error::Config(format!(
                    "unknown ablation axis {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

pub const NUM_DOMAIN_CELLS: [usize; 3] = [4, 19, 49];
pub const PROMPT_SIZE_CELLS: [usize; 3] = [1, 2, 4];
pub const GENERATOR_LAYER_CELLS: [usize; 3] = [1, 2, 3];

/// One full retrained pipeline per cell; the seed schedule is shared across
/// cells so rows are comparable.
pub fn run_ablation(config: &ExperimentConfig, axis: AblationAxis) -> Result<EvalResult> {
    config.validate()?;
    let mut result = EvalResult::default();
    match axis {
        AblationAxis::PromptComponents => {
            for variant in [
                TemporalVariant::Full,
                TemporalVariant::NoGeneral,
                TemporalVariant::NoTemporal,
            ] {
                result.merge(evaluate_labeled(config, &config.name, variant)?.0);
            }
            // the vanilla rows repeat identically per variant; keep one set
            let mut seen_vanilla = false;
            result.records.retain(|r| {
                if r.method != Method::Vanilla {
                    return true;
                }
                if seen_vanilla {
                    false
                } else {
                    seen_vanilla = true;
                    true
                }
            });
        }
        AblationAxis::NumDomains => {
            for cells in NUM_DOMAIN_CELLS {
                let mut cell_config = config.clone();
                match &mut cell_config.dataset {
                    DatasetConfig::Synthetic {
                        num_source_domains, ..
                    } => *num_source_domains = cells,
                    DatasetConfig::Csv { .. } => {
                        return Err(Error::Config(
                            "num_domains ablation needs a synthetic dataset".into(),
                        ))
                    }
                }
                let label = format!("{}[domains={}]", config.name, cells);
                result.merge(evaluate_labeled(&cell_config, &label, TemporalVariant::Full)?.0);
            }
        }
        AblationAxis::PromptSize => {
            for cells in PROMPT_SIZE_CELLS {
                let mut cell_config = config.clone();
                cell_config.prompt.tokens_per_prompt = cells;
                let label = format!("{}[prompt_tokens={}]", config.name, cells);
                result.merge(evaluate_labeled(&cell_config, &label, TemporalVariant::Full)?.0);
            }
        }
        AblationAxis::GeneratorLayers => {
            for cells in GENERATOR_LAYER_CELLS {
                let mut cell_config = config.clone();
                cell_config.generator.num_layers = cells;
                let label = format!("{}[generator_layers={}]", config.name, cells);
                result.merge(evaluate_labeled(&cell_config, &label, TemporalVariant::Full)?.0);
            }
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::TaskKind;
    use crate::config::{BackboneSection, GeneratorSection, PromptSection, TrainingSection};
    use crate::synthetic::{DriftKind, SeriesFamily};

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            name: "tiny".into(),
            seed: 3,
            runs: 2,
            dataset: DatasetConfig::Synthetic {
                family: SeriesFamily::MackeyGlass,
                drift: DriftKind::MgSigmaAlternation,
                num_source_domains: 3,
                window: 8,
                horizon: 1,
                t_max: 160,
                classification_threshold: None,
                variable_length: false,
                max_rows_per_domain: Some(32),
            },
            backbone: BackboneSection {
                embed_dim: 8,
                num_heads: 2,
                hidden_dim: 16,
                num_encoder_layers: 1,
                ff_depth: 2,
                task: TaskKind::Forecasting,
            },
            prompt: PromptSection {
                tokens_per_prompt: 1,
            },
            generator: GeneratorSection {
                num_layers: 1,
                num_heads: 1,
                hidden_dim: 16,
                ff_depth: 1,
                mode: GeneratorMode::Sequential,
            },
            training: TrainingSection {
                pretrain_epochs: 3,
                prompt_epochs: 3,
                temporal_epochs: 3,
                learning_rate: 1e-3,
                prompt_learning_rate: None,
                batch_size: 16,
                early_stop_patience: None,
            },
        }
    }

    #[test]
    fn evaluation_emits_paired_rows_with_shared_backbone_seeds() {
        let config = tiny_config();
        let result = evaluate_experiment(&config).unwrap();
        assert_eq!(result.records.len(), 2);
        let vanilla = &result.records[0];
        let ours = &result.records[1];
        assert_eq!(vanilla.method, Method::Vanilla);
        assert_eq!(ours.method, Method::Ours);
        assert_eq!(vanilla.domain, 4);
        assert_eq!(vanilla.runs, 2);
        assert!(vanilla.std.is_some());
        assert_eq!(result.plots.len(), 1);
        assert!(result.mean_of("tiny", Method::Ours).is_ok());
        assert!(result.mean_of("tiny", Method::OursNoPg).is_err());
    }

    #[test]
    fn prompt_component_grid_has_one_vanilla_and_three_prompted_rows() {
        let config = tiny_config();
        let result = run_ablation(&config, AblationAxis::PromptComponents).unwrap();
        let methods: Vec<Method> = result.records.iter().map(|r| r.method).collect();
        assert_eq!(
            methods,
            vec![
                Method::Vanilla,
                Method::Ours,
                Method::OursNoPg,
                Method::OursNoPt
            ]
        );
    }

    #[test]
    fn num_domain_grid_requires_synthetic_data_and_labels_cells() {
        let mut config = tiny_config();
        config.runs = 1;
        // shrink the grid cost: patch cells via the public path is not
        // possible, so just check the csv rejection branch here
        config.dataset = DatasetConfig::Csv {
            manifest: "nowhere.toml".into(),
            input_dim: 3,
            output_dim: 1,
            num_source_domains: 3,
        };
        config.backbone.task = TaskKind::Regression;
        assert!(run_ablation(&config, AblationAxis::NumDomains).is_err());
    }

    #[test]
    fn axis_names_round_trip() {
        for axis in AblationAxis::ALL {
            assert_eq!(AblationAxis::parse(axis.as_str()).unwrap(), axis);
        }
        assert!(AblationAxis::parse("nope").is_err());
    }

    #[test]
    fn generator_layer_grid_trains_each_depth() {
        let mut config = tiny_config();
        config.runs = 1;
        let result = run_ablation(&config, AblationAxis::GeneratorLayers).unwrap();
        // one vanilla + one prompted row per cell
        assert_eq!(result.records.len(), 6);
        for (i, layers) in GENERATOR_LAYER_CELLS.iter().enumerate() {
            let label = format!("tiny[generator_layers={layers}]");
            assert_eq!(result.records[2 * i].dataset, label);
        }
    }
}
