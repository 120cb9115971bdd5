//! Three-phase training orchestration: backbone pretraining, per-domain
//! prompt learning, then joint generator and general-prompt training,
//! followed by future-domain inference with zero new parameters.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, PretrainOptions, TrainLogEntry};
use crate::config::{DatasetConfig, ExperimentConfig};
use crate::data::{
    load_partitioned, DatasetManifest, DomainDataset, PartitionedData, Split, Standardizer,
};
use crate::error::{Error, Result};
use crate::generator::{GeneratorMode, TemporalGenerator};
use crate::nn::Module;
use crate::optim::Adam;
use crate::prompt::{
    extend_pad_flags, learn_domain_prompt, prepend, prompt_token_count, PromptBank, PromptKind,
    PromptTrainOptions, PromptVector,
};
use crate::synthetic;
use crate::tensor::Tensor;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Distinct, stable sub-seeds: phases and per-domain jobs must not share
/// RNG streams even though they start from one experiment seed.
pub fn derive_seed(base: u64, phase: u64, unit: u64) -> u64 {
    mix(mix(mix(base) ^ phase) ^ unit)
}

/// Indices of an evenly spaced subsample, order preserved.
fn evenly_spaced(count: usize, cap: usize) -> Vec<usize> {
    if cap >= count {
        return (0..count).collect();
    }
    (0..cap).map(|i| i * count / cap).collect()
}

/// Materialize the configured domains: generated series or manifest CSV,
/// split into per-domain train and held-out parts plus future targets.
pub fn prepare_data(config: &ExperimentConfig) -> Result<PartitionedData> {
    match &config.dataset {
        DatasetConfig::Synthetic {
            family,
            drift,
            num_source_domains,
            window,
            horizon,
            t_max,
            classification_threshold,
            variable_length,
            max_rows_per_domain,
        } => {
            let total = num_source_domains + 1;
            let variable_seed = variable_length.then(|| derive_seed(config.seed, 0, 0));
            let mut domains = synthetic::build_domains_seeded(
                *family,
                *drift,
                total,
                *t_max,
                *window,
                *horizon,
                variable_seed,
            )?;
            if let Some(threshold) = classification_threshold {
                synthetic::relabel_threshold(&mut domains, *threshold);
            }
            if let Some(cap) = max_rows_per_domain {
                for ds in &mut domains {
                    let idx = evenly_spaced(ds.rows, *cap);
                    *ds = ds.select_rows(&idx, ds.split);
                }
            }
            let target = domains.pop().expect("total >= 3 domains");
            let target = target.select_rows(&(0..target.rows).collect::<Vec<_>>(), Split::TargetTest);
            let sources = domains
                .into_iter()
                .map(|ds| ds.split_head_tail(0.9))
                .collect::<Result<Vec<_>>>()?;
            Ok(PartitionedData {
                sources,
                targets: vec![target],
            })
        }
        DatasetConfig::Csv {
            manifest,
            input_dim,
            output_dim,
            num_source_domains,
        } => {
            let manifest = DatasetManifest::load(manifest)?;
            let mut part = load_partitioned(&manifest)?;
            let (first_train, _) = &part.sources[0];
            if first_train.input_dim != *input_dim || first_train.output_dim != *output_dim {
                return Err(Error::Config(format!(
                    "config declares {}x{} features/targets but data has {}x{}",
                    input_dim, output_dim, first_train.input_dim, first_train.output_dim
                )));
            }
            if part.sources.len() != *num_source_domains {
                return Err(Error::Config(format!(
                    "config declares {} source domains but data has {}",
                    num_source_domains,
                    part.sources.len()
                )));
            }
            let train_refs: Vec<&DomainDataset> =
                part.sources.iter().map(|(train, _)| train).collect();
            let scale = Standardizer::fit(&train_refs)?;
            for (train, held) in &mut part.sources {
                scale.apply(train);
                scale.apply(held);
            }
            for target in &mut part.targets {
                scale.apply(target);
            }
            Ok(part)
        }
    }
}

/// Phase 1: pretrain on all source train splits pooled, validate on the
/// last source domain's held-out part, then freeze.
pub fn run_phase1_pretrain(
    config: &ExperimentConfig,
    data: &PartitionedData,
    run_seed: u64,
) -> Result<(Backbone, Vec<TrainLogEntry>)> {
    let mut backbone = Backbone::new(config.backbone_config()?, derive_seed(run_seed, 1, 0))?;
    let train_refs: Vec<&DomainDataset> = data.sources.iter().map(|(train, _)| train).collect();
    let validation = data.sources.last().map(|(_, held)| held);
    let opts = PretrainOptions {
        epochs: config.training.pretrain_epochs,
        batch_size: config.training.batch_size,
        learning_rate: config.training.learning_rate,
        seed: derive_seed(run_seed, 1, 1),
        early_stop_patience: config.training.early_stop_patience,
    };
    let log = backbone.pretrain(&train_refs, validation, &opts)?;
    Ok((backbone, log))
}

/// Phase 2: one prompt per source domain, trained independently against the
/// frozen backbone. The general prompt is deliberately absent here.
pub fn run_phase2_domain_prompts(
    config: &ExperimentConfig,
    backbone: &Backbone,
    data: &PartitionedData,
    run_seed: u64,
) -> Result<(PromptBank, Vec<(usize, Vec<TrainLogEntry>)>)> {
    backbone.verify_frozen()?;
    let mut bank = PromptBank::default();
    let mut logs = Vec::with_capacity(data.sources.len());
    for (train, _) in &data.sources {
        let t = train.domain_index;
        let opts = PromptTrainOptions {
            epochs: config.training.prompt_epochs,
            batch_size: config.training.batch_size,
            learning_rate: config.training.prompt_lr(),
            seed: derive_seed(run_seed, 2, t as u64),
            tokens_per_prompt: config.prompt.tokens_per_prompt,
        };
        let (prompt, log) = learn_domain_prompt(backbone, train, &opts)?;
        bank.insert_domain(prompt)?;
        logs.push((t, log));
    }
    backbone.verify_frozen()?;
    Ok((bank, logs))
}

/// Output of the joint temporal phase.
pub struct PhaseThreeResult {
    pub generator: TemporalGenerator,
    pub general: PromptVector,
    pub log: Vec<TrainLogEntry>,
}

/// Which prompt components participate in the temporal phase. The excluded
/// component is replaced by a frozen zero token of the same shape, so the
/// backbone always sees the full `[P_T; P_G; X]` layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalVariant {
    Full,
    NoGeneral,
    NoTemporal,
}

fn zero_prompt(
    kind: PromptKind,
    domain_index: Option<usize>,
    tokens: usize,
    embed_dim: usize,
) -> Result<PromptVector> {
    PromptVector::from_tensor(
        kind,
        domain_index,
        Tensor::new(vec![0.0; tokens * embed_dim], &[tokens, embed_dim])?,
    )
}

fn snapshot(params: &[Tensor]) -> Vec<Vec<f64>> {
    params.iter().map(Tensor::data).collect()
}

fn restore(params: &[Tensor], snap: &[Vec<f64>]) -> Result<()> {
    for (p, s) in params.iter().zip(snap) {
        p.set_data(s.clone())?;
    }
    Ok(())
}

/// Mean prompted loss over a dataset without touching any parameter.
fn prompted_eval_loss(
    backbone: &Backbone,
    prompts: &[&PromptVector],
    ds: &DomainDataset,
) -> Result<f64> {
    crate::prompt::prompted_loss(backbone, prompts, ds)
}

/// Phase 3: sweep domains t = 2..tau inside each epoch, feeding
/// `[P_T(t); P_G; X_t]` through the frozen backbone and stepping only the
/// generator weights and the general prompt. Domain prompts enter as
/// detached history rows, never as optimizer targets.
pub fn run_phase3_temporal(
    config: &ExperimentConfig,
    backbone: &Backbone,
    bank: &PromptBank,
    data: &PartitionedData,
    run_seed: u64,
) -> Result<PhaseThreeResult> {
    run_phase3_variant(config, backbone, bank, data, run_seed, TemporalVariant::Full)
}

/// [`run_phase3_temporal`] with one prompt component optionally zeroed out,
/// for component ablations that retrain rather than mask after the fact.
pub fn run_phase3_variant(
    config: &ExperimentConfig,
    backbone: &Backbone,
    bank: &PromptBank,
    data: &PartitionedData,
    run_seed: u64,
    variant: TemporalVariant,
) -> Result<PhaseThreeResult> {
    backbone.verify_frozen()?;
    let tau = bank.contiguous_domain_count()?;
    if tau < 2 {
        return Err(Error::Config(format!(
            "temporal learning needs at least 2 source domains, got {tau}"
        )));
    }
    if data.sources.len() != tau {
        return Err(Error::Config(format!(
            "bank holds {tau} domains but data has {}",
            data.sources.len()
        )));
    }
    let bank_before = bank.history_matrix(tau + 1)?.data();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run_seed, 3, 0));
    let generator =
        TemporalGenerator::new(config.generator_config(), derive_seed(run_seed, 3, 1))?;
    let tokens_per_prompt = config.prompt.tokens_per_prompt;
    let embed_dim = backbone.config.embed_dim;
    let general = if variant == TemporalVariant::NoGeneral {
        zero_prompt(PromptKind::General, None, tokens_per_prompt, embed_dim)?
    } else {
        PromptVector::init(
            PromptKind::General,
            None,
            tokens_per_prompt,
            embed_dim,
            &mut rng,
        )?
    };

    // constant inputs per step t: flattened domain prompts 1..t-1
    let histories: Vec<Tensor> = (2..=tau)
        .map(|t| Ok(bank.history_matrix(t)?.detach()))
        .collect::<Result<_>>()?;

    let mut trainable = if variant == TemporalVariant::NoTemporal {
        Vec::new()
    } else {
        generator.parameters()
    };
    if variant != TemporalVariant::NoGeneral {
        trainable.push(general.values.clone());
    }
    let mut opt = Adam::new(trainable.clone(), config.training.prompt_lr());
    let k = 2 * tokens_per_prompt;
    let val_domain = &data.sources[tau - 1].1;

    let mut log = Vec::with_capacity(config.training.temporal_epochs);
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    let mut stale = 0usize;
    for epoch in 0..config.training.temporal_epochs {
        let mut total = 0.0;
        let mut rows = 0usize;
        for t in 2..=tau {
            let history = &histories[t - 2];
            let (train, _) = &data.sources[t - 1];
            let mut order: Vec<usize> = (0..train.rows).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.training.batch_size) {
                let batch = train.select_rows(chunk, train.split);
                let p_t = if variant == TemporalVariant::NoTemporal {
                    zero_prompt(PromptKind::Temporal, Some(t), tokens_per_prompt, embed_dim)?
                } else {
                    PromptVector::from_tensor(
                        PromptKind::Temporal,
                        Some(t),
                        generator
                            .generate(history)?
                            .reshape(&[tokens_per_prompt, embed_dim])?,
                    )?
                };
                let prompts = [&p_t, &general];
                let (e, pads) = backbone.embed_inputs(&batch)?;
                let tokens = prepend(&prompts, &e)?;
                let pad_flags = pads
                    .as_ref()
                    .map(|f| extend_pad_flags(f, batch.rows, batch.tokens, k));
                let pred = backbone.forward(&tokens, pad_flags.as_deref())?;
                let loss = backbone.loss(&pred, &batch.y_tensor())?;
                let value = loss.item()?;
                if !value.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("temporal loss at epoch {epoch}, domain {t}"),
                    });
                }
                opt.zero_grad();
                loss.backward()?;
                opt.step()?;
                total += value * chunk.len() as f64;
                rows += chunk.len();
            }
        }
        let train_loss = total / rows.max(1) as f64;

        let val_loss = {
            let p_tau = if variant == TemporalVariant::NoTemporal {
                zero_prompt(PromptKind::Temporal, Some(tau), tokens_per_prompt, embed_dim)?
            } else {
                PromptVector::from_tensor(
                    PromptKind::Temporal,
                    Some(tau),
                    generator
                        .generate(&histories[tau - 2])?
                        .reshape(&[tokens_per_prompt, embed_dim])?
                        .detach(),
                )?
            };
            Some(prompted_eval_loss(backbone, &[&p_tau, &general], val_domain)?)
        };
        log.push(TrainLogEntry {
            epoch,
            train_loss,
            val_loss,
        });

        if let Some(patience) = config.training.early_stop_patience {
            let v = val_loss.expect("validation always computed");
            let improved = best.as_ref().map_or(true, |(b, _)| v < *b);
            if improved {
                best = Some((v, snapshot(&trainable)));
                stale = 0;
            } else {
                stale += 1;
                if stale > patience {
                    break;
                }
            }
        }
    }
    if let Some((_, snap)) = best {
        restore(&trainable, &snap)?;
    }

    backbone.verify_frozen()?;
    let bank_after = bank.history_matrix(tau + 1)?.data();
    if bank_before
        .iter()
        .zip(&bank_after)
        .any(|(a, b)| a.to_bits() != b.to_bits())
    {
        return Err(Error::FreezeViolation {
            context: "domain prompts moved during temporal phase".into(),
        });
    }

    Ok(PhaseThreeResult {
        generator,
        general,
        log,
    })
}

/// Per-phase training curves.
#[derive(Default)]
pub struct PipelineLogs {
    pub pretrain: Vec<TrainLogEntry>,
    pub prompts: Vec<(usize, Vec<TrainLogEntry>)>,
    pub temporal: Vec<TrainLogEntry>,
}

/// Everything the three phases produce.
pub struct TrainedArtifacts {
    pub backbone: Backbone,
    pub bank: PromptBank,
    pub generator: TemporalGenerator,
    pub logs: PipelineLogs,
}

/// Run all three phases on prepared data.
pub fn train_all(
    config: &ExperimentConfig,
    data: &PartitionedData,
    run_seed: u64,
) -> Result<TrainedArtifacts> {
    train_all_variant(config, data, run_seed, TemporalVariant::Full)
}

/// [`train_all`] with the temporal phase run under a component ablation.
pub fn train_all_variant(
    config: &ExperimentConfig,
    data: &PartitionedData,
    run_seed: u64,
    variant: TemporalVariant,
) -> Result<TrainedArtifacts> {
    let (backbone, pretrain_log) = run_phase1_pretrain(config, data, run_seed)?;
    let (mut bank, prompt_logs) = run_phase2_domain_prompts(config, &backbone, data, run_seed)?;
    let phase3 = run_phase3_variant(config, &backbone, &bank, data, run_seed, variant)?;
    bank.set_general(phase3.general)?;
    Ok(TrainedArtifacts {
        backbone,
        bank,
        generator: phase3.generator,
        logs: PipelineLogs {
            pretrain: pretrain_log,
            prompts: prompt_logs,
            temporal: phase3.log,
        },
    })
}

/// Flattened post-activation predictions of `[prompts; X]`.
pub fn predict_prompted(
    backbone: &Backbone,
    prompts: &[&PromptVector],
    ds: &DomainDataset,
) -> Result<Vec<f64>> {
    backbone.verify_frozen()?;
    let (e, pads) = backbone.embed_inputs(ds)?;
    let tokens = prepend(prompts, &e)?;
    let pad_flags = pads
        .as_ref()
        .map(|f| extend_pad_flags(f, ds.rows, ds.tokens, prompt_token_count(prompts)));
    let pred = backbone.forward(&tokens, pad_flags.as_deref())?;
    Ok(backbone.output_activation(&pred).data())
}

/// Flattened post-activation predictions of the bare backbone.
pub fn predict_vanilla(backbone: &Backbone, ds: &DomainDataset) -> Result<Vec<f64>> {
    backbone.verify_frozen()?;
    let (e, pads) = backbone.embed_inputs(ds)?;
    let pred = backbone.forward(&e, pads.as_deref())?;
    Ok(backbone.output_activation(&pred).data())
}

/// Forecast the prompt for the next unseen domain from the full source
/// history. Pure: creates no parameters and mutates nothing.
pub fn forecast_target_prompt(
    generator: &TemporalGenerator,
    bank: &PromptBank,
    tokens_per_prompt: usize,
    embed_dim: usize,
) -> Result<PromptVector> {
    let tau = bank.contiguous_domain_count()?;
    let history = bank.history_matrix(tau + 1)?.detach();
    let flat = match generator.config.mode {
        GeneratorMode::Sequential => generator.generate(&history)?,
        GeneratorMode::NonSequential => {
            let all = generator.generate_all_causal(&history)?;
            all.slice_axis(0, tau - 1, tau)?
        }
    };
    PromptVector::from_tensor(
        PromptKind::Temporal,
        Some(tau + 1),
        flat.reshape(&[tokens_per_prompt, embed_dim])?.detach(),
    )
}

/// Predict on a future domain with `[P_T(tau+1); P_G; X]`.
pub fn infer_target(artifacts: &TrainedArtifacts, ds: &DomainDataset) -> Result<Vec<f64>> {
    infer_target_variant(artifacts, TemporalVariant::Full, ds)
}

/// [`infer_target`] with the same component zeroing the artifacts were
/// trained under. A `NoGeneral` bank already stores its zero prompt, so only
/// the temporal slot needs special handling here.
pub fn infer_target_variant(
    artifacts: &TrainedArtifacts,
    variant: TemporalVariant,
    ds: &DomainDataset,
) -> Result<Vec<f64>> {
    let general = artifacts
        .bank
        .general
        .as_ref()
        .ok_or_else(|| Error::Config("general prompt missing; run the temporal phase".into()))?;
    let tokens_per_prompt = general.tokens();
    let embed_dim = artifacts.backbone.config.embed_dim;
    let p_next = if variant == TemporalVariant::NoTemporal {
        let tau = artifacts.bank.contiguous_domain_count()?;
        zero_prompt(PromptKind::Temporal, Some(tau + 1), tokens_per_prompt, embed_dim)?
    } else {
        forecast_target_prompt(
            &artifacts.generator,
            &artifacts.bank,
            tokens_per_prompt,
            embed_dim,
        )?
    };
    predict_prompted(&artifacts.backbone, &[&p_next, general], ds)
}

/// Write one phase's loss curve (no domain column).
pub fn write_phase_log(path: impl AsRef<Path>, entries: &[TrainLogEntry]) -> Result<()> {
    let rows: Vec<(Option<usize>, &TrainLogEntry)> = entries.iter().map(|e| (None, e)).collect();
    write_log_csv(path.as_ref(), &rows)
}

/// Write per-domain prompt-learning curves (domain column first).
pub fn write_prompt_log(
    path: impl AsRef<Path>,
    per_domain: &[(usize, Vec<TrainLogEntry>)],
) -> Result<()> {
    let rows: Vec<(Option<usize>, &TrainLogEntry)> = per_domain
        .iter()
        .flat_map(|(d, log)| log.iter().map(move |e| (Some(*d), e)))
        .collect();
    write_log_csv(path.as_ref(), &rows)
}

fn write_log_csv(path: &Path, rows: &[(Option<usize>, &TrainLogEntry)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    let has_domain = rows.iter().any(|(d, _)| d.is_some());
    let header: &[&str] = if has_domain {
        &["domain", "epoch", "train_loss", "val_loss"]
    } else {
        &["epoch", "train_loss", "val_loss"]
    };
    w.write_record(header).map_err(|e| Error::Data(e.to_string()))?;
    for (domain, entry) in rows {
        let val = entry.val_loss.map(|v| v.to_string()).unwrap_or_default();
        let mut record = Vec::new();
        if has_domain {
            record.push(domain.map(|d| d.to_string()).unwrap_or_default());
        }
        record.push(entry.epoch.to_string());
        record.push(entry.train_loss.to_string());
        record.push(val);
        w.write_record(&record).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Standard artifact layout: backbone/, prompts/, generator/ checkpoints
/// plus logs/ with one loss-curve CSV per phase.
pub fn save_artifacts(dir: impl AsRef<Path>, artifacts: &TrainedArtifacts) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["backbone", "prompts", "generator", "logs"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    artifacts.backbone.save(dir.join("backbone/backbone.ckpt"))?;
    artifacts.bank.save(dir.join("prompts/bank.ckpt"))?;
    artifacts.generator.save(dir.join("generator/generator.ckpt"))?;
    write_phase_log(dir.join("logs/phase1_pretrain.csv"), &artifacts.logs.pretrain)?;
    write_prompt_log(dir.join("logs/phase2_prompts.csv"), &artifacts.logs.prompts)?;
    write_phase_log(dir.join("logs/phase3_temporal.csv"), &artifacts.logs.temporal)?;
    Ok(())
}

/// Reload the three checkpoints; training curves stay on disk.
pub fn load_artifacts(dir: impl AsRef<Path>) -> Result<TrainedArtifacts> {
    let dir = dir.as_ref();
    Ok(TrainedArtifacts {
        backbone: Backbone::load(dir.join("backbone/backbone.ckpt"))?,
        bank: PromptBank::load(dir.join("prompts/bank.ckpt"))?,
        generator: TemporalGenerator::load(dir.join("generator/generator.ckpt"))?,
        logs: PipelineLogs::default(),
    })
}
