//! Learned prompt tokens and their storage.
//!
//! Prompts are small trainable tensors living in the backbone's embedding
//! space, prepended to the input tokens so attention can condition on them
//! while the backbone itself stays frozen. Three kinds exist: one prompt per
//! source domain (trained independently), a single general prompt shared by
//! every domain, and temporal prompts emitted by the drift generator rather
//! than trained directly.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, TrainLogEntry};
use crate::checkpoint::Checkpoint;
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    DomainSpecific,
    General,
    Temporal,
}

impl PromptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::DomainSpecific => "domain_specific",
            PromptKind::General => "general",
            PromptKind::Temporal => "temporal",
        }
    }
}

/// Initialization scale for trainable prompts.
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct PromptVector {
    /// `[tokens_per_prompt, embed_dim]`; a prompt is usually one token wide.
    pub values: Tensor,
    pub kind: PromptKind,
    /// Domain position `t >= 1` for domain-specific and temporal prompts;
    /// the general prompt carries none.
    pub domain_index: Option<usize>,
}

impl PromptVector {
    /// Fresh trainable prompt drawn from N(0, 0.02^2).
    pub fn init(
        kind: PromptKind,
        domain_index: Option<usize>,
        tokens: usize,
        embed_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<PromptVector> {
        if tokens == 0 || embed_dim == 0 {
            return Err(Error::Config("prompt dims must be positive".into()));
        }
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let data: Vec<f64> = (0..tokens * embed_dim)
            .map(|_| normal.sample(rng))
            .collect();
        let p = PromptVector {
            values: Tensor::param(data, &[tokens, embed_dim])?,
            kind,
            domain_index,
        };
        p.validate()?;
        Ok(p)
    }

    /// Wrap generator output (or loaded values) as a prompt.
    pub fn from_tensor(
        kind: PromptKind,
        domain_index: Option<usize>,
        values: Tensor,
    ) -> Result<PromptVector> {
        let p = PromptVector {
            values,
            kind,
            domain_index,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.values.shape();
        if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
            return Err(Error::InvalidShape {
                op: "prompt",
                detail: format!("expected [tokens, embed_dim], got {shape:?}"),
            });
        }
        match self.kind {
            PromptKind::General => {
                if self.domain_index.is_some() {
                    return Err(Error::Config(
                        "general prompt must not carry a domain index".into(),
                    ));
                }
            }
            PromptKind::DomainSpecific | PromptKind::Temporal => match self.domain_index {
                Some(t) if t >= 1 => {}
                _ => {
                    return Err(Error::Config(format!(
                        "{} prompt needs a domain index >= 1",
                        self.kind.as_str()
                    )));
                }
            },
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Prepend prompt tokens (in listed order) to embedded inputs
/// `[batch, t, n]`, broadcasting each prompt across the batch. Inputs are
/// never mutated; the x tokens pass through bit-identical.
pub fn prepend(prompts: &[&PromptVector], x: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::InvalidShape {
            op: "prepend",
            detail: format!("expected [batch, tokens, embed_dim], got {shape:?}"),
        });
    }
    let (batch, n) = (shape[0], shape[2]);
    let mut parts = Vec::with_capacity(prompts.len() + 1);
    for p in prompts {
        if p.embed_dim() != n {
            return Err(Error::ShapeMismatch {
                op: "prepend",
                lhs: p.values.shape(),
                rhs: shape.clone(),
            });
        }
        parts.push(p.values.broadcast_batch(batch)?);
    }
    let mut refs: Vec<&Tensor> = parts.iter().collect();
    refs.push(x);
    Tensor::concat(&refs, 1)
}

/// Extend per-slot pad flags after `k` prompt tokens were prepended; prompt
/// positions are never padding.
pub fn extend_pad_flags(flags: &[bool], batch: usize, tokens: usize, k: usize) -> Vec<bool> {
    debug_assert_eq!(flags.len(), batch * tokens);
    let mut out = vec![false; batch * (tokens + k)];
    for b in 0..batch {
        out[b * (tokens + k) + k..(b + 1) * (tokens + k)]
            .copy_from_slice(&flags[b * tokens..(b + 1) * tokens]);
    }
    out
}

/// Count of prompt tokens in a prepended sequence.
pub fn prompt_token_count(prompts: &[&PromptVector]) -> usize {
    prompts.iter().map(|p| p.tokens()).sum()
}

#[derive(Debug, Clone, Copy)]
pub struct PromptTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub tokens_per_prompt: usize,
}

impl Default for PromptTrainOptions {
    fn default() -> Self {
        PromptTrainOptions {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-4,
            seed: 0,
            tokens_per_prompt: 1,
        }
    }
}

/// Train one domain-specific prompt against a frozen backbone. Only the
/// prompt's `tokens * embed_dim` values are optimized; the backbone checksum
/// is re-verified afterwards.
pub fn learn_domain_prompt(
    backbone: &Backbone,
    domain: &DomainDataset,
    opts: &PromptTrainOptions,
) -> Result<(PromptVector, Vec<TrainLogEntry>)> {
    if !backbone.is_frozen() {
        return Err(Error::Config(
            "backbone must be frozen before prompt learning".into(),
        ));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let prompt = PromptVector::init(
        PromptKind::DomainSpecific,
        Some(domain.domain_index),
        opts.tokens_per_prompt,
        backbone.config.embed_dim,
        &mut rng,
    )?;
    let log = train_prompted(
        backbone,
        &[&prompt],
        &[prompt.values.clone()],
        domain,
        opts.epochs,
        opts.batch_size,
        opts.learning_rate,
        &mut rng,
    )?;
    backbone.verify_frozen()?;
    Ok((prompt, log))
}

/// Shared mini-batch loop: optimize `trainable` while feeding
/// `[prompts; X]` through the frozen backbone.
pub(crate) fn train_prompted(
    backbone: &Backbone,
    prompts: &[&PromptVector],
    trainable: &[Tensor],
    domain: &DomainDataset,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainLogEntry>> {
    let mut opt = Adam::new(trainable.to_vec(), learning_rate);
    let mut log = Vec::with_capacity(epochs);
    let k = prompt_token_count(prompts);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..domain.rows).collect();
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch = domain.select_rows(chunk, domain.split);
            let (e, pads) = backbone.embed_inputs(&batch)?;
            let tokens = prepend(prompts, &e)?;
            let pad_flags = pads
                .as_ref()
                .map(|f| extend_pad_flags(f, batch.rows, batch.tokens, k));
            let pred = backbone.forward(&tokens, pad_flags.as_deref())?;
            let loss = backbone.loss(&pred, &batch.y_tensor())?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("prompt training loss at epoch {epoch}"),
                });
            }
            opt.zero_grad();
            loss.backward()?;
            opt.step()?;
            total += value * chunk.len() as f64;
        }
        log.push(TrainLogEntry {
            epoch,
            train_loss: total / domain.rows as f64,
            val_loss: None,
        });
    }
    Ok(log)
}

/// Mean task loss of `[prompts; X]` through the frozen backbone.
pub fn prompted_loss(
    backbone: &Backbone,
    prompts: &[&PromptVector],
    domain: &DomainDataset,
) -> Result<f64> {
    let (e, pads) = backbone.embed_inputs(domain)?;
    let tokens = prepend(prompts, &e)?;
    let pad_flags = pads
        .as_ref()
        .map(|f| extend_pad_flags(f, domain.rows, domain.tokens, prompt_token_count(prompts)));
    let pred = backbone.forward(&tokens, pad_flags.as_deref())?;
    backbone.loss(&pred, &domain.y_tensor())?.item()
}

/// Prompt storage: one prompt per source domain plus the shared general
/// prompt, with training provenance in the metadata map.
#[derive(Debug, Clone, Default)]
pub struct PromptBank {
    pub domain_prompts: BTreeMap<usize, PromptVector>,
    pub general: Option<PromptVector>,
    pub meta: BTreeMap<String, String>,
}

impl PromptBank {
    pub fn insert_domain(&mut self, prompt: PromptVector) -> Result<()> {
        if prompt.kind != PromptKind::DomainSpecific {
            return Err(Error::Config(format!(
                "expected a domain_specific prompt, got {}",
                prompt.kind.as_str()
            )));
        }
        prompt.validate()?;
        let t = prompt.domain_index.expect("validated");
        self.domain_prompts.insert(t, prompt);
        Ok(())
    }

    pub fn set_general(&mut self, prompt: PromptVector) -> Result<()> {
        if prompt.kind != PromptKind::General {
            return Err(Error::Config(format!(
                "expected the general prompt, got {}",
                prompt.kind.as_str()
            )));
        }
        prompt.validate()?;
        self.general = Some(prompt);
        Ok(())
    }

    /// Check indices form 1..=tau and return tau.
    pub fn contiguous_domain_count(&self) -> Result<usize> {
        let tau = self.domain_prompts.len();
        for (expect, &got) in (1..=tau).zip(self.domain_prompts.keys()) {
            if expect != got {
                return Err(Error::Config(format!(
                    "domain prompts must cover 1..={tau} contiguously; missing index {expect}"
                )));
            }
        }
        Ok(tau)
    }

    /// Domain prompts `1..t_end` flattened one per row: `[t_end - 1,
    /// tokens * embed_dim]`. This is the drift history the temporal
    /// generator consumes.
    pub fn history_matrix(&self, t_end: usize) -> Result<Tensor> {
        if t_end < 2 {
            return Err(Error::Config(format!(
                "history needs at least one past domain, got t_end {t_end}"
            )));
        }
        let mut rows = Vec::new();
        let mut width = None;
        for t in 1..t_end {
            let p = self.domain_prompts.get(&t).ok_or_else(|| {
                Error::Config(format!("missing domain prompt {t} for history"))
            })?;
            let flat = p.values.reshape(&[1, p.tokens() * p.embed_dim()])?;
            if let Some(w) = width {
                if w != flat.shape()[1] {
                    return Err(Error::Config("domain prompts have mixed widths".into()));
                }
            } else {
                width = Some(flat.shape()[1]);
            }
            rows.push(flat);
        }
        let refs: Vec<&Tensor> = rows.iter().collect();
        Tensor::concat(&refs, 0)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut named: Vec<(String, Tensor)> = Vec::new();
        for (t, p) in &self.domain_prompts {
            named.push((format!("domain.{t}"), p.values.clone()));
        }
        if let Some(g) = &self.general {
            named.push(("general".to_string(), g.values.clone()));
        }
        Ok(Checkpoint::from_named(&named, self.meta.clone()))
    }

    pub fn from_checkpoint(cp: &Checkpoint) -> Result<PromptBank> {
        let mut bank = PromptBank {
            meta: cp.meta.clone(),
            ..PromptBank::default()
        };
        for entry in &cp.entries {
            let values = Tensor::new(entry.data.clone(), &entry.shape)?;
            if entry.name == "general" {
                bank.general = Some(PromptVector::from_tensor(PromptKind::General, None, values)?);
            } else if let Some(t) = entry.name.strip_prefix("domain.") {
                let t: usize = t.parse().map_err(|_| {
                    Error::Checkpoint(format!("bad domain prompt entry name {:?}", entry.name))
                })?;
                bank.domain_prompts.insert(
                    t,
                    PromptVector::from_tensor(PromptKind::DomainSpecific, Some(t), values)?,
                );
            } else {
                return Err(Error::Checkpoint(format!(
                    "unrecognized prompt entry {:?}",
                    entry.name
                )));
            }
        }
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PromptBank> {
        PromptBank::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, PretrainOptions, TaskKind};
    use crate::data::Split;
    use crate::nn::Module;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn frozen_backbone(seed: u64) -> Backbone {
        let config = BackboneConfig {
            input_dim: 1,
            embed_dim: 8,
            num_heads: 2,
            hidden_dim: 8,
            num_encoder_layers: 1,
            output_dim: 1,
            task_kind: TaskKind::Regression,
            ff_depth: 1,
        };
        let mut model = Backbone::new(config, seed).unwrap();
        let data = line_data(1, 32, 0.0);
        model
            .pretrain(
                &[&data],
                None,
                &PretrainOptions {
                    epochs: 8,
                    batch_size: 8,
                    learning_rate: 0.01,
                    seed,
                    early_stop_patience: None,
                },
            )
            .unwrap();
        model
    }

    /// y = slope * x over a small grid.
    fn line_data(domain: usize, rows: usize, slope: f64) -> DomainDataset {
        let x: Vec<f64> = (0..rows).map(|i| (i as f64 / rows as f64) - 0.5).collect();
        let y: Vec<f64> = x.iter().map(|v| slope * v).collect();
        DomainDataset::new(domain, Split::Train, 1, 1, 1, x, y).unwrap()
    }

    #[test]
    fn kind_and_index_rules_are_enforced() {
        let mut r = rng(0);
        assert!(PromptVector::init(PromptKind::General, Some(1), 1, 8, &mut r).is_err());
        assert!(PromptVector::init(PromptKind::DomainSpecific, None, 1, 8, &mut r).is_err());
        assert!(PromptVector::init(PromptKind::DomainSpecific, Some(0), 1, 8, &mut r).is_err());
        let p = PromptVector::init(PromptKind::General, None, 1, 8, &mut r).unwrap();
        assert_eq!(p.values.shape(), vec![1, 8]);
        assert!(p.values.requires_grad());
        // init scale is small
        assert!(p.values.data().iter().all(|v| v.abs() < 0.2));
    }

    #[test]
    fn prepend_extends_tokens_and_preserves_x_bits() {
        let mut r = rng(1);
        let pt = PromptVector::init(PromptKind::Temporal, Some(4), 1, 8, &mut r).unwrap();
        let pg = PromptVector::init(PromptKind::General, None, 1, 8, &mut r).unwrap();
        let x_data: Vec<f64> = (0..2 * 15 * 8).map(|i| (i as f64).sin()).collect();
        let x = Tensor::new(x_data.clone(), &[2, 15, 8]).unwrap();
        let out = prepend(&[&pt, &pg], &x).unwrap();
        assert_eq!(out.shape(), vec![2, 17, 8]);
        let sliced = out.slice_axis(1, 2, 17).unwrap();
        for (a, b) in sliced.data().iter().zip(&x_data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // inputs unchanged
        assert_eq!(x.data(), x_data);
        assert_eq!(pt.values.shape(), vec![1, 8]);

        let single = prepend(&[&pg], &Tensor::zeros(&[1, 1, 8])).unwrap();
        assert_eq!(single.shape(), vec![1, 2, 8]);
    }

    #[test]
    fn prepend_rejects_width_mismatch() {
        let mut r = rng(2);
        let p = PromptVector::init(PromptKind::General, None, 1, 4, &mut r).unwrap();
        let x = Tensor::zeros(&[1, 3, 8]);
        assert!(prepend(&[&p], &x).is_err());
    }

    #[test]
    fn pad_flags_shift_right_after_prepending() {
        let flags = vec![true, false, false, true];
        let out = extend_pad_flags(&flags, 2, 2, 2);
        assert_eq!(
            out,
            vec![false, false, true, false, false, false, false, true]
        );
    }

    #[test]
    fn domain_prompt_training_touches_only_the_prompt() {
        let backbone = frozen_backbone(3);
        let checksum_before = backbone.checksum();
        let domain = line_data(1, 24, 2.0);
        let (prompt, log) = learn_domain_prompt(
            &backbone,
            &domain,
            &PromptTrainOptions {
                epochs: 5,
                batch_size: 8,
                learning_rate: 0.01,
                seed: 11,
                tokens_per_prompt: 1,
            },
        )
        .unwrap();
        assert_eq!(log.len(), 5);
        assert_eq!(backbone.checksum(), checksum_before);
        assert_eq!(prompt.values.numel(), 8);
        assert_eq!(prompt.domain_index, Some(1));

        // an untouched prompt accumulated no gradient
        let mut r = rng(12);
        let other = PromptVector::init(PromptKind::DomainSpecific, Some(2), 1, 8, &mut r).unwrap();
        assert!(other.values.grad().is_none());
    }

    #[test]
    fn zero_epochs_returns_the_initialized_prompt() {
        let backbone = frozen_backbone(4);
        let domain = line_data(1, 8, 1.0);
        let opts = PromptTrainOptions {
            epochs: 0,
            seed: 21,
            ..PromptTrainOptions::default()
        };
        let (trained, log) = learn_domain_prompt(&backbone, &domain, &opts).unwrap();
        assert!(log.is_empty());
        let mut r = rng(21);
        let fresh = PromptVector::init(
            PromptKind::DomainSpecific,
            Some(1),
            1,
            8,
            &mut r,
        )
        .unwrap();
        for (a, b) in trained.values.data().iter().zip(fresh.values.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn unfrozen_backbone_is_rejected() {
        let config = BackboneConfig {
            input_dim: 1,
            embed_dim: 8,
            num_heads: 2,
            hidden_dim: 8,
            num_encoder_layers: 1,
            output_dim: 1,
            task_kind: TaskKind::Regression,
            ff_depth: 1,
        };
        let backbone = Backbone::new(config, 0).unwrap();
        let domain = line_data(1, 8, 1.0);
        assert!(learn_domain_prompt(&backbone, &domain, &PromptTrainOptions::default()).is_err());
    }

    #[test]
    fn prompting_does_not_degrade_in_distribution_loss() {
        let backbone = frozen_backbone(5);
        let full = line_data(1, 40, 0.0);
        let (train, held_out) = full.split_head_tail(0.8).unwrap();
        let (prompt, _) = learn_domain_prompt(
            &backbone,
            &train,
            &PromptTrainOptions {
                epochs: 40,
                batch_size: 8,
                learning_rate: 0.005,
                seed: 13,
                tokens_per_prompt: 1,
            },
        )
        .unwrap();
        let unprompted = backbone.eval_loss(&held_out).unwrap();
        let prompted = prompted_loss(&backbone, &[&prompt], &held_out).unwrap();
        assert!(
            prompted <= unprompted * 1.05 + 1e-9,
            "prompt degraded held-out loss: {prompted} vs {unprompted}"
        );
    }

    #[test]
    fn bank_requires_contiguous_indices() {
        let mut bank = PromptBank::default();
        let mut r = rng(6);
        for t in [1usize, 2, 4] {
            bank.insert_domain(
                PromptVector::init(PromptKind::DomainSpecific, Some(t), 1, 8, &mut r).unwrap(),
            )
            .unwrap();
        }
        let err = bank.contiguous_domain_count().unwrap_err();
        assert!(err.to_string().contains("missing index 3"), "{err}");
        bank.insert_domain(
            PromptVector::init(PromptKind::DomainSpecific, Some(3), 1, 8, &mut r).unwrap(),
        )
        .unwrap();
        assert_eq!(bank.contiguous_domain_count().unwrap(), 4);

        let general = PromptVector::init(PromptKind::General, None, 1, 8, &mut r).unwrap();
        assert!(bank.insert_domain(general.clone()).is_err());
        bank.set_general(general).unwrap();
    }

    #[test]
    fn history_matrix_stacks_prompts_in_domain_order() {
        let mut bank = PromptBank::default();
        for t in 1..=3usize {
            let values = Tensor::param(vec![t as f64; 4], &[1, 4]).unwrap();
            bank.insert_domain(
                PromptVector::from_tensor(PromptKind::DomainSpecific, Some(t), values).unwrap(),
            )
            .unwrap();
        }
        let hist = bank.history_matrix(4).unwrap();
        assert_eq!(hist.shape(), vec![3, 4]);
        assert_eq!(hist.data()[0..4], [1.0; 4]);
        assert_eq!(hist.data()[8..12], [3.0; 4]);
        assert!(bank.history_matrix(1).is_err());
        assert!(bank.history_matrix(5).is_err());
    }

    #[test]
    fn bank_round_trips_bit_exactly_through_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut bank = PromptBank::default();
        let mut r = rng(7);
        for t in 1..=3usize {
            bank.insert_domain(
                PromptVector::init(PromptKind::DomainSpecific, Some(t), 1, 6, &mut r).unwrap(),
            )
            .unwrap();
        }
        bank.set_general(PromptVector::init(PromptKind::General, None, 1, 6, &mut r).unwrap())
            .unwrap();
        bank.meta.insert("seed".into(), "7".into());
        let path = dir.path().join("prompts.ckpt");
        bank.save(&path).unwrap();
        let loaded = PromptBank::load(&path).unwrap();
        assert_eq!(loaded.meta.get("seed").map(String::as_str), Some("7"));
        assert_eq!(loaded.contiguous_domain_count().unwrap(), 3);
        for t in 1..=3usize {
            let a = bank.domain_prompts[&t].values.data();
            let b = loaded.domain_prompts[&t].values.data();
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let g = loaded.general.expect("general prompt");
        assert_eq!(g.kind, PromptKind::General);
        assert_eq!(g.domain_index, None);
    }
}
