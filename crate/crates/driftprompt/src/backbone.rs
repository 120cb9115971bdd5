//! The frozen task network: input embedding, bidirectional encoder stack,
//! and task head. It is pre-trained once on the pooled source domains and
//! never updated afterwards; later phases steer it purely through prompt
//! tokens prepended in embedding space.

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::nn::{key_padding_mask, sinusoidal_positions, EncoderLayer, Linear, Module};
use crate::optim::Adam;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    BinaryClassification,
    /// Multi-step series prediction; the head emits the whole horizon at
    /// once and window tokens get sinusoidal position encodings.
    Forecasting,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Regression => "regression",
            TaskKind::BinaryClassification => "binary_classification",
            TaskKind::Forecasting => "forecasting",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_dim: usize,
    /// Token width n; prompts live in this space.
    pub embed_dim: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub num_encoder_layers: usize,
    pub output_dim: usize,
    pub task_kind: TaskKind,
    /// 1 = single ReLU layer, 2 = standard two-layer feed-forward.
    pub ff_depth: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config(
                "input_dim and output_dim must be positive".into(),
            ));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_encoder_layers == 0 {
            return Err(Error::Config("need at least one encoder layer".into()));
        }
        if !(self.ff_depth == 1 || self.ff_depth == 2) {
            return Err(Error::Config(format!(
                "ff_depth must be 1 or 2, got {}",
                self.ff_depth
            )));
        }
        if self.ff_depth == 2 && self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Stop after this many epochs without validation improvement and roll
    /// back to the best-validation parameters. Requires a validation set.
    pub early_stop_patience: Option<usize>,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-4,
            seed: 0,
            early_stop_patience: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

pub struct Backbone {
    pub config: BackboneConfig,
    pub embed: Linear,
    pub encoder: Vec<EncoderLayer>,
    pub head: Linear,
    /// Token used for variable-length padding slots. Pads are masked out of
    /// attention everywhere, so this stays inert; it exists so padded and
    /// real slots are distinguishable by construction, not by data values.
    pub pad_embedding: Tensor,
    frozen: bool,
    frozen_checksum: Option<String>,
}

impl Module for Backbone {
    fn visit_parameters(&self, prefix: &str, visit: &mut dyn FnMut(String, &Tensor)) {
        let join = |name: String| {
            if prefix.is_empty() {
                name
            } else {
                format!("{prefix}.{name}")
            }
        };
        self.embed.visit_parameters(&join("embed".into()), visit);
        for (i, layer) in self.encoder.iter().enumerate() {
            layer.visit_parameters(&join(format!("encoder.{i}")), visit);
        }
        self.head.visit_parameters(&join("head".into()), visit);
        visit(join("pad_embedding".into()), &self.pad_embedding);
    }
}

impl Backbone {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Backbone> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = Linear::new(config.input_dim, config.embed_dim, &mut rng)?;
        let encoder = (0..config.num_encoder_layers)
            .map(|_| {
                EncoderLayer::new(
                    config.embed_dim,
                    config.num_heads,
                    config.hidden_dim,
                    config.ff_depth,
                    false,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(config.embed_dim, config.output_dim, &mut rng)?;
        let normal = rand_distr::Normal::new(0.0, 0.02).expect("valid std");
        let pad_embedding = Tensor::param(
            (0..config.embed_dim)
                .map(|_| rand_distr::Distribution::sample(&normal, &mut rng))
                .collect(),
            &[config.embed_dim],
        )?;
        Ok(Backbone {
            config,
            embed,
            encoder,
            head,
            pad_embedding,
            frozen: false,
            frozen_checksum: None,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Exclude every backbone parameter from future gradient flow and record
    /// the reference checksum.
    pub fn freeze(&mut self) {
        self.set_trainable(false);
        self.frozen = true;
        self.frozen_checksum = Some(self.checksum());
    }

    /// Confirm no parameter has drifted since `freeze`.
    pub fn verify_frozen(&self) -> Result<()> {
        let reference = self.frozen_checksum.as_ref().ok_or_else(|| {
            Error::FreezeViolation {
                context: "backbone was never frozen".into(),
            }
        })?;
        if *reference != self.checksum() {
            return Err(Error::FreezeViolation {
                context: "backbone checksum mismatch".into(),
            });
        }
        Ok(())
    }

    /// Embed a dataset's raw inputs into token space: affine per-token map,
    /// sinusoidal positions for forecasting windows, zeroed embeddings plus
    /// a key-pad flag vector for variable-length padding slots.
    ///
    /// Returns `([rows, tokens, embed_dim], per-slot pad flags)`.
    pub fn embed_inputs(&self, ds: &DomainDataset) -> Result<(Tensor, Option<Vec<bool>>)> {
        if ds.input_dim != self.config.input_dim {
            return Err(Error::Data(format!(
                "domain {} has input width {}, backbone expects {}",
                ds.domain_index, ds.input_dim, self.config.input_dim
            )));
        }
        let (rows, tokens, n) = (ds.rows, ds.tokens, self.config.embed_dim);
        let forecasting = self.config.task_kind == TaskKind::Forecasting;
        let e = self.embed.forward(&ds.x_tensor())?;
        let Some(lengths) = &ds.lengths else {
            let e = if forecasting {
                e.add(&sinusoidal_positions(tokens, n))?
            } else {
                e
            };
            return Ok((e, None));
        };

        // content is right-aligned; leading slots are padding and get the
        // learned pad token (position encodings apply to real slots only)
        let mut flags = vec![false; rows * tokens];
        let mut keep = vec![1.0; rows * tokens * n];
        let mut inv = vec![0.0; rows * tokens * n];
        let pe = sinusoidal_positions(tokens, n).data();
        let mut pe_masked = vec![0.0; rows * tokens * n];
        for (r, &len) in lengths.iter().enumerate() {
            let pad_end = tokens.saturating_sub(len);
            for j in 0..tokens {
                let slot = (r * tokens + j) * n;
                if j < pad_end {
                    flags[r * tokens + j] = true;
                    keep[slot..slot + n].fill(0.0);
                    inv[slot..slot + n].fill(1.0);
                } else if forecasting {
                    pe_masked[slot..slot + n].copy_from_slice(&pe[j * n..(j + 1) * n]);
                }
            }
        }
        let shape = [rows, tokens, n];
        let mut e = e
            .mul(&Tensor::new(keep, &shape)?)?
            .add(&self.pad_embedding.mul(&Tensor::new(inv, &shape)?)?)?;
        if forecasting {
            e = e.add(&Tensor::new(pe_masked, &shape)?)?;
        }
        Ok((e, Some(flags)))
    }

    /// Run the encoder and read the prediction from `readout` (a token
    /// position, usually the last). `pad_flags` marks embedding slots whose
    /// keys must be hidden from attention.
    pub fn forward_at(
        &self,
        tokens: &Tensor,
        readout: usize,
        pad_flags: Option<&[bool]>,
    ) -> Result<Tensor> {
        let shape = tokens.shape();
        if shape.len() != 3 || shape[2] != self.config.embed_dim {
            return Err(Error::InvalidShape {
                op: "backbone forward",
                detail: format!(
                    "expected [batch, tokens, {}], got {shape:?}",
                    self.config.embed_dim
                ),
            });
        }
        let (b, t) = (shape[0], shape[1]);
        if readout >= t {
            return Err(Error::InvalidShape {
                op: "backbone readout",
                detail: format!("position {readout} out of range for {t} tokens"),
            });
        }
        let mask = match pad_flags {
            Some(flags) => Some(key_padding_mask(flags, b, t, self.config.num_heads)?),
            None => None,
        };
        let mut h = tokens.clone();
        for layer in &self.encoder {
            h = layer.forward(&h, mask.as_ref())?;
        }
        let picked = h
            .slice_axis(1, readout, readout + 1)?
            .reshape(&[b, self.config.embed_dim])?;
        self.head.forward(&picked)
    }

    /// Forward with the readout at the final token.
    pub fn forward(&self, tokens: &Tensor, pad_flags: Option<&[bool]>) -> Result<Tensor> {
        let t = {
            let shape = tokens.shape();
            if shape.len() != 3 {
                return Err(Error::InvalidShape {
                    op: "backbone forward",
                    detail: format!("expected rank-3 tokens, got {shape:?}"),
                });
            }
            shape[1]
        };
        self.forward_at(tokens, t - 1, pad_flags)
    }

    /// Task loss on raw head outputs (mean squared error for regression and
    /// forecasting, logit cross-entropy for binary classification).
    pub fn loss(&self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        match self.config.task_kind {
            TaskKind::BinaryClassification => pred.binary_cross_entropy_loss(target),
            _ => pred.mse_loss(target),
        }
    }

    /// Map head outputs to reported predictions (sigmoid for classification).
    pub fn output_activation(&self, pred: &Tensor) -> Tensor {
        match self.config.task_kind {
            TaskKind::BinaryClassification => pred.sigmoid(),
            _ => pred.clone(),
        }
    }

    /// Mean task loss over a dataset, without prompts.
    pub fn eval_loss(&self, ds: &DomainDataset) -> Result<f64> {
        let (e, pads) = self.embed_inputs(ds)?;
        let pred = self.forward(&e, pads.as_deref())?;
        self.loss(&pred, &ds.y_tensor())?.item()
    }

    /// Train on the pooled source domains, then freeze. Row order is
    /// reshuffled each epoch from the seed; an optional validation split
    /// enables early stopping with best-parameter rollback.
    pub fn pretrain(
        &mut self,
        sources: &[&DomainDataset],
        validation: Option<&DomainDataset>,
        opts: &PretrainOptions,
    ) -> Result<Vec<TrainLogEntry>> {
        if self.frozen {
            return Err(Error::Config("backbone is frozen; cannot pretrain".into()));
        }
        if opts.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if opts.early_stop_patience.is_some() && validation.is_none() {
            return Err(Error::Config(
                "early stopping requires a validation split".into(),
            ));
        }
        let pooled = pool_domains(sources)?;
        // the pad token only enters the graph when some split actually pads
        let has_padding = pooled.lengths.is_some();
        let params: Vec<Tensor> = self
            .named_parameters()
            .into_iter()
            .filter(|(name, _)| has_padding || name != "pad_embedding")
            .map(|(_, t)| t)
            .collect();
        let mut opt = Adam::new(params.clone(), opts.learning_rate);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut log = Vec::with_capacity(opts.epochs);
        let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
        let mut stale = 0usize;

        for epoch in 0..opts.epochs {
            let mut order: Vec<usize> = (0..pooled.rows).collect();
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(opts.batch_size) {
                let batch = pooled.select_rows(chunk, pooled.split);
                let (e, pads) = self.embed_inputs(&batch)?;
                let pred = self.forward(&e, pads.as_deref())?;
                let loss = self.loss(&pred, &batch.y_tensor())?;
                let value = loss.item()?;
                if !value.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("pretraining loss at epoch {epoch}"),
                    });
                }
                opt.zero_grad();
                loss.backward()?;
                opt.step()?;
                total += value * chunk.len() as f64;
            }
            let train_loss = total / pooled.rows as f64;
            let val_loss = match validation {
                Some(v) => Some(self.eval_loss(v)?),
                None => None,
            };
            log.push(TrainLogEntry {
                epoch,
                train_loss,
                val_loss,
            });
            if let (Some(patience), Some(v)) = (opts.early_stop_patience, val_loss) {
                let improved = best.as_ref().map_or(true, |(b, _)| v < *b);
                if improved {
                    best = Some((v, params.iter().map(Tensor::data).collect()));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale > patience {
                        break;
                    }
                }
            }
        }
        if let Some((_, snapshot)) = best {
            for (p, values) in params.iter().zip(snapshot) {
                p.set_data(values)?;
            }
        }
        self.freeze();
        Ok(log)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut meta = std::collections::BTreeMap::new();
        meta.insert(
            "config".to_string(),
            serde_json::to_string(&self.config)
                .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?,
        );
        meta.insert("frozen".to_string(), self.frozen.to_string());
        if let Some(cs) = &self.frozen_checksum {
            meta.insert("checksum".to_string(), cs.clone());
        }
        Ok(Checkpoint::from_named(&self.named_parameters(), meta))
    }

    pub fn from_checkpoint(cp: &Checkpoint) -> Result<Backbone> {
        let config_json = cp
            .meta
            .get("config")
            .ok_or_else(|| Error::Checkpoint("missing backbone config in metadata".into()))?;
        let config: BackboneConfig = serde_json::from_str(config_json)
            .map_err(|e| Error::Checkpoint(format!("backbone config: {e}")))?;
        let mut model = Backbone::new(config, 0)?;
        cp.apply_to(&model.named_parameters())?;
        if cp.meta.get("frozen").map(String::as_str) == Some("true") {
            model.freeze();
            if let Some(stored) = cp.meta.get("checksum") {
                if stored != model.frozen_checksum.as_ref().expect("just frozen") {
                    return Err(Error::Checkpoint(
                        "stored backbone checksum does not match loaded weights".into(),
                    ));
                }
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Backbone> {
        Backbone::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Concatenate domains row-wise. All layouts must agree.
pub fn pool_domains(sources: &[&DomainDataset]) -> Result<DomainDataset> {
    let first = *sources
        .first()
        .ok_or_else(|| Error::Data("no source domains to pool".into()))?;
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut lengths: Option<Vec<usize>> = first.lengths.as_ref().map(|_| Vec::new());
    let mut rows = 0;
    for ds in sources {
        if ds.tokens != first.tokens
            || ds.input_dim != first.input_dim
            || ds.output_dim != first.output_dim
        {
            return Err(Error::Data(format!(
                "domain {} layout differs from domain {}",
                ds.domain_index, first.domain_index
            )));
        }
        if ds.lengths.is_some() != lengths.is_some() {
            return Err(Error::Data(
                "cannot pool fixed-length with variable-length domains".into(),
            ));
        }
        x.extend_from_slice(&ds.x);
        y.extend_from_slice(&ds.y);
        if let (Some(acc), Some(l)) = (lengths.as_mut(), ds.lengths.as_ref()) {
            acc.extend_from_slice(l);
        }
        rows += ds.rows;
    }
    let mut pooled = DomainDataset::new(
        first.domain_index,
        first.split,
        first.tokens,
        first.input_dim,
        first.output_dim,
        x,
        y,
    )?;
    debug_assert_eq!(pooled.rows, rows);
    pooled.lengths = lengths;
    Ok(pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn tiny_config(task_kind: TaskKind) -> BackboneConfig {
        BackboneConfig {
            input_dim: 1,
            embed_dim: 8,
            num_heads: 2,
            hidden_dim: 8,
            num_encoder_layers: 1,
            output_dim: 1,
            task_kind,
            ff_depth: 1,
        }
    }

    fn const_target_data(rows: usize) -> DomainDataset {
        let x: Vec<f64> = (0..rows).map(|i| (i as f64 / rows as f64) - 0.5).collect();
        DomainDataset::new(1, Split::Train, 1, 1, 1, x, vec![0.0; rows]).unwrap()
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut c = tiny_config(TaskKind::Regression);
        c.embed_dim = 9;
        assert!(c.validate().is_err());
        c = tiny_config(TaskKind::Regression);
        c.ff_depth = 3;
        assert!(c.validate().is_err());
        c = tiny_config(TaskKind::Regression);
        c.output_dim = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let config = BackboneConfig {
            input_dim: 1,
            embed_dim: 16,
            num_heads: 2,
            hidden_dim: 32,
            num_encoder_layers: 2,
            output_dim: 1,
            task_kind: TaskKind::Forecasting,
            ff_depth: 2,
        };
        let model = Backbone::new(config, 0).unwrap();
        let n = 16;
        let per_layer = 4 * (n * n + n) + ((n * 32 + 32) + (32 * n + n)) + 2 * (2 * n);
        // embed + layers + head + pad token
        let expected = (n + n) + 2 * per_layer + (n + 1) + n;
        assert_eq!(model.count_parameters(), expected);
        assert_eq!(expected, 4513);
        assert!(model
            .named_parameters()
            .iter()
            .any(|(name, _)| name == "pad_embedding"));
    }

    #[test]
    fn constant_target_regression_converges() {
        let mut model = Backbone::new(tiny_config(TaskKind::Regression), 1).unwrap();
        let data = const_target_data(32);
        let log = model
            .pretrain(
                &[&data],
                None,
                &PretrainOptions {
                    epochs: 60,
                    batch_size: 8,
                    learning_rate: 0.01,
                    seed: 3,
                    early_stop_patience: None,
                },
            )
            .unwrap();
        assert_eq!(log.len(), 60);
        let first = log.first().unwrap().train_loss;
        let last = log.last().unwrap().train_loss;
        assert!(last < first * 0.5, "no convergence: {first} -> {last}");
        assert!(last < 0.05, "loss stayed high: {last}");
        assert!(model.is_frozen());
    }

    #[test]
    fn separable_classes_reach_low_training_error() {
        let config = BackboneConfig {
            input_dim: 2,
            embed_dim: 8,
            num_heads: 2,
            hidden_dim: 8,
            num_encoder_layers: 1,
            output_dim: 1,
            task_kind: TaskKind::BinaryClassification,
            ff_depth: 1,
        };
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..20 {
            let off = (i as f64) * 0.05;
            x.extend_from_slice(&[-2.0 - off, 1.0 + off]);
            y.push(0.0);
            x.extend_from_slice(&[2.0 + off, -1.0 - off]);
            y.push(1.0);
        }
        let data = DomainDataset::new(1, Split::Train, 1, 2, 1, x, y).unwrap();
        let mut model = Backbone::new(config, 5).unwrap();
        model
            .pretrain(
                &[&data],
                None,
                &PretrainOptions {
                    epochs: 200,
                    batch_size: 20,
                    learning_rate: 0.01,
                    seed: 7,
                    early_stop_patience: None,
                },
            )
            .unwrap();
        let (e, pads) = model.embed_inputs(&data).unwrap();
        let logits = model.forward(&e, pads.as_deref()).unwrap();
        let probs = model.output_activation(&logits);
        let wrong = probs
            .data()
            .iter()
            .zip(&data.y)
            .filter(|(p, &t)| (**p > 0.5) != (t > 0.5))
            .count();
        let err_pct = 100.0 * wrong as f64 / data.rows as f64;
        assert!(err_pct < 5.0, "training error {err_pct}%");
    }

    #[test]
    fn freeze_pins_parameters_and_checksum_detects_drift() {
        let mut model = Backbone::new(tiny_config(TaskKind::Regression), 2).unwrap();
        let data = const_target_data(8);
        model
            .pretrain(
                &[&data],
                None,
                &PretrainOptions {
                    epochs: 2,
                    batch_size: 8,
                    learning_rate: 0.01,
                    seed: 0,
                    early_stop_patience: None,
                },
            )
            .unwrap();
        assert!(model.parameters().iter().all(|p| !p.requires_grad()));
        model.verify_frozen().unwrap();
        model.embed.weight.with_data_mut(|d| d[0] += 1e-9);
        let err = model.verify_frozen().unwrap_err();
        assert!(matches!(err, Error::FreezeViolation { .. }));
        assert_eq!(err.exit_code(), 3);

        let again = model.pretrain(&[&data], None, &PretrainOptions::default());
        assert!(again.is_err());
    }

    #[test]
    fn readout_position_is_validated() {
        let model = Backbone::new(tiny_config(TaskKind::Regression), 0).unwrap();
        let tokens = Tensor::new(vec![0.0; 2 * 3 * 8], &[2, 3, 8]).unwrap();
        assert_eq!(model.forward_at(&tokens, 2, None).unwrap().shape(), vec![2, 1]);
        let err = model.forward_at(&tokens, 3, None).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
    }

    #[test]
    fn prepended_zero_token_still_changes_output() {
        let model = Backbone::new(tiny_config(TaskKind::Regression), 4).unwrap();
        let ds = const_target_data(3);
        let (e, _) = model.embed_inputs(&ds).unwrap();
        let plain = model.forward(&e, None).unwrap();
        let zero = Tensor::zeros(&[3, 1, 8]);
        let padded = Tensor::concat(&[&zero, &e], 1).unwrap();
        let prompted = model.forward(&padded, None).unwrap();
        let diff: f64 = plain
            .data()
            .iter()
            .zip(prompted.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9, "attention ignored the extra token");
    }

    #[test]
    fn positions_are_encoded_only_for_forecasting() {
        let constant = DomainDataset::new(
            1,
            Split::Train,
            2,
            1,
            1,
            vec![0.7, 0.7, 0.7, 0.7],
            vec![0.0, 0.0],
        )
        .unwrap();
        let mut config = tiny_config(TaskKind::Forecasting);
        config.input_dim = 1;
        let fc = Backbone::new(config, 6).unwrap();
        let (e, _) = fc.embed_inputs(&constant).unwrap();
        let d = e.data();
        assert!(d[..8].iter().zip(&d[8..16]).any(|(a, b)| a != b));

        let mut config = tiny_config(TaskKind::Regression);
        config.input_dim = 1;
        let rg = Backbone::new(config, 6).unwrap();
        let (e, _) = rg.embed_inputs(&constant).unwrap();
        let d = e.data();
        assert_eq!(d[..8], d[8..16]);
    }

    #[test]
    fn padding_slots_cannot_influence_predictions() {
        let model = Backbone::new(tiny_config(TaskKind::Forecasting), 8).unwrap();
        let mut a = DomainDataset::new(
            1,
            Split::Train,
            4,
            1,
            1,
            vec![9.0, 9.0, 0.3, 0.4, 7.0, 0.1, 0.2, 0.3],
            vec![0.5, 0.6],
        )
        .unwrap();
        a.lengths = Some(vec![2, 3]);
        let mut b = a.clone();
        b.x[0] = -55.0;
        b.x[1] = 3.2;
        b.x[4] = 123.0;

        let (ea, pa) = model.embed_inputs(&a).unwrap();
        let (eb, pb) = model.embed_inputs(&b).unwrap();
        assert_eq!(pa, pb);
        let out_a = model.forward(&ea, pa.as_deref()).unwrap();
        let out_b = model.forward(&eb, pb.as_deref()).unwrap();
        for (x, y) in out_a.data().iter().zip(out_b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }

        // real slots still matter
        let mut c = a.clone();
        c.x[2] = 5.0;
        let (ec, pc) = model.embed_inputs(&c).unwrap();
        let out_c = model.forward(&ec, pc.as_deref()).unwrap();
        assert_ne!(out_a.data(), out_c.data());
    }

    #[test]
    fn forward_is_deterministic() {
        let model = Backbone::new(tiny_config(TaskKind::Regression), 9).unwrap();
        let ds = const_target_data(4);
        let (e, _) = model.embed_inputs(&ds).unwrap();
        let a = model.forward(&e, None).unwrap();
        let b = model.forward(&e, None).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn checkpoint_round_trip_preserves_behavior() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Backbone::new(tiny_config(TaskKind::Regression), 10).unwrap();
        let data = const_target_data(8);
        model
            .pretrain(
                &[&data],
                None,
                &PretrainOptions {
                    epochs: 3,
                    batch_size: 4,
                    learning_rate: 0.01,
                    seed: 1,
                    early_stop_patience: None,
                },
            )
            .unwrap();
        let path = dir.path().join("backbone.ckpt");
        model.save(&path).unwrap();
        let loaded = Backbone::load(&path).unwrap();
        assert!(loaded.is_frozen());
        loaded.verify_frozen().unwrap();
        let (e, _) = model.embed_inputs(&data).unwrap();
        let a = model.forward(&e, None).unwrap();
        let b = loaded.forward(&e, None).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn early_stopping_halts_on_adversarial_validation() {
        let mut model = Backbone::new(tiny_config(TaskKind::Regression), 11).unwrap();
        let train = const_target_data(16);
        // validation targets pull the opposite way, so val loss rises as
        // train loss falls
        let xs: Vec<f64> = (0..8).map(|i| (i as f64 / 8.0) - 0.5).collect();
        let val = DomainDataset::new(2, Split::Validation, 1, 1, 1, xs, vec![5.0; 8]).unwrap();
        let log = model
            .pretrain(
                &[&train],
                Some(&val),
                &PretrainOptions {
                    epochs: 100,
                    batch_size: 8,
                    learning_rate: 0.01,
                    seed: 2,
                    early_stop_patience: Some(3),
                },
            )
            .unwrap();
        assert!(log.len() < 100, "early stop never triggered");
        assert!(model.is_frozen());
    }

    #[test]
    fn pretraining_handles_padded_windows() {
        let mut model = Backbone::new(tiny_config(TaskKind::Forecasting), 12).unwrap();
        let series: Vec<f64> = (0..60).map(|t| (t as f64 * 0.3).sin()).collect();
        let ds = crate::data::window_series(
            &series,
            6,
            1,
            1,
            crate::data::WindowMode::Variable { seed: 4 },
            1,
            Split::Train,
        )
        .unwrap();
        let log = model
            .pretrain(
                &[&ds],
                None,
                &PretrainOptions {
                    epochs: 2,
                    batch_size: 16,
                    learning_rate: 0.01,
                    seed: 0,
                    early_stop_patience: None,
                },
            )
            .unwrap();
        assert_eq!(log.len(), 2);
        assert!(log.iter().all(|e| e.train_loss.is_finite()));
    }

    #[test]
    fn pooling_rejects_mismatched_layouts() {
        let a = const_target_data(4);
        let b = DomainDataset::new(2, Split::Train, 2, 1, 1, vec![0.0; 8], vec![0.0; 4]).unwrap();
        assert!(pool_domains(&[&a, &b]).is_err());
        let pooled = pool_domains(&[&a, &a]).unwrap();
        assert_eq!(pooled.rows, 8);
    }
}
