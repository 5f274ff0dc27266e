//! Fine-tuning the trainable projection and classifier head with
//! class-weighted cross-entropy, keeping both encoders frozen.

mod checkpoints;
mod freeze;
mod gradcheck;
mod loss;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::images::ImageStore;
use crate::manifest::{FineTuneRecord, Label};
use crate::model::{DetectorModel, ModelError, Prediction};
use crate::prompt::{PromptError, PromptSpec};

pub use checkpoints::{
    epoch_checkpoint_name, CheckpointWriter, BEST_CHECKPOINT, HISTORY_FILE, RUN_MANIFEST_FILE,
};
pub use freeze::{
    verify_frozen, FreezeError, FreezeReport, GroupChange, GroupSnapshot, ParameterSnapshot,
    NO_OP_NOTE,
};
pub use gradcheck::{
    audit_gradients, finite_difference_gradients, AuditError, GradientAudit, TensorAudit, FD_STEP,
    MAX_RELATIVE_ERROR,
};
pub use loss::{cross_entropy, loss_and_gradients, sample_nll, ClassWeights, Gradients, LossError};

pub const DEFAULT_BATCH_SIZE: usize = 4;
pub const DEFAULT_EPOCHS: u32 = 30;
pub const DEFAULT_LEARNING_RATE: f64 = 0.05;
pub const DEFAULT_KEEP_LAST: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: u32,
    pub learning_rate: f64,
    pub class_weights: ClassWeights,
    pub seed: u64,
    pub shuffle: bool,
    /// Number of per-epoch checkpoints retained; 0 keeps all.
    pub keep_last: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: DEFAULT_EPOCHS,
            learning_rate: DEFAULT_LEARNING_RATE,
            class_weights: ClassWeights::default(),
            seed: 0,
            shuffle: true,
            keep_last: DEFAULT_KEEP_LAST,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        // zero is accepted as an explicit null-update run
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a finite non-negative number");
        }
        let w = self.class_weights;
        if !(w.matched > 0.0
            && w.mismatched > 0.0
            && w.matched.is_finite()
            && w.mismatched.is_finite())
        {
            return bad("class weights must be positive");
        }
        Ok(())
    }

    pub fn iterations_per_epoch(&self, records: usize) -> usize {
        records.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: u32,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub iterations: usize,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training records")]
    NoRecords,
    #[error("record {id}: cannot read image: {source}")]
    Image { id: String, source: std::io::Error },
    #[error("record {id}: {source}")]
    Encoding { id: String, source: ModelError },
    #[error("record {id}: {source}")]
    Prompt { id: String, source: PromptError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("gradient audit failed: max relative error {:.3e}", .0.max_relative_error)]
    GradientMismatch(Box<GradientAudit>),
    #[error("checkpoint write failed after epoch {}: {source}", history.last().map_or(0, |s| s.epoch))]
    Checkpoint {
        source: ModelError,
        history: Vec<EpochStats>,
    },
    #[error("freeze check: {0}")]
    Freeze(#[from] FreezeError),
}

/// A record after frozen encoding.
#[derive(Debug, Clone)]
pub struct EncodedRecord {
    pub id: String,
    pub features: Vec<f64>,
    pub label: Label,
}

/// Encode records in parallel. Encoders are pure, so the result is identical
/// to a sequential pass and keeps input order.
pub fn encode_records(
    model: &DetectorModel,
    records: &[FineTuneRecord],
    images: &dyn ImageStore,
    prompt: &PromptSpec,
) -> Result<Vec<EncodedRecord>, TrainError> {
    records
        .par_iter()
        .map(|r| {
            let bytes = images
                .load(&r.image_ref)
                .map_err(|source| TrainError::Image {
                    id: r.id.clone(),
                    source,
                })?;
            let text = prompt
                .render(&r.caption)
                .map_err(|source| TrainError::Prompt {
                    id: r.id.clone(),
                    source,
                })?;
            let features = model
                .fuse(&bytes, &text)
                .map_err(|source| TrainError::Encoding {
                    id: r.id.clone(),
                    source,
                })?;
            Ok(EncodedRecord {
                id: r.id.clone(),
                features,
                label: r.label(),
            })
        })
        .collect()
}

/// One gradient-descent step on pre-encoded records. Returns the loss before
/// the update and the gradient norm.
pub fn step_encoded(
    model: &mut DetectorModel,
    batch: &[&EncodedRecord],
    config: &TrainConfig,
) -> Result<(f64, f64), TrainError> {
    let passes = batch
        .iter()
        .map(|r| model.forward(&r.features))
        .collect::<Result<Vec<_>, _>>()?;
    let targets: Vec<Label> = batch.iter().map(|r| r.label).collect();
    let (loss, grads) = loss_and_gradients(model, &passes, &targets, config.class_weights)?;
    if config.learning_rate > 0.0 {
        grads.apply(model, config.learning_rate);
    }
    Ok((loss, grads.norm()))
}

/// Encode a batch and take one gradient step on the trainable partition.
pub fn train_step(
    model: &mut DetectorModel,
    batch: &[FineTuneRecord],
    images: &dyn ImageStore,
    prompt: &PromptSpec,
    config: &TrainConfig,
) -> Result<f64, TrainError> {
    let encoded = encode_records(model, batch, images, prompt)?;
    let refs: Vec<&EncodedRecord> = encoded.iter().collect();
    Ok(step_encoded(model, &refs, config)?.0)
}

pub fn accuracy(model: &DetectorModel, records: &[EncodedRecord]) -> Result<f64, TrainError> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for r in records {
        let logits = model.forward(&r.features)?.logits;
        if Prediction::from_logits(logits).label == r.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / records.len() as f64)
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    pub model: DetectorModel,
    pub history: Vec<EpochStats>,
    pub audit: GradientAudit,
    pub freeze: FreezeReport,
    pub best_epoch: Option<u32>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    config: &'a TrainConfig,
    prompt: &'a PromptSpec,
    vision: &'a crate::model::EncoderBackend,
    text: &'a crate::model::EncoderBackend,
    hidden: usize,
    init_seed: u64,
    train_records: usize,
    val_records: usize,
}

/// Run `epochs × ceil(n / batch_size)` gradient steps.
///
/// Before the first step the analytic gradient is audited against central
/// finite differences on the first `batch_size` training records; a failed
/// audit aborts the run. After training the freeze contract is verified and
/// returned alongside the per-epoch history.
pub fn fine_tune(
    mut model: DetectorModel,
    train: &[FineTuneRecord],
    val: &[FineTuneRecord],
    images: &dyn ImageStore,
    prompt: &PromptSpec,
    config: &TrainConfig,
    mut writer: Option<&mut CheckpointWriter>,
) -> Result<FineTuneOutcome, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::NoRecords);
    }
    model.validate()?;

    if let Some(w) = writer.as_deref_mut() {
        let manifest = RunManifest {
            config,
            prompt,
            vision: &model.vision,
            text: &model.text,
            hidden: model.hidden_dim(),
            init_seed: model.metadata.seed,
            train_records: train.len(),
            val_records: val.len(),
        };
        w.write_run_manifest(&manifest)
            .map_err(|e| TrainError::Checkpoint {
                source: e.into(),
                history: Vec::new(),
            })?;
    }

    let train_enc = encode_records(&model, train, images, prompt)?;
    let val_enc = encode_records(&model, val, images, prompt)?;

    let audit_batch = &train_enc[..config.batch_size.min(train_enc.len())];
    let audit = audit_gradients(
        &model,
        &audit_batch
            .iter()
            .map(|r| r.features.clone())
            .collect::<Vec<_>>(),
        &audit_batch.iter().map(|r| r.label).collect::<Vec<_>>(),
        config.class_weights,
    )?;
    if !audit.passed {
        return Err(TrainError::GradientMismatch(Box::new(audit)));
    }

    let snapshot = ParameterSnapshot::of(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_enc.len()).collect();
    let mut history = Vec::with_capacity(config.epochs as usize);
    let mut saw_gradient = false;

    for _ in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let mut iterations = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&EncodedRecord> = chunk.iter().map(|&i| &train_enc[i]).collect();
            let (loss, grad_norm) = step_encoded(&mut model, &batch, config)?;
            saw_gradient |= grad_norm > 0.0;
            loss_sum += loss * batch.len() as f64;
            iterations += 1;
        }
        model.metadata.epoch += 1;

        let stats = EpochStats {
            epoch: model.metadata.epoch,
            mean_loss: loss_sum / train_enc.len() as f64,
            train_accuracy: accuracy(&model, &train_enc)?,
            val_accuracy: if val_enc.is_empty() {
                None
            } else {
                Some(accuracy(&model, &val_enc)?)
            },
            iterations,
        };
        log::debug!(
            "epoch {} loss {:.6} train acc {:.4}",
            stats.epoch,
            stats.mean_loss,
            stats.train_accuracy
        );
        history.push(stats);

        if let Some(w) = writer.as_deref_mut() {
            let stats = history.last().expect("just pushed");
            if let Err(source) = w.record_epoch(&model, stats) {
                return Err(TrainError::Checkpoint { source, history });
            }
        }
    }

    let expect_update = config.learning_rate > 0.0 && saw_gradient;
    let freeze = verify_frozen(&snapshot, &model, expect_update)?;

    Ok(FineTuneOutcome {
        best_epoch: writer.and_then(|w| w.best_epoch()),
        model,
        history,
        audit,
        freeze,
    })
}
