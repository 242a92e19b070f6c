use serde::{Deserialize, Serialize};

use super::sift::{sift_loss, SiftConfig};
use super::{accuracy_of, batch_labels, check_labels, class_logits, one_hot_labels, predict_probs, ClassifierHead, InputMode};
use crate::data::{BatchStream, LabeledExample};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::model::{EmbeddingOptions, Encoder};
use crate::optim::{clipped_step, collect_grads, AdamWConfig, OptimizerState, WarmupSchedule};
use crate::pretrain::{guard, row_accuracy};
use crate::rng;
use crate::tensor::Tape;

/// An encoder with a classification head on `[CLS]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub encoder: Encoder,
    pub head: ClassifierHead,
    pub mode: InputMode,
}

impl Classifier {
    pub fn new(encoder: Encoder, classes: usize, seed: u64) -> Self {
        let d = encoder.config().hidden_size;
        Self {
            encoder,
            head: ClassifierHead::init(d, classes, seed),
            mode: InputMode::default(),
        }
    }

    pub fn predict_probs(&self, examples: &[LabeledExample]) -> Result<Vec<Vec<f64>>> {
        predict_probs(&self.encoder, &self.head, None, self.mode, examples)
    }

    pub fn accuracy(&self, examples: &[LabeledExample]) -> Result<f64> {
        Ok(accuracy_of(&self.predict_probs(examples)?, examples))
    }

    pub fn checksum(&self) -> u64 {
        let mut h = crate::tensor::Fnv::default();
        h.write(&self.encoder.checksum().to_le_bytes());
        h.write(&self.head.weight.checksum().to_le_bytes());
        h.write(&self.head.bias.checksum().to_le_bytes());
        h.finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub log_interval: usize,
    /// Adversarial regularization; switches the model to standardized embeddings.
    pub sift: Option<SiftConfig>,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 16,
            lr: 1e-3,
            warmup_fraction: 0.05,
            weight_decay: 0.01,
            clip_norm: 1.0,
            log_interval: 50,
            sift: None,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_interval == 0 {
            return Err(Error::Config("batch_size and log_interval must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("lr must be finite and >= 0, warmup_fraction in [0, 1]".into()));
        }
        if let Some(s) = &self.sift {
            s.validate()?;
        }
        Ok(())
    }
}

/// Trains every encoder parameter the classification loss reaches, plus the head.
pub fn finetune_classifier(
    model: &mut Classifier,
    train: &[LabeledExample],
    config: &FinetuneConfig,
) -> Result<Vec<MetricsRecord>> {
    config.validate()?;
    check_labels(train, model.head.classes())?;
    if config.sift.is_some() {
        model.mode.normalize = true;
    }
    let mut records = Vec::new();
    let mut stream = BatchStream::new(train, config.batch_size, config.seed);
    let mut adv_rng = rng::stream(config.seed, &[rng::tag("sift")]);
    let schedule = WarmupSchedule::new(config.lr, config.steps, config.warmup_fraction);
    let mut opt = OptimizerState::new(AdamWConfig {
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let (mut loss_sum, mut acc_sum, mut n) = (0.0, 0.0, 0usize);
    for step in 0..config.steps {
        let batch = stream.next_batch();
        let labels = batch_labels(&batch, train);
        let mut tape = Tape::new();
        let bound = model.encoder.bind(&mut tape, true);
        let head = model.head.bind(&mut tape, true);
        let (loss, logits) = match &config.sift {
            Some(s) => sift_loss(model, &mut tape, &bound, &head, &batch, &labels, s, &mut adv_rng)?,
            None => {
                let opts = EmbeddingOptions {
                    normalize: model.mode.normalize,
                    ..Default::default()
                };
                let logits = class_logits(&model.encoder, &mut tape, &bound, &head, &batch, opts)?;
                let loss = tape.soft_cross_entropy(logits, &one_hot_labels(&labels, model.head.classes()))?;
                (loss, logits)
            }
        };
        let lv = tape.value(loss).item();
        guard(lv, step + 1)?;
        loss_sum += lv;
        acc_sum += row_accuracy(tape.value(logits), &labels);
        n += 1;
        tape.backward(loss)?;
        let grads = collect_grads(&tape, bound.named().into_iter().chain(head.named()));
        drop(tape);
        let params: Vec<_> = model
            .encoder
            .named_parameters_mut()
            .into_iter()
            .chain(model.head.named_mut())
            .filter(|(name, _)| grads.contains_key(name))
            .collect();
        clipped_step(&mut opt, params, grads, schedule.lr(step), config.clip_norm)?;

        let done = step + 1;
        if done % config.log_interval == 0 || done == config.steps {
            let mut r = MetricsRecord::new("finetune", done);
            r.loss = Some(loss_sum / n as f64);
            r.accuracy = Some(acc_sum / n as f64);
            (loss_sum, acc_sum, n) = (0.0, 0.0, 0);
            records.push(r);
        }
    }
    Ok(records)
}
