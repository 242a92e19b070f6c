//! Random-mask MLM pretraining.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{is_special, Batch, BatchStream, Sample, MASK, NUM_SPECIALS};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::model::{BoundEncoder, EmbeddingOptions, Encoder};
use crate::optim::{clipped_step, collect_grads, AdamWConfig, OptimizerState, WarmupSchedule};
use crate::rng::{self, Rng};
use crate::tensor::{Tape, Tensor, Var};

/// What happens to the input token at a masked position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAction {
    Mask,
    /// Replace with this (non-special) id.
    Random(usize),
    Keep,
}

/// Masked positions of one sample and their targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    /// Strictly increasing.
    pub positions: Vec<usize>,
    pub actions: Vec<MaskAction>,
    pub originals: Vec<usize>,
}

impl MaskPlan {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Builds a plan that replaces every listed position with `[MASK]`.
    pub fn all_mask(ids: &[usize], mut positions: Vec<usize>) -> Self {
        positions.sort_unstable();
        positions.dedup();
        Self {
            actions: vec![MaskAction::Mask; positions.len()],
            originals: positions.iter().map(|&p| ids[p]).collect(),
            positions,
        }
    }

    /// The corrupted input sequence.
    pub fn apply(&self, ids: &[usize]) -> Vec<usize> {
        let mut out = ids.to_vec();
        for (&p, a) in self.positions.iter().zip(&self.actions) {
            match *a {
                MaskAction::Mask => out[p] = MASK,
                MaskAction::Random(id) => out[p] = id,
                MaskAction::Keep => {}
            }
        }
        out
    }
}

/// Positions that may be masked: everything that is not a special token.
pub fn eligible_positions(ids: &[usize]) -> Vec<usize> {
    (0..ids.len()).filter(|&i| !is_special(ids[i])).collect()
}

/// `max(1, ceil(rate · eligible))`, capped at `eligible`.
pub fn mask_count(eligible: usize, rate: f64) -> usize {
    crate::ceil_count(rate * eligible as f64).max(1).min(eligible)
}

fn check_rate(rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate <= 0.5) {
        return Err(Error::contract(format!("mask rate must lie in (0, 0.5], got {rate}")));
    }
    Ok(())
}

/// Uniform positions among non-special tokens with an 80/10/10
/// mask/random/keep split. `None` when the sample has nothing to mask.
pub fn random_mask(ids: &[usize], rate: f64, vocab_size: usize, rng: &mut Rng) -> Result<Option<MaskPlan>> {
    check_rate(rate)?;
    if vocab_size <= NUM_SPECIALS {
        return Err(Error::contract("vocabulary has no ordinary tokens to sample"));
    }
    let eligible = eligible_positions(ids);
    if eligible.is_empty() {
        return Ok(None);
    }
    let n = mask_count(eligible.len(), rate);
    let mut positions: Vec<usize> = index::sample(rng, eligible.len(), n)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    positions.sort_unstable();
    let actions = positions
        .iter()
        .map(|_| {
            let u: f64 = rng.random();
            if u < 0.8 {
                MaskAction::Mask
            } else if u < 0.9 {
                MaskAction::Random(rng.random_range(NUM_SPECIALS..vocab_size))
            } else {
                MaskAction::Keep
            }
        })
        .collect();
    Ok(Some(MaskPlan {
        originals: positions.iter().map(|&p| ids[p]).collect(),
        positions,
        actions,
    }))
}

/// One-hot `[targets.len(), classes]`.
pub fn one_hot(targets: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[targets.len(), classes]);
    for (r, &c) in targets.iter().enumerate() {
        t.data_mut()[r * classes + c] = 1.0;
    }
    t
}

/// Mean cross-entropy over the plan's positions of `logits [seq_len, vocab]`
/// against the original ids.
pub fn mlm_loss(tape: &mut Tape, logits: Var, plan: &MaskPlan) -> Result<Var> {
    if plan.is_empty() {
        return Err(Error::contract("mlm loss over an empty mask plan"));
    }
    let v = tape.value(logits).last_dim();
    let picked = tape.gather_rows(logits, &plan.positions)?;
    tape.soft_cross_entropy(picked, &one_hot(&plan.originals, v))
}

/// Runs the encoder on a padded block and returns logits for the given flat rows.
pub fn mlm_forward(
    encoder: &Encoder,
    tape: &mut Tape,
    bound: &BoundEncoder,
    ids: &[usize],
    attention_mask: &[u8],
    batch_size: usize,
    rows: &[usize],
) -> Result<Var> {
    let emb = encoder.embed(tape, bound, ids, attention_mask, batch_size, EmbeddingOptions::default())?;
    let hidden = encoder.encode(tape, bound, &emb)?;
    encoder.mlm_logits(tape, bound, hidden, rows)
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Fraction of logit rows whose argmax equals the target.
pub fn row_accuracy(logits: &Tensor, targets: &[usize]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let v = logits.last_dim();
    let hits = targets
        .iter()
        .enumerate()
        .filter(|&(r, &t)| argmax(&logits.data()[r * v..(r + 1) * v]) == t)
        .count();
    hits as f64 / targets.len() as f64
}

/// Masked inputs for a batch: corrupted ids, flat rows of masked positions and targets.
pub(crate) struct MaskedBatch {
    pub ids: Vec<usize>,
    pub rows: Vec<usize>,
    pub targets: Vec<usize>,
}

pub(crate) fn assemble(batch: &Batch, plans: &[Option<MaskPlan>]) -> MaskedBatch {
    let mut ids = batch.ids.clone();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, plan) in plans.iter().enumerate() {
        let Some(plan) = plan else { continue };
        let corrupted = plan.apply(batch.row(b));
        ids[b * batch.seq_len..(b + 1) * batch.seq_len].copy_from_slice(&corrupted);
        for (&p, &o) in plan.positions.iter().zip(&plan.originals) {
            rows.push(batch.flat(b, p));
            targets.push(o);
        }
    }
    MaskedBatch { ids, rows, targets }
}

/// Hyperparameters of the pretraining loop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub mask_rate: f64,
    pub clip_norm: f64,
    pub log_interval: usize,
    /// Samples with a knowledge slot scored at each log point (0 disables).
    pub slot_eval_samples: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 2e-3,
            warmup_fraction: 0.05,
            weight_decay: 0.01,
            mask_rate: 0.15,
            clip_norm: 1.0,
            log_interval: 100,
            slot_eval_samples: 256,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_rate(self.mask_rate).map_err(|_| Error::Config(format!("mask_rate {} outside (0, 0.5]", self.mask_rate)))?;
        if self.batch_size == 0 || self.log_interval == 0 {
            return Err(Error::Config("batch_size and log_interval must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("lr must be finite and >= 0, warmup_fraction in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Accuracy of predicting each sample's knowledge slot when only that slot is masked.
pub fn knowledge_slot_accuracy(encoder: &Encoder, samples: &[Sample]) -> Result<Option<f64>> {
    let with_slot: Vec<&Sample> = samples.iter().filter(|s| s.knowledge_slot.is_some()).collect();
    if with_slot.is_empty() {
        return Ok(None);
    }
    let mut hits = 0usize;
    for chunk in with_slot.chunks(64) {
        let masked: Vec<Vec<usize>> = chunk
            .iter()
            .map(|s| {
                let mut ids = s.token_ids.clone();
                ids[s.knowledge_slot.unwrap()] = MASK;
                ids
            })
            .collect();
        let refs: Vec<&[usize]> = masked.iter().map(Vec::as_slice).collect();
        let batch = Batch::from_sequences(&refs, (0..chunk.len()).collect());
        let rows: Vec<usize> = chunk
            .iter()
            .enumerate()
            .map(|(b, s)| batch.flat(b, s.knowledge_slot.unwrap()))
            .collect();
        let targets: Vec<usize> = chunk.iter().map(|s| s.token_ids[s.knowledge_slot.unwrap()]).collect();
        let mut tape = Tape::new();
        let bound = encoder.bind(&mut tape, false);
        let logits = mlm_forward(encoder, &mut tape, &bound, &batch.ids, &batch.attention_mask, batch.batch_size, &rows)?;
        hits += (row_accuracy(tape.value(logits), &targets) * targets.len() as f64).round() as usize;
    }
    Ok(Some(hits as f64 / with_slot.len() as f64))
}

pub(crate) fn slot_subset(samples: &[Sample], n: usize) -> Vec<Sample> {
    samples
        .iter()
        .filter(|s| s.knowledge_slot.is_some())
        .take(n)
        .cloned()
        .collect()
}

/// Running means over one logging interval.
#[derive(Default)]
pub(crate) struct Interval {
    loss: f64,
    acc: f64,
    n: usize,
}

impl Interval {
    pub fn push(&mut self, loss: f64, acc: f64) {
        self.loss += loss;
        self.acc += acc;
        self.n += 1;
    }

    pub fn flush(&mut self, phase: &str, step: usize) -> MetricsRecord {
        let mut r = MetricsRecord::new(phase, step);
        let n = self.n.max(1) as f64;
        r.loss = Some(self.loss / n);
        r.masked_acc = Some(self.acc / n);
        *self = Self::default();
        r
    }
}

pub(crate) fn guard(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            detail: format!("loss became {loss}"),
        })
    }
}

/// Trains every encoder parameter on random-mask MLM; returns the metrics stream.
///
/// Samples without maskable tokens are dropped from their batch. The run is a
/// pure function of the encoder, the corpus and `config`.
pub fn pretrain(encoder: &mut Encoder, samples: &[Sample], config: &PretrainConfig) -> Result<Vec<MetricsRecord>> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut records = Vec::new();
    if config.steps == 0 {
        return Ok(records);
    }
    let vocab_size = encoder.config().vocab_size;
    let eval_set = slot_subset(samples, config.slot_eval_samples);
    let mut stream = BatchStream::new(samples, config.batch_size, config.seed);
    let mut mask_rng = rng::stream(config.seed, &[rng::tag("mlm-mask")]);
    let schedule = WarmupSchedule::new(config.lr, config.steps, config.warmup_fraction);
    let mut opt = OptimizerState::new(config.adamw());
    let mut interval = Interval::default();

    for step in 0..config.steps {
        let batch = stream.next_batch();
        let plans = (0..batch.batch_size)
            .map(|b| random_mask(&batch.row(b)[..batch.lengths[b]], config.mask_rate, vocab_size, &mut mask_rng))
            .collect::<Result<Vec<_>>>()?;
        let mb = assemble(&batch, &plans);
        if mb.rows.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let bound = encoder.bind(&mut tape, true);
        let logits = mlm_forward(encoder, &mut tape, &bound, &mb.ids, &batch.attention_mask, batch.batch_size, &mb.rows)?;
        let loss = tape.soft_cross_entropy(logits, &one_hot(&mb.targets, vocab_size))?;
        let loss_value = tape.value(loss).item();
        guard(loss_value, step + 1)?;
        interval.push(loss_value, row_accuracy(tape.value(logits), &mb.targets));
        tape.backward(loss)?;
        let grads = collect_grads(&tape, bound.named());
        drop(tape);
        clipped_step(&mut opt, encoder.named_parameters_mut(), grads, schedule.lr(step), config.clip_norm)?;

        let done = step + 1;
        if done % config.log_interval == 0 || done == config.steps {
            let mut r = interval.flush("mlm", done);
            r.slot_acc = if eval_set.is_empty() { None } else { knowledge_slot_accuracy(encoder, &eval_set)? };
            log::info!("mlm step {done}: loss {:.4} masked_acc {:.3}", r.loss.unwrap_or(f64::NAN), r.masked_acc.unwrap_or(0.0));
            records.push(r);
        }
    }
    Ok(records)
}
