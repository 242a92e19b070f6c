//! Self-evolution learning: find the tokens a trained model fails to predict
//! from their own unmasked context, then keep training on exactly those
//! tokens with labels smoothed toward the model's own reference distribution.

use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, BatchStream, Sample};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::model::{BoundEncoder, Encoder};
use crate::optim::{clipped_step, collect_grads, AdamWConfig, OptimizerState, WarmupSchedule};
use crate::pretrain::{
    assemble, eligible_positions, guard, knowledge_slot_accuracy, mask_count, mlm_forward, random_mask, row_accuracy,
    slot_subset, Interval, MaskPlan,
};
use crate::rng::{self, Rng};
use crate::tensor::{softmax_rows, Tape, Tensor, Var};

/// One token the model does not rank first in its own unmasked sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeglectedRecord {
    pub sample: usize,
    pub pos: usize,
    pub truth: usize,
    pub truth_p: f64,
    /// Most probable other token (lowest id on ties).
    pub top: usize,
    pub top_p: f64,
}

/// Strongest competitor of `truth` in `probs` when `probs[truth] <= top_p + margin`.
///
/// With `margin = 0` this is "truth is not the unique argmax"; ties count.
pub fn neglect_check(probs: &[f64], truth: usize, margin: f64) -> Option<(usize, f64)> {
    let mut top = None;
    for (i, &p) in probs.iter().enumerate() {
        if i == truth {
            continue;
        }
        match top {
            Some((_, best)) if p <= best => {}
            _ => top = Some((i, p)),
        }
    }
    let (top, top_p) = top?;
    (probs[truth] <= top_p + margin).then_some((top, top_p))
}

/// Stage 1: re-predicts every non-special token of every unmasked sample and
/// returns the neglected ones, ordered by sample then position. Read-only.
pub fn self_question_scan(encoder: &Encoder, samples: &[Sample], margin: f64) -> Result<Vec<NeglectedRecord>> {
    let mut out = Vec::new();
    let indices: Vec<usize> = (0..samples.len()).collect();
    for chunk in indices.chunks(64) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|&i| samples[i].token_ids.as_slice()).collect();
        let batch = Batch::from_sequences(&seqs, chunk.to_vec());
        let mut rows = Vec::new();
        let mut meta = Vec::new();
        for (b, &i) in chunk.iter().enumerate() {
            for p in eligible_positions(&samples[i].token_ids) {
                rows.push(batch.flat(b, p));
                meta.push((i, p, samples[i].token_ids[p]));
            }
        }
        if rows.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let bound = encoder.bind(&mut tape, false);
        let logits = mlm_forward(encoder, &mut tape, &bound, &batch.ids, &batch.attention_mask, batch.batch_size, &rows)?;
        let v = encoder.config().vocab_size;
        let probs = softmax_rows(tape.value(logits).data(), v);
        for (r, &(sample, pos, truth)) in meta.iter().enumerate() {
            let row = &probs[r * v..(r + 1) * v];
            if let Some((top, top_p)) = neglect_check(row, truth, margin) {
                out.push(NeglectedRecord {
                    sample,
                    pos,
                    truth,
                    truth_p: row[truth],
                    top,
                    top_p,
                });
            }
        }
    }
    Ok(out)
}

/// Records grouped per sample index.
pub fn group_by_sample(records: &[NeglectedRecord], samples: usize) -> Vec<Vec<NeglectedRecord>> {
    let mut out = vec![Vec::new(); samples];
    for r in records {
        if r.sample < samples {
            out[r.sample].push(r.clone());
        }
    }
    out
}

pub fn index_jsonl(records: &[NeglectedRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("plain record"));
        s.push('\n');
    }
    s
}

pub fn read_index(path: &Path) -> Result<Vec<NeglectedRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}

/// Stage-2 mask: the `ceil(rate · eligible)` hardest neglected positions
/// (ascending truth probability, then position), topped up with uniform
/// random eligible positions. Every selected position becomes `[MASK]`.
pub fn select_evolution_masks(
    ids: &[usize],
    neglected: &[NeglectedRecord],
    budget_rate: f64,
    rng: &mut Rng,
) -> Result<Option<MaskPlan>> {
    if !(budget_rate > 0.0 && budget_rate <= 1.0) {
        return Err(Error::contract(format!("mask budget rate must lie in (0, 1], got {budget_rate}")));
    }
    let eligible = eligible_positions(ids);
    if eligible.is_empty() {
        return Ok(None);
    }
    let budget = mask_count(eligible.len(), budget_rate);
    let mut ranked: Vec<&NeglectedRecord> = neglected
        .iter()
        .filter(|r| r.pos < ids.len() && eligible.contains(&r.pos))
        .collect();
    ranked.sort_by(|a, b| a.truth_p.total_cmp(&b.truth_p).then(a.pos.cmp(&b.pos)));
    let mut chosen: Vec<usize> = Vec::with_capacity(budget);
    for r in ranked {
        if chosen.len() == budget {
            break;
        }
        if !chosen.contains(&r.pos) {
            chosen.push(r.pos);
        }
    }
    let rest: Vec<usize> = eligible.iter().copied().filter(|p| !chosen.contains(p)).collect();
    let fill = budget - chosen.len();
    chosen.extend(index::sample(rng, rest.len(), fill).into_iter().map(|i| rest[i]));
    Ok(Some(MaskPlan::all_mask(ids, chosen)))
}

/// `ỹ = (1 − α)·y + α·r` for a one-hot `y` and a distribution `r`.
pub fn rectified_smooth_label(y: &[f64], r: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if y.len() != r.len() {
        return Err(Error::shape(format!("label of {} entries against reference of {}", y.len(), r.len())));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    if ones != 1 || y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract("y must be one-hot"));
    }
    if r.iter().any(|&v| !(v >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::contract("r must be a probability distribution"));
    }
    Ok(y.iter().zip(r).map(|(&yi, &ri)| (1.0 - alpha) * yi + alpha * ri).collect())
}

/// Loss of one stage-2 batch and the pieces needed for bookkeeping.
pub struct EvolutionLoss {
    pub loss: Var,
    /// Logits at the masked rows.
    pub logits: Var,
    pub targets: Vec<usize>,
}

/// Mean cross-entropy between the predictions `p` on the masked batch and
/// `ỹ = (1 − α)·y + α·r`, where `r` comes from a gradient-free forward of the
/// original batch at the same rows.
pub fn evolution_step_loss(
    encoder: &Encoder,
    tape: &mut Tape,
    bound: &BoundEncoder,
    original: &Batch,
    plans: &[Option<MaskPlan>],
    alpha: f64,
) -> Result<EvolutionLoss> {
    if plans.len() != original.batch_size {
        return Err(Error::contract(format!(
            "{} mask plans for a batch of {}",
            plans.len(),
            original.batch_size
        )));
    }
    for (b, plan) in plans.iter().enumerate() {
        let Some(plan) = plan else { continue };
        let row = original.row(b);
        let fits = plan.positions.iter().zip(&plan.originals).all(|(&p, &o)| p < original.lengths[b] && row[p] == o);
        if !fits {
            return Err(Error::contract(format!("mask plan {b} does not match its original sentence")));
        }
    }
    let mb = assemble(original, plans);
    if mb.rows.is_empty() {
        return Err(Error::contract("no masked positions in batch"));
    }
    let v = encoder.config().vocab_size;

    let reference = {
        let mut t = Tape::new();
        let frozen = encoder.bind(&mut t, false);
        let l = mlm_forward(encoder, &mut t, &frozen, &original.ids, &original.attention_mask, original.batch_size, &mb.rows)?;
        softmax_rows(t.value(l).data(), v)
    };
    let mut target = Vec::with_capacity(mb.rows.len() * v);
    for (r, &truth) in mb.targets.iter().enumerate() {
        let mut y = vec![0.0; v];
        y[truth] = 1.0;
        target.extend(rectified_smooth_label(&y, &reference[r * v..(r + 1) * v], alpha)?);
    }
    let target = Tensor::new(vec![mb.rows.len(), v], target)?;

    let logits = mlm_forward(encoder, tape, bound, &mb.ids, &original.attention_mask, original.batch_size, &mb.rows)?;
    let loss = tape.soft_cross_entropy(logits, &target)?;
    Ok(EvolutionLoss {
        loss,
        logits,
        targets: mb.targets,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelfEvolutionConfig {
    pub alpha: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub mask_budget_rate: f64,
    /// Probability that a sample ignores its neglected tokens and is masked at random.
    pub random_mix_rate: f64,
    /// Rescan every `ceil(rescan_fraction · steps)` steps.
    pub rescan_fraction: f64,
    /// Train on the initial index only (a final measuring scan still runs).
    pub scan_once: bool,
    pub margin: f64,
    pub log_interval: usize,
    pub slot_eval_samples: usize,
    pub seed: u64,
}

impl Default for SelfEvolutionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            steps: 500,
            batch_size: 16,
            lr: 1e-3,
            warmup_fraction: 0.05,
            weight_decay: 0.01,
            clip_norm: 1.0,
            mask_budget_rate: 0.15,
            random_mix_rate: 0.2,
            rescan_fraction: 0.25,
            scan_once: false,
            margin: 0.0,
            log_interval: 100,
            slot_eval_samples: 256,
            seed: 0,
        }
    }
}

impl SelfEvolutionConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64, open_low: bool| {
            let ok = if open_low { v > 0.0 && v <= 1.0 } else { (0.0..=1.0).contains(&v) };
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} is out of range")))
            }
        };
        unit("alpha", self.alpha, false)?;
        unit("mask_budget_rate", self.mask_budget_rate, true)?;
        unit("random_mix_rate", self.random_mix_rate, false)?;
        unit("rescan_fraction", self.rescan_fraction, true)?;
        unit("warmup_fraction", self.warmup_fraction, false)?;
        if self.batch_size == 0 || self.log_interval == 0 {
            return Err(Error::Config("batch_size and log_interval must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.margin >= 0.0) {
            return Err(Error::Config("lr and margin must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Outcome of a stage-2 run.
#[derive(Clone, Debug)]
pub struct EvolutionRun {
    pub metrics: Vec<MetricsRecord>,
    /// Index from the last scan.
    pub index: Vec<NeglectedRecord>,
}

/// Stage 1 then stage 2: scan, train on neglected-token masks with rectified
/// smooth labels, rescan periodically, and finish with a measuring scan.
pub fn self_evolve(encoder: &mut Encoder, samples: &[Sample], config: &SelfEvolutionConfig) -> Result<EvolutionRun> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let eval_set = slot_subset(samples, config.slot_eval_samples);
    let slot_acc = |enc: &Encoder| -> Result<Option<f64>> {
        if eval_set.is_empty() {
            Ok(None)
        } else {
            knowledge_slot_accuracy(enc, &eval_set)
        }
    };

    let mut index = self_question_scan(encoder, samples, config.margin)?;
    let mut first = MetricsRecord::new("evolve", 0);
    first.neglected_count = Some(index.len());
    first.slot_acc = slot_acc(encoder)?;
    let mut metrics = vec![first];
    if config.steps == 0 {
        return Ok(EvolutionRun { metrics, index });
    }

    let vocab_size = encoder.config().vocab_size;
    let mut by_sample = group_by_sample(&index, samples.len());
    let rescan_every = crate::ceil_count(config.rescan_fraction * config.steps as f64).max(1);
    let mut stream = BatchStream::new(samples, config.batch_size, config.seed);
    let mut mask_rng = rng::stream(config.seed, &[rng::tag("evolve-mask")]);
    let schedule = WarmupSchedule::new(config.lr, config.steps, config.warmup_fraction);
    let mut opt = OptimizerState::new(AdamWConfig {
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let mut interval = Interval::default();
    let mut trained = 0usize;

    for step in 0..config.steps {
        let batch = stream.next_batch();
        let plans = (0..batch.batch_size)
            .map(|b| {
                let ids = &batch.row(b)[..batch.lengths[b]];
                if mask_rng.random::<f64>() < config.random_mix_rate {
                    random_mask(ids, config.mask_budget_rate.min(0.5), vocab_size, &mut mask_rng)
                } else {
                    select_evolution_masks(ids, &by_sample[batch.indices[b]], config.mask_budget_rate, &mut mask_rng)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let done = step + 1;
        if plans.iter().any(Option::is_some) {
            let mut tape = Tape::new();
            let bound = encoder.bind(&mut tape, true);
            let out = evolution_step_loss(encoder, &mut tape, &bound, &batch, &plans, config.alpha)?;
            let loss_value = tape.value(out.loss).item();
            guard(loss_value, done)?;
            interval.push(loss_value, row_accuracy(tape.value(out.logits), &out.targets));
            tape.backward(out.loss)?;
            let grads = collect_grads(&tape, bound.named());
            drop(tape);
            clipped_step(&mut opt, encoder.named_parameters_mut(), grads, schedule.lr(step), config.clip_norm)?;
            trained += 1;
        }

        let last = done == config.steps;
        let rescan = last || (!config.scan_once && done % rescan_every == 0);
        if done % config.log_interval == 0 || rescan {
            let mut r = if trained > 0 { interval.flush("evolve", done) } else { MetricsRecord::new("evolve", done) };
            trained = 0;
            if rescan {
                index = self_question_scan(encoder, samples, config.margin)?;
                if !config.scan_once {
                    by_sample = group_by_sample(&index, samples.len());
                }
                r.neglected_count = Some(index.len());
            }
            r.slot_acc = slot_acc(encoder)?;
            log::info!("evolve step {done}: loss {:?} neglected {:?}", r.loss, r.neglected_count);
            metrics.push(r);
        }
    }
    Ok(EvolutionRun { metrics, index })
}
