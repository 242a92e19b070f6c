use serde::{Deserialize, Serialize};

use super::{accuracy_of, batch_labels, check_labels, class_logits, one_hot_labels, predict_logits, ClassifierHead, InputMode};
use crate::data::{BatchStream, LabeledExample};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::model::{EmbeddingOptions, Encoder};
use crate::optim::{clipped_step, collect_grads, AdamWConfig, OptimizerState, WarmupSchedule};
use crate::pretrain::{guard, row_accuracy};
use crate::rng;
use crate::tensor::{clamped_ln, softmax_rows, Tape, Tensor, Var};

/// Trainable rows prepended to every input sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPrompt {
    pub task_name: String,
    /// `[prompt_len, d]`
    pub vectors: Tensor,
}

impl SoftPrompt {
    /// Random rows with their column means removed, so the pooled task
    /// embedding starts at zero and only moves with training.
    pub fn init(task_name: &str, len: usize, hidden: usize, std: f64, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::contract("prompt length must be at least 1"));
        }
        let mut r = rng::stream(seed, &[rng::tag("prompt")]);
        let mut vectors = Tensor::randn(&[len, hidden], std, &mut r);
        let mean = column_mean(&vectors);
        for row in vectors.data_mut().chunks_mut(hidden) {
            row.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
        }
        Ok(Self {
            task_name: task_name.to_string(),
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn column_mean(t: &Tensor) -> Vec<f64> {
    let d = t.last_dim();
    let rows = t.numel() / d;
    let mut mean = vec![0.0; d];
    for row in t.data().chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    mean
}

/// Mean of the prompt rows.
pub fn task_embedding(prompt: &SoftPrompt) -> Vec<f64> {
    column_mean(&prompt.vectors)
}

/// `max(0, cos(a, b))`; 0 when either vector is zero.
pub fn prompt_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(0.0, 1.0)
}

/// A soft prompt and the head that reads its task's `[CLS]` state.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptModel {
    pub prompt: SoftPrompt,
    pub head: ClassifierHead,
}

impl PromptModel {
    pub fn new(task_name: &str, hidden: usize, classes: usize, config: &PromptConfig) -> Result<Self> {
        Ok(Self {
            prompt: SoftPrompt::init(task_name, config.prompt_len, hidden, config.init_std, config.seed)?,
            head: ClassifierHead::init(hidden, classes, config.seed),
        })
    }

    pub fn predict_logits(&self, encoder: &Encoder, examples: &[LabeledExample]) -> Result<Tensor> {
        predict_logits(encoder, &self.head, Some(&self.prompt.vectors), InputMode::default(), examples)
    }

    pub fn accuracy(&self, encoder: &Encoder, examples: &[LabeledExample]) -> Result<f64> {
        let c = self.head.classes();
        let logits = self.predict_logits(encoder, examples)?;
        let probs: Vec<Vec<f64>> = softmax_rows(logits.data(), c).chunks(c).map(<[f64]>::to_vec).collect();
        Ok(accuracy_of(&probs, examples))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub prompt_len: usize,
    pub init_std: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub log_interval: usize,
    pub seed: u64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            prompt_len: 8,
            init_std: 0.02,
            steps: 200,
            batch_size: 16,
            lr: 5e-3,
            warmup_fraction: 0.05,
            weight_decay: 0.0,
            clip_norm: 1.0,
            log_interval: 50,
            seed: 0,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompt_len == 0 {
            return Err(Error::contract("prompt length must be at least 1"));
        }
        if self.batch_size == 0 || self.log_interval == 0 {
            return Err(Error::Config("batch_size and log_interval must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("lr must be finite and >= 0, warmup_fraction in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `(1 − λ)·CE(student, y) + λ·T²·KL(softmax(teacher/T) ‖ softmax(student/T))`,
/// each term a mean over rows. `teacher` is constant.
pub fn kd_loss(
    tape: &mut Tape,
    student: Var,
    labels: &[usize],
    teacher: &Tensor,
    lambda: f64,
    temperature: f64,
) -> Result<Var> {
    let c = teacher.last_dim();
    if tape.value(student).shape() != teacher.shape() {
        return Err(Error::shape(format!(
            "student logits {:?} against teacher {:?}",
            tape.value(student).shape(),
            teacher.shape()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) || !(temperature > 0.0) {
        return Err(Error::contract(format!("lambda {lambda} / temperature {temperature} out of range")));
    }
    let inv_t = 1.0 / temperature;
    let ce = tape.soft_cross_entropy(student, &one_hot_labels(labels, c))?;
    let scaled: Vec<f64> = teacher.data().iter().map(|v| v * inv_t).collect();
    let soft = softmax_rows(&scaled, c);
    let rows = teacher.numel() / c;
    let neg_entropy_total: f64 = soft.iter().map(|&t| t * clamped_ln(t)).sum();
    let entropy = -neg_entropy_total / rows as f64;
    let s = tape.scale(student, inv_t);
    let cross = tape.soft_cross_entropy(s, &Tensor::new(teacher.shape().to_vec(), soft)?)?;
    let h = tape.constant(Tensor::scalar(-entropy));
    let kl = tape.add(cross, h)?;
    let a = tape.scale(ce, 1.0 - lambda);
    let b = tape.scale(kl, lambda * temperature * temperature);
    tape.add(a, b)
}

/// Supervision from a teacher on the same inputs, weighted by λ.
struct Teacher<'a> {
    logits: &'a Tensor,
    temperature: f64,
    source: Vec<f64>,
    mode: LambdaMode,
    eval_interval: usize,
}

fn train_prompt(
    encoder: &Encoder,
    model: &mut PromptModel,
    train: &[LabeledExample],
    config: &PromptConfig,
    teacher: Option<Teacher<'_>>,
) -> Result<(Vec<MetricsRecord>, f64)> {
    config.validate()?;
    check_labels(train, model.head.classes())?;
    let c = model.head.classes();
    let phase = if teacher.is_some() { "kd" } else { "prompt" };
    let lambda_now = |m: &PromptModel, t: &Teacher<'_>| match t.mode {
        LambdaMode::Dynamic => prompt_similarity(&t.source, &task_embedding(&m.prompt)),
        LambdaMode::Fixed(v) => v,
    };
    let mut lambda = teacher.as_ref().map_or(0.0, |t| lambda_now(model, t));

    let mut records = Vec::new();
    let mut stream = BatchStream::new(train, config.batch_size, config.seed);
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
        let bound = encoder.bind(&mut tape, false);
        let prompt = tape.param(model.prompt.vectors.clone());
        let head = model.head.bind(&mut tape, true);
        let opts = EmbeddingOptions {
            prompt: Some(prompt),
            ..Default::default()
        };
        let logits = class_logits(encoder, &mut tape, &bound, &head, &batch, opts)?;
        let loss = match &teacher {
            None => tape.soft_cross_entropy(logits, &one_hot_labels(&labels, c))?,
            Some(t) => {
                let rows: Vec<f64> = batch
                    .indices
                    .iter()
                    .flat_map(|&i| t.logits.row(i).iter().copied())
                    .collect();
                let tl = Tensor::new(vec![labels.len(), c], rows)?;
                kd_loss(&mut tape, logits, &labels, &tl, lambda, t.temperature)?
            }
        };
        let lv = tape.value(loss).item();
        guard(lv, step + 1)?;
        loss_sum += lv;
        acc_sum += row_accuracy(tape.value(logits), &labels);
        n += 1;
        tape.backward(loss)?;
        let grads = collect_grads(&tape, [("prompt".to_string(), &prompt)].into_iter().chain(head.named()));
        drop(tape);
        let params: Vec<(String, &mut Tensor)> = std::iter::once(("prompt".to_string(), &mut model.prompt.vectors))
            .chain(model.head.named_mut())
            .collect();
        clipped_step(&mut opt, params, grads, schedule.lr(step), config.clip_norm)?;

        let done = step + 1;
        if let Some(t) = &teacher {
            if done % t.eval_interval == 0 || done == config.steps {
                lambda = lambda_now(model, t);
            }
        }
        if done % config.log_interval == 0 || done == config.steps {
            let mut r = MetricsRecord::new(phase, done);
            r.loss = Some(loss_sum / n as f64);
            r.accuracy = Some(acc_sum / n as f64);
            if teacher.is_some() {
                r.lambda = Some(lambda);
            }
            (loss_sum, acc_sum, n) = (0.0, 0.0, 0);
            records.push(r);
        }
    }
    Ok((records, lambda))
}

/// Trains only the prompt and head; the encoder is read as constants.
pub fn prompt_tune(
    encoder: &Encoder,
    model: &mut PromptModel,
    train: &[LabeledExample],
    config: &PromptConfig,
) -> Result<Vec<MetricsRecord>> {
    Ok(train_prompt(encoder, model, train, config, None)?.0)
}

/// How the KD balancing factor is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// Similarity of the source prompt and the live student prompt,
    /// refreshed every `eval_interval` steps.
    Dynamic,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdConfig {
    pub prompt: PromptConfig,
    pub temperature: f64,
    pub lambda: LambdaMode,
    /// Use the source-vs-scratch-target similarity, computed once, as a fixed λ.
    pub static_lambda: bool,
    pub eval_interval: usize,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            prompt: PromptConfig::default(),
            temperature: 2.0,
            lambda: LambdaMode::Dynamic,
            static_lambda: false,
            eval_interval: 20,
        }
    }
}

/// Result of a distillation run.
#[derive(Clone, Debug)]
pub struct TransferOutcome {
    pub student: PromptModel,
    pub metrics: Vec<MetricsRecord>,
    /// λ in force at the end of training.
    pub lambda: f64,
}

/// Trains a fresh student prompt and head on the target task against both
/// the labels and the teacher's temperature-softened predictions. The
/// encoder and the teacher are read-only.
pub fn kd_prompt_transfer(
    encoder: &Encoder,
    teacher: &PromptModel,
    target_name: &str,
    target_train: &[LabeledExample],
    config: &KdConfig,
) -> Result<TransferOutcome> {
    let classes = teacher.head.classes();
    if let Some(e) = target_train.iter().find(|e| e.label >= classes) {
        return Err(Error::Config(format!(
            "teacher head has {classes} classes but the target task uses label {}",
            e.label
        )));
    }
    if config.eval_interval == 0 || !(config.temperature > 0.0) {
        return Err(Error::Config("eval_interval and temperature must be positive".into()));
    }
    if let LambdaMode::Fixed(v) = config.lambda {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config(format!("fixed lambda {v} outside [0, 1]")));
        }
    }
    let d = encoder.config().hidden_size;
    let mut student = PromptModel::new(target_name, d, classes, &config.prompt)?;
    let logits = teacher.predict_logits(encoder, target_train)?;
    let t = Teacher {
        logits: &logits,
        temperature: config.temperature,
        source: task_embedding(&teacher.prompt),
        mode: config.lambda,
        eval_interval: config.eval_interval,
    };
    let (metrics, lambda) = train_prompt(encoder, &mut student, target_train, &config.prompt, Some(t))?;
    Ok(TransferOutcome {
        student,
        metrics,
        lambda,
    })
}

/// Summary of one source → target transfer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub source: String,
    pub target: String,
    /// Similarity of the source prompt and a prompt tuned on the target from scratch.
    pub similarity: f64,
    pub lambda: f64,
    pub acc_transfer: f64,
    pub acc_scratch: f64,
}

impl TransferReport {
    /// Scratch-tunes a target prompt, distills from `teacher`, and scores both on `target_test`.
    pub fn run(
        encoder: &Encoder,
        teacher: &PromptModel,
        target_name: &str,
        target_train: &[LabeledExample],
        target_test: &[LabeledExample],
        config: &KdConfig,
    ) -> Result<(Self, TransferOutcome)> {
        let d = encoder.config().hidden_size;
        let mut scratch = PromptModel::new(target_name, d, teacher.head.classes(), &config.prompt)?;
        prompt_tune(encoder, &mut scratch, target_train, &config.prompt)?;
        let similarity = prompt_similarity(&task_embedding(&teacher.prompt), &task_embedding(&scratch.prompt));
        let mut cfg = *config;
        if config.static_lambda {
            cfg.lambda = LambdaMode::Fixed(similarity);
        }
        let outcome = kd_prompt_transfer(encoder, teacher, target_name, target_train, &cfg)?;
        let report = Self {
            source: teacher.prompt.task_name.clone(),
            target: target_name.to_string(),
            similarity,
            lambda: outcome.lambda,
            acc_transfer: outcome.student.accuracy(encoder, target_test)?,
            acc_scratch: scratch.accuracy(encoder, target_test)?,
        };
        Ok((report, outcome))
    }
}
