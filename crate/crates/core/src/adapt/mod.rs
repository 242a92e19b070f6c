//! Downstream adaptation: classifier fine-tuning (optionally adversarial),
//! soft-prompt tuning and transfer, and transductive self-training.

mod finetune;
mod prompt;
mod sift;
mod transductive;

pub use finetune::{finetune_classifier, Classifier, FinetuneConfig};
pub use prompt::{
    kd_loss, kd_prompt_transfer, prompt_similarity, prompt_tune, task_embedding, KdConfig, LambdaMode,
    PromptConfig, PromptModel, SoftPrompt, TransferOutcome, TransferReport,
};
pub use sift::{sift_loss, sift_perturbation, symmetric_kl, symmetric_kl_value, SiftConfig};
pub use transductive::{transductive_finetune, TransductiveConfig, TransductiveRun, TransductiveState};

use serde::{Deserialize, Serialize};

use crate::data::{Batch, LabeledExample};
use crate::error::{Error, Result};
use crate::model::{BoundEncoder, EmbeddingOptions, Encoder};
use crate::pretrain::argmax;
use crate::rng;
use crate::tensor::{softmax_rows, Tape, Tensor, Var};

const HEAD_INIT_STD: f64 = 0.02;

/// Linear map from the `[CLS]` hidden state to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    /// `[d, classes]`
    pub weight: Tensor,
    /// `[classes]`
    pub bias: Tensor,
}

impl ClassifierHead {
    pub fn init(hidden: usize, classes: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[rng::tag("head")]);
        Self {
            weight: Tensor::randn(&[hidden, classes], HEAD_INIT_STD, &mut r),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.numel()
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        vec![("head.weight".into(), &self.weight), ("head.bias".into(), &self.bias)]
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("head.weight".into(), &mut self.weight), ("head.bias".into(), &mut self.bias)]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundHead {
        BoundHead {
            weight: tape.leaf(self.weight.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHead {
    pub weight: Var,
    pub bias: Var,
}

impl BoundHead {
    pub fn named(&self) -> Vec<(String, &Var)> {
        vec![("head.weight".into(), &self.weight), ("head.bias".into(), &self.bias)]
    }
}

/// How inputs enter the encoder for a classification forward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputMode {
    /// Standardize each token embedding before the first block.
    pub normalize: bool,
}

/// Class logits `[batch, classes]` read from the `[CLS]` position.
pub fn class_logits(
    encoder: &Encoder,
    tape: &mut Tape,
    bound: &BoundEncoder,
    head: &BoundHead,
    batch: &Batch,
    opts: EmbeddingOptions,
) -> Result<Var> {
    let emb = encoder.embed(tape, bound, &batch.ids, &batch.attention_mask, batch.batch_size, opts)?;
    let hidden = encoder.encode(tape, bound, &emb)?;
    let rows: Vec<usize> = (0..batch.batch_size).map(|b| b * emb.seq_len + emb.offset).collect();
    let cls = tape.gather_rows(hidden, &rows)?;
    let logits = tape.matmul(cls, head.weight)?;
    tape.add_bias(logits, head.bias)
}

pub(crate) fn batch_labels(batch: &Batch, examples: &[LabeledExample]) -> Vec<usize> {
    batch.indices.iter().map(|&i| examples[i].label).collect()
}

pub(crate) fn check_labels(examples: &[LabeledExample], classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::Data(format!("need at least 2 classes, got {classes}")));
    }
    if let Some(e) = examples.iter().find(|e| e.label >= classes) {
        return Err(Error::Data(format!("label {} out of range for {classes} classes", e.label)));
    }
    if examples.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    Ok(())
}

/// Class logits `[examples, classes]` in order, with parameters held constant.
pub fn predict_logits(
    encoder: &Encoder,
    head: &ClassifierHead,
    prompt: Option<&Tensor>,
    mode: InputMode,
    examples: &[LabeledExample],
) -> Result<Tensor> {
    let c = head.classes();
    let mut out = Vec::with_capacity(examples.len() * c);
    let idx: Vec<usize> = (0..examples.len()).collect();
    for chunk in idx.chunks(64) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|&i| examples[i].token_ids.as_slice()).collect();
        let batch = Batch::from_sequences(&seqs, chunk.to_vec());
        let mut tape = Tape::new();
        let bound = encoder.bind(&mut tape, false);
        let h = head.bind(&mut tape, false);
        let opts = EmbeddingOptions {
            prompt: prompt.map(|p| tape.constant(p.clone())),
            normalize: mode.normalize,
            delta: None,
        };
        let logits = class_logits(encoder, &mut tape, &bound, &h, &batch, opts)?;
        out.extend_from_slice(tape.value(logits).data());
    }
    Tensor::new(vec![examples.len(), c], out)
}

/// Class probabilities for every example, in order.
pub fn predict_probs(
    encoder: &Encoder,
    head: &ClassifierHead,
    prompt: Option<&Tensor>,
    mode: InputMode,
    examples: &[LabeledExample],
) -> Result<Vec<Vec<f64>>> {
    let c = head.classes();
    let logits = predict_logits(encoder, head, prompt, mode, examples)?;
    Ok(softmax_rows(logits.data(), c).chunks(c).map(<[f64]>::to_vec).collect())
}

/// Fraction of examples whose most probable class is the label.
pub fn accuracy_of(probs: &[Vec<f64>], examples: &[LabeledExample]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let hits = probs.iter().zip(examples).filter(|(p, e)| argmax(p) == e.label).count();
    hits as f64 / examples.len() as f64
}

pub(crate) fn one_hot_labels(labels: &[usize], classes: usize) -> Tensor {
    crate::pretrain::one_hot(labels, classes)
}
