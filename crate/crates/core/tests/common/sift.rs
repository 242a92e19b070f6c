//! Clean and adversarial classifier losses on standardized embeddings.

use evolm::adapt::{class_logits, sift_loss, Classifier, SiftConfig};
use evolm::data::{Batch, LabeledExample};
use evolm::model::EmbeddingOptions;
use evolm::{rng, Tape, Tensor};

pub fn one_hot(labels: &[usize], c: usize) -> Tensor {
    let mut v = vec![0.0; labels.len() * c];
    for (i, &l) in labels.iter().enumerate() {
        v[i * c + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), c], v).unwrap()
}

pub fn batch_of(examples: &[LabeledExample]) -> (Batch, Vec<usize>) {
    let seqs: Vec<&[usize]> = examples.iter().map(|e| e.token_ids.as_slice()).collect();
    let batch = Batch::from_sequences(&seqs, (0..examples.len()).collect());
    (batch, examples.iter().map(|e| e.label).collect())
}

/// Clean logits of `model` on standardized embeddings, optionally shifted by `delta`.
pub fn normalized_logits(model: &Classifier, batch: &Batch, delta: Option<&Tensor>) -> Tensor {
    let mut tape = Tape::new();
    let bound = model.encoder.bind(&mut tape, false);
    let head = model.head.bind(&mut tape, false);
    let opts = EmbeddingOptions {
        prompt: None,
        normalize: true,
        delta: delta.map(|d| tape.constant(d.clone())),
    };
    let l = class_logits(&model.encoder, &mut tape, &bound, &head, batch, opts).unwrap();
    tape.value(l).clone()
}

pub fn normalized_ce(model: &Classifier, batch: &Batch, labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let bound = model.encoder.bind(&mut tape, false);
    let head = model.head.bind(&mut tape, false);
    let opts = EmbeddingOptions {
        normalize: true,
        ..Default::default()
    };
    let l = class_logits(&model.encoder, &mut tape, &bound, &head, batch, opts).unwrap();
    let ce = tape.soft_cross_entropy(l, &one_hot(labels, 2)).unwrap();
    tape.value(ce).item()
}

pub fn sift_value(model: &Classifier, batch: &Batch, labels: &[usize], cfg: &SiftConfig, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let bound = model.encoder.bind(&mut tape, false);
    let head = model.head.bind(&mut tape, false);
    let mut r = rng::stream(seed, &[rng::tag("test-sift")]);
    let (loss, _) = sift_loss(model, &mut tape, &bound, &head, batch, labels, cfg, &mut r).unwrap();
    tape.value(loss).item()
}
