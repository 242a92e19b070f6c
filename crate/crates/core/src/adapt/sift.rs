//! Adversarial fine-tuning on standardized token embeddings.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{class_logits, one_hot_labels, BoundHead, Classifier};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{BoundEncoder, EmbeddingOptions};
use crate::rng::Rng;
use crate::tensor::{log_softmax_rows, softmax_rows, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SiftConfig {
    /// Per-position L2 bound on the perturbation.
    pub epsilon: f64,
    pub ascent_steps: usize,
    pub adv_weight: f64,
}

impl Default for SiftConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            ascent_steps: 1,
            adv_weight: 1.0,
        }
    }
}

impl SiftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) || self.ascent_steps == 0 || !(self.adv_weight >= 0.0) {
            return Err(Error::Config(format!("invalid SiFT settings {self:?}")));
        }
        Ok(())
    }
}

/// Scale of the random starting point relative to `epsilon`.
const START_FRACTION: f64 = 0.1;

/// Mean over rows of `KL(p‖q) + KL(q‖p) = Σ (p − q)(ln p − ln q)` for logits `a`, `b`.
pub fn symmetric_kl(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let rows = tape.value(a).shape()[0] as f64;
    let p = tape.softmax(a);
    let q = tape.softmax(b);
    let lp = tape.log_softmax(a);
    let lq = tape.log_softmax(b);
    let dp = tape.sub(p, q)?;
    let dl = tape.sub(lp, lq)?;
    let m = tape.mul(dp, dl)?;
    let s = tape.sum(m);
    Ok(tape.scale(s, 1.0 / rows))
}

/// [`symmetric_kl`] on plain `[rows, classes]` logits.
pub fn symmetric_kl_value(a: &Tensor, b: &Tensor) -> f64 {
    let c = a.last_dim();
    let (p, q) = (softmax_rows(a.data(), c), softmax_rows(b.data(), c));
    let (lp, lq) = (log_softmax_rows(a.data(), c), log_softmax_rows(b.data(), c));
    let rows = (a.numel() / c) as f64;
    p.iter()
        .zip(&q)
        .zip(lp.iter().zip(&lq))
        .map(|((p, q), (lp, lq))| (p - q) * (lp - lq))
        .sum::<f64>()
        / rows
}

/// Rows of `[batch·seq_len, d]` that belong to real tokens.
fn live_rows(batch: &Batch) -> Vec<bool> {
    batch.attention_mask.iter().map(|&m| m == 1).collect()
}

fn project(delta: &mut [f64], d: usize, eps: f64) {
    for row in delta.chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > eps {
            let s = if n > 0.0 { eps / n } else { 0.0 };
            row.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Per-position perturbation of the standardized embeddings found by
/// `ascent_steps` normalized gradient-ascent steps on the symmetric KL
/// between clean and perturbed class distributions, each followed by
/// projection onto the `epsilon` ball. Pad rows stay zero.
pub fn sift_perturbation(model: &Classifier, batch: &Batch, config: &SiftConfig, rng: &mut Rng) -> Result<Tensor> {
    config.validate()?;
    let d = model.encoder.config().hidden_size;
    let rows = batch.batch_size * batch.seq_len;
    let live = live_rows(batch);
    let eps = config.epsilon;
    let mut delta = vec![0.0; rows * d];
    if eps == 0.0 {
        return Tensor::new(vec![rows, d], delta);
    }
    for (r, row) in delta.chunks_mut(d).enumerate() {
        if !live[r] {
            continue;
        }
        row.iter_mut().for_each(|v| *v = rng.sample::<f64, _>(StandardNormal));
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v *= START_FRACTION * eps / n);
    }

    let clean = {
        let mut tape = Tape::new();
        let bound = model.encoder.bind(&mut tape, false);
        let head = model.head.bind(&mut tape, false);
        let opts = EmbeddingOptions {
            normalize: true,
            ..Default::default()
        };
        let l = class_logits(&model.encoder, &mut tape, &bound, &head, batch, opts)?;
        tape.value(l).clone()
    };

    for _ in 0..config.ascent_steps {
        let mut tape = Tape::new();
        let bound = model.encoder.bind(&mut tape, false);
        let head = model.head.bind(&mut tape, false);
        let dv = tape.param(Tensor::new(vec![rows, d], delta.clone())?);
        let opts = EmbeddingOptions {
            prompt: None,
            normalize: true,
            delta: Some(dv),
        };
        let adv = class_logits(&model.encoder, &mut tape, &bound, &head, batch, opts)?;
        let c = tape.constant(clean.clone());
        let skl = symmetric_kl(&mut tape, c, adv)?;
        tape.backward(skl)?;
        let g = tape.grad(dv).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; rows * d]);
        for (r, (row, grow)) in delta.chunks_mut(d).zip(g.chunks(d)).enumerate() {
            if !live[r] {
                continue;
            }
            let n = grow.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().zip(grow).for_each(|(v, gv)| *v += eps * gv / n);
            }
        }
        project(&mut delta, d, eps);
    }
    Tensor::new(vec![rows, d], delta)
}

/// `CE(clean, y) + adv_weight · symKL(clean, perturbed)` on standardized
/// embeddings. The perturbation is a constant on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn sift_loss(
    model: &Classifier,
    tape: &mut Tape,
    bound: &BoundEncoder,
    head: &BoundHead,
    batch: &Batch,
    labels: &[usize],
    config: &SiftConfig,
    rng: &mut Rng,
) -> Result<(Var, Var)> {
    let delta = sift_perturbation(model, batch, config, rng)?;
    let enc = &model.encoder;
    let clean_opts = EmbeddingOptions {
        normalize: true,
        ..Default::default()
    };
    let clean = class_logits(enc, tape, bound, head, batch, clean_opts)?;
    let ce = tape.soft_cross_entropy(clean, &one_hot_labels(labels, model.head.classes()))?;
    let dv = tape.constant(delta);
    let adv_opts = EmbeddingOptions {
        prompt: None,
        normalize: true,
        delta: Some(dv),
    };
    let adv = class_logits(enc, tape, bound, head, batch, adv_opts)?;
    let skl = symmetric_kl(tape, clean, adv)?;
    let reg = tape.scale(skl, config.adv_weight);
    Ok((tape.add(ce, reg)?, clean))
}
