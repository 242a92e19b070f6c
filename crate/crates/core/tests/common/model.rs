//! Small encoders and probes shared by the encoder checks.

use evolm::model::{disentangled_attention, AttentionDims, Encoder, ModelConfig};
use evolm::{rng, Tape, Tensor};

pub fn small_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden_size: 8,
        ffn_size: 16,
        heads: 2,
        head_size: 4,
        vocab_size: 12,
        max_seq_len: 16,
        max_relative_distance: 2,
        seed: 3,
    }
}

/// An encoder whose weights are large enough that attention is far from uniform.
pub fn sharp_encoder(config: ModelConfig, gain: f64) -> Encoder {
    let mut enc = Encoder::init(config).unwrap();
    let mut r = rng::stream(11, &[rng::tag("sharpen")]);
    for (name, t) in enc.named_parameters_mut() {
        if !name.ends_with("gain") {
            let noise = Tensor::randn(t.shape(), 0.05, &mut r);
            t.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v = *v * gain + n);
        }
    }
    enc
}

pub struct AttentionRun {
    pub output: Vec<f64>,
    pub probs: Vec<f64>,
}

pub fn run_attention(enc: &Encoder, x: &Tensor, batch: usize, seq_len: usize, mask: &[u8]) -> AttentionRun {
    let c = enc.config();
    let mut tape = Tape::new();
    let bound = enc.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let dims = AttentionDims {
        batch_size: batch,
        seq_len,
        heads: c.heads,
        head_size: c.head_size,
        max_relative_distance: c.max_relative_distance,
    };
    let out = disentangled_attention(&mut tape, &bound.layers[0], bound.relative_embedding, xv, &dims, mask).unwrap();
    AttentionRun {
        output: tape.value(out.output).data().to_vec(),
        probs: tape.value(out.probs).data().to_vec(),
    }
}

pub fn inputs(batch: usize, seq_len: usize, d: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &[rng::tag("x")]);
    Tensor::randn(&[batch * seq_len, d], 1.0, &mut r)
}

/// Per-parameter relative error between backprop and central differences
/// for a fixed random projection of the full model's MLM logits.
pub fn model_gradient_errors(enc: &Encoder) -> Vec<(String, f64)> {
    let ids = [1usize, 5, 9, 4, 11, 7, 2, 1, 8, 6, 2, 0];
    let mask = [1u8, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0];
    let (b, v) = (2, enc.config().vocab_size);
    let mut r = rng::stream(5, &[rng::tag("weights")]);
    let weights = Tensor::randn(&[ids.len(), v], 1.0, &mut r);
    let loss_of = |e: &Encoder| -> f64 {
        let logits = e.forward_mlm(&ids, &mask, b).unwrap();
        logits.data().iter().zip(weights.data()).map(|(a, w)| a * w).sum()
    };

    let mut tape = Tape::new();
    let bound = enc.bind(&mut tape, true);
    let emb = enc.embed(&mut tape, &bound, &ids, &mask, b, Default::default()).unwrap();
    let hidden = enc.encode(&mut tape, &bound, &emb).unwrap();
    let rows: Vec<usize> = (0..ids.len()).collect();
    let logits = enc.mlm_logits(&mut tape, &bound, hidden, &rows).unwrap();
    let w = tape.constant(weights.clone());
    let prod = tape.mul(logits, w).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();

    let h = 1e-5;
    let mut out = Vec::new();
    for (name, var) in bound.named() {
        let analytic = tape.grad(*var).unwrap().data().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let bump = |delta: f64| {
                let mut e = enc.clone();
                for (pname, t) in e.named_parameters_mut() {
                    if pname == name {
                        t.data_mut()[j] += delta;
                    }
                }
                loss_of(&e)
            };
            *n = (bump(h) - bump(-h)) / (2.0 * h);
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        out.push((name.clone(), if scale < 1e-12 { diff } else { diff / scale }));
    }
    out
}
