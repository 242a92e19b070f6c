//! Plain-loop reference for attention without position terms.

use evolm::model::LayerParams;
use evolm::Tensor;

fn project(x: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        for o in 0..dout {
            let mut acc = b.data()[o];
            for i in 0..din {
                acc += x[r * din + i] * w.data()[i * dout + o];
            }
            out[r * dout + o] = acc;
        }
    }
    out
}

/// Multi-head softmax attention with scores `q·k / sqrt(3·head_size)`, masked
/// keys excluded, followed by the output projection. `x` is `[batch·seq_len, d]`.
pub fn content_only_attention(
    x: &[f64],
    layer: &LayerParams<Tensor>,
    batch: usize,
    seq_len: usize,
    heads: usize,
    head_size: usize,
    key_mask: &[u8],
) -> Vec<f64> {
    let rows = batch * seq_len;
    let d = heads * head_size;
    let q = project(x, rows, &layer.query, &layer.query_bias);
    let k = project(x, rows, &layer.key, &layer.key_bias);
    let v = project(x, rows, &layer.value, &layer.value_bias);
    let scale = 1.0 / (3.0 * head_size as f64).sqrt();
    let mut ctx = vec![0.0; rows * d];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..seq_len {
                let qi = (b * seq_len + i) * d + h * head_size;
                let scores: Vec<Option<f64>> = (0..seq_len)
                    .map(|j| {
                        (key_mask[b * seq_len + j] == 1).then(|| {
                            let kj = (b * seq_len + j) * d + h * head_size;
                            (0..head_size).map(|t| q[qi + t] * k[kj + t]).sum::<f64>() * scale
                        })
                    })
                    .collect();
                let max = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().flatten().map(|s| (s - max).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    if let Some(s) = s {
                        let p = (s - max).exp() / z;
                        let vj = (b * seq_len + j) * d + h * head_size;
                        for t in 0..head_size {
                            ctx[qi + t] += p * v[vj + t];
                        }
                    }
                }
            }
        }
    }
    project(&ctx, rows, &layer.output, &layer.output_bias)
}
