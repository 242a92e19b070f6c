//! Multi-head attention whose scores decompose into content-to-content,
//! content-to-position and position-to-content terms over clipped relative
//! distances.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

use super::encoder::LayerParams;

/// Stand-in for −∞ on masked key columns; `exp` of it underflows to exactly 0.
pub const MASKED_SCORE: f64 = -1e30;

/// `clip(i − j, −k, k) + k`, a bucket id in `[0, 2k]`.
pub fn relative_bucket(i: usize, j: usize, k: usize) -> usize {
    let d = i as i64 - j as i64;
    (d.clamp(-(k as i64), k as i64) + k as i64) as usize
}

/// Row-major `[seq_len, seq_len]` matrix of `relative_bucket(i, j, k)`.
pub fn bucket_matrix(seq_len: usize, k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(seq_len * seq_len);
    for i in 0..seq_len {
        for j in 0..seq_len {
            out.push(relative_bucket(i, j, k));
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionDims {
    pub batch_size: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub head_size: usize,
    pub max_relative_distance: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[batch·seq_len, d]`, after the output projection.
    pub output: Var,
    /// Attention probabilities `[heads·batch, seq_len, seq_len]`.
    pub probs: Var,
}

/// `[batch·seq_len, d]` → `[heads, batch·seq_len, head_size]`.
fn split_heads(tape: &mut Tape, x: Var, dims: &AttentionDims) -> Result<Var> {
    let (b, l, h, s) = (dims.batch_size, dims.seq_len, dims.heads, dims.head_size);
    let x = tape.reshape(x, &[b, l, h, s])?;
    let x = tape.permute(x, &[2, 0, 1, 3])?;
    tape.reshape(x, &[h, b * l, s])
}

/// Relative embeddings `[2k+1, d]` projected and laid out as `[heads, head_size, 2k+1]`.
fn project_positions(tape: &mut Tape, rel: Var, proj: Var, dims: &AttentionDims) -> Result<Var> {
    let buckets = tape.value(rel).shape()[0];
    let p = tape.matmul(rel, proj)?;
    let p = tape.reshape(p, &[buckets, dims.heads, dims.head_size])?;
    tape.permute(p, &[1, 2, 0])
}

/// One disentangled self-attention sublayer.
///
/// Per head, `score(i, j) = Qc(i)·Kc(j) + Qc(i)·Kp(δ(i, j)) + Kc(j)·Qp(δ(j, i))`,
/// scaled by `1/sqrt(3·head_size)`, with padded key columns masked before the
/// softmax. `key_mask` is `[batch·seq_len]`, 1 for real tokens.
pub fn disentangled_attention(
    tape: &mut Tape,
    layer: &LayerParams<Var>,
    relative_embedding: Var,
    x: Var,
    dims: &AttentionDims,
    key_mask: &[u8],
) -> Result<AttentionOutput> {
    let (b, l, h, s) = (dims.batch_size, dims.seq_len, dims.heads, dims.head_size);
    if key_mask.len() != b * l {
        return Err(Error::shape(format!(
            "attention mask of {} entries for batch {b} x seq {l}",
            key_mask.len()
        )));
    }
    let buckets = tape.value(relative_embedding).shape()[0];
    if buckets != 2 * dims.max_relative_distance + 1 {
        return Err(Error::shape(format!(
            "{buckets} relative embeddings for max distance {}",
            dims.max_relative_distance
        )));
    }

    let q = tape.matmul(x, layer.query)?;
    let q = tape.add_bias(q, layer.query_bias)?;
    let k = tape.matmul(x, layer.key)?;
    let k = tape.add_bias(k, layer.key_bias)?;
    let v = tape.matmul(x, layer.value)?;
    let v = tape.add_bias(v, layer.value_bias)?;

    let qh = split_heads(tape, q, dims)?; // [h, b·l, s]
    let kh = split_heads(tape, k, dims)?;
    let vh = split_heads(tape, v, dims)?;

    // content → content
    let q3 = tape.reshape(qh, &[h * b, l, s])?;
    let k3 = tape.reshape(kh, &[h * b, l, s])?;
    let k3t = tape.transpose(k3)?;
    let c2c = tape.matmul(q3, k3t)?; // [h·b, l, l]

    let idx = bucket_matrix(l, dims.max_relative_distance);

    // content → position: Qc(i) · Kp(δ(i, j))
    let kp = project_positions(tape, relative_embedding, layer.pos_key, dims)?;
    let c2p_all = tape.matmul(qh, kp)?; // [h, b·l, 2k+1]
    let c2p_all = tape.reshape(c2p_all, &[h * b, l, buckets])?;
    let c2p = tape.take_along_last(c2p_all, &idx, l)?;

    // position → content: Kc(j) · Qp(δ(j, i)), gathered as [j, i] then transposed
    let qp = project_positions(tape, relative_embedding, layer.pos_query, dims)?;
    let p2c_all = tape.matmul(kh, qp)?;
    let p2c_all = tape.reshape(p2c_all, &[h * b, l, buckets])?;
    let p2c = tape.take_along_last(p2c_all, &idx, l)?;
    let p2c = tape.transpose(p2c)?;

    let scores = tape.add(c2c, c2p)?;
    let scores = tape.add(scores, p2c)?;
    let scores = tape.scale(scores, 1.0 / (3.0 * s as f64).sqrt());

    let mut masked = Vec::with_capacity(h * b * l * l);
    for _ in 0..h {
        for bi in 0..b {
            let row_mask = &key_mask[bi * l..(bi + 1) * l];
            for _ in 0..l {
                masked.extend(row_mask.iter().map(|&m| m == 0));
            }
        }
    }
    let scores = tape.masked_fill(scores, &masked, MASKED_SCORE)?;
    let probs = tape.softmax(scores);

    let v3 = tape.reshape(vh, &[h * b, l, s])?;
    let ctx = tape.matmul(probs, v3)?; // [h·b, l, s]
    let ctx = tape.reshape(ctx, &[h, b, l, s])?;
    let ctx = tape.permute(ctx, &[1, 2, 0, 3])?;
    let ctx = tape.reshape(ctx, &[b * l, h * s])?;
    let out = tape.matmul(ctx, layer.output)?;
    let out = tape.add_bias(out, layer.output_bias)?;
    Ok(AttentionOutput { output: out, probs })
}
