use crate::data::Batch;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

use super::attention::{disentangled_attention, AttentionDims};
use super::ModelConfig;

const INIT_STD: f64 = 0.02;

/// Weights of one pre-layer-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub query: T,
    pub query_bias: T,
    pub key: T,
    pub key_bias: T,
    pub value: T,
    pub value_bias: T,
    /// Projects relative-position embeddings into query space.
    pub pos_query: T,
    /// Projects relative-position embeddings into key space.
    pub pos_key: T,
    pub output: T,
    pub output_bias: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub ffn_in: T,
    pub ffn_in_bias: T,
    pub ffn_out: T,
    pub ffn_out_bias: T,
}

impl<T> LayerParams<T> {
    pub fn fields(&self) -> [(&'static str, &T); 18] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("query", &self.query),
            ("query_bias", &self.query_bias),
            ("key", &self.key),
            ("key_bias", &self.key_bias),
            ("value", &self.value),
            ("value_bias", &self.value_bias),
            ("pos_query", &self.pos_query),
            ("pos_key", &self.pos_key),
            ("output", &self.output),
            ("output_bias", &self.output_bias),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("ffn_in", &self.ffn_in),
            ("ffn_in_bias", &self.ffn_in_bias),
            ("ffn_out", &self.ffn_out),
            ("ffn_out_bias", &self.ffn_out_bias),
        ]
    }

    pub fn fields_mut(&mut self) -> [(&'static str, &mut T); 18] {
        [
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("query", &mut self.query),
            ("query_bias", &mut self.query_bias),
            ("key", &mut self.key),
            ("key_bias", &mut self.key_bias),
            ("value", &mut self.value),
            ("value_bias", &mut self.value_bias),
            ("pos_query", &mut self.pos_query),
            ("pos_key", &mut self.pos_key),
            ("output", &mut self.output),
            ("output_bias", &mut self.output_bias),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("ffn_in", &mut self.ffn_in),
            ("ffn_in_bias", &mut self.ffn_in_bias),
            ("ffn_out", &mut self.ffn_out),
            ("ffn_out_bias", &mut self.ffn_out_bias),
        ]
    }

    fn try_map<U>(&self, mut f: impl FnMut(&'static str, &T) -> Result<U>) -> Result<LayerParams<U>> {
        Ok(LayerParams {
            ln1_gain: f("ln1_gain", &self.ln1_gain)?,
            ln1_bias: f("ln1_bias", &self.ln1_bias)?,
            query: f("query", &self.query)?,
            query_bias: f("query_bias", &self.query_bias)?,
            key: f("key", &self.key)?,
            key_bias: f("key_bias", &self.key_bias)?,
            value: f("value", &self.value)?,
            value_bias: f("value_bias", &self.value_bias)?,
            pos_query: f("pos_query", &self.pos_query)?,
            pos_key: f("pos_key", &self.pos_key)?,
            output: f("output", &self.output)?,
            output_bias: f("output_bias", &self.output_bias)?,
            ln2_gain: f("ln2_gain", &self.ln2_gain)?,
            ln2_bias: f("ln2_bias", &self.ln2_bias)?,
            ffn_in: f("ffn_in", &self.ffn_in)?,
            ffn_in_bias: f("ffn_in_bias", &self.ffn_in_bias)?,
            ffn_out: f("ffn_out", &self.ffn_out)?,
            ffn_out_bias: f("ffn_out_bias", &self.ffn_out_bias)?,
        })
    }
}

/// All encoder weights, either as stored tensors or as tape handles.
///
/// The masked-LM output projection is the token embedding transposed, so
/// there is no separate output matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub token_embedding: T,
    /// Relative-position embeddings, shared by every layer.
    pub relative_embedding: T,
    pub layers: Vec<LayerParams<T>>,
    pub final_gain: T,
    pub final_bias: T,
    pub mlm_bias: T,
}

impl<T> EncoderParams<T> {
    /// Every parameter with its stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("relative_embedding".to_string(), &self.relative_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.fields() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_gain".to_string(), &self.final_gain));
        out.push(("final_bias".to_string(), &self.final_bias));
        out.push(("mlm_bias".to_string(), &self.mlm_bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = vec![
            ("token_embedding".to_string(), &mut self.token_embedding),
            ("relative_embedding".to_string(), &mut self.relative_embedding),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.fields_mut() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_gain".to_string(), &mut self.final_gain));
        out.push(("final_bias".to_string(), &mut self.final_bias));
        out.push(("mlm_bias".to_string(), &mut self.mlm_bias));
        out
    }

    fn try_map<U>(&self, mut f: impl FnMut(&str, &T) -> Result<U>) -> Result<EncoderParams<U>> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.try_map(|name, t| f(&format!("layers.{i}.{name}"), t)))
            .collect::<Result<_>>()?;
        Ok(EncoderParams {
            token_embedding: f("token_embedding", &self.token_embedding)?,
            relative_embedding: f("relative_embedding", &self.relative_embedding)?,
            layers,
            final_gain: f("final_gain", &self.final_gain)?,
            final_bias: f("final_bias", &self.final_bias)?,
            mlm_bias: f("mlm_bias", &self.mlm_bias)?,
        })
    }
}

/// Encoder weights bound to a tape for one forward/backward pass.
pub type BoundEncoder = EncoderParams<Var>;

/// Transformer encoder with disentangled relative-position attention and a
/// tied masked-LM head.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: ModelConfig,
    params: EncoderParams<Tensor>,
}

/// Expected shape of every parameter for `config`, in [`EncoderParams::named`] order.
pub fn parameter_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, f) = (config.vocab_size, config.hidden_size, config.ffn_size);
    let shapes = EncoderParams {
        token_embedding: vec![v, d],
        relative_embedding: vec![config.relative_buckets(), d],
        layers: (0..config.layers)
            .map(|_| LayerParams {
                ln1_gain: vec![d],
                ln1_bias: vec![d],
                query: vec![d, d],
                query_bias: vec![d],
                key: vec![d, d],
                key_bias: vec![d],
                value: vec![d, d],
                value_bias: vec![d],
                pos_query: vec![d, d],
                pos_key: vec![d, d],
                output: vec![d, d],
                output_bias: vec![d],
                ln2_gain: vec![d],
                ln2_bias: vec![d],
                ffn_in: vec![d, f],
                ffn_in_bias: vec![f],
                ffn_out: vec![f, d],
                ffn_out_bias: vec![d],
            })
            .collect(),
        final_gain: vec![d],
        final_bias: vec![d],
        mlm_bias: vec![v],
    };
    shapes
        .named()
        .into_iter()
        .map(|(n, s)| (n, s.clone()))
        .collect()
}

/// Extra inputs spliced into the embedding layer.
#[derive(Clone, Copy, Debug, Default)]
pub struct EmbeddingOptions {
    /// `[prompt_len, d]` rows prepended to every sequence before layer 1.
    pub prompt: Option<Var>,
    /// Standardize each embedding row (zero mean, unit variance).
    pub normalize: bool,
    /// Added to the (normalized) embeddings, shape `[batch·seq_len, d]`.
    pub delta: Option<Var>,
}

/// Result of the embedding stage, before any transformer block.
#[derive(Clone, Debug)]
pub struct Embedded {
    pub x: Var,
    pub batch_size: usize,
    /// Sequence length including prompt positions.
    pub seq_len: usize,
    pub attention_mask: Vec<u8>,
    /// Number of prompt positions at the front of every row.
    pub offset: usize,
}

impl Encoder {
    /// Weights ~ Normal(0, 0.02), biases 0, layer-norm gains 1; fully
    /// determined by `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, &[rng::tag("init")]);
        let mut tensors = Vec::new();
        for (name, shape) in parameter_shapes(&config) {
            let t = if name.ends_with("gain") {
                Tensor::full(&shape, 1.0)
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                Tensor::randn(&shape, INIT_STD, &mut r)
            };
            tensors.push((name, t));
        }
        Self::from_named(config, tensors)
    }

    /// Rebuilds an encoder from named tensors, validating names and shapes.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = parameter_shapes(&config);
        if tensors.len() != expected.len() {
            return Err(Error::Integrity {
                field: "tensor index".into(),
                detail: format!("expected {} tensors, found {}", expected.len(), tensors.len()),
            });
        }
        let mut by_name: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
        let template = EncoderParams {
            token_embedding: (),
            relative_embedding: (),
            layers: vec![
                LayerParams {
                    ln1_gain: (),
                    ln1_bias: (),
                    query: (),
                    query_bias: (),
                    key: (),
                    key_bias: (),
                    value: (),
                    value_bias: (),
                    pos_query: (),
                    pos_key: (),
                    output: (),
                    output_bias: (),
                    ln2_gain: (),
                    ln2_bias: (),
                    ffn_in: (),
                    ffn_in_bias: (),
                    ffn_out: (),
                    ffn_out_bias: (),
                };
                config.layers
            ],
            final_gain: (),
            final_bias: (),
            mlm_bias: (),
        };
        let shapes: std::collections::HashMap<String, Vec<usize>> = expected.into_iter().collect();
        let params = template.try_map(|name, _| {
            let t = by_name.remove(name).ok_or_else(|| Error::Integrity {
                field: name.to_string(),
                detail: "missing tensor".into(),
            })?;
            if t.shape() != shapes[name].as_slice() {
                return Err(Error::Integrity {
                    field: name.to_string(),
                    detail: format!("shape {:?}, expected {:?}", t.shape(), shapes[name]),
                });
            }
            Ok(t)
        })?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &EncoderParams<Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut EncoderParams<Tensor> {
        &mut self.params
    }

    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        self.params.named()
    }

    pub fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.params.named_mut()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Order-sensitive hash of every parameter's exact bits.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::tensor::Fnv::default();
        for (name, t) in self.named_parameters() {
            h.write(name.as_bytes());
            h.write(&t.checksum().to_le_bytes());
        }
        h.finish()
    }

    /// Places every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundEncoder {
        self.params
            .try_map(|_, t| Ok(tape.leaf(t.clone(), trainable)))
            .expect("binding cannot fail")
    }

    /// Masked-LM logits `[batch, seq_len, vocab]` for a padded id block.
    pub fn forward_mlm(&self, ids: &[usize], attention_mask: &[u8], batch_size: usize) -> Result<Tensor> {
        if batch_size == 0 || !ids.len().is_multiple_of(batch_size) || attention_mask.len() != ids.len() {
            return Err(Error::shape(format!(
                "{} ids / {} mask entries for batch of {batch_size}",
                ids.len(),
                attention_mask.len()
            )));
        }
        let seq_len = ids.len() / batch_size;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let emb = self.embed(&mut tape, &bound, ids, attention_mask, batch_size, EmbeddingOptions::default())?;
        let hidden = self.encode(&mut tape, &bound, &emb)?;
        let rows: Vec<usize> = (0..ids.len()).collect();
        let logits = self.mlm_logits(&mut tape, &bound, hidden, &rows)?;
        let v = self.config.vocab_size;
        tape.value(logits).clone().reshape(&[batch_size, seq_len, v])
    }

    /// Masked-LM logits `[seq_len, vocab]` for one unpadded sequence.
    pub fn forward_sequence(&self, ids: &[usize]) -> Result<Tensor> {
        let mask = vec![1u8; ids.len()];
        let logits = self.forward_mlm(ids, &mask, 1)?;
        let v = self.config.vocab_size;
        logits.reshape(&[ids.len(), v])
    }

    pub fn forward_batch(&self, batch: &Batch) -> Result<Tensor> {
        self.forward_mlm(&batch.ids, &batch.attention_mask, batch.batch_size)
    }

    /// Token embeddings (plus optional prompt rows) as `[batch·seq_len, d]`.
    pub fn embed(
        &self,
        tape: &mut Tape,
        bound: &BoundEncoder,
        ids: &[usize],
        attention_mask: &[u8],
        batch_size: usize,
        opts: EmbeddingOptions,
    ) -> Result<Embedded> {
        let v = self.config.vocab_size;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Vocabulary { id: bad, size: v });
        }
        let raw_len = ids.len() / batch_size;
        let (table, offset) = match opts.prompt {
            Some(p) => {
                let rows = tape.value(p).shape()[0];
                (tape.concat_rows(bound.token_embedding, p)?, rows)
            }
            None => (bound.token_embedding, 0),
        };
        let seq_len = raw_len + offset;
        if seq_len > self.config.max_seq_len {
            return Err(Error::shape(format!(
                "sequence length {seq_len} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let mut full_ids = Vec::with_capacity(batch_size * seq_len);
        let mut mask = Vec::with_capacity(batch_size * seq_len);
        for b in 0..batch_size {
            full_ids.extend(v..v + offset);
            full_ids.extend_from_slice(&ids[b * raw_len..(b + 1) * raw_len]);
            mask.extend(std::iter::repeat_n(1u8, offset));
            mask.extend_from_slice(&attention_mask[b * raw_len..(b + 1) * raw_len]);
        }
        let mut x = tape.gather_rows(table, &full_ids)?;
        if opts.normalize {
            x = tape.normalize(x)?;
        }
        if let Some(delta) = opts.delta {
            x = tape.add(x, delta)?;
        }
        Ok(Embedded {
            x,
            batch_size,
            seq_len,
            attention_mask: mask,
            offset,
        })
    }

    /// Runs every transformer block and the final layer norm; returns
    /// hidden states `[batch·seq_len, d]`.
    pub fn encode(&self, tape: &mut Tape, bound: &BoundEncoder, emb: &Embedded) -> Result<Var> {
        let dims = AttentionDims {
            batch_size: emb.batch_size,
            seq_len: emb.seq_len,
            heads: self.config.heads,
            head_size: self.config.head_size,
            max_relative_distance: self.config.max_relative_distance,
        };
        let mut h = emb.x;
        for layer in &bound.layers {
            let normed = tape.layer_norm(h, layer.ln1_gain, layer.ln1_bias)?;
            let attn = disentangled_attention(tape, layer, bound.relative_embedding, normed, &dims, &emb.attention_mask)?;
            h = tape.add(h, attn.output)?;
            let normed = tape.layer_norm(h, layer.ln2_gain, layer.ln2_bias)?;
            let f = tape.matmul(normed, layer.ffn_in)?;
            let f = tape.add_bias(f, layer.ffn_in_bias)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, layer.ffn_out)?;
            let f = tape.add_bias(f, layer.ffn_out_bias)?;
            h = tape.add(h, f)?;
        }
        tape.layer_norm(h, bound.final_gain, bound.final_bias)
    }

    /// Masked-LM logits for the selected flat rows of `hidden`.
    pub fn mlm_logits(&self, tape: &mut Tape, bound: &BoundEncoder, hidden: Var, rows: &[usize]) -> Result<Var> {
        let picked = tape.gather_rows(hidden, rows)?;
        let tied = tape.transpose(bound.token_embedding)?;
        let logits = tape.matmul(picked, tied)?;
        tape.add_bias(logits, bound.mlm_bias)
    }
}
