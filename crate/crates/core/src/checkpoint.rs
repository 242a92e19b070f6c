//! Binary checkpoint container and typed save/load for encoders,
//! classifiers and soft prompts.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EVLM"  u16 version  u32 config_len  config JSON
//! u32 tensor_count
//! per tensor: u16 name_len  name  u8 rank  u64 dims[rank]  u64 offset
//! f64 data, tensors back to back; offsets count bytes from the start of this section
//! ```

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{Classifier, ClassifierHead, InputMode, PromptModel, SoftPrompt};
use crate::error::{Error, Result};
use crate::model::{Encoder, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EVLM";
pub const VERSION: u16 = 1;

/// What a checkpoint holds, stored as its config blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Header {
    Encoder {
        model: ModelConfig,
    },
    Classifier {
        model: ModelConfig,
        classes: usize,
        normalize: bool,
    },
    Prompt {
        task: String,
        hidden: usize,
        classes: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<(String, Tensor)>,
}

fn integrity(field: &str, detail: impl Into<String>) -> Error {
    Error::Integrity {
        field: field.to_string(),
        detail: detail.into(),
    }
}

/// Bounds-checked little-endian reader that names the field it failed on.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            integrity(field, format!("needs {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, field: &str) -> Result<[u8; N]> {
        Ok(self.take(N, field)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.array::<1>(field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(field)?))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(field)?))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(field)?))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            if name.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
                return Err(Error::contract(format!("tensor {name} cannot be indexed")));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * t.numel() as u64;
        }
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses and validates a whole file; nothing is returned unless every
    /// field checks out.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(integrity("magic", "not an EVLM checkpoint"));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(integrity("version", format!("found {version}, supported {VERSION}")));
        }
        let config_len = r.u32("config length")? as usize;
        let config = r.take(config_len, "config")?;
        let header: Header =
            serde_json::from_slice(config).map_err(|e| integrity("config", e.to_string()))?;

        let count = r.u32("tensor count")? as usize;
        let mut index = Vec::with_capacity(count.min(4096));
        let mut expected_offset = 0u64;
        for i in 0..count {
            let field = format!("tensor index entry {i}");
            let name_len = r.u16(&field)? as usize;
            let name = std::str::from_utf8(r.take(name_len, &field)?)
                .map_err(|_| integrity(&field, "name is not UTF-8"))?
                .to_string();
            let rank = r.u8(&name)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64(&name)? as usize);
            }
            let offset = r.u64(&name)?;
            if offset != expected_offset {
                return Err(integrity(&name, format!("offset {offset}, expected {expected_offset}")));
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some())
                .ok_or_else(|| integrity(&name, format!("shape {shape:?} overflows")))?;
            expected_offset += 8 * numel as u64;
            index.push((name, shape, numel));
        }

        let data_len = bytes.len() - r.pos;
        if data_len as u64 != expected_offset {
            return Err(integrity(
                "data",
                format!("{data_len} bytes of tensor data, index describes {expected_offset}"),
            ));
        }
        let mut tensors = Vec::with_capacity(index.len());
        for (name, shape, numel) in index {
            let raw = r.take(8 * numel, &name)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes to a temporary file beside `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn head_tensors(head: &ClassifierHead) -> impl Iterator<Item = (String, Tensor)> + '_ {
    head.named().into_iter().map(|(n, t)| (n, t.clone()))
}

fn split_head(tensors: &mut Vec<(String, Tensor)>, hidden: usize, classes: usize) -> Result<ClassifierHead> {
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let i = tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| integrity(name, "missing tensor"))?;
        let (_, t) = tensors.remove(i);
        if t.shape() != shape {
            return Err(integrity(name, format!("shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    };
    Ok(ClassifierHead {
        weight: take("head.weight", &[hidden, classes])?,
        bias: take("head.bias", &[classes])?,
    })
}

fn wrong_kind(expected: &str, found: &Header) -> Error {
    integrity("config", format!("expected a {expected} checkpoint, found {found:?}"))
}

pub fn save_encoder(encoder: &Encoder, path: &Path) -> Result<()> {
    encoder_checkpoint(encoder).save(path)
}

pub fn encoder_checkpoint(encoder: &Encoder) -> Checkpoint {
    Checkpoint {
        header: Header::Encoder {
            model: encoder.config().clone(),
        },
        tensors: encoder.named_parameters().into_iter().map(|(n, t)| (n, t.clone())).collect(),
    }
}

/// Loads an encoder, also accepting a classifier checkpoint (its encoder part).
pub fn load_encoder(path: &Path) -> Result<Encoder> {
    let ck = Checkpoint::load(path)?;
    match ck.header {
        Header::Encoder { model } => Encoder::from_named(model, ck.tensors),
        Header::Classifier { .. } => Ok(classifier_from(ck)?.encoder),
        other => Err(wrong_kind("encoder", &other)),
    }
}

pub fn save_classifier(model: &Classifier, path: &Path) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> =
        model.encoder.named_parameters().into_iter().map(|(n, t)| (n, t.clone())).collect();
    tensors.extend(head_tensors(&model.head));
    Checkpoint {
        header: Header::Classifier {
            model: model.encoder.config().clone(),
            classes: model.head.classes(),
            normalize: model.mode.normalize,
        },
        tensors,
    }
    .save(path)
}

fn classifier_from(ck: Checkpoint) -> Result<Classifier> {
    let Checkpoint { header, mut tensors } = ck;
    match header {
        Header::Classifier {
            model,
            classes,
            normalize,
        } => {
            let head = split_head(&mut tensors, model.hidden_size, classes)?;
            Ok(Classifier {
                encoder: Encoder::from_named(model, tensors)?,
                head,
                mode: InputMode { normalize },
            })
        }
        other => Err(wrong_kind("classifier", &other)),
    }
}

pub fn load_classifier(path: &Path) -> Result<Classifier> {
    classifier_from(Checkpoint::load(path)?)
}

/// `<dir>/<task>.prompt`
pub fn prompt_path(dir: &Path, task: &str) -> Result<PathBuf> {
    let ok = !task.is_empty()
        && task
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !task.starts_with('.');
    if !ok {
        return Err(Error::Config(format!("task name {task:?} is not usable as a file name")));
    }
    Ok(dir.join(format!("{task}.prompt")))
}

pub fn save_prompt(model: &PromptModel, path: &Path) -> Result<()> {
    let mut tensors = vec![("prompt".to_string(), model.prompt.vectors.clone())];
    tensors.extend(head_tensors(&model.head));
    Checkpoint {
        header: Header::Prompt {
            task: model.prompt.task_name.clone(),
            hidden: model.prompt.vectors.last_dim(),
            classes: model.head.classes(),
        },
        tensors,
    }
    .save(path)
}

pub fn load_prompt(path: &Path) -> Result<PromptModel> {
    let Checkpoint { header, mut tensors } = Checkpoint::load(path)?;
    let Header::Prompt { task, hidden, classes } = header else {
        return Err(wrong_kind("prompt", &header));
    };
    let head = split_head(&mut tensors, hidden, classes)?;
    let [(name, vectors)]: [(String, Tensor); 1] = tensors
        .try_into()
        .map_err(|t: Vec<_>| integrity("tensor index", format!("expected 1 prompt tensor, found {}", t.len())))?;
    if name != "prompt" || vectors.rank() != 2 || vectors.last_dim() != hidden || vectors.shape()[0] == 0 {
        return Err(integrity("prompt", format!("{name} with shape {:?}", vectors.shape())));
    }
    Ok(PromptModel {
        prompt: SoftPrompt {
            task_name: task,
            vectors,
        },
        head,
    })
}
