use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::vocab::{build_vocab, Vocabulary};
use crate::error::{Error, Result};
use crate::rng;

/// One pretraining sentence, `[CLS]` first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub token_ids: Vec<usize>,
    pub source_line: usize,
    /// Position of the token whose identity depends only on the
    /// (entity, relation) pair, when the sample came from the factual generator.
    pub knowledge_slot: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusSpec {
    pub num_templates: usize,
    pub num_entities: usize,
    pub num_relations: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            num_templates: 4,
            num_entities: 100,
            num_relations: 4,
            samples: 1000,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_templates == 0 || self.num_entities == 0 || self.num_relations == 0 || self.samples == 0 {
            return Err(Error::Config(format!(
                "synthetic corpus spec fields must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FactualCorpus {
    pub vocab: Vocabulary,
    pub lines: Vec<String>,
    pub samples: Vec<Sample>,
}

/// Word position of the attribute inside a generated line (before the `[CLS]` offset).
const SLOT_POS: usize = 4;

/// Emits `<t·a> <entity> <relation> <t·b> <attribute> <t·c>` sentences.
///
/// Template words are predictable from their neighbours; the relation word
/// is drawn per sentence; the attribute is fixed per (entity, relation) and
/// can only be recovered by memorizing that pairing. Each relation maps
/// entities to attributes one-to-one, so the entity is equally recoverable
/// from the attribute.
pub fn generate_factual_corpus(spec: &SyntheticCorpusSpec) -> Result<FactualCorpus> {
    spec.validate()?;
    let mut facts = rng::stream(spec.seed, &[rng::tag("facts")]);
    let by_relation: Vec<Vec<usize>> = (0..spec.num_relations)
        .map(|_| {
            let mut perm: Vec<usize> = (0..spec.num_entities).collect();
            perm.shuffle(&mut facts);
            perm
        })
        .collect();
    let attribute: Vec<Vec<usize>> = (0..spec.num_entities)
        .map(|e| by_relation.iter().map(|perm| perm[e]).collect())
        .collect();

    let mut draws = rng::stream(spec.seed, &[rng::tag("sentences")]);
    let lines: Vec<String> = (0..spec.samples)
        .map(|_| {
            let e = draws.random_range(0..spec.num_entities);
            let r = draws.random_range(0..spec.num_relations);
            let t = draws.random_range(0..spec.num_templates);
            let a = attribute[e][r];
            format!("t{t}a e{e} r{r} t{t}b a{r}x{a} t{t}c")
        })
        .collect();

    let vocab = build_vocab(&lines, usize::MAX)?;
    let samples = lines
        .iter()
        .enumerate()
        .map(|(i, line)| Sample {
            token_ids: vocab.encode_sample(line),
            source_line: i,
            knowledge_slot: Some(SLOT_POS + 1),
        })
        .collect();
    Ok(FactualCorpus {
        vocab,
        lines,
        samples,
    })
}

#[derive(Serialize, Deserialize)]
struct SlotRecord {
    line: usize,
    slot: usize,
}

/// Reads a one-sample-per-line corpus; blank lines are skipped but still
/// counted for provenance.
pub fn read_corpus(path: &Path, vocab: &Vocabulary) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let samples: Vec<Sample> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| Sample {
            token_ids: vocab.encode_sample(l),
            source_line: i,
            knowledge_slot: None,
        })
        .collect();
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(samples)
}

/// Attaches knowledge-slot metadata (`{"line": int, "slot": int}` per line).
pub fn read_slots(path: &Path, samples: &mut [Sample]) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut by_line = std::collections::HashMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SlotRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: n + 1,
            detail: e.to_string(),
        })?;
        by_line.insert(rec.line, rec.slot);
    }
    for s in samples.iter_mut() {
        if let Some(&slot) = by_line.get(&s.source_line) {
            if slot >= s.token_ids.len() {
                return Err(Error::Data(format!(
                    "slot {slot} outside line {} of length {}",
                    s.source_line,
                    s.token_ids.len()
                )));
            }
            s.knowledge_slot = Some(slot);
        }
    }
    Ok(())
}

pub fn slots_jsonl(samples: &[Sample]) -> String {
    let mut out = String::new();
    for s in samples {
        if let Some(slot) = s.knowledge_slot {
            let rec = SlotRecord {
                line: s.source_line,
                slot,
            };
            out.push_str(&serde_json::to_string(&rec).expect("plain record"));
            out.push('\n');
        }
    }
    out
}
