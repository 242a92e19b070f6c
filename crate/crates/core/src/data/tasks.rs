use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::vocab::{build_vocab, Vocabulary};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// A classification example, `[CLS]` first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledExample {
    pub text: String,
    pub token_ids: Vec<usize>,
    pub label: usize,
}

impl LabeledExample {
    pub fn new(text: String, label: usize, vocab: &Vocabulary) -> Self {
        let token_ids = vocab.encode_sample(&text);
        Self {
            text,
            token_ids,
            label,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaskSplit {
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

#[derive(Clone, Debug)]
pub struct TaskPair {
    pub vocab: Vocabulary,
    pub source: TaskSplit,
    pub target: TaskSplit,
    /// Keywords whose class differs between the two rules.
    pub flipped_keywords: usize,
}

/// Sizes for the synthetic keyword-classification tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskPairSpec {
    pub num_keywords: usize,
    pub num_fillers: usize,
    /// Words per example, keyword included.
    pub words: usize,
    pub source_train: usize,
    pub source_test: usize,
    pub target_train: usize,
    pub target_test: usize,
}

impl Default for TaskPairSpec {
    fn default() -> Self {
        Self {
            num_keywords: 16,
            num_fillers: 48,
            words: 6,
            source_train: 256,
            source_test: 256,
            target_train: 32,
            target_test: 256,
        }
    }
}

impl TaskPairSpec {
    fn validate(&self) -> Result<()> {
        if self.num_keywords < 2 || !self.num_keywords.is_multiple_of(2) {
            return Err(Error::Config("num_keywords must be even and >= 2".into()));
        }
        if self.num_fillers < 2 || self.words < 1 {
            return Err(Error::Config("need at least 2 fillers and 1 word".into()));
        }
        Ok(())
    }

    fn vocab(&self) -> Result<Vocabulary> {
        let words: Vec<String> = (0..self.num_keywords)
            .map(|i| format!("k{i}"))
            .chain((0..self.num_fillers).map(|i| format!("f{i}")))
            .collect();
        build_vocab(words.iter(), usize::MAX)
    }
}

/// Binary rule: each keyword votes for one class, and every example contains
/// exactly one keyword among random fillers.
fn sample_example(
    rng: &mut Rng,
    spec: &TaskPairSpec,
    rule: &[usize],
    fillers: std::ops::Range<usize>,
    vocab: &Vocabulary,
) -> LabeledExample {
    let k = rng.random_range(0..spec.num_keywords);
    let at = rng.random_range(0..spec.words);
    let words: Vec<String> = (0..spec.words)
        .map(|i| {
            if i == at {
                format!("k{k}")
            } else {
                format!("f{}", rng.random_range(fillers.clone()))
            }
        })
        .collect();
    LabeledExample::new(words.join(" "), rule[k], vocab)
}

fn balanced_rule(rng: &mut Rng, n: usize) -> Vec<usize> {
    let mut rule: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2)).collect();
    rule.shuffle(rng);
    rule
}

/// Source and target classification tasks whose label rules agree on a
/// `relatedness` fraction of the keyword vocabulary.
///
/// At relatedness 1 the rules are identical; at 0 exactly half of the
/// keywords have their class flipped, so a source-fit rule is at chance on
/// the target.
pub fn generate_task_pair(seed: u64, relatedness: f64) -> Result<TaskPair> {
    generate_task_pair_with(&TaskPairSpec::default(), seed, relatedness)
}

pub fn generate_task_pair_with(spec: &TaskPairSpec, seed: u64, relatedness: f64) -> Result<TaskPair> {
    if !(0.0..=1.0).contains(&relatedness) {
        return Err(Error::contract(format!(
            "relatedness must lie in [0, 1], got {relatedness}"
        )));
    }
    spec.validate()?;
    let vocab = spec.vocab()?;
    let mut rules = rng::stream(seed, &[rng::tag("task-rules")]);
    let source_rule = balanced_rule(&mut rules, spec.num_keywords);
    let flips = ((1.0 - relatedness) * spec.num_keywords as f64 / 2.0).round() as usize;
    let mut order: Vec<usize> = (0..spec.num_keywords).collect();
    order.shuffle(&mut rules);
    let mut target_rule = source_rule.clone();
    for &k in &order[..flips] {
        target_rule[k] = 1 - target_rule[k];
    }

    let fillers = 0..spec.num_fillers;
    let split = |name: &str, rule: &[usize], n: usize| {
        let mut r = rng::stream(seed, &[rng::tag(name)]);
        (0..n)
            .map(|_| sample_example(&mut r, spec, rule, fillers.clone(), &vocab))
            .collect::<Vec<_>>()
    };
    let source = TaskSplit {
        train: split("source-train", &source_rule, spec.source_train),
        test: split("source-test", &source_rule, spec.source_test),
    };
    let target = TaskSplit {
        train: split("target-train", &target_rule, spec.target_train),
        test: split("target-test", &target_rule, spec.target_test),
    };
    Ok(TaskPair {
        vocab,
        source,
        target,
        flipped_keywords: flips,
    })
}

/// Fraction of target inputs that carry both a keyword and its synonym.
pub const PIVOT_RATE: f64 = 0.5;

/// Labeled seed data and unlabeled target-domain inputs under one label rule.
///
/// Target inputs use fillers from the other half of the filler vocabulary and
/// express each keyword `k{i}` through a target-only synonym `s{i}`. A
/// [`PIVOT_RATE`] share of them also keeps the original keyword, which is the
/// only link between the seed vocabulary and the synonyms.
#[derive(Clone, Debug)]
pub struct ShiftPair {
    pub vocab: Vocabulary,
    pub seed_train: Vec<LabeledExample>,
    /// Target-domain examples; labels are for evaluation only.
    pub target: Vec<LabeledExample>,
}

pub fn generate_shift_pair(spec: &TaskPairSpec, seed: u64) -> Result<ShiftPair> {
    spec.validate()?;
    if spec.words < 2 {
        return Err(Error::Config("shift pair needs at least 2 words per example".into()));
    }
    let words: Vec<String> = (0..spec.num_keywords)
        .flat_map(|i| [format!("k{i}"), format!("s{i}")])
        .chain((0..spec.num_fillers).map(|i| format!("f{i}")))
        .collect();
    let vocab = build_vocab(words.iter(), usize::MAX)?;
    let mut rules = rng::stream(seed, &[rng::tag("shift-rule")]);
    let rule = balanced_rule(&mut rules, spec.num_keywords);
    let half = spec.num_fillers / 2;
    let mut r = rng::stream(seed, &[rng::tag("shift-seed")]);
    let seed_train = (0..spec.target_train)
        .map(|_| sample_example(&mut r, spec, &rule, 0..half, &vocab))
        .collect();

    let mut r = rng::stream(seed, &[rng::tag("shift-target")]);
    let target = (0..spec.target_test)
        .map(|_| {
            let k = r.random_range(0..spec.num_keywords);
            let mut text: Vec<String> = (0..spec.words)
                .map(|_| format!("f{}", r.random_range(half..spec.num_fillers)))
                .collect();
            let mut slots: Vec<usize> = (0..spec.words).collect();
            slots.shuffle(&mut r);
            text[slots[0]] = format!("s{k}");
            if r.random::<f64>() < PIVOT_RATE {
                text[slots[1]] = format!("k{k}");
            }
            LabeledExample::new(text.join(" "), rule[k], &vocab)
        })
        .collect();
    Ok(ShiftPair {
        vocab,
        seed_train,
        target,
    })
}

#[derive(Serialize, Deserialize)]
struct Record {
    text: String,
    label: usize,
}

pub fn labeled_jsonl(examples: &[LabeledExample]) -> String {
    let mut out = String::new();
    for e in examples {
        let rec = Record {
            text: e.text.clone(),
            label: e.label,
        };
        out.push_str(&serde_json::to_string(&rec).expect("plain record"));
        out.push('\n');
    }
    out
}

pub fn parse_labeled_jsonl(text: &str, vocab: &Vocabulary) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: n + 1,
            detail: e.to_string(),
        })?;
        out.push(LabeledExample::new(rec.text, rec.label, vocab));
    }
    Ok(out)
}

pub fn read_labeled_jsonl(path: &Path, vocab: &Vocabulary) -> Result<Vec<LabeledExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labeled_jsonl(&text, vocab)
}

/// Number of classes implied by the largest label.
pub fn num_classes(examples: &[LabeledExample]) -> usize {
    examples.iter().map(|e| e.label + 1).max().unwrap_or(0)
}
