//! Vocabulary, synthetic corpora and tasks, and deterministic batching.

mod batch;
mod corpus;
mod tasks;
mod vocab;

pub use batch::{batches, epoch_order, Batch, BatchStream};
pub use corpus::{
    generate_factual_corpus, read_corpus, read_slots, slots_jsonl, FactualCorpus, Sample,
    SyntheticCorpusSpec,
};
pub use tasks::{
    generate_shift_pair, generate_task_pair, generate_task_pair_with, labeled_jsonl, num_classes,
    parse_labeled_jsonl, read_labeled_jsonl, LabeledExample, ShiftPair, TaskPair, TaskPairSpec,
    TaskSplit,
};
pub use vocab::{build_vocab, is_special, Vocabulary, CLS, MASK, NUM_SPECIALS, PAD, UNK};

impl AsRef<[usize]> for Sample {
    fn as_ref(&self) -> &[usize] {
        &self.token_ids
    }
}

impl AsRef<[usize]> for LabeledExample {
    fn as_ref(&self) -> &[usize] {
        &self.token_ids
    }
}
