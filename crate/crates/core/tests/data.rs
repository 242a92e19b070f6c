use std::collections::HashMap;

use evolm::data::{
    batches, build_vocab, generate_factual_corpus, generate_task_pair_with, is_special,
    LabeledExample, SyntheticCorpusSpec, TaskPairSpec, MASK, PAD,
};
use proptest::prelude::*;

/// Predicts the globally most frequent slot token for every sample.
fn unigram_slot_accuracy(samples: &[evolm::data::Sample]) -> f64 {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for s in samples {
        *counts.entry(s.token_ids[s.knowledge_slot.unwrap()]).or_default() += 1;
    }
    let best = counts.values().max().copied().unwrap();
    best as f64 / samples.len() as f64
}

#[test]
fn unigram_predictor_cannot_fill_knowledge_slots() {
    let corpus = generate_factual_corpus(&SyntheticCorpusSpec::default()).unwrap();
    assert_eq!(corpus.samples.len(), 1000);
    let acc = unigram_slot_accuracy(&corpus.samples);
    assert!(acc < 1.0, "unigram accuracy {acc}");
    assert!(acc < 0.2, "slots should be entity-conditional, unigram got {acc}");
}

#[test]
fn generated_samples_hold_no_mask_or_pad() {
    let corpus = generate_factual_corpus(&SyntheticCorpusSpec::default()).unwrap();
    for s in &corpus.samples {
        assert!(s.token_ids.iter().all(|&t| t != MASK && t != PAD));
        assert!(s.token_ids[1..].iter().all(|&t| !is_special(t)));
    }
}

/// Bag-of-words logistic regression fit by full-batch gradient descent.
fn logistic_probe(train: &[LabeledExample], test: &[LabeledExample], vocab: usize) -> f64 {
    let feats = |e: &LabeledExample| {
        let mut f = vec![0.0; vocab];
        for &t in &e.token_ids {
            f[t] += 1.0;
        }
        f
    };
    let xs: Vec<Vec<f64>> = train.iter().map(feats).collect();
    let mut w = vec![0.0; vocab];
    let mut b = 0.0;
    for _ in 0..500 {
        let mut gw = vec![0.0; vocab];
        let mut gb = 0.0;
        for (x, e) in xs.iter().zip(train) {
            let z: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - e.label as f64;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += err * xi;
            }
            gb += err;
        }
        let n = train.len() as f64;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= 0.5 * g / n;
        }
        b -= 0.5 * gb / n;
    }
    let correct = test
        .iter()
        .filter(|e| {
            let x = feats(e);
            let z: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            usize::from(z > 0.0) == e.label
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn relatedness_controls_cross_task_probe_accuracy() {
    let spec = TaskPairSpec {
        target_test: 2000,
        ..Default::default()
    };
    let related = generate_task_pair_with(&spec, 11, 1.0).unwrap();
    let acc = logistic_probe(&related.source.train, &related.target.test, related.vocab.size());
    assert!(acc > 0.6, "related accuracy {acc}");

    let unrelated = generate_task_pair_with(&spec, 11, 0.0).unwrap();
    let acc = logistic_probe(&unrelated.source.train, &unrelated.target.test, unrelated.vocab.size());
    assert!((acc - 0.5).abs() <= 0.05, "unrelated accuracy {acc}");
}

proptest! {
    #[test]
    fn encode_decode_round_trip(words in prop::collection::vec("[a-z]{1,6}", 1..12)) {
        let line = words.join(" ");
        let vocab = build_vocab([line.as_str()], 1000).unwrap();
        let ids = vocab.encode(&line);
        prop_assert_eq!(vocab.decode(&ids), line.clone());
        prop_assert_eq!(vocab.encode(&vocab.decode(&ids)), ids);
    }

    #[test]
    fn batching_is_deterministic(seed in 0u64..1000, epoch in 0u64..5, bs in 1usize..6) {
        let corpus = generate_factual_corpus(&SyntheticCorpusSpec { samples: 23, ..Default::default() }).unwrap();
        let a: Vec<_> = batches(&corpus.samples, bs, seed, epoch).collect();
        let b: Vec<_> = batches(&corpus.samples, bs, seed, epoch).collect();
        prop_assert_eq!(a.len(), 23usize.div_ceil(bs));
        prop_assert_eq!(a, b);
    }
}
