mod common;

use common::scan::brute_force_scan;
use evolm::data::{generate_factual_corpus, Batch, Sample, SyntheticCorpusSpec};
use evolm::evolution::{
    evolution_step_loss, neglect_check, rectified_smooth_label, select_evolution_masks, self_evolve,
    self_question_scan, NeglectedRecord, SelfEvolutionConfig,
};
use evolm::model::{Encoder, ModelConfig};
use evolm::optim::collect_grads;
use evolm::pretrain::{mlm_forward, mlm_loss, pretrain, MaskPlan, PretrainConfig};
use evolm::tensor::softmax;
use evolm::{rng, Error, Tape, Tensor};
use rand::Rng as _;

fn trained(samples: usize, steps: usize, spec: SyntheticCorpusSpec) -> (Vec<Sample>, Encoder) {
    let corpus = generate_factual_corpus(&SyntheticCorpusSpec { samples, ..spec }).unwrap();
    let mut enc = Encoder::init(ModelConfig::tiny(corpus.vocab.size())).unwrap();
    let cfg = PretrainConfig { steps, slot_eval_samples: 0, log_interval: 50, ..Default::default() };
    pretrain(&mut enc, &corpus.samples, &cfg).unwrap();
    (corpus.samples, enc)
}

#[test]
fn scan_matches_brute_force_and_is_read_only() {
    let (samples, enc) = trained(50, 150, SyntheticCorpusSpec::default());
    let before = enc.checksum();
    let index = self_question_scan(&enc, &samples, 0.0).unwrap();
    assert_eq!(enc.checksum(), before);
    assert!(!index.is_empty());
    assert_eq!(index, brute_force_scan(&enc, &samples));
    for r in &index {
        assert!(r.top_p >= r.truth_p);
        assert_ne!(r.top, r.truth);
    }
}

#[test]
fn memorized_corpus_has_no_neglected_tokens() {
    let spec = SyntheticCorpusSpec { num_templates: 1, num_entities: 1, num_relations: 1, ..Default::default() };
    let (samples, enc) = trained(20, 150, spec);
    assert!(self_question_scan(&enc, &samples, 0.0).unwrap().is_empty());
}

#[test]
fn rectified_labels_over_alpha_grid() {
    let mut r = rng::stream(77, &[]);
    for alpha in [0.0, 0.25, 0.5, 0.75, 1.0] {
        for _ in 0..1000 {
            let n = r.random_range(2..20);
            let truth = r.random_range(0..n);
            let mut y = vec![0.0; n];
            y[truth] = 1.0;
            let raw: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
            let refd = softmax(&raw);
            let t = rectified_smooth_label(&y, &refd, alpha).unwrap();
            assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(t.iter().all(|&v| v >= 0.0));
            assert!(t[truth] >= 1.0 - alpha);
        }
    }
}

#[test]
fn neglect_criterion_agrees_with_record_fields() {
    let mut r = rng::stream(8, &[]);
    for _ in 0..500 {
        let raw: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0_f64).round()).collect();
        let p = softmax(&raw);
        let truth = r.random_range(0..6);
        let unique_best = p.iter().enumerate().all(|(i, &v)| i == truth || v < p[truth]);
        match neglect_check(&p, truth, 0.0) {
            Some((top, top_p)) => {
                assert!(!unique_best);
                assert!(top_p >= p[truth] && top != truth);
            }
            None => assert!(unique_best),
        }
    }
}

fn one_sample_batch(samples: &[Sample], i: usize) -> Batch {
    Batch::from_sequences(&[samples[i].token_ids.as_slice()], vec![i])
}

#[test]
fn alpha_zero_reduces_to_mlm_loss() {
    let (samples, enc) = trained(50, 100, SyntheticCorpusSpec::default());
    let batch = one_sample_batch(&samples, 3);
    let plan = MaskPlan::all_mask(&samples[3].token_ids, vec![2, 5]);

    let mut tape = Tape::new();
    let bound = enc.bind(&mut tape, true);
    let out = evolution_step_loss(&enc, &mut tape, &bound, &batch, &[Some(plan.clone())], 0.0).unwrap();
    let evolved = tape.value(out.loss).item();

    let masked = plan.apply(&samples[3].token_ids);
    let mut t2 = Tape::new();
    let b2 = enc.bind(&mut t2, true);
    let rows: Vec<usize> = (0..masked.len()).collect();
    let logits = mlm_forward(&enc, &mut t2, &b2, &masked, &vec![1; masked.len()], 1, &rows).unwrap();
    let plain = mlm_loss(&mut t2, logits, &plan).unwrap();
    assert_eq!(evolved, t2.value(plain).item());
}

#[test]
fn loss_at_target_is_target_entropy() {
    let y = [0.0, 1.0, 0.0];
    let r = [0.2, 0.5, 0.3];
    let target = rectified_smooth_label(&y, &r, 0.5).unwrap();
    let entropy: f64 = -target.iter().map(|t| t * t.ln()).sum::<f64>();
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::new(vec![1, 3], target.iter().map(|t| t.ln()).collect()).unwrap());
    let loss = tape.soft_cross_entropy(logits, &Tensor::new(vec![1, 3], target).unwrap()).unwrap();
    assert!((tape.value(loss).item() - entropy).abs() < 1e-12);
}

#[test]
fn two_position_scalar_oracle_and_blocked_reference() {
    let (samples, enc) = trained(50, 100, SyntheticCorpusSpec::default());
    let alpha = 0.5;
    let batch = one_sample_batch(&samples, 7);
    let ids = &samples[7].token_ids;
    let plan = MaskPlan::all_mask(ids, vec![1, 5]);

    let mut tape = Tape::new();
    let bound = enc.bind(&mut tape, true);
    let out = evolution_step_loss(&enc, &mut tape, &bound, &batch, &[Some(plan.clone())], alpha).unwrap();
    let got = tape.value(out.loss).item();
    tape.backward(out.loss).unwrap();
    let grads = collect_grads(&tape, bound.named());

    // Scalar oracle from plain forwards.
    let r_logits = enc.forward_sequence(ids).unwrap();
    let masked = plan.apply(ids);
    let p_logits = enc.forward_sequence(&masked).unwrap();
    let mut expected = 0.0;
    let mut targets = Vec::new();
    for (&pos, &truth) in plan.positions.iter().zip(&plan.originals) {
        let r = softmax(r_logits.row(pos));
        let p = softmax(p_logits.row(pos));
        let mut row = Vec::new();
        for c in 0..r.len() {
            let yt = if c == truth { 1.0 } else { 0.0 };
            let t = (1.0 - alpha) * yt + alpha * r[c];
            expected -= t * p[c].max(1e-12).ln();
            row.push(t);
        }
        targets.extend(row);
    }
    expected /= 2.0;
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");

    // Same gradients as training against the reference frozen into a constant.
    let v = enc.config().vocab_size;
    let mut t2 = Tape::new();
    let b2 = enc.bind(&mut t2, true);
    let rows = plan.positions.clone();
    let logits = mlm_forward(&enc, &mut t2, &b2, &masked, &vec![1; masked.len()], 1, &rows).unwrap();
    let loss = t2.soft_cross_entropy(logits, &Tensor::new(vec![2, v], targets).unwrap()).unwrap();
    t2.backward(loss).unwrap();
    let frozen = collect_grads(&t2, b2.named());
    assert_eq!(grads.keys().collect::<Vec<_>>(), frozen.keys().collect::<Vec<_>>());
    for (name, g) in &grads {
        for (a, b) in g.data().iter().zip(frozen[name].data()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{name}");
        }
    }
}

#[test]
fn misaligned_plans_are_rejected() {
    let (samples, enc) = trained(10, 0, SyntheticCorpusSpec::default());
    let batch = one_sample_batch(&samples, 0);
    let mut tape = Tape::new();
    let bound = enc.bind(&mut tape, true);
    let err = evolution_step_loss(&enc, &mut tape, &bound, &batch, &[None, None], 0.5);
    assert!(matches!(err, Err(Error::Contract(_))));
    let wrong = MaskPlan::all_mask(&samples[1].token_ids, vec![2]);
    let mut bad = wrong.clone();
    bad.originals[0] = samples[0].token_ids[2] + 1;
    let err = evolution_step_loss(&enc, &mut tape, &bound, &batch, &[Some(bad)], 0.5);
    assert!(matches!(err, Err(Error::Contract(_))));
}

#[test]
fn selection_is_reproducible() {
    let ids: Vec<usize> = std::iter::once(3).chain(4..30).collect();
    let neglected: Vec<NeglectedRecord> = (0..3)
        .map(|i| NeglectedRecord { sample: 0, pos: 4 + i, truth: 8, truth_p: 0.1, top: 9, top_p: 0.5 })
        .collect();
    let a = select_evolution_masks(&ids, &neglected, 0.3, &mut rng::stream(4, &[])).unwrap();
    let b = select_evolution_masks(&ids, &neglected, 0.3, &mut rng::stream(4, &[])).unwrap();
    assert_eq!(a, b);
    let plan = a.unwrap();
    assert_eq!(plan.len(), 8);
    assert!([4, 5, 6].iter().all(|p| plan.positions.contains(p)));
}

#[test]
fn zero_steps_only_scans() {
    let (samples, enc) = trained(40, 50, SyntheticCorpusSpec::default());
    let mut e = enc.clone();
    let run = self_evolve(&mut e, &samples, &SelfEvolutionConfig { steps: 0, ..Default::default() }).unwrap();
    assert_eq!(e, enc);
    assert_eq!(run.metrics.len(), 1);
    assert_eq!(run.metrics[0].neglected_count, Some(run.index.len()));
}

#[test]
fn evolution_runs_are_deterministic() {
    let (samples, enc) = trained(60, 50, SyntheticCorpusSpec::default());
    let cfg = SelfEvolutionConfig { steps: 12, log_interval: 4, slot_eval_samples: 16, seed: 9, ..Default::default() };
    let run = || {
        let mut e = enc.clone();
        let r = self_evolve(&mut e, &samples, &cfg).unwrap();
        (e.checksum(), evolm::metrics::to_jsonl(&r.metrics))
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    // Scans at 0, 3, 6, 9, 12.
    assert_eq!(a.1.matches("neglected_count").count(), 5);
}
