//! Position-by-position reference for the neglected-token scan.

use evolm::data::Sample;
use evolm::evolution::NeglectedRecord;
use evolm::model::Encoder;
use evolm::tensor::softmax;

/// Re-forwards each sample on its own and classifies one position at a time.
pub fn brute_force_scan(enc: &Encoder, samples: &[Sample]) -> Vec<NeglectedRecord> {
    let mut out = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        for pos in 0..s.token_ids.len() {
            let truth = s.token_ids[pos];
            if truth < 4 {
                continue;
            }
            let logits = enc.forward_sequence(&s.token_ids).unwrap();
            let probs = softmax(logits.row(pos));
            let truth_p = probs[truth];
            let mut top = usize::MAX;
            let mut top_p = f64::NEG_INFINITY;
            for (j, &p) in probs.iter().enumerate() {
                if j != truth && p > top_p {
                    top = j;
                    top_p = p;
                }
            }
            if !(truth_p > top_p) {
                out.push(NeglectedRecord { sample: i, pos, truth, truth_p, top, top_p });
            }
        }
    }
    out
}
