use rand::seq::SliceRandom;

use super::vocab::PAD;
use crate::rng;

/// A padded `[batch, seq_len]` block of token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<usize>,
    /// 1 for real tokens, 0 for padding.
    pub attention_mask: Vec<u8>,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Index of each row in the source collection.
    pub indices: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl Batch {
    /// Pads the given sequences to the longest one.
    pub fn from_sequences(seqs: &[&[usize]], indices: Vec<usize>) -> Self {
        let seq_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut attention_mask = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, seq_len - s.len()));
            attention_mask.extend(std::iter::repeat_n(1u8, s.len()));
            attention_mask.extend(std::iter::repeat_n(0u8, seq_len - s.len()));
        }
        Self {
            ids,
            attention_mask,
            batch_size: seqs.len(),
            seq_len,
            indices,
            lengths: seqs.iter().map(|s| s.len()).collect(),
        }
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq_len..(b + 1) * self.seq_len]
    }

    /// Flat row index of `(sample, position)` in a `[batch·seq_len, ·]` layout.
    pub fn flat(&self, b: usize, pos: usize) -> usize {
        b * self.seq_len + pos
    }
}

/// Order in which a collection of `n` items is visited in `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, &[rng::tag("shuffle"), epoch]);
    order.shuffle(&mut r);
    order
}

/// Shuffled, padded batches; the order is a pure function of `(seed, epoch)`.
pub fn batches<'a, S: AsRef<[usize]>>(
    samples: &'a [S],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> impl Iterator<Item = Batch> + 'a {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let order = epoch_order(samples.len(), seed, epoch);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |idx| {
        let seqs: Vec<&[usize]> = idx.iter().map(|&i| samples[i].as_ref()).collect();
        Batch::from_sequences(&seqs, idx)
    })
}

/// Endless batch stream that reshuffles at every epoch boundary.
pub struct BatchStream<'a, S> {
    samples: &'a [S],
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a, S: AsRef<[usize]>> BatchStream<'a, S> {
    pub fn new(samples: &'a [S], batch_size: usize, seed: u64) -> Self {
        assert!(batch_size >= 1, "batch_size must be at least 1");
        Self {
            samples,
            batch_size,
            seed,
            epoch: 0,
            order: epoch_order(samples.len(), seed, 0),
            cursor: 0,
        }
    }

    pub fn next_batch(&mut self) -> Batch {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.order = epoch_order(self.samples.len(), self.seed, self.epoch);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let seqs: Vec<&[usize]> = idx.iter().map(|&i| self.samples[i].as_ref()).collect();
        Batch::from_sequences(&seqs, idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Vec<Vec<usize>> {
        vec![vec![3, 5], vec![3, 6, 7], vec![3], vec![3, 8, 9, 10], vec![3, 4]]
    }

    #[test]
    fn sizes_two_two_one() {
        let s = toy();
        let sizes: Vec<usize> = batches(&s, 2, 1, 0).map(|b| b.batch_size).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
    }

    #[test]
    fn order_is_pure_in_seed_and_epoch() {
        let s = toy();
        let a: Vec<Batch> = batches(&s, 2, 7, 3).collect();
        let b: Vec<Batch> = batches(&s, 2, 7, 3).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn mask_rows_sum_to_lengths() {
        let s = toy();
        for b in batches(&s, 3, 2, 1) {
            for (row, &i) in b.attention_mask.chunks(b.seq_len).zip(&b.indices) {
                let real: usize = row.iter().map(|&m| m as usize).sum();
                assert_eq!(real, s[i].len());
            }
            for (id, m) in b.ids.iter().zip(&b.attention_mask) {
                assert_eq!(*m == 0, *id == PAD);
            }
        }
    }

    #[test]
    fn stream_covers_every_sample_each_epoch() {
        let s = toy();
        let mut stream = BatchStream::new(&s, 2, 5);
        let mut seen = Vec::new();
        for _ in 0..3 {
            seen.extend(stream.next_batch().indices);
        }
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }
}
