//! Gradient-check cases, one per tape primitive.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use evolm::{Tape, Tensor, Var};

use super::gradcheck::{max_relative_error, weighted_sum};

pub type Case = (&'static str, fn(u64) -> f64);

fn rnd(shape: &[usize], seed: u64, salt: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + salt);
    Tensor::randn(shape, 1.0, &mut rng)
}

fn positive(shape: &[usize], seed: u64, salt: u64) -> Tensor {
    let mut t = rnd(shape, seed, salt);
    t.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
    t
}

fn check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    max_relative_error(inputs, f)
}

pub fn cases() -> Vec<Case> {
    vec![
        ("matmul", |s| {
            check(&[rnd(&[3, 4], s, 1), rnd(&[4, 2], s, 2)], |t, v| {
                let y = t.matmul(v[0], v[1]).unwrap();
                weighted_sum(t, y, 1)
            })
        }),
        ("matmul_shared_rhs", |s| {
            check(&[rnd(&[2, 3, 4], s, 1), rnd(&[4, 3], s, 2)], |t, v| {
                let y = t.matmul(v[0], v[1]).unwrap();
                weighted_sum(t, y, 2)
            })
        }),
        ("matmul_batched", |s| {
            check(&[rnd(&[2, 3, 4], s, 1), rnd(&[2, 4, 2], s, 2)], |t, v| {
                let y = t.matmul(v[0], v[1]).unwrap();
                weighted_sum(t, y, 3)
            })
        }),
        ("add", |s| {
            check(&[rnd(&[3, 3], s, 1), rnd(&[3, 3], s, 2)], |t, v| {
                let y = t.add(v[0], v[1]).unwrap();
                weighted_sum(t, y, 4)
            })
        }),
        ("sub", |s| {
            check(&[rnd(&[3, 3], s, 1), rnd(&[3, 3], s, 2)], |t, v| {
                let y = t.sub(v[0], v[1]).unwrap();
                weighted_sum(t, y, 5)
            })
        }),
        ("mul", |s| {
            check(&[rnd(&[2, 5], s, 1), rnd(&[2, 5], s, 2)], |t, v| {
                let y = t.mul(v[0], v[1]).unwrap();
                weighted_sum(t, y, 6)
            })
        }),
        ("scale", |s| {
            check(&[rnd(&[4], s, 1)], |t, v| {
                let y = t.scale(v[0], -1.7);
                weighted_sum(t, y, 7)
            })
        }),
        ("add_bias", |s| {
            check(&[rnd(&[3, 4], s, 1), rnd(&[4], s, 2)], |t, v| {
                let y = t.add_bias(v[0], v[1]).unwrap();
                weighted_sum(t, y, 8)
            })
        }),
        ("gelu", |s| {
            check(&[rnd(&[3, 4], s, 1)], |t, v| {
                let y = t.gelu(v[0]);
                weighted_sum(t, y, 9)
            })
        }),
        ("gather_rows", |s| {
            check(&[rnd(&[5, 3], s, 1)], |t, v| {
                let y = t.gather_rows(v[0], &[4, 0, 4, 2]).unwrap();
                weighted_sum(t, y, 10)
            })
        }),
        ("reshape", |s| {
            check(&[rnd(&[2, 6], s, 1)], |t, v| {
                let y = t.reshape(v[0], &[3, 4]).unwrap();
                weighted_sum(t, y, 11)
            })
        }),
        ("permute", |s| {
            check(&[rnd(&[2, 3, 4, 2], s, 1)], |t, v| {
                let y = t.permute(v[0], &[2, 0, 3, 1]).unwrap();
                weighted_sum(t, y, 12)
            })
        }),
        ("concat_rows", |s| {
            check(&[rnd(&[2, 3], s, 1), rnd(&[4, 3], s, 2)], |t, v| {
                let y = t.concat_rows(v[0], v[1]).unwrap();
                weighted_sum(t, y, 13)
            })
        }),
        ("masked_fill", |s| {
            check(&[rnd(&[2, 4], s, 1)], |t, v| {
                let mask = [false, true, false, false, true, true, false, false];
                let y = t.masked_fill(v[0], &mask, -1e30).unwrap();
                let y = t.softmax(y);
                weighted_sum(t, y, 14)
            })
        }),
        ("softmax", |s| {
            check(&[rnd(&[3, 5], s, 1)], |t, v| {
                let y = t.softmax(v[0]);
                weighted_sum(t, y, 15)
            })
        }),
        ("log_softmax", |s| {
            check(&[rnd(&[3, 5], s, 1)], |t, v| {
                let y = t.log_softmax(v[0]);
                weighted_sum(t, y, 16)
            })
        }),
        ("layer_norm", |s| {
            check(
                &[rnd(&[3, 6], s, 1), rnd(&[6], s, 2), rnd(&[6], s, 3)],
                |t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
                    weighted_sum(t, y, 17)
                },
            )
        }),
        ("normalize", |s| {
            check(&[rnd(&[3, 6], s, 1)], |t, v| {
                let y = t.normalize(v[0]).unwrap();
                weighted_sum(t, y, 18)
            })
        }),
        ("sum", |s| {
            check(&[rnd(&[3, 2], s, 1)], |t, v| {
                let y = t.mul(v[0], v[0]).unwrap();
                t.sum(y)
            })
        }),
        ("mean", |s| {
            check(&[rnd(&[3, 2], s, 1)], |t, v| {
                let y = t.mul(v[0], v[0]).unwrap();
                t.mean(y)
            })
        }),
        ("soft_cross_entropy", |s| {
            let target = {
                let raw = positive(&[3, 4], s, 9);
                let mut d = raw.data().to_vec();
                for row in d.chunks_mut(4) {
                    let z: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= z);
                }
                Tensor::new(vec![3, 4], d).unwrap()
            };
            check(&[rnd(&[3, 4], s, 1)], move |t, v| {
                t.soft_cross_entropy(v[0], &target).unwrap()
            })
        }),
        ("take_along_last", |s| {
            check(&[rnd(&[2, 3, 5], s, 1)], |t, v| {
                let idx = [0, 4, 4, 2, 1, 0, 3, 3, 2];
                let y = t.take_along_last(v[0], &idx, 3).unwrap();
                weighted_sum(t, y, 19)
            })
        }),
    ]
}
