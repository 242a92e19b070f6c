use super::kernels::{self, gelu, gelu_grad, matmul_into, matmul_nt_acc, matmul_tn_acc};
use super::{clamped_ln, Tensor, LAYER_NORM_EPS, LOG_CLAMP};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        /// `b` is shared across the batch of `a`.
        shared_b: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    Gelu(usize),
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    Reshape(usize),
    Permute {
        x: usize,
        /// For every output element, the flat index it was read from.
        src: Vec<usize>,
    },
    ConcatRows(usize, usize),
    MaskedFill {
        x: usize,
        mask: Vec<bool>,
    },
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        affine: Option<(usize, usize)>,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(usize),
    Mean(usize),
    SoftCrossEntropy {
        logits: usize,
        target: Vec<f64>,
        probs: Vec<f64>,
    },
    TakeAlongLast {
        x: usize,
        idx: Vec<usize>,
        rows: usize,
        in_cols: usize,
        out_cols: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Append-only record of a forward computation.
///
/// Node inputs always precede the node, so reverse append order is a valid
/// reverse topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies the current value into a new constant, blocking gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a node that requires one, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------- ops

    /// Matrix product.
    ///
    /// * `a[..., m, k] · b[k, n]`: `b` is applied to every row of `a`.
    /// * `a[B, m, k] · b[B, k, n]`: batched product with equal batch sizes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::shape(format!("matmul of {sa:?} and {sb:?}"));
        if sa.len() < 2 {
            return Err(mismatch());
        }
        let k = sa[sa.len() - 1];
        let (batch, m, n, shared_b, out_shape) = match sb.len() {
            2 => {
                if sb[0] != k {
                    return Err(mismatch());
                }
                let m = sa[..sa.len() - 1].iter().product();
                let mut out = sa[..sa.len() - 1].to_vec();
                out.push(sb[1]);
                (1, m, sb[1], true, out)
            }
            3 => {
                if sa.len() != 3 || sa[0] != sb[0] || sb[1] != k {
                    return Err(mismatch());
                }
                (sa[0], sa[1], sb[2], false, vec![sa[0], sa[1], sb[2]])
            }
            _ => return Err(mismatch()),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for bi in 0..batch {
                let a_s = &ad[bi * m * k..(bi + 1) * m * k];
                let b_s = if shared_b {
                    bd
                } else {
                    &bd[bi * k * n..(bi + 1) * k * n]
                };
                matmul_into(a_s, b_s, &mut out[bi * m * n..(bi + 1) * m * n], m, k, n);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            &[a.0, b.0],
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let v = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(v, Op::Scale(a.0, c), &[a.0])
    }

    /// `x[..., n] + bias[n]`, broadcasting the bias over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(Error::shape(format!(
                "bias {:?} for input {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let bd = self.data(bias).to_vec();
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(&bd) {
                *v += b;
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(v, Op::AddBias(x.0, bias.0), &[x.0, bias.0]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| gelu(v)).collect();
        let v = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(v, Op::Gelu(x.0), &[x.0])
    }

    /// Selects rows of a `[rows, n]` table; output is `[ids.len(), n]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::shape(format!("gather from {shape:?}")));
        }
        let (rows, n) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Vocabulary {
                id: bad,
                size: rows,
            });
        }
        let td = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            data.extend_from_slice(&td[i * n..(i + 1) * n]);
        }
        let v = Tensor::new(vec![ids.len(), n], data)?;
        Ok(self.push(
            v,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x.0), &[x.0]))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("permutation {perm:?} of {shape:?}")));
        }
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let numel: usize = shape.iter().product();
        let mut src = Vec::with_capacity(numel);
        let mut counter = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..numel {
            src.push(offset);
            for ax in (0..rank).rev() {
                counter[ax] += 1;
                offset += strides[ax];
                if counter[ax] < out_shape[ax] {
                    break;
                }
                offset -= strides[ax] * counter[ax];
                counter[ax] = 0;
            }
        }
        let xd = self.data(x);
        let data = src.iter().map(|&s| xd[s]).collect();
        let v = Tensor::new(out_shape, data)?;
        Ok(self.push(v, Op::Permute { x: x.0, src }, &[x.0]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::shape("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    /// Stacks `a[p, n]` on top of `b[q, n]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape(format!("concat rows of {sa:?} and {sb:?}")));
        }
        let shape = vec![sa[0] + sb[0], sa[1]];
        let mut data = self.data(a).to_vec();
        data.extend_from_slice(self.data(b));
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::ConcatRows(a.0, b.0), &[a.0, b.0]))
    }

    /// Replaces every entry whose mask flag is set with `fill`.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], fill: f64) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::shape(format!(
                "mask of {} entries for {:?}",
                mask.len(),
                self.shape(x)
            )));
        }
        let data = self
            .data(x)
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let v = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(
            v,
            Op::MaskedFill {
                x: x.0,
                mask: mask.to_vec(),
            },
            &[x.0],
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = self.value(x).last_dim();
        let data = kernels::softmax_rows(self.data(x), n);
        let v = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(v, Op::Softmax(x.0), &[x.0])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let n = self.value(x).last_dim();
        let data = kernels::log_softmax_rows(self.data(x), n);
        let v = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(v, Op::LogSoftmax(x.0), &[x.0])
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(format!(
                "layer norm gain {:?} / bias {:?} for input {:?}",
                self.shape(gain),
                self.shape(bias),
                self.shape(x)
            )));
        }
        self.norm_impl(x, Some((gain.0, bias.0)))
    }

    /// Per-row standardization (zero mean, unit variance) without affine terms.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        self.norm_impl(x, None)
    }

    fn norm_impl(&mut self, x: Var, affine: Option<(usize, usize)>) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d == 0 {
            return Err(Error::shape("layer norm over an empty axis"));
        }
        let xd = self.data(x);
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let mut out = xhat.clone();
        if let Some((g, b)) = affine {
            let gd = self.nodes[g].value.data();
            let bd = self.nodes[b].value.data();
            for row in out.chunks_mut(d) {
                for ((o, gv), bv) in row.iter_mut().zip(gd).zip(bd) {
                    *o = *o * gv + bv;
                }
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        let inputs: Vec<usize> = match affine {
            Some((g, b)) => vec![x.0, g, b],
            None => vec![x.0],
        };
        Ok(self.push(
            v,
            Op::LayerNorm {
                x: x.0,
                affine,
                xhat,
                rstd,
            },
            &inputs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x.0), &[x.0])
    }

    /// Mean over rows of `-Σ_c target[r, c] · ln(max(softmax(logits)[r, c], 1e-12))`.
    ///
    /// `target` is a constant of the same `[rows, classes]` shape.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape != target.shape() {
            return Err(Error::shape(format!(
                "cross entropy of logits {shape:?} against target {:?}",
                target.shape()
            )));
        }
        let (rows, n) = (shape[0], shape[1]);
        if rows == 0 {
            return Err(Error::contract("cross entropy over zero rows"));
        }
        let probs = kernels::softmax_rows(self.data(logits), n);
        let total: f64 = probs
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| t * clamped_ln(p))
            .sum();
        let loss = -total / rows as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                logits: logits.0,
                target: target.data().to_vec(),
                probs,
            },
            &[logits.0],
        ))
    }

    /// `out[b, r, c] = x[b, r, idx[r, c]]` for `x[B, rows, in_cols]` and an
    /// index matrix `idx[rows, out_cols]`.
    pub fn take_along_last(&mut self, x: Var, idx: &[usize], out_cols: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || idx.len() != shape[1] * out_cols {
            return Err(Error::shape(format!(
                "take_along_last on {shape:?} with {} indices",
                idx.len()
            )));
        }
        let (batch, rows, in_cols) = (shape[0], shape[1], shape[2]);
        if idx.iter().any(|&i| i >= in_cols) {
            return Err(Error::shape("take_along_last index out of range"));
        }
        let xd = self.data(x);
        let mut data = Vec::with_capacity(batch * rows * out_cols);
        for b in 0..batch {
            for r in 0..rows {
                let base = (b * rows + r) * in_cols;
                for c in 0..out_cols {
                    data.push(xd[base + idx[r * out_cols + c]]);
                }
            }
        }
        let v = Tensor::new(vec![batch, rows, out_cols], data)?;
        Ok(self.push(
            v,
            Op::TakeAlongLast {
                x: x.0,
                idx: idx.to_vec(),
                rows,
                in_cols,
                out_cols,
            },
            &[x.0],
        ))
    }

    // ----------------------------------------------------------- backward

    /// Populates gradients of every `requires_grad` leaf reachable from the
    /// scalar `loss`. Leaf gradients accumulate additively across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = &mut self.nodes[id];
                match &mut slot.grad {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    None => {
                        slot.grad = Some(Tensor::new(slot.value.shape().to_vec(), g)?);
                    }
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let needs = |i: usize| self.nodes[i].requires_grad;
        let numel = |i: usize| self.nodes[i].value.numel();
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[i].requires_grad {
                return;
            }
            let buf = grads[i].get_or_insert_with(|| vec![0.0; numel(i)]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let (a, b, batch, m, k, n) = (*a, *b, *batch, *m, *k, *n);
                let ad = self.nodes[a].value.data();
                let bd = self.nodes[b].value.data();
                if needs(a) {
                    acc(a, &mut |ga| {
                        for bi in 0..batch {
                            let b_s = if *shared_b {
                                bd
                            } else {
                                &bd[bi * k * n..(bi + 1) * k * n]
                            };
                            matmul_nt_acc(
                                &g[bi * m * n..(bi + 1) * m * n],
                                b_s,
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                }
                if needs(b) {
                    acc(b, &mut |gb| {
                        for bi in 0..batch {
                            let gb_s = if *shared_b {
                                &mut gb[..]
                            } else {
                                &mut gb[bi * k * n..(bi + 1) * k * n]
                            };
                            matmul_tn_acc(
                                &ad[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                gb_s,
                                m,
                                k,
                                n,
                            );
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (x, v) in gb.iter_mut().zip(g) {
                        *x -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let ad = self.nodes[*a].value.data();
                let bd = self.nodes[*b].value.data();
                acc(*a, &mut |ga| {
                    for ((x, v), y) in ga.iter_mut().zip(g).zip(bd) {
                        *x += v * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, v), y) in gb.iter_mut().zip(g).zip(ad) {
                        *x += v * y;
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |ga| {
                    for (x, v) in ga.iter_mut().zip(g) {
                        *x += v * c;
                    }
                });
            }
            Op::AddBias(x, bias) => {
                acc(*x, &mut |gx| add_into(gx, g));
                let n = self.nodes[*bias].value.numel();
                acc(*bias, &mut |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = self.nodes[*x].value.data();
                acc(*x, &mut |gx| {
                    for ((o, v), &xv) in gx.iter_mut().zip(g).zip(xd) {
                        *o += v * gelu_grad(xv);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let n = self.nodes[*table].value.last_dim();
                acc(*table, &mut |gt| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut gt[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Permute { x, src } => {
                acc(*x, &mut |gx| {
                    for (&s, v) in src.iter().zip(g) {
                        gx[s] += v;
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let split = numel(*a);
                acc(*a, &mut |ga| add_into(ga, &g[..split]));
                acc(*b, &mut |gb| add_into(gb, &g[split..]));
            }
            Op::MaskedFill { x, mask } => {
                acc(*x, &mut |gx| {
                    for ((o, v), &m) in gx.iter_mut().zip(g).zip(mask) {
                        if !m {
                            *o += v;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                acc(*x, &mut |gx| {
                    for ((gr, yr), xr) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in xr.iter_mut().zip(gr).zip(yr) {
                            *o += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                acc(*x, &mut |gx| {
                    for ((gr, yr), xr) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                        let total: f64 = gr.iter().sum();
                        for ((o, gv), yv) in xr.iter_mut().zip(gr).zip(yr) {
                            *o += gv - yv.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                affine,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gain = affine.map(|(gi, _)| self.nodes[gi].value.data());
                if let Some((gi, bi)) = *affine {
                    acc(gi, &mut |gg| {
                        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for ((o, gv), hv) in gg.iter_mut().zip(gr).zip(hr) {
                                *o += gv * hv;
                            }
                        }
                    });
                    acc(bi, &mut |gb| {
                        for gr in g.chunks(d) {
                            add_into(gb, gr);
                        }
                    });
                }
                acc(*x, &mut |gx| {
                    let mut dxhat = vec![0.0; d];
                    for (r, ((gr, hr), xr)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        for (j, o) in dxhat.iter_mut().enumerate() {
                            *o = gr[j] * gain.map_or(1.0, |gd| gd[j]);
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh =
                            dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for ((o, dh), h) in xr.iter_mut().zip(&dxhat).zip(hr) {
                            *o += rstd[r] * (dh - mean_d - h * mean_dh);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let v = g[0];
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += v));
            }
            Op::Mean(x) => {
                let v = g[0] / numel(*x) as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += v));
            }
            Op::SoftCrossEntropy {
                logits,
                target,
                probs,
            } => {
                let n = self.nodes[*logits].value.last_dim();
                let rows = probs.len() / n;
                let scale = g[0] / rows as f64;
                acc(*logits, &mut |gl| {
                    for ((pr, tr), lr) in probs.chunks(n).zip(target.chunks(n)).zip(gl.chunks_mut(n)) {
                        // d/dp of -t·ln(max(p, clamp)) vanishes where the clamp is active.
                        let dp: Vec<f64> = pr
                            .iter()
                            .zip(tr)
                            .map(|(&p, &t)| if p > LOG_CLAMP { -t / p } else { 0.0 })
                            .collect();
                        let dot: f64 = dp.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for ((o, d), p) in lr.iter_mut().zip(&dp).zip(pr) {
                            *o += scale * p * (d - dot);
                        }
                    }
                });
            }
            Op::TakeAlongLast {
                x,
                idx,
                rows,
                in_cols,
                out_cols,
            } => {
                acc(*x, &mut |gx| {
                    let batch = g.len() / (rows * out_cols);
                    for b in 0..batch {
                        for r in 0..*rows {
                            let base = (b * rows + r) * in_cols;
                            let gbase = (b * rows + r) * out_cols;
                            for c in 0..*out_cols {
                                gx[base + idx[r * out_cols + c]] += g[gbase + c];
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
