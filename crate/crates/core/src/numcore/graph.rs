//! Reverse-mode differentiation over a recorded computation.
//!
//! A [`Graph`] is built forward, one node per primitive, and is therefore
//! topologically ordered by construction. [`Graph::backward_into`] walks it in
//! reverse and accumulates gradients for every parameter leaf.

use rand::Rng;

use super::tensor::{gemm, softmax_inplace};
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Val<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Val<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Val::Owned(t) => t,
            Val::Borrowed(t) => t,
        }
    }
}

enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Gelu(Var),
    LeakyRelu(Var, f64),
    Dropout(Var, Vec<f64>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        idx: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Interleave3(Var, Var, Var),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Tensor>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Tensor,
    },
    KlToReference {
        logits: Var,
        ref_logp: Tensor,
        weights: Vec<f64>,
        probs: Tensor,
        kl: Vec<f64>,
    },
    LogSumExpRows {
        x: Var,
        probs: Tensor,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
}

struct Node<'p> {
    val: Val<'p>,
    op: Op,
}

/// One recorded computation. Parameters are borrowed, never copied.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn mask_row(logits: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    match mask {
        Some(m) => logits
            .iter()
            .zip(m)
            .map(|(&l, &ok)| if ok { l } else { f64::NEG_INFINITY })
            .collect(),
        None => logits.to_vec(),
    }
}

fn check_mask(mask: Option<&[bool]>, rows: usize, cols: usize) -> Result<()> {
    if let Some(m) = mask {
        if m.len() != rows * cols {
            return Err(Error::shape("mask", &[rows, cols], &[m.len()]));
        }
        for r in 0..rows {
            if !m[r * cols..(r + 1) * cols].iter().any(|&b| b) {
                return Err(Error::Argument(format!("row {r} has no unmasked entry")));
            }
        }
    }
    Ok(())
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(64),
        }
    }

    fn push(&mut self, val: Val<'p>, op: Op) -> Var {
        self.nodes.push(Node { val, op });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, t: Tensor, op: Op) -> Var {
        self.push(Val::Owned(t), op)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].val.get()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.owned(t, Op::Constant)
    }

    /// Parameter leaf `i` of `store`.
    pub fn param(&mut self, store: &'p ParamStore, i: usize) -> Var {
        self.push(Val::Borrowed(store.get(i)), Op::Param(i))
    }

    /// A borrowed tensor that receives no gradient.
    pub fn frozen(&mut self, t: &'p Tensor) -> Var {
        self.push(Val::Borrowed(t), Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.owned(out, Op::MatMul(a, b)))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.owned(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.owned(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.owned(t, Op::Mul(a, b)))
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (rows, cols) = tx.rows_cols();
        if tb.len() != cols {
            return Err(Error::shape("add_row", tx.shape(), tb.shape()));
        }
        let mut out = tx.clone();
        for r in 0..rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        Ok(self.owned(out, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_inplace(s);
        self.owned(out, Op::Scale(x, s))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out =
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * v).collect()).unwrap();
        self.owned(out, Op::Square(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data).unwrap();
        self.owned(out, Op::Gelu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data).unwrap();
        self.owned(out, Op::LeakyRelu(x, slope))
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data).unwrap();
        self.owned(out, Op::Dropout(x, mask))
    }

    /// Normalize over the last axis, then apply `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (rows, cols) = tx.rows_cols();
        if tg.len() != cols || tb.len() != cols {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let mut out = tx.clone();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            let o = out.row_mut(r);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                o[c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        Ok(self.owned(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Gather rows of `table` (V×d) at `idx`.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = t.rows_cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= v {
                return Err(Error::Index {
                    what: "embedding",
                    index: i,
                    size: v,
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![idx.len(), d], data)?;
        Ok(self.owned(
            out,
            Op::Embedding {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = t.rows_cols();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::Index {
                    what: "select_rows",
                    index: r,
                    size: n,
                });
            }
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::new(vec![rows.len(), d], data)?;
        Ok(self.owned(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Rows `a0, b0, c0, a1, b1, c1, …` from three equally shaped matrices.
    pub fn interleave3(&mut self, a: Var, b: Var, c: Var) -> Result<Var> {
        let (ta, tb, tc) = (self.value(a), self.value(b), self.value(c));
        if ta.shape() != tb.shape() || ta.shape() != tc.shape() {
            return Err(Error::shape("interleave3", ta.shape(), tb.shape()));
        }
        let (n, d) = ta.rows_cols();
        let mut data = Vec::with_capacity(3 * n * d);
        for r in 0..n {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
            data.extend_from_slice(tc.row(r));
        }
        let out = Tensor::new(vec![3 * n, d], data)?;
        Ok(self.owned(out, Op::Interleave3(a, b, c)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows_cols().0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).rows_cols();
            if r != rows {
                return Err(Error::shape(
                    "concat_cols",
                    self.value(parts[0]).shape(),
                    self.value(p).shape(),
                ));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.owned(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let (rows, _) = out.rows_cols();
        for r in 0..rows {
            softmax_inplace(out.row_mut(r));
        }
        self.owned(out, Op::SoftmaxRows(x))
    }

    /// Multi-head causal self-attention: row `i` attends to rows `j <= i`.
    /// Scores are scaled by `1/sqrt(d/heads)`. Per-head probabilities are kept.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(Error::shape("causal_attention", tq.shape(), tk.shape()));
        }
        let (n, d) = tq.rows_cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Argument(format!(
                "d={d} not divisible by heads={heads}"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(&[n, d]);
        let mut probs = Vec::with_capacity(heads);
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for h in 0..heads {
            let off = h * dh;
            let mut p = Tensor::zeros(&[n, n]);
            for i in 0..n {
                let qi = &qd[i * d + off..i * d + off + dh];
                let row = &mut p.data_mut()[i * n..i * n + i + 1];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &kd[j * d + off..j * d + off + dh];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_inplace(row);
                let od = out.data_mut();
                for j in 0..=i {
                    let w = p.data()[i * n + j];
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (o, vv) in od[i * d + off..i * d + off + dh].iter_mut().zip(vj) {
                        *o += w * vv;
                    }
                }
            }
            probs.push(p);
        }
        Ok(self.owned(
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// Per-head attention probabilities of a `causal_attention` node.
    pub fn attention_probs(&self, v: Var) -> Option<&[Tensor]> {
        match &self.nodes[v.0].op {
            Op::CausalAttention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[t_i])`, softmax restricted to `mask`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let t = self.value(logits);
        let (rows, cols) = t.rows_cols();
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::shape("cross_entropy", t.shape(), &[targets.len()]));
        }
        check_mask(mask, rows, cols)?;
        let mut probs = Tensor::zeros(&[rows, cols]);
        let mut loss = 0.0;
        for r in 0..rows {
            let tgt = targets[r];
            if tgt >= cols {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: tgt,
                    size: cols,
                });
            }
            let row = mask_row(t.row(r), mask.map(|m| &m[r * cols..(r + 1) * cols]));
            if row[tgt] == f64::NEG_INFINITY {
                return Err(Error::Argument(format!(
                    "target {tgt} of row {r} is masked"
                )));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += weights[r] * (lse - row[tgt]);
            for (p, v) in probs.row_mut(r).iter_mut().zip(&row) {
                *p = (v - lse).exp();
            }
        }
        Ok(self.owned(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// `Σ_i w_i · KL(softmax(logits_i) ‖ exp(ref_logp_i))` over unmasked actions.
    /// Masked entries of `ref_logp` are ignored.
    pub fn kl_to_reference(
        &mut self,
        logits: Var,
        ref_logp: Tensor,
        weights: &[f64],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let t = self.value(logits);
        let (rows, cols) = t.rows_cols();
        if ref_logp.shape() != t.shape() || weights.len() != rows {
            return Err(Error::shape("kl_to_reference", t.shape(), ref_logp.shape()));
        }
        check_mask(mask, rows, cols)?;
        let mut probs = Tensor::zeros(&[rows, cols]);
        let mut kl = vec![0.0; rows];
        let mut total = 0.0;
        for r in 0..rows {
            let row = mask_row(t.row(r), mask.map(|m| &m[r * cols..(r + 1) * cols]));
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let mut k = 0.0;
            for c in 0..cols {
                if row[c] == f64::NEG_INFINITY {
                    continue;
                }
                let logp = row[c] - lse;
                let p = logp.exp();
                probs.row_mut(r)[c] = p;
                k += p * (logp - ref_logp.row(r)[c]);
            }
            kl[r] = k;
            total += weights[r] * k;
        }
        Ok(self.owned(
            Tensor::scalar(total),
            Op::KlToReference {
                logits,
                ref_logp,
                weights: weights.to_vec(),
                probs,
                kl,
            },
        ))
    }

    /// Row-wise `log Σ exp` over unmasked entries, shape `[rows]`.
    pub fn logsumexp_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.rows_cols();
        check_mask(mask, rows, cols)?;
        let mut probs = Tensor::zeros(&[rows, cols]);
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let row = mask_row(t.row(r), mask.map(|m| &m[r * cols..(r + 1) * cols]));
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out[r] = lse;
            for (p, v) in probs.row_mut(r).iter_mut().zip(&row) {
                *p = (v - lse).exp();
            }
        }
        Ok(self.owned(Tensor::vector(out), Op::LogSumExpRows { x, probs }))
    }

    /// `out_i = x[i, idx_i]`, shape `[rows]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.rows_cols();
        if idx.len() != rows {
            return Err(Error::shape("pick", t.shape(), &[idx.len()]));
        }
        let mut out = Vec::with_capacity(rows);
        for (r, &i) in idx.iter().enumerate() {
            if i >= cols {
                return Err(Error::Index {
                    what: "pick",
                    index: i,
                    size: cols,
                });
            }
            out.push(t.row(r)[i]);
        }
        Ok(self.owned(
            Tensor::vector(out),
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Scalar `Σ_i w_i x_i` over the flattened tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if t.len() != weights.len() {
            return Err(Error::shape("weighted_sum", t.shape(), &[weights.len()]));
        }
        let s = t.data().iter().zip(weights).map(|(a, b)| a * b).sum();
        Ok(self.owned(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.weighted_sum(x, &vec![1.0; n]).unwrap()
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.weighted_sum(x, &vec![1.0 / n as f64; n]).unwrap()
    }

    /// Backpropagate from scalar `out`, adding parameter gradients into `grads`
    /// (indexed like the parameter store).
    pub fn backward_into(&self, out: Var, grads: &mut [Tensor]) -> Result<()> {
        if self.value(out).len() != 1 {
            return Err(Error::Argument("backward from a non-scalar".into()));
        }
        let mut g: Vec<Option<Tensor>> = (0..=out.0).map(|_| None).collect();
        g[out.0] = Some(Tensor::scalar(1.0));
        for i in (0..=out.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, gi, &mut g, grads)?;
        }
        Ok(())
    }

    /// Convenience: fresh zero gradients for `store`, filled by one backward pass.
    pub fn backward(&self, out: Var, store: &ParamStore) -> Result<Vec<Tensor>> {
        let mut grads = store.zeros_like();
        self.backward_into(out, &mut grads)?;
        Ok(grads)
    }

    fn propagate(
        &self,
        node: &Node<'p>,
        gout: Tensor,
        g: &mut [Option<Tensor>],
        grads: &mut [Tensor],
    ) -> Result<()> {
        fn acc(g: &mut [Option<Tensor>], v: Var, t: Tensor) {
            match &mut g[v.0] {
                Some(e) => {
                    for (a, b) in e.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
                slot => *slot = Some(t),
            }
        }
        let shaped =
            |v: Var, data: Vec<f64>| Tensor::new(self.value(v).shape().to_vec(), data).unwrap();
        let gd = gout.data();
        match &node.op {
            Op::Constant => {}
            Op::Param(p) => {
                let dst = grads.get_mut(*p).ok_or(Error::Index {
                    what: "parameter gradient",
                    index: *p,
                    size: 0,
                })?;
                if dst.shape() != gout.shape() {
                    return Err(Error::shape("param grad", dst.shape(), gout.shape()));
                }
                for (a, b) in dst.data_mut().iter_mut().zip(gd) {
                    *a += b;
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, gd, false, tb.data(), true, &mut da, 0.0);
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, ta.data(), true, gd, false, &mut db, 0.0);
                acc(g, *a, shaped(*a, da));
                acc(g, *b, shaped(*b, db));
            }
            Op::Add(a, b) => {
                acc(g, *a, gout.clone());
                acc(g, *b, gout);
            }
            Op::Sub(a, b) => {
                acc(g, *b, shaped(*b, gd.iter().map(|v| -v).collect()));
                acc(g, *a, gout);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = gd.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                let db = gd.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                acc(g, *a, shaped(*a, da));
                acc(g, *b, shaped(*b, db));
            }
            Op::AddRow(x, bias) => {
                let (rows, cols) = gout.rows_cols();
                let mut db = vec![0.0; cols];
                for r in 0..rows {
                    for (d, v) in db.iter_mut().zip(gout.row(r)) {
                        *d += v;
                    }
                }
                acc(g, *bias, shaped(*bias, db));
                acc(g, *x, gout);
            }
            Op::Scale(x, s) => acc(g, *x, shaped(*x, gd.iter().map(|v| v * s).collect())),
            Op::Square(x) => {
                let d = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, xv)| 2.0 * gv * xv)
                    .collect();
                acc(g, *x, shaped(*x, d));
            }
            Op::Gelu(x) => {
                let d = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, &v)| {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        gv * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
                    })
                    .collect();
                acc(g, *x, shaped(*x, d));
            }
            Op::LeakyRelu(x, slope) => {
                let d = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, &v)| if v > 0.0 { *gv } else { gv * slope })
                    .collect();
                acc(g, *x, shaped(*x, d));
            }
            Op::Dropout(x, mask) => {
                acc(
                    g,
                    *x,
                    shaped(*x, gd.iter().zip(mask).map(|(a, b)| a * b).collect()),
                );
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = gout.rows_cols();
                let gain_d = self.value(*gain).data();
                let mut dx = vec![0.0; rows * cols];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                let nf = cols as f64;
                for r in 0..rows {
                    let gr = gout.row(r);
                    let xh = &xhat[r * cols..(r + 1) * cols];
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for c in 0..cols {
                        dgain[c] += gr[c] * xh[c];
                        dbias[c] += gr[c];
                        let dxh = gr[c] * gain_d[c];
                        sum_d += dxh;
                        sum_dx += dxh * xh[c];
                    }
                    for c in 0..cols {
                        let dxh = gr[c] * gain_d[c];
                        dx[r * cols + c] = inv_std[r] / nf * (nf * dxh - sum_d - xh[c] * sum_dx);
                    }
                }
                acc(g, *x, shaped(*x, dx));
                acc(g, *gain, shaped(*gain, dgain));
                acc(g, *bias, shaped(*bias, dbias));
            }
            Op::Embedding { table, idx } => {
                let t = self.value(*table);
                let (_, d) = t.rows_cols();
                let mut dt = Tensor::zeros(t.shape());
                for (r, &i) in idx.iter().enumerate() {
                    for (a, b) in dt.row_mut(i).iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *a += b;
                    }
                }
                acc(g, *table, dt);
            }
            Op::SelectRows { x, rows } => {
                let t = self.value(*x);
                let (_, d) = t.rows_cols();
                let mut dx = Tensor::zeros(t.shape());
                for (r, &i) in rows.iter().enumerate() {
                    for (a, b) in dx.row_mut(i).iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *a += b;
                    }
                }
                acc(g, *x, dx);
            }
            Op::Interleave3(a, b, c) => {
                let (n, d) = self.value(*a).rows_cols();
                let mut parts = [vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n * d]];
                for r in 0..3 * n {
                    parts[r % 3][(r / 3) * d..(r / 3 + 1) * d]
                        .copy_from_slice(&gd[r * d..(r + 1) * d]);
                }
                let [pa, pb, pc] = parts;
                acc(g, *a, shaped(*a, pa));
                acc(g, *b, shaped(*b, pb));
                acc(g, *c, shaped(*c, pc));
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = gout.rows_cols();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).rows_cols().1;
                    let mut dp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        dp.extend_from_slice(&gd[r * total + off..r * total + off + c]);
                    }
                    acc(g, p, shaped(p, dp));
                    off += c;
                }
            }
            Op::SoftmaxRows(x) => {
                let y = node.val.get();
                let (rows, _) = y.rows_cols();
                let mut dx = Vec::with_capacity(y.len());
                for r in 0..rows {
                    let (yr, gr) = (y.row(r), gout.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                acc(g, *x, shaped(*x, dx));
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = tq.rows_cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; n * d];
                let mut dv = vec![0.0; n * d];
                let mut dp = vec![0.0; n];
                for (h, p) in probs.iter().enumerate() {
                    let off = h * dh;
                    for i in 0..n {
                        let gz = &gd[i * d + off..i * d + off + dh];
                        let prow = &p.data()[i * n..i * n + i + 1];
                        let mut dot = 0.0;
                        for j in 0..=i {
                            let vj = &vd[j * d + off..j * d + off + dh];
                            dp[j] = gz.iter().zip(vj).map(|(a, b)| a * b).sum();
                            dot += dp[j] * prow[j];
                            for (o, gzv) in dv[j * d + off..j * d + off + dh].iter_mut().zip(gz) {
                                *o += prow[j] * gzv;
                            }
                        }
                        for j in 0..=i {
                            let ds = prow[j] * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for c in 0..dh {
                                dq[i * d + off + c] += ds * kd[j * d + off + c];
                                dk[j * d + off + c] += ds * qd[i * d + off + c];
                            }
                        }
                    }
                }
                acc(g, *q, shaped(*q, dq));
                acc(g, *k, shaped(*k, dk));
                acc(g, *v, shaped(*v, dv));
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let s = gd[0];
                let (rows, _) = probs.rows_cols();
                let mut dl = probs.clone();
                for r in 0..rows {
                    let w = weights[r] * s;
                    let row = dl.row_mut(r);
                    row[targets[r]] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= w;
                    }
                }
                acc(g, *logits, dl);
            }
            Op::KlToReference {
                logits,
                ref_logp,
                weights,
                probs,
                kl,
            } => {
                let s = gd[0];
                let (rows, cols) = probs.rows_cols();
                let mut dl = Tensor::zeros(probs.shape());
                for r in 0..rows {
                    for c in 0..cols {
                        let p = probs.row(r)[c];
                        if p == 0.0 {
                            continue;
                        }
                        dl.row_mut(r)[c] =
                            s * weights[r] * p * (p.ln() - ref_logp.row(r)[c] - kl[r]);
                    }
                }
                acc(g, *logits, dl);
            }
            Op::LogSumExpRows { x, probs } => {
                let mut dx = probs.clone();
                let (rows, _) = dx.rows_cols();
                for r in 0..rows {
                    for v in dx.row_mut(r) {
                        *v *= gd[r];
                    }
                }
                acc(g, *x, dx);
            }
            Op::Pick { x, idx } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (r, &i) in idx.iter().enumerate() {
                    dx.row_mut(r)[i] += gd[r];
                }
                acc(g, *x, dx);
            }
            Op::WeightedSum { x, weights } => {
                acc(
                    g,
                    *x,
                    shaped(*x, weights.iter().map(|w| w * gd[0]).collect()),
                );
            }
        }
        Ok(())
    }
}
