//! Tape-based reverse-mode differentiation over dense [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. [`Tape::backward`]
//! consumes the tape and returns the gradient of a scalar output with respect
//! to every node that requires it. Shape mismatches are programming errors
//! and panic immediately.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous groups of entries: group `i` owns `offsets[i]..offsets[i+1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_offsets(offsets: Vec<usize>) -> Self {
        assert!(!offsets.is_empty() && offsets[0] == 0);
        assert!(offsets.windows(2).all(|w| w[0] <= w[1]));
        Segments { offsets }
    }

    /// Groups a list of ids that is already sorted ascending, for `groups` groups.
    pub fn from_sorted_ids(ids: &[usize], groups: usize) -> Self {
        let mut offsets = vec![0usize; groups + 1];
        for &g in ids {
            assert!(g < groups);
            offsets[g + 1] += 1;
        }
        for i in 0..groups {
            offsets[i + 1] += offsets[i];
        }
        debug_assert!(ids.windows(2).all(|w| w[0] <= w[1]), "segment ids must be sorted");
        Segments { offsets }
    }

    pub fn groups(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, tb: bool },
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Softmax(Var),
    SegmentSoftmax {
        scores: Var,
        weights: Option<Var>,
        segments: Rc<Segments>,
        // exp(s - max) / Z per entry, the derivative of alpha w.r.t. a weight.
        unit: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Mean(Var),
    Sum(Var),
    FrobSq(Var),
    RowNorm(Var),
    RowNormalize { x: Var, norms: Vec<f64> },
    Bce { pred: Var, target: Rc<[f64]>, eps: f64 },
    CrossEntropy { logits: Var, labels: Rc<[usize]>, probs: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Gather { x: Var, idx: Rc<[usize]> },
    ScatterAdd { x: Var, idx: Rc<[usize]> },
    RowDot(Var, Var),
    ScaleRows(Var, Var),
    StraightThrough { soft: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a node that required one; `None` for constants.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `a · b`, or `a · bᵀ` when `transpose_b`.
    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = if tb { (bv.cols(), bv.rows()) } else { (bv.rows(), bv.cols()) };
        assert_eq!(k, k2, "matmul shape mismatch {:?} x {:?} (tb={tb})", av.shape(), bv.shape());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), tb, &mut out, false);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::matrix(m, n, out), Op::MatMul { a, b, tb }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`; with `b` stored as `out×in` this is a linear layer.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(v, Op::Transpose(a), rg)
    }

    fn zip_same(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        Tensor::new(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_same(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        assert_eq!(bv.len(), n, "bias length {} vs {} columns", bv.len(), n);
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, bias]);
        self.push(out, Op::AddRow(x, bias), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_same(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_same(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let t = self.value(p);
                assert_eq!(t.rows(), rows, "concat row mismatch");
                t.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                out[r * total + off..r * total + off + w].copy_from_slice(self.value(p).row(r));
                off += w;
            }
        }
        let rg = self.rg(parts);
        self.push(Tensor::matrix(rows, total, out), Op::Concat(parts.to_vec()), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Row-wise softmax restricted to a sparse support.
    ///
    /// `scores` holds one value per supported `(row, col)` entry, grouped by
    /// row through `segments`. With `weights`, entry `e` gets
    /// `w_e·exp(s_e) / Σ w·exp(s)`; a zero weight removes the entry from the
    /// support while keeping a gradient with respect to the weight.
    pub fn masked_softmax(
        &mut self,
        scores: Var,
        weights: Option<Var>,
        segments: Rc<Segments>,
    ) -> Var {
        let sv = self.value(scores);
        assert_eq!(sv.len(), segments.total(), "scores vs segments length");
        let wv = weights.map(|w| {
            let t = self.value(w);
            assert_eq!(t.len(), sv.len(), "weights vs scores length");
            t.data()
        });
        let s = sv.data();
        let mut alpha = vec![0.0; s.len()];
        let mut unit = vec![0.0; s.len()];
        for g in 0..segments.groups() {
            let r = segments.range(g);
            if r.is_empty() {
                continue;
            }
            let m = s[r.clone()].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in r.clone() {
                unit[e] = (s[e] - m).exp();
                let w = wv.map_or(1.0, |w| w[e]);
                alpha[e] = w * unit[e];
                z += alpha[e];
            }
            if z > 0.0 {
                for e in r {
                    alpha[e] /= z;
                    unit[e] /= z;
                }
            } else {
                for e in r {
                    alpha[e] = 0.0;
                    unit[e] = 0.0;
                }
            }
        }
        let shape = sv.shape().to_vec();
        let mut inputs = vec![scores];
        inputs.extend(weights);
        let rg = self.rg(&inputs);
        self.push(
            Tensor::new(shape, alpha),
            Op::SegmentSoftmax {
                scores,
                weights,
                segments,
                unit,
            },
            rg,
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    /// Per-row layer normalization with learnable `gain` and `bias` vectors.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        assert_eq!(gv.len(), c);
        assert_eq!(bv.len(), c);
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * c];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * gv.data()[j] + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            Tensor::new(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = t.sum() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(v), Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(v), Op::Sum(a), rg)
    }

    /// Squared Frobenius norm.
    pub fn frob_sq(&mut self, a: Var) -> Var {
        let v = self.value(a).data().iter().map(|x| x * x).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(v), Op::FrobSq(a), rg)
    }

    /// Euclidean norm of each row, as an `m×1` column.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let norms: Vec<f64> = (0..t.rows()).map(|r| l2(t.row(r))).collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(norms.len(), 1, norms), Op::RowNorm(a), rg)
    }

    /// Scales each row to unit length; zero rows stay zero.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        let mut norms = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let nrm = l2(t.row(r));
            norms.push(nrm);
            let row = out.row_mut(r);
            if nrm > 0.0 {
                row.iter_mut().for_each(|x| *x /= nrm);
            } else {
                row.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::RowNormalize { x: a, norms }, rg)
    }

    /// Matrix of pairwise cosine similarities between rows.
    pub fn cosine_similarity_matrix(&mut self, z: Var) -> Var {
        let unit = self.row_normalize(z);
        self.matmul_t(unit, unit)
    }

    /// Summed binary cross-entropy of `pred` (clamped to `[eps, 1-eps]`)
    /// against 0/1 `target`.
    pub fn bce_sum(&mut self, pred: Var, target: &[f64], eps: f64) -> Var {
        let p = self.value(pred);
        assert_eq!(p.len(), target.len(), "bce length mismatch");
        let mut loss = 0.0;
        for (&x, &t) in p.data().iter().zip(target) {
            let q = x.clamp(eps, 1.0 - eps);
            loss -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
        }
        let rg = self.rg(&[pred]);
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                target: target.into(),
                eps,
            },
            rg,
        )
    }

    /// Mean softmax cross-entropy of row logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        let (m, c) = (lv.rows(), lv.cols());
        assert_eq!(labels.len(), m);
        let mut probs = lv.clone().into_data();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
            loss -= row[labels[r]].max(1e-300).ln();
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss / m as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.into(),
                probs,
            },
            rg,
        )
    }

    /// Inverted dropout: zeroes entries with probability `rate` and
    /// rescales survivors. Identity when `!train` or `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64, train: bool, seed: u64) -> Var {
        assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
        if !train || rate == 0.0 {
            return a;
        }
        let rng = CounterRng::new(seed);
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(a);
        let mask: Vec<f64> = (0..t.len() as u64)
            .map(|i| if rng.uniform(i) < rate { 0.0 } else { keep })
            .collect();
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
        );
        let rg = self.rg(&[a]);
        self.push(out, Op::Dropout { x: a, mask }, rg)
    }

    /// Row `e` of the output is row `idx[e]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(t.row(i));
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(idx.len(), c, out), Op::Gather { x: a, idx }, rg)
    }

    /// Output row `r` is the sum of the rows `e` of `a` with `idx[e] == r`.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Rc<[usize]>, rows: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows(), idx.len());
        let c = t.cols();
        let mut out = vec![0.0; rows * c];
        for (e, &r) in idx.iter().enumerate() {
            for (o, x) in out[r * c..(r + 1) * c].iter_mut().zip(t.row(e)) {
                *o += x;
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(rows, c, out), Op::ScatterAdd { x: a, idx }, rg)
    }

    /// Dot product of matching rows, as an `m×1` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "row_dot shape mismatch");
        let out: Vec<f64> = (0..av.rows())
            .map(|r| av.row(r).iter().zip(bv.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::matrix(out.len(), 1, out), Op::RowDot(a, b), rg)
    }

    /// Multiplies row `r` of `a` by `c[r]`.
    pub fn scale_rows(&mut self, a: Var, c: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(c));
        assert_eq!(cv.len(), av.rows(), "scale_rows length mismatch");
        let mut out = av.clone();
        for r in 0..av.rows() {
            let s = cv.data()[r];
            out.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        let rg = self.rg(&[a, c]);
        self.push(out, Op::ScaleRows(a, c), rg)
    }

    /// Forward value `hard`, gradient routed unchanged to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Var {
        assert_eq!(self.value(soft).shape(), hard.shape());
        let rg = self.rg(&[soft]);
        self.push(hard, Op::StraightThrough { soft }, rg)
    }

    /// Reverse sweep from a scalar `loss`. Every differentiable leaf gets a
    /// gradient, zero when it does not influence the loss.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::InvalidParameter(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(node.value.shape()));
        f(slot.data_mut());
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = g.cols();
                // dA = G · op(B)ᵀ
                self.accumulate(grads, *a, |da| {
                    gemm(m, n, k, gd, false, bv.data(), !tb, da, true);
                });
                self.accumulate(grads, *b, |db| {
                    if *tb {
                        // B is n×k: dB = Gᵀ · A
                        gemm(n, m, k, gd, true, av.data(), false, db, true);
                    } else {
                        // B is k×n: dB = Aᵀ · G
                        gemm(k, m, n, av.data(), true, gd, false, db, true);
                    }
                });
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                self.accumulate(grads, *a, |da| add_into(da, gt.data()));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |da| add_into(da, gd));
                self.accumulate(grads, *b, |db| add_into(db, gd));
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, |dx| add_into(dx, gd));
                let n = g.cols();
                self.accumulate(grads, *b, |db| {
                    for row in gd.chunks(n.max(1)) {
                        add_into(db, row);
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |da| add_into(da, gd));
                self.accumulate(grads, *b, |db| {
                    db.iter_mut().zip(gd).for_each(|(d, x)| *d -= x);
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += gd[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for i in 0..db.len() {
                        db[i] += gd[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |da| {
                    da.iter_mut().zip(gd).for_each(|(d, x)| *d += c * x);
                });
            }
            Op::Concat(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(grads, p, |dp| {
                        for r in 0..rows {
                            add_into(
                                &mut dp[r * w..(r + 1) * w],
                                &gd[r * total + off..r * total + off + w],
                            );
                        }
                    });
                    off += w;
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                self.accumulate(grads, *a, |da| {
                    for r in 0..node.value.rows() {
                        let ys = &y[r * c..(r + 1) * c];
                        let gs = &gd[r * c..(r + 1) * c];
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            da[r * c + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                });
            }
            Op::SegmentSoftmax {
                scores,
                weights,
                segments,
                unit,
            } => {
                let alpha = node.value.data();
                let mut centered = vec![0.0; alpha.len()];
                for grp in 0..segments.groups() {
                    let r = segments.range(grp);
                    let dot: f64 = r.clone().map(|e| gd[e] * alpha[e]).sum();
                    for e in r {
                        centered[e] = gd[e] - dot;
                    }
                }
                self.accumulate(grads, *scores, |ds| {
                    for e in 0..ds.len() {
                        ds[e] += alpha[e] * centered[e];
                    }
                });
                if let Some(w) = weights {
                    self.accumulate(grads, *w, |dw| {
                        for e in 0..dw.len() {
                            dw[e] += unit[e] * centered[e];
                        }
                    });
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |da| {
                    for i in 0..da.len() {
                        if av[i] > 0.0 {
                            da[i] += gd[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += gd[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let rows = node.value.rows();
                let gv = self.value(*gain).data();
                self.accumulate(grads, *gain, |dg| {
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] += gd[r * c + j] * xhat[r * c + j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |db| {
                    for r in 0..rows {
                        add_into(db, &gd[r * c..(r + 1) * c]);
                    }
                });
                self.accumulate(grads, *x, |dx| {
                    let mut dxh = vec![0.0; c];
                    for r in 0..rows {
                        let xh = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxh[j] = gd[r * c + j] * gv[j];
                        }
                        let m1 = dxh.iter().sum::<f64>() / c as f64;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[r * c + j] += rstd[r] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let s = gd[0] / n;
                self.accumulate(grads, *a, |da| da.iter_mut().for_each(|d| *d += s));
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.accumulate(grads, *a, |da| da.iter_mut().for_each(|d| *d += s));
            }
            Op::FrobSq(a) => {
                let av = self.value(*a).data();
                let s = 2.0 * gd[0];
                self.accumulate(grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += s * av[i];
                    }
                });
            }
            Op::RowNorm(a) => {
                let av = self.value(*a);
                let c = av.cols();
                let norms = node.value.data();
                self.accumulate(grads, *a, |da| {
                    for r in 0..av.rows() {
                        if norms[r] > 0.0 {
                            let s = gd[r] / norms[r];
                            for j in 0..c {
                                da[r * c + j] += s * av.data()[r * c + j];
                            }
                        }
                    }
                });
            }
            Op::RowNormalize { x, norms } => {
                let y = &node.value;
                let c = y.cols();
                self.accumulate(grads, *x, |dx| {
                    for r in 0..y.rows() {
                        if norms[r] == 0.0 {
                            continue;
                        }
                        let yr = y.row(r);
                        let gr = &gd[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[r * c + j] += (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                });
            }
            Op::Bce { pred, target, eps } => {
                let p = self.value(*pred).data();
                let s = gd[0];
                self.accumulate(grads, *pred, |dp| {
                    for i in 0..dp.len() {
                        let x = p[i];
                        if x < *eps || x > 1.0 - eps {
                            continue;
                        }
                        let t = target[i];
                        dp[i] += s * (-t / x + (1.0 - t) / (1.0 - x));
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let lv = self.value(*logits);
                let (m, c) = (lv.rows(), lv.cols());
                let s = gd[0] / m as f64;
                self.accumulate(grads, *logits, |dl| {
                    for r in 0..m {
                        for j in 0..c {
                            let y = if labels[r] == j { 1.0 } else { 0.0 };
                            dl[r * c + j] += s * (probs[r * c + j] - y);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, |dx| {
                    for i in 0..dx.len() {
                        dx[i] += gd[i] * mask[i];
                    }
                });
            }
            Op::Gather { x, idx } => {
                let c = g.cols();
                self.accumulate(grads, *x, |dx| {
                    for (e, &i) in idx.iter().enumerate() {
                        add_into(&mut dx[i * c..(i + 1) * c], &gd[e * c..(e + 1) * c]);
                    }
                });
            }
            Op::ScatterAdd { x, idx } => {
                let c = g.cols();
                self.accumulate(grads, *x, |dx| {
                    for (e, &r) in idx.iter().enumerate() {
                        add_into(&mut dx[e * c..(e + 1) * c], &gd[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = av.cols();
                self.accumulate(grads, *a, |da| {
                    for r in 0..av.rows() {
                        for j in 0..c {
                            da[r * c + j] += gd[r] * bv.data()[r * c + j];
                        }
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for r in 0..av.rows() {
                        for j in 0..c {
                            db[r * c + j] += gd[r] * av.data()[r * c + j];
                        }
                    }
                });
            }
            Op::ScaleRows(a, s) => {
                let (av, sv) = (self.value(*a), self.value(*s));
                let c = av.cols();
                self.accumulate(grads, *a, |da| {
                    for r in 0..av.rows() {
                        let f = sv.data()[r];
                        for j in 0..c {
                            da[r * c + j] += gd[r * c + j] * f;
                        }
                    }
                });
                self.accumulate(grads, *s, |ds| {
                    for r in 0..av.rows() {
                        ds[r] += av.row(r).iter().zip(&gd[r * c..(r + 1) * c]).map(|(x, y)| x * y).sum::<f64>();
                    }
                });
            }
            Op::StraightThrough { soft } => {
                self.accumulate(grads, *soft, |ds| add_into(ds, gd));
            }
        }
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[inline]
fn l2(row: &[f64]) -> f64 {
    row.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
