//! The graph transformer: input projection, structural multi-head
//! self-attention over the augmented graph, residual + LayerNorm + FFN
//! blocks, and the feature decoder.
//!
//! Attention for node `i` runs over its self-loop and its neighbors in the
//! augmented graph. The score of a pair combines query/key projections of
//! node states and of the pair's proximity embedding `f_s(s_ij)`, plus the
//! degree bias `Φ · f_d(D_ij)`:
//!
//! ```text
//! q_ij  = Wq_n h_i + Wq_s f_s(s_ij)
//! k_ij  = Wk_n h_j + Wk_s f_s(s_ij)
//! score = q_ij · k_ij / √d_k + Φ · f_d(D_ij)
//! ```
//!
//! Pairs carry an edge weight `w` (1 for self-loops). The softmax over a
//! node's support is weighted, `w·exp(score) / Σ w·exp(score)`, so a
//! dropped pair (`w = 0`) contributes nothing while a straight-through
//! weight still receives a gradient.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentedGraph, SampleMode};
use crate::autodiff::{Binding, ParamId, ParamStore, Segments, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::{chacha, derive_seed};
use crate::structure::{proximity_vector, StructuralContext};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub dropout: f64,
    /// Disable to get plain dot-product attention (no proximity or degree terms).
    #[serde(default = "default_true")]
    pub structural_attention: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            heads: 4,
            hidden: 64,
            dropout: 0.1,
            structural_attention: true,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden == 0 {
            return Err(Error::config("model", "heads and hidden must be positive"));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::config(
                "model.hidden",
                format!("{} is not divisible by {} heads", self.hidden, self.heads),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct HeadIds {
    wq_n: ParamId,
    wk_n: ParamId,
    v: ParamId,
    structural: Option<StructuralHeadIds>,
}

#[derive(Debug, Clone)]
struct StructuralHeadIds {
    wq_s: ParamId,
    wk_s: ParamId,
    phi: ParamId,
}

#[derive(Debug, Clone)]
struct LayerIds {
    heads: Vec<HeadIds>,
    structural: Option<StructuralLayerIds>,
    out: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
    w1: ParamId,
    w2: ParamId,
}

#[derive(Debug, Clone)]
struct StructuralLayerIds {
    fs_w: ParamId,
    fs_b: ParamId,
    fd_w: ParamId,
    fd_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub input_dim: usize,
    pub khop: usize,
    pub params: ParamStore,
    w0: ParamId,
    b0: ParamId,
    layers: Vec<LayerIds>,
    dec_w: ParamId,
    dec_b: ParamId,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let len = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..len).map(|_| rng.random_range(-bound..bound)).collect(),
    )
}

impl Model {
    /// Builds a model with every weight drawn from `U(-1/√fan_in, 1/√fan_in)`
    /// and LayerNorm gains at 1, biases at 0.
    pub fn new(config: ModelConfig, input_dim: usize, khop: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 || khop == 0 {
            return Err(Error::InvalidParameter("input_dim and khop must be positive".into()));
        }
        let d = config.hidden;
        let dk = config.head_dim();
        let mut rng = chacha(seed);
        let mut p = ParamStore::new();
        let w0 = p.add("input.w", uniform(&mut rng, &[d, input_dim], input_dim));
        let b0 = p.add("input.b", uniform(&mut rng, &[d], input_dim));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let structural = config.structural_attention.then(|| StructuralLayerIds {
                fs_w: p.add(format!("layer{l}.fs.w"), uniform(&mut rng, &[d, khop], khop)),
                fs_b: p.add(format!("layer{l}.fs.b"), uniform(&mut rng, &[d, 1], khop)),
                fd_w: p.add(format!("layer{l}.fd.w"), uniform(&mut rng, &[d, 1], 1)),
                fd_b: p.add(format!("layer{l}.fd.b"), uniform(&mut rng, &[d, 1], 1)),
            });
            let heads = (0..config.heads)
                .map(|k| {
                    let pre = format!("layer{l}.head{k}");
                    HeadIds {
                        wq_n: p.add(format!("{pre}.wq_n"), uniform(&mut rng, &[dk, d], d)),
                        wk_n: p.add(format!("{pre}.wk_n"), uniform(&mut rng, &[dk, d], d)),
                        v: p.add(format!("{pre}.v"), uniform(&mut rng, &[dk, d], d)),
                        structural: config.structural_attention.then(|| StructuralHeadIds {
                            wq_s: p.add(format!("{pre}.wq_s"), uniform(&mut rng, &[dk, d], d)),
                            wk_s: p.add(format!("{pre}.wk_s"), uniform(&mut rng, &[dk, d], d)),
                            phi: p.add(format!("{pre}.phi"), uniform(&mut rng, &[1, d], d)),
                        }),
                    }
                })
                .collect();
            layers.push(LayerIds {
                heads,
                structural,
                out: p.add(format!("layer{l}.out"), uniform(&mut rng, &[d, d], d)),
                ln_gain: p.add(format!("layer{l}.ln.gain"), Tensor::full(&[d], 1.0)),
                ln_bias: p.add(format!("layer{l}.ln.bias"), Tensor::zeros(&[d])),
                w1: p.add(format!("layer{l}.ffn.w1"), uniform(&mut rng, &[2 * d, d], d)),
                w2: p.add(format!("layer{l}.ffn.w2"), uniform(&mut rng, &[d, 2 * d], 2 * d)),
            });
        }
        let dec_w = p.add("decoder.w", uniform(&mut rng, &[input_dim, d], d));
        let dec_b = p.add("decoder.b", uniform(&mut rng, &[input_dim], d));
        Ok(Model {
            config,
            input_dim,
            khop,
            params: p,
            w0,
            b0,
            layers,
            dec_w,
            dec_b,
        })
    }

    /// `h⁰ = X W0ᵀ + b0`.
    pub fn input_projection(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Var {
        let h = tape.matmul_t(x, bind.var(self.w0));
        tape.add_row(h, bind.var(self.b0))
    }

    /// Edge-level attention scores of one head, one per support entry.
    pub fn attention_scores(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        h: Var,
        topo: &Topology,
        layer: usize,
        head: usize,
        pair_terms: Option<PairTerms>,
    ) -> Var {
        let ids = &self.layers[layer].heads[head];
        let a = tape.matmul_t(h, bind.var(ids.wq_n));
        let b = tape.matmul_t(h, bind.var(ids.wk_n));
        let mut q = tape.gather_rows(a, topo.src.clone());
        let mut k = tape.gather_rows(b, topo.dst.clone());
        // W_s f_s(s) is applied as (W_s [F_s | b_s]) [s; 1] so the per-entry
        // work stays at k+1 columns.
        if let (Some(s_ids), Some(pt)) = (&ids.structural, pair_terms) {
            let pq = tape.matmul(bind.var(s_ids.wq_s), pt.fs);
            let pk = tape.matmul(bind.var(s_ids.wk_s), pt.fs);
            let sq = tape.matmul_t(pt.s_aug, pq);
            let sk = tape.matmul_t(pt.s_aug, pk);
            q = tape.add(q, sq);
            k = tape.add(k, sk);
        }
        let dot = tape.row_dot(q, k);
        let scaled = tape.scale(dot, 1.0 / (self.config.head_dim() as f64).sqrt());
        match (&ids.structural, pair_terms) {
            (Some(s_ids), Some(pt)) => {
                let c = tape.matmul(bind.var(s_ids.phi), pt.fd);
                let bias = tape.matmul_t(pt.d_aug, c);
                tape.add(scaled, bias)
            }
            _ => scaled,
        }
    }

    /// Per-layer pair embedding maps `[F_s | b_s]` (d×(k+1)) and
    /// `[w_d | b_d]` (d×2), shared by all heads.
    pub fn pair_terms(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        inputs: (Var, Var),
        layer: usize,
    ) -> Option<PairTerms> {
        let ids = self.layers[layer].structural.as_ref()?;
        let fs = tape.concat(&[bind.var(ids.fs_w), bind.var(ids.fs_b)]);
        let fd = tape.concat(&[bind.var(ids.fd_w), bind.var(ids.fd_b)]);
        Some(PairTerms {
            s_aug: inputs.0,
            d_aug: inputs.1,
            fs,
            fd,
        })
    }

    /// Softmax over each node's support, weighted message sum per head,
    /// head concatenation and output projection.
    #[allow(clippy::too_many_arguments)]
    pub fn attention_aggregate(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        h: Var,
        topo: &Topology,
        weights: Option<Var>,
        layer: usize,
        scores: &[Var],
        train: bool,
        seed: u64,
    ) -> Var {
        let lids = &self.layers[layer];
        let n = tape.value(h).rows();
        let mut outs = Vec::with_capacity(scores.len());
        for (k, &score) in scores.iter().enumerate() {
            let alpha = tape.masked_softmax(score, weights, topo.segments.clone());
            let alpha = tape.dropout(
                alpha,
                self.config.dropout,
                train,
                derive_seed(seed, (layer * self.config.heads + k) as u64),
            );
            let v = tape.matmul_t(h, bind.var(lids.heads[k].v));
            let vj = tape.gather_rows(v, topo.dst.clone());
            let msg = tape.scale_rows(vj, alpha);
            outs.push(tape.scatter_add_rows(msg, topo.src.clone(), n));
        }
        let cat = tape.concat(&outs);
        tape.matmul_t(cat, bind.var(lids.out))
    }

    /// `u = LN(h + attn)`, `h' = W2 ReLU(W1 u)`.
    #[allow(clippy::too_many_arguments)]
    pub fn ffn_block(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        h_in: Var,
        attn: Var,
        layer: usize,
        train: bool,
        seed: u64,
    ) -> Var {
        let lids = &self.layers[layer];
        let res = tape.add(h_in, attn);
        let u = tape.layer_norm(res, bind.var(lids.ln_gain), bind.var(lids.ln_bias), LAYER_NORM_EPS);
        let hid = tape.matmul_t(u, bind.var(lids.w1));
        let hid = tape.relu(hid);
        let hid = tape.dropout(
            hid,
            self.config.dropout,
            train,
            derive_seed(seed, 0x1000 + layer as u64),
        );
        tape.matmul_t(hid, bind.var(lids.w2))
    }

    /// Full forward pass. `weights` are the per-pair edge weights from
    /// [`AugmentedGraph::weight_var`] (or `None` when every supported pair
    /// has weight 1).
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        g: &Graph,
        topo: &Topology,
        pair_weights: Option<Var>,
        train: bool,
        seed: u64,
    ) -> Forward {
        let x = tape.constant(g.features().clone());
        let mut h = self.input_projection(tape, bind, x);
        let weights = pair_weights.map(|w| topo.edge_weights(tape, w));
        let inputs = topo.constants(tape);
        for l in 0..self.layers.len() {
            let terms = self.pair_terms(tape, bind, inputs, l);
            let scores: Vec<Var> = (0..self.config.heads)
                .map(|k| self.attention_scores(tape, bind, h, topo, l, k, terms))
                .collect();
            let attn = self.attention_aggregate(tape, bind, h, topo, weights, l, &scores, train, seed);
            h = self.ffn_block(tape, bind, h, attn, l, train, seed);
        }
        let z = h;
        let xh = tape.matmul_t(z, bind.var(self.dec_w));
        let x_hat = tape.add_row(xh, bind.var(self.dec_b));
        Forward { z, x_hat }
    }

    /// Eval-mode embeddings on the deterministic augmented graph.
    pub fn embed(&self, g: &Graph, ctx: &StructuralContext) -> Tensor {
        let aug = AugmentedGraph::deterministic(&ctx.a_tilde);
        self.embed_with(g, ctx, &aug)
    }

    pub fn embed_with(&self, g: &Graph, ctx: &StructuralContext, aug: &AugmentedGraph) -> Tensor {
        let topo = Topology::from_augmented(ctx, aug);
        let mut tape = Tape::new();
        let bind = self.params.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &bind, g, &topo, None, false, 0);
        tape.value(out.z).clone()
    }

    /// Number of transformer layers actually in use.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    #[cfg(test)]
    fn truncated(&self, layers: usize) -> Model {
        let mut m = self.clone();
        m.layers.truncate(layers);
        m
    }
}

/// Tape handles for the pair inputs and one layer's pair embedding maps.
#[derive(Debug, Clone, Copy)]
pub struct PairTerms {
    pub s_aug: Var,
    pub d_aug: Var,
    pub fs: Var,
    pub fd: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub z: Var,
    pub x_hat: Var,
}

/// Directed attention support: a self-loop per node plus both directions of
/// every included pair, sorted by source node.
#[derive(Debug, Clone)]
pub struct Topology {
    pub n: usize,
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
    /// Index into the pair list, or `num_pairs` for self-loops.
    pub pair_index: Rc<[usize]>,
    pub num_pairs: usize,
    pub segments: Rc<Segments>,
    /// `E × (k+1)`: raw proximity vector (all ones on self-loops) and a
    /// trailing 1.
    pub s_aug: Tensor,
    /// `E × 2`: degree-weighted score (zero on self-loops) and a trailing 1.
    pub d_aug: Tensor,
}

impl Topology {
    /// Support over `pairs`, keeping only those with `include[p]` when given.
    pub fn new(ctx: &StructuralContext, pairs: &[(usize, usize)], include: Option<&[bool]>) -> Self {
        let n = ctx.n();
        let k = ctx.k();
        let mut entries: Vec<(usize, usize, usize)> = (0..n).map(|i| (i, i, pairs.len())).collect();
        for (p, &(i, j)) in pairs.iter().enumerate() {
            if include.is_some_and(|inc| !inc[p]) {
                continue;
            }
            entries.push((i, j, p));
            entries.push((j, i, p));
        }
        entries.sort_unstable();
        let mut s_aug = Vec::with_capacity(entries.len() * (k + 1));
        let mut d_aug = Vec::with_capacity(entries.len() * 2);
        for &(i, j, _) in &entries {
            if i == j {
                s_aug.extend(std::iter::repeat(1.0).take(k));
                d_aug.push(0.0);
            } else {
                match ctx.candidate_index(i, j) {
                    Some(c) => s_aug.extend_from_slice(&ctx.candidates[c].proximity),
                    None => s_aug.extend(proximity_vector(&ctx.khop, i, j)),
                }
                d_aug.push(ctx.d_matrix.get(i, j));
            }
            s_aug.push(1.0);
            d_aug.push(1.0);
        }
        let src: Vec<usize> = entries.iter().map(|e| e.0).collect();
        let e = entries.len();
        Topology {
            n,
            segments: Rc::new(Segments::from_sorted_ids(&src, n)),
            src: src.into(),
            dst: entries.iter().map(|e| e.1).collect(),
            pair_index: entries.iter().map(|e| e.2).collect(),
            num_pairs: pairs.len(),
            s_aug: Tensor::matrix(e, k + 1, s_aug),
            d_aug: Tensor::matrix(e, 2, d_aug),
        }
    }

    /// Support for an augmented sample: hard samples keep only present
    /// pairs; relaxed and straight-through samples keep every candidate.
    pub fn from_augmented(ctx: &StructuralContext, aug: &AugmentedGraph) -> Self {
        match aug.mode {
            SampleMode::Hard => Topology::new(ctx, &aug.pairs, Some(&aug.hard)),
            _ => Topology::new(ctx, &aug.pairs, None),
        }
    }

    /// Registers the pair inputs on the tape once per forward pass.
    pub fn constants(&self, tape: &mut Tape) -> (Var, Var) {
        (tape.constant(self.s_aug.clone()), tape.constant(self.d_aug.clone()))
    }

    pub fn num_entries(&self) -> usize {
        self.src.len()
    }

    /// Expands per-pair weights (`num_pairs × 1`) to per-entry weights,
    /// with weight 1 on self-loops.
    pub fn edge_weights(&self, tape: &mut Tape, pair_weights: Var) -> Var {
        assert_eq!(tape.value(pair_weights).len(), self.num_pairs);
        let one = tape.constant(Tensor::full(&[1, 1], 1.0));
        let ext = if self.num_pairs == 0 {
            one
        } else {
            tape.concat_rows(pair_weights, one)
        };
        tape.gather_rows(ext, self.pair_index.clone())
    }
}

impl Tape {
    /// Stacks an `m×1` column on top of a `1×1` value.
    fn concat_rows(&mut self, top: Var, bottom: Var) -> Var {
        let t = self.transpose(top);
        let b = self.transpose(bottom);
        let row = self.concat(&[t, b]);
        self.transpose(row)
    }
}
