//! Differentiable edge perturbation: relaxed Bernoulli (binary
//! Gumbel-Softmax) samples of the augmented adjacency and the BCE
//! regularizer that keeps them close to the input graph.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::CounterRng;
use crate::structure::SymSparse;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logits and
/// inside the BCE.
pub const EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    /// Edge weight is the relaxed sample.
    Relaxed,
    /// Edge weight is the thresholded sample, no gradient.
    Hard,
    /// Hard forward value, gradient through the relaxed sample.
    StraightThrough,
}

/// One sample of the augmented graph over the candidate pairs of `Ã`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedGraph {
    /// Unordered candidate pairs `(i, j)`, `i < j`, sorted.
    pub pairs: Vec<(usize, usize)>,
    /// `logit(clamp(Ã_ij))` per pair.
    pub logits: Vec<f64>,
    /// `g1 - g2` per pair (zero for deterministic graphs).
    pub noise: Vec<f64>,
    pub soft: Vec<f64>,
    pub hard: Vec<bool>,
    pub tau: f64,
    pub mode: SampleMode,
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(EPS, 1.0 - EPS);
    (p / (1.0 - p)).ln()
}

/// Draws `A'` from `Bernoulli(Ã)` through the binary concrete relaxation
/// `σ((logit Ã + g1 - g2) / τ)`. Pair `p` uses counter draws `2p` and
/// `2p + 1` of `seed`.
pub fn sample_augmented(
    a_tilde: &SymSparse,
    tau: f64,
    seed: u64,
    mode: SampleMode,
) -> Result<AugmentedGraph> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("temperature must be > 0, got {tau}")));
    }
    let rng = CounterRng::new(seed);
    let count = a_tilde.nnz();
    let mut pairs = Vec::with_capacity(count);
    let mut logits = Vec::with_capacity(count);
    let mut noise = Vec::with_capacity(count);
    let mut soft = Vec::with_capacity(count);
    let mut hard = Vec::with_capacity(count);
    for (p, &(pair, prob)) in a_tilde.entries().iter().enumerate() {
        let l = logit(prob);
        let g = rng.gumbel(2 * p as u64) - rng.gumbel(2 * p as u64 + 1);
        let s = sigmoid((l + g) / tau);
        pairs.push(pair);
        logits.push(l);
        noise.push(g);
        soft.push(s);
        hard.push(s > 0.5);
    }
    Ok(AugmentedGraph {
        pairs,
        logits,
        noise,
        soft,
        hard,
        tau,
        mode,
    })
}

impl AugmentedGraph {
    /// Noise-free graph `A'_ij = 1[Ã_ij > 0.5]` used at inference.
    pub fn deterministic(a_tilde: &SymSparse) -> Self {
        let pairs: Vec<_> = a_tilde.entries().iter().map(|e| e.0).collect();
        let probs: Vec<f64> = a_tilde.entries().iter().map(|e| e.1).collect();
        AugmentedGraph {
            logits: probs.iter().map(|&p| logit(p)).collect(),
            noise: vec![0.0; pairs.len()],
            soft: probs.iter().map(|&p| p.clamp(EPS, 1.0 - EPS)).collect(),
            hard: probs.iter().map(|&p| p > 0.5).collect(),
            pairs,
            tau: 1.0,
            mode: SampleMode::Hard,
        }
    }

    /// The input graph itself: every edge present with weight 1.
    pub fn identity(g: &Graph) -> Self {
        let pairs = g.edges().to_vec();
        let m = pairs.len();
        AugmentedGraph {
            pairs,
            logits: vec![logit(1.0); m],
            noise: vec![0.0; m],
            soft: vec![1.0 - EPS; m],
            hard: vec![true; m],
            tau: 1.0,
            mode: SampleMode::Hard,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pairs present in the hard sample.
    pub fn hard_edges(&self) -> Vec<(usize, usize)> {
        self.pairs
            .iter()
            .zip(&self.hard)
            .filter(|(_, &h)| h)
            .map(|(&p, _)| p)
            .collect()
    }

    fn hard_tensor(&self) -> Tensor {
        Tensor::matrix(
            self.len(),
            1,
            self.hard.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// Relaxed sample recomputed on the tape from a logit variable, so
    /// gradients reach whatever produced the logits.
    pub fn soft_from_logits(&self, tape: &mut Tape, logits: Var) -> Var {
        assert_eq!(tape.value(logits).len(), self.len());
        let noise = tape.constant(Tensor::matrix(self.len(), 1, self.noise.clone()));
        let shifted = tape.add(logits, noise);
        let scaled = tape.scale(shifted, 1.0 / self.tau);
        tape.sigmoid(scaled)
    }

    /// Relaxed sample as a tape variable derived from the fixed logits.
    pub fn soft_var(&self, tape: &mut Tape) -> Var {
        let logits = tape.constant(Tensor::matrix(self.len(), 1, self.logits.clone()));
        self.soft_from_logits(tape, logits)
    }

    /// Per-pair edge weight as consumed by the message-passing layers,
    /// according to the sampling mode. Returns `(weight, soft)`.
    pub fn weight_var(&self, tape: &mut Tape) -> (Var, Var) {
        let soft = self.soft_var(tape);
        let weight = match self.mode {
            SampleMode::Relaxed => soft,
            SampleMode::Hard => tape.constant(self.hard_tensor()),
            SampleMode::StraightThrough => tape.straight_through(soft, self.hard_tensor()),
        };
        (weight, soft)
    }
}

/// `-Σ [A log A' + (1 - A) log(1 - A')]` over the candidate pairs, with
/// `A'` the relaxed sample clamped to `[EPS, 1 - EPS]`.
pub fn augmentation_bce(tape: &mut Tape, soft: Var, aug: &AugmentedGraph, g: &Graph) -> Var {
    let target: Vec<f64> = aug
        .pairs
        .iter()
        .map(|&(i, j)| if g.has_edge(i, j) { 1.0 } else { 0.0 })
        .collect();
    debug_assert!(
        g.edges().iter().all(|e| aug.pairs.binary_search(e).is_ok()),
        "support must cover every original edge"
    );
    tape.bce_sum(soft, &target, EPS)
}

/// Fraction of original edges missing from the hard sample.
pub fn edge_drop_rate(aug: &AugmentedGraph, g: &Graph) -> f64 {
    if g.num_edges() == 0 {
        return 0.0;
    }
    let dropped = aug
        .pairs
        .iter()
        .zip(&aug.hard)
        .filter(|(&(i, j), &h)| !h && g.has_edge(i, j))
        .count();
    dropped as f64 / g.num_edges() as f64
}
