//! Stochastic block model graphs for desk-scale experiments.
//!
//! Labels are block ids. Features are the one-hot block indicator plus
//! Gaussian noise. An optional degree skew multiplies edge probabilities by
//! per-node weights `w_v ∝ rank(v)^-γ` (ranks from a seeded permutation,
//! weights normalized to mean 1), giving a long-tailed degree distribution.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::{chacha, derive_seed};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbmSpec {
    pub blocks: Vec<usize>,
    pub p_in: f64,
    pub p_out: f64,
    #[serde(default)]
    pub degree_skew: Option<f64>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_sigma() -> f64 {
    0.5
}

impl SbmSpec {
    /// Equal-size blocks.
    pub fn uniform(blocks: usize, size: usize, p_in: f64, p_out: f64, sigma: f64, seed: u64) -> Self {
        SbmSpec {
            blocks: vec![size; blocks],
            p_in,
            p_out,
            degree_skew: None,
            sigma,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.blocks.contains(&0) {
            return Err(Error::config("synthetic.blocks", "block sizes must be positive"));
        }
        for (field, p) in [("synthetic.p_in", self.p_in), ("synthetic.p_out", self.p_out)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field, format!("probability {p} outside [0, 1]")));
            }
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("synthetic.sigma", "must be non-negative"));
        }
        if let Some(g) = self.degree_skew {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::config("synthetic.degree_skew", "must be non-negative"));
            }
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.blocks.iter().sum()
    }
}

/// Per-node degree multipliers, mean 1.
pub fn degree_weights(n: usize, gamma: f64, seed: u64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut chacha(seed));
    let mut w = vec![0.0; n];
    for (rank, &v) in order.iter().enumerate() {
        w[v] = ((rank + 1) as f64).powf(-gamma);
    }
    let mean = w.iter().sum::<f64>() / n as f64;
    w.iter_mut().for_each(|x| *x /= mean);
    w
}

pub fn synth_sbm(spec: &SbmSpec) -> Result<Graph> {
    spec.validate()?;
    let n = spec.num_nodes();
    let labels: Vec<usize> = spec
        .blocks
        .iter()
        .enumerate()
        .flat_map(|(b, &s)| std::iter::repeat(b).take(s))
        .collect();
    let weights = spec
        .degree_skew
        .map(|g| degree_weights(n, g, derive_seed(spec.seed, 1)));
    let mut rng = chacha(derive_seed(spec.seed, 2));
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let base = if labels[i] == labels[j] { spec.p_in } else { spec.p_out };
            let p = match &weights {
                Some(w) => (base * w[i] * w[j]).min(1.0),
                None => base,
            };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    if edges.is_empty() {
        return Err(Error::InvalidParameter("generated graph has no edges".into()));
    }
    let c = spec.blocks.len();
    let noise = Normal::new(0.0, spec.sigma).expect("sigma validated");
    let mut frng = chacha(derive_seed(spec.seed, 3));
    let mut feats = Tensor::zeros(&[n, c]);
    for (v, &b) in labels.iter().enumerate() {
        for (col, x) in feats.row_mut(v).iter_mut().enumerate() {
            *x = f64::from(u8::from(col == b)) + noise.sample(&mut frng);
        }
    }
    Graph::new(n, &edges, feats, Some(labels))
}
