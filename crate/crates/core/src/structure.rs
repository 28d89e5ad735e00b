//! Per-graph structural tensors computed once before training: community
//! clusters, context sets, degree-weighted scores `D`, sampling
//! probabilities `Ã = ξA + ζD`, multi-step Jaccard proximities and
//! log-scaled random-walk targets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_khop_index, transition_powers, Graph, KHopIndex};
use crate::kmeans::{kmeans, ClusterAssignment};
use crate::tensor::Tensor;

/// Symmetric sparse matrix with zero diagonal, stored once per unordered
/// pair `(i, j)`, `i < j`, sorted.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SymSparse {
    n: usize,
    entries: Vec<((usize, usize), f64)>,
}

impl SymSparse {
    pub fn from_entries(n: usize, mut entries: Vec<((usize, usize), f64)>) -> Self {
        for e in &mut entries {
            let (i, j) = e.0;
            assert!(i != j && i < n && j < n);
            e.0 = (i.min(j), i.max(j));
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        entries.dedup_by(|a, b| a.0 == b.0);
        entries.retain(|e| e.1 != 0.0);
        SymSparse { n, entries }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let key = (i.min(j), i.max(j));
        self.entries
            .binary_search_by(|e| e.0.cmp(&key))
            .map_or(0.0, |pos| self.entries[pos].1)
    }

    /// Nonzero entries with `i < j`.
    pub fn entries(&self) -> &[((usize, usize), f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.n, self.n]);
        for &((i, j), v) in &self.entries {
            t.set(i, j, v);
            t.set(j, i, v);
        }
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextConfig {
    pub khop: usize,
    pub clusters: usize,
    pub xi: f64,
    pub zeta: f64,
    pub p_steps: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            khop: 2,
            clusters: 5,
            xi: 0.8,
            zeta: 0.2,
            p_steps: 3,
        }
    }
}

/// One unordered pair eligible for the augmented graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub i: usize,
    pub j: usize,
    pub is_edge: bool,
    pub d: f64,
    pub a_tilde: f64,
    /// Jaccard similarity of the `l`-hop neighborhoods, `l = 1..=k`.
    pub proximity: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct StructuralContext {
    pub khop: KHopIndex,
    pub clusters: ClusterAssignment,
    pub contexts: Vec<Vec<usize>>,
    pub d_matrix: SymSparse,
    pub a_tilde: SymSparse,
    /// Original edges and context pairs, sorted by `(i, j)`, `i < j`.
    pub candidates: Vec<Candidate>,
    pub m_targets: Vec<Tensor>,
    pub xi: f64,
    pub zeta: f64,
}

impl StructuralContext {
    pub fn build(g: &Graph, cfg: &ContextConfig, seed: u64) -> Result<Self> {
        let m = cfg.clusters.min(g.n());
        let clusters = kmeans(g.features(), m, seed)?;
        Self::build_with_clusters(g, clusters, cfg)
    }

    pub fn build_with_clusters(
        g: &Graph,
        clusters: ClusterAssignment,
        cfg: &ContextConfig,
    ) -> Result<Self> {
        check_coefficients(cfg.xi, cfg.zeta)?;
        if clusters.assign.len() != g.n() {
            return Err(Error::Consistency("cluster assignment length differs from n".into()));
        }
        let khop = build_khop_index(g, cfg.khop)?;
        let contexts: Vec<Vec<usize>> = (0..g.n())
            .into_par_iter()
            .map(|v| context_set(g, &khop, &clusters, v))
            .collect();
        let d_matrix = degree_weight_matrix(g, &contexts);
        let a_tilde = compose_a_tilde(g, &d_matrix, cfg.xi, cfg.zeta)?;

        let mut pairs: Vec<(usize, usize)> = g.edges().to_vec();
        for (i, ctx) in contexts.iter().enumerate() {
            pairs.extend(ctx.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        pairs.sort_unstable();
        pairs.dedup();
        let candidates = pairs
            .par_iter()
            .map(|&(i, j)| Candidate {
                i,
                j,
                is_edge: g.has_edge(i, j),
                d: d_matrix.get(i, j),
                a_tilde: a_tilde.get(i, j),
                proximity: proximity_vector(&khop, i, j),
            })
            .collect();

        let m_targets = transition_targets(g, cfg.p_steps)?;
        Ok(StructuralContext {
            khop,
            clusters,
            contexts,
            d_matrix,
            a_tilde,
            candidates,
            m_targets,
            xi: cfg.xi,
            zeta: cfg.zeta,
        })
    }

    pub fn n(&self) -> usize {
        self.contexts.len()
    }

    pub fn k(&self) -> usize {
        self.khop.k()
    }

    /// Index of the candidate for the unordered pair `(i, j)`.
    pub fn candidate_index(&self, i: usize, j: usize) -> Option<usize> {
        let key = (i.min(j), i.max(j));
        self.candidates.binary_search_by(|c| (c.i, c.j).cmp(&key)).ok()
    }
}

pub fn check_coefficients(xi: f64, zeta: f64) -> Result<()> {
    if !(xi >= 0.0 && zeta >= 0.0 && xi + zeta <= 1.0 + 1e-12) {
        return Err(Error::InvalidParameter(format!(
            "mixing coefficients must satisfy xi >= 0, zeta >= 0, xi + zeta <= 1 (got {xi}, {zeta})"
        )));
    }
    Ok(())
}

/// Nodes reachable from `v` within `k` hops that share its cluster.
pub fn context_set(
    _g: &Graph,
    kh: &KHopIndex,
    clusters: &ClusterAssignment,
    v: usize,
) -> Vec<usize> {
    let c = clusters.assign[v];
    kh.within(v)
        .iter()
        .filter(|&&(u, _)| clusters.assign[u] == c)
        .map(|&(u, _)| u)
        .collect()
}

/// `D_ij = 1/√(d_i d_j)` on context pairs, zero elsewhere.
pub fn degree_weight_matrix(g: &Graph, contexts: &[Vec<usize>]) -> SymSparse {
    let mut entries = Vec::new();
    for (i, ctx) in contexts.iter().enumerate() {
        let di = g.degree(i);
        for &j in ctx.iter().filter(|&&j| j > i) {
            let dj = g.degree(j);
            if di == 0 || dj == 0 {
                continue;
            }
            entries.push(((i, j), 1.0 / ((di * dj) as f64).sqrt()));
        }
    }
    SymSparse::from_entries(g.n(), entries)
}

/// `Ã = ξA + ζD`.
pub fn compose_a_tilde(g: &Graph, d: &SymSparse, xi: f64, zeta: f64) -> Result<SymSparse> {
    check_coefficients(xi, zeta)?;
    let mut entries: Vec<((usize, usize), f64)> =
        g.edges().iter().map(|&e| (e, xi + zeta * d.get(e.0, e.1))).collect();
    entries.extend(
        d.entries()
            .iter()
            .filter(|((i, j), _)| !g.has_edge(*i, *j))
            .map(|&(e, v)| (e, zeta * v)),
    );
    Ok(SymSparse::from_entries(g.n(), entries))
}

/// Jaccard similarity of `N^(l)(i)` and `N^(l)(j)` for `l = 1..=k`; zero
/// when both neighborhoods are empty.
pub fn proximity_vector(kh: &KHopIndex, i: usize, j: usize) -> Vec<f64> {
    let k = kh.k();
    let (a, b) = (kh.within(i), kh.within(j));
    // Histograms by the hop at which an element enters the intersection
    // (max of its distances) and the union (min of its distances).
    let mut inter = vec![0usize; k + 1];
    let mut union = vec![0usize; k + 1];
    let (mut x, mut y) = (0, 0);
    while x < a.len() || y < b.len() {
        match (a.get(x), b.get(y)) {
            (Some(&(u, du)), Some(&(w, dw))) if u == w => {
                inter[du.max(dw)] += 1;
                union[du.min(dw)] += 1;
                x += 1;
                y += 1;
            }
            (Some(&(u, du)), Some(&(w, _))) if u < w => {
                union[du] += 1;
                x += 1;
            }
            (Some(&(_, du)), None) => {
                union[du] += 1;
                x += 1;
            }
            (_, Some(&(_, dw))) => {
                union[dw] += 1;
                y += 1;
            }
            (None, None) => unreachable!(),
        }
    }
    let (mut ci, mut cu) = (0, 0);
    (1..=k)
        .map(|l| {
            ci += inter[l];
            cu += union[l];
            if cu == 0 {
                0.0
            } else {
                ci as f64 / cu as f64
            }
        })
        .collect()
}

/// `M^(p)_ij = log(1 + n·T̄^(p)_ij) / log(1 + n)` with `T̄^(p)` the mean of
/// the first `p` transition powers.
pub fn transition_targets(g: &Graph, p_max: usize) -> Result<Vec<Tensor>> {
    let powers = transition_powers(g, p_max)?;
    let n = g.n() as f64;
    let denom = (1.0 + n).ln();
    let mut acc = Tensor::zeros(&[g.n(), g.n()]);
    let mut out = Vec::with_capacity(p_max);
    for (idx, t) in powers.iter().enumerate() {
        acc.data_mut()
            .iter_mut()
            .zip(t.data())
            .for_each(|(a, b)| *a += b);
        let p = (idx + 1) as f64;
        out.push(acc.map(|s| (1.0 + n * s / p).ln() / denom));
    }
    Ok(out)
}
