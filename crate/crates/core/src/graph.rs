//! Undirected attributed graphs in compressed sparse row form, k-hop
//! neighborhoods and random-walk transition powers.

use std::collections::{HashSet, VecDeque};
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Undirected simple graph with dense node features and optional labels.
///
/// Each undirected edge is stored once in `edges` (`u < v`) and twice in the
/// CSR adjacency. Neighbor lists are sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    features: Tensor,
    labels: Option<Vec<usize>>,
}

impl Graph {
    /// Builds a validated graph. Self-loops, duplicate edges, out-of-range
    /// endpoints and row-count mismatches are rejected.
    pub fn new(
        n: usize,
        edges: &[(usize, usize)],
        features: Tensor,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if features.rank() != 2 || features.rows() != n {
            return Err(Error::Consistency(format!(
                "feature matrix has shape {:?}, expected {n} rows",
                features.shape()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Consistency(format!(
                    "label count {} does not match node count {n}",
                    l.len()
                )));
            }
        }
        let mut seen = HashSet::with_capacity(edges.len());
        let mut canon = Vec::with_capacity(edges.len());
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::Consistency(format!(
                    "edge ({u}, {v}) references a node >= {n}"
                )));
            }
            if u == v {
                return Err(Error::Consistency(format!("self-loop on node {u}")));
            }
            let e = (u.min(v), u.max(v));
            if !seen.insert(e) {
                return Err(Error::Consistency(format!("duplicate edge ({u}, {v})")));
            }
            canon.push(e);
        }
        canon.sort_unstable();

        let mut degree = vec![0usize; n];
        for &(u, v) in &canon {
            degree[u] += 1;
            degree[v] += 1;
        }
        let mut offsets = vec![0usize; n + 1];
        for i in 0..n {
            offsets[i + 1] = offsets[i] + degree[i];
        }
        let mut fill = offsets.clone();
        let mut neighbors = vec![0usize; offsets[n]];
        for &(u, v) in &canon {
            neighbors[fill[u]] = v;
            fill[u] += 1;
            neighbors[fill[v]] = u;
            fill[v] += 1;
        }
        for i in 0..n {
            neighbors[offsets[i]..offsets[i + 1]].sort_unstable();
        }

        Ok(Graph {
            n,
            edges: canon,
            offsets,
            neighbors,
            features,
            labels,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Undirected edges, each once with `u < v`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n).map(|v| self.degree(v)).collect()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m + 1))
    }

    /// Same features and labels over a different edge set.
    pub fn with_edges(&self, edges: &[(usize, usize)]) -> Result<Graph> {
        Graph::new(self.n, edges, self.features.clone(), self.labels.clone())
    }

    /// Relabels node `v` as `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        assert_eq!(perm.len(), self.n);
        let d0 = self.feature_dim();
        let mut feats = Tensor::zeros(&[self.n, d0]);
        for v in 0..self.n {
            feats.row_mut(perm[v]).copy_from_slice(self.features.row(v));
        }
        let labels = self.labels.as_ref().map(|l| {
            let mut out = vec![0; self.n];
            for v in 0..self.n {
                out[perm[v]] = l[v];
            }
            out
        });
        let edges: Vec<_> = self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        Graph::new(self.n, &edges, feats, labels)
    }

    /// Shortest-path distances from `src`, ignoring nodes further than
    /// `max_dist`. Unreached nodes are `usize::MAX`.
    pub fn bfs_distances(&self, src: usize, max_dist: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.n];
        let mut queue = VecDeque::new();
        dist[src] = 0;
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            let du = dist[u];
            if du == max_dist {
                continue;
            }
            for &w in self.neighbors(u) {
                if dist[w] == usize::MAX {
                    dist[w] = du + 1;
                    queue.push_back(w);
                }
            }
        }
        dist
    }
}

/// Reads a graph from the plain-text edge list, CSV feature matrix and
/// optional label file formats.
pub fn load_graph(
    edge_path: &Path,
    feature_path: &Path,
    label_path: Option<&Path>,
) -> Result<Graph> {
    let features = read_features(feature_path)?;
    let n = features.rows();
    let edges = read_edges(edge_path)?;
    let labels = label_path.map(read_labels).transpose()?;
    Graph::new(n, &edges, features, labels)
}

pub fn read_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = fs::read_to_string(path)?;
    let mut edges = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let mut next = || -> Result<usize> {
            let tok = parts
                .next()
                .ok_or_else(|| Error::parse(path, idx + 1, "expected two node ids"))?;
            tok.parse::<usize>()
                .map_err(|_| Error::parse(path, idx + 1, format!("invalid node id `{tok}`")))
        };
        let u = next()?;
        let v = next()?;
        if parts.next().is_some() {
            return Err(Error::parse(path, idx + 1, "expected exactly two node ids"));
        }
        edges.push((u, v));
    }
    Ok(edges)
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let rows = read_csv_matrix(path)?;
    if rows.is_empty() {
        return Err(Error::parse(path, 0, "feature file has no rows"));
    }
    Ok(Tensor::from_rows(&rows))
}

/// Reads a headerless numeric CSV; lines beginning `#` are skipped.
pub fn read_csv_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|_| {
                    Error::parse(path, idx + 1, format!("invalid number `{}`", tok.trim()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::parse(
                    path,
                    idx + 1,
                    format!("row has {} columns, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    let mut labels = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let label = line
            .parse::<usize>()
            .map_err(|_| Error::parse(path, idx + 1, format!("invalid label `{line}`")))?;
        labels.push(label);
    }
    Ok(labels)
}

pub fn write_edges(path: &Path, edges: &[(usize, usize)]) -> Result<()> {
    let mut out = String::with_capacity(edges.len() * 8);
    for &(u, v) in edges {
        out.push_str(&format!("{u} {v}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_csv_matrix(path: &Path, t: &Tensor) -> Result<()> {
    let mut out = String::new();
    for r in 0..t.rows() {
        let row: Vec<String> = t.row(r).iter().map(|x| format!("{x:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = String::new();
    for l in labels {
        out.push_str(&format!("{l}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Nodes within `k` hops of every node, with their hop distance.
#[derive(Debug, Clone, PartialEq)]
pub struct KHopIndex {
    k: usize,
    /// Per node: `(u, dist(v, u))` for `1 <= dist <= k`, sorted by `u`.
    within: Vec<Vec<(usize, usize)>>,
}

impl KHopIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.within.len()
    }

    /// `(u, distance)` pairs for all `u` with `1 <= dist(v, u) <= k`.
    pub fn within(&self, v: usize) -> &[(usize, usize)] {
        &self.within[v]
    }

    /// `N^(l)(v)`: sorted nodes at distance `1..=l` from `v`.
    pub fn neighborhood(&self, v: usize, l: usize) -> Vec<usize> {
        self.within[v]
            .iter()
            .filter(|&&(_, d)| d <= l)
            .map(|&(u, _)| u)
            .collect()
    }

    /// Shortest-path distance if it is at most `k`.
    pub fn distance(&self, u: usize, v: usize) -> Option<usize> {
        if u == v {
            return Some(0);
        }
        self.within[u]
            .binary_search_by_key(&v, |&(w, _)| w)
            .ok()
            .map(|pos| self.within[u][pos].1)
    }

    pub fn reach(&self, u: usize, v: usize) -> bool {
        u != v && self.distance(u, v).is_some()
    }
}

/// Breadth-first search from every node out to radius `k`.
pub fn build_khop_index(g: &Graph, k: usize) -> Result<KHopIndex> {
    if k == 0 {
        return Err(Error::InvalidParameter("k-hop radius must be >= 1".into()));
    }
    let within = (0..g.n())
        .into_par_iter()
        .map(|v| {
            let dist = g.bfs_distances(v, k);
            dist.iter()
                .enumerate()
                .filter(|&(u, &d)| u != v && d != usize::MAX)
                .map(|(u, &d)| (u, d))
                .collect()
        })
        .collect();
    Ok(KHopIndex { k, within })
}

/// Row-normalized adjacency `T` (isolated rows all zero) as a dense matrix.
pub fn transition_matrix(g: &Graph) -> Tensor {
    let n = g.n();
    let mut t = Tensor::zeros(&[n, n]);
    for v in 0..n {
        let d = g.degree(v);
        if d == 0 {
            continue;
        }
        let w = 1.0 / d as f64;
        for &u in g.neighbors(v) {
            t.set(v, u, w);
        }
    }
    t
}

/// `T^1, ..., T^p_max` as dense matrices.
pub fn transition_powers(g: &Graph, p_max: usize) -> Result<Vec<Tensor>> {
    if p_max == 0 {
        return Err(Error::InvalidParameter("p_max must be >= 1".into()));
    }
    let t = transition_matrix(g);
    let mut powers = Vec::with_capacity(p_max);
    powers.push(t.clone());
    for _ in 1..p_max {
        let next = powers.last().unwrap().matmul(&t);
        powers.push(next);
    }
    Ok(powers)
}
