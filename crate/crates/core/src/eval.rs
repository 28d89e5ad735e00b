//! Downstream evaluation on frozen embeddings: degree-fairness gaps, a
//! softmax-regression probe, and clustering quality.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::kmeans::kmeans;
use crate::rng::{chacha, derive_seed};
use crate::tensor::Tensor;

/// `gd(v) = |{u ≠ v : dist(u, v) ≤ r}|`.
pub fn generalized_degree(g: &Graph, r: usize) -> Result<Vec<usize>> {
    if r == 0 {
        return Err(Error::InvalidParameter("hop radius must be at least 1".into()));
    }
    Ok((0..g.n())
        .into_par_iter()
        .map(|v| {
            g.bfs_distances(v, r)
                .iter()
                .filter(|&&d| d != usize::MAX && d > 0)
                .count()
        })
        .collect())
}

/// Low- and high-degree node groups drawn from the test nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct FairnessGroups {
    pub r: usize,
    pub q: f64,
    /// Bottom `q` fraction by generalized degree.
    pub g1: Vec<usize>,
    /// Top `q` fraction.
    pub g2: Vec<usize>,
}

impl FairnessGroups {
    /// Ranks `test` by `(gd, index)` ascending and takes `⌊q·|test|⌋` nodes
    /// from each end.
    pub fn from_degrees(gd: &[usize], test: &[usize], r: usize, q: f64) -> Result<Self> {
        if !(q > 0.0 && q <= 0.5) {
            return Err(Error::InvalidParameter(format!("tail fraction {q} outside (0, 0.5]")));
        }
        let k = (q * test.len() as f64).floor() as usize;
        if k == 0 {
            return Err(Error::Evaluation(format!(
                "tail fraction {q} of {} test nodes is empty",
                test.len()
            )));
        }
        let mut ranked = test.to_vec();
        ranked.sort_unstable_by_key(|&v| (gd[v], v));
        Ok(FairnessGroups {
            r,
            q,
            g1: ranked[..k].to_vec(),
            g2: ranked[ranked.len() - k..].to_vec(),
        })
    }

    pub fn build(g: &Graph, test: &[usize], r: usize, q: f64) -> Result<Self> {
        Self::from_degrees(&generalized_degree(g, r)?, test, r, q)
    }
}

fn class_distribution(preds: &[usize], group: &[usize], c: usize) -> Vec<f64> {
    let mut d = vec![0.0; c];
    for &v in group {
        d[preds[v]] += 1.0;
    }
    d.iter_mut().for_each(|x| *x /= group.len() as f64);
    d
}

/// Degree statistical parity gap, in percent. `preds` is indexed by node.
pub fn delta_sp(preds: &[usize], groups: &FairnessGroups, c: usize) -> Result<f64> {
    if groups.g1.is_empty() || groups.g2.is_empty() {
        return Err(Error::Evaluation("empty fairness group".into()));
    }
    let p1 = class_distribution(preds, &groups.g1, c);
    let p2 = class_distribution(preds, &groups.g2, c);
    let gap: f64 = p1.iter().zip(&p2).map(|(a, b)| (a - b).abs()).sum();
    Ok(100.0 * gap / c as f64)
}

/// Per-class recall within a group; `None` where the class has no members.
fn recalls(preds: &[usize], truth: &[usize], group: &[usize], c: usize) -> Vec<Option<f64>> {
    let mut hit = vec![0usize; c];
    let mut total = vec![0usize; c];
    for &v in group {
        total[truth[v]] += 1;
        if preds[v] == truth[v] {
            hit[truth[v]] += 1;
        }
    }
    (0..c)
        .map(|k| (total[k] > 0).then(|| hit[k] as f64 / total[k] as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EqualOpportunity {
    pub value: f64,
    /// Classes skipped because a group has no true members of them.
    pub excluded: Vec<usize>,
}

/// Degree equal-opportunity gap, in percent, averaged over classes with
/// true members in both groups.
pub fn delta_eo_detail(
    preds: &[usize],
    truth: &[usize],
    groups: &FairnessGroups,
    c: usize,
) -> Result<EqualOpportunity> {
    let r1 = recalls(preds, truth, &groups.g1, c);
    let r2 = recalls(preds, truth, &groups.g2, c);
    let mut gaps = Vec::new();
    let mut excluded = Vec::new();
    for k in 0..c {
        match (r1[k], r2[k]) {
            (Some(a), Some(b)) => gaps.push((a - b).abs()),
            _ => excluded.push(k),
        }
    }
    if gaps.is_empty() {
        return Err(Error::Evaluation("no class has true members in both groups".into()));
    }
    Ok(EqualOpportunity {
        value: 100.0 * gaps.iter().sum::<f64>() / gaps.len() as f64,
        excluded,
    })
}

pub fn delta_eo(preds: &[usize], truth: &[usize], groups: &FairnessGroups, c: usize) -> Result<f64> {
    delta_eo_detail(preds, truth, groups, c).map(|e| e.value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Random 60/20/20 split. Redraws with the next seed while a class is
/// missing from the training part; returns the split and the redraw count.
pub fn random_split(labels: &[usize], c: usize, seed: u64) -> Result<(Split, usize)> {
    let n = labels.len();
    let n_train = n * 6 / 10;
    let n_val = n * 2 / 10;
    for attempt in 0..100u64 {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut chacha(derive_seed(seed, attempt)));
        let train = &idx[..n_train];
        let present: BTreeSet<usize> = train.iter().map(|&v| labels[v]).collect();
        if present.len() == c {
            return Ok((
                Split {
                    train: train.to_vec(),
                    val: idx[n_train..n_train + n_val].to_vec(),
                    test: idx[n_train + n_val..].to_vec(),
                },
                attempt as usize,
            ));
        }
    }
    Err(Error::Evaluation("could not draw a split covering every class".into()))
}

pub const PROBE_EPOCHS: usize = 200;
pub const PROBE_LR: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct ProbeRun {
    pub seed: u64,
    pub split: Split,
    pub redraws: usize,
    pub test_accuracy: f64,
    pub val_accuracy: f64,
    /// Predicted class for every node under the selected weights.
    pub predictions: Vec<usize>,
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn accuracy(preds: &[usize], labels: &[usize], nodes: &[usize]) -> f64 {
    if nodes.is_empty() {
        return 0.0;
    }
    nodes.iter().filter(|&&v| preds[v] == labels[v]).count() as f64 / nodes.len() as f64
}

/// Softmax regression on frozen embeddings, trained on the training split
/// with full-batch Adam and selected by validation accuracy (the latest
/// epoch wins ties).
pub fn linear_probe(z: &Tensor, labels: &[usize], c: usize, seed: u64) -> Result<ProbeRun> {
    if labels.len() != z.rows() {
        return Err(Error::Evaluation("label count differs from embedding rows".into()));
    }
    if c < 2 {
        return Err(Error::Evaluation("the probe needs at least two classes".into()));
    }
    let (split, redraws) = random_split(labels, c, seed)?;
    let d = z.cols();
    let mut store = ParamStore::new();
    let w = store.add("probe.w", Tensor::zeros(&[c, d]));
    let b = store.add("probe.b", Tensor::zeros(&[c]));
    let mut adam = AdamState::new(
        AdamConfig {
            lr: PROBE_LR,
            weight_decay: 0.0,
            ..AdamConfig::default()
        },
        &store,
    );
    let zt = Tensor::from_rows(&split.train.iter().map(|&v| z.row(v).to_vec()).collect::<Vec<_>>());
    let yt: Vec<usize> = split.train.iter().map(|&v| labels[v]).collect();
    let predict = |store: &ParamStore| -> Vec<usize> {
        let mut logits = z.matmul(&store.value(w).transpose());
        let bias = store.value(b).data();
        for r in 0..logits.rows() {
            logits.row_mut(r).iter_mut().zip(bias).for_each(|(x, y)| *x += y);
        }
        argmax_rows(&logits)
    };
    let mut best_preds = predict(&store);
    let mut best_val = accuracy(&best_preds, labels, &split.val);
    for _ in 0..PROBE_EPOCHS {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let x = tape.constant(zt.clone());
        let logits = tape.matmul_t(x, bind.var(w));
        let logits = tape.add_row(logits, bind.var(b));
        let loss = tape.cross_entropy(logits, &yt);
        let grads = tape.backward(loss)?;
        store.accumulate_grads(&grads, &bind);
        adam.step(&mut store);
        let preds = predict(&store);
        let val = accuracy(&preds, labels, &split.val);
        if val >= best_val {
            best_val = val;
            best_preds = preds;
        }
    }
    Ok(ProbeRun {
        seed,
        test_accuracy: accuracy(&best_preds, labels, &split.test),
        val_accuracy: best_val,
        predictions: best_preds,
        redraws,
        split,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterQuality {
    /// Percent.
    pub conductance: f64,
    /// Percent.
    pub modularity: f64,
}

/// `Q = (1/2m) Σ_ij (A_ij − d_i d_j / 2m) δ(c_i, c_j)`, in percent.
pub fn modularity(g: &Graph, assign: &[usize]) -> f64 {
    let m = g.num_edges() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let k = assign.iter().copied().max().map_or(0, |x| x + 1);
    let mut inside = vec![0.0; k];
    let mut vol = vec![0.0; k];
    for &(u, v) in g.edges() {
        if assign[u] == assign[v] {
            inside[assign[u]] += 1.0;
        }
    }
    for v in 0..g.n() {
        vol[assign[v]] += g.degree(v) as f64;
    }
    100.0
        * (0..k)
            .map(|c| inside[c] / m - (vol[c] / (2.0 * m)).powi(2))
            .sum::<f64>()
}

/// Unweighted mean over clusters of `cut(S, S̄) / min(vol S, vol S̄)`, in
/// percent. Clusters where either side has zero volume are skipped; with
/// nothing left the value is 100.
pub fn conductance(g: &Graph, assign: &[usize]) -> f64 {
    let k = assign.iter().copied().max().map_or(0, |x| x + 1);
    let mut cut = vec![0.0; k];
    let mut vol = vec![0.0; k];
    for &(u, v) in g.edges() {
        if assign[u] != assign[v] {
            cut[assign[u]] += 1.0;
            cut[assign[v]] += 1.0;
        }
    }
    for v in 0..g.n() {
        vol[assign[v]] += g.degree(v) as f64;
    }
    let total: f64 = vol.iter().sum();
    let scores: Vec<f64> = (0..k)
        .filter_map(|c| {
            let denom = vol[c].min(total - vol[c]);
            (denom > 0.0).then(|| cut[c] / denom)
        })
        .collect();
    if scores.is_empty() {
        100.0
    } else {
        100.0 * scores.iter().sum::<f64>() / scores.len() as f64
    }
}

/// k-means on the embeddings, scored against the graph.
pub fn clustering_quality(z: &Tensor, g: &Graph, c: usize, seed: u64) -> Result<ClusterQuality> {
    if c < 2 {
        return Err(Error::InvalidParameter("clustering needs at least 2 clusters".into()));
    }
    let ca = kmeans(z, c.min(z.rows()), seed)?;
    Ok(ClusterQuality {
        conductance: conductance(g, &ca.assign),
        modularity: modularity(g, &ca.assign),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FairnessSetting {
    pub r: usize,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub fairness: Vec<FairnessSetting>,
    pub probe_repeats: usize,
    /// Defaults to the number of classes.
    pub clusters: Option<usize>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            fairness: vec![
                FairnessSetting { r: 1, q: 0.2 },
                FairnessSetting { r: 2, q: 0.2 },
                FairnessSetting { r: 1, q: 0.3 },
            ],
            probe_repeats: 10,
            clusters: None,
        }
    }
}

impl EvalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.probe_repeats == 0 {
            return Err(Error::config("eval.probe_repeats", "must be at least 1"));
        }
        for f in &self.fairness {
            if f.r == 0 {
                return Err(Error::config("eval.fairness.r", "must be at least 1"));
            }
            if !(f.q > 0.0 && f.q <= 0.5) {
                return Err(Error::config("eval.fairness.q", format!("{} outside (0, 0.5]", f.q)));
            }
        }
        if self.clusters.is_some_and(|c| c < 2) {
            return Err(Error::config("eval.clusters", "must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub repeats: usize,
}

impl MetricSummary {
    /// Mean and sample standard deviation (0 for a single value, NaN mean
    /// for none).
    pub fn from_values(name: impl Into<String>, values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MetricSummary {
            name: name.into(),
            mean,
            std,
            repeats: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Vec<MetricSummary>,
    pub seeds: Vec<u64>,
    pub split_sizes: (usize, usize, usize),
    pub redraws: usize,
    pub config_hash: Option<String>,
}

impl EvalReport {
    pub fn get(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn mean(&self, name: &str) -> Option<f64> {
        self.get(name).map(|m| m.mean)
    }

    /// Metadata as `#` comment lines, then `metric,mean,std,repeats`.
    pub fn to_csv(&self) -> String {
        let mut out = Vec::new();
        if let Some(h) = &self.config_hash {
            writeln!(out, "# config_hash={h}").unwrap();
        }
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        writeln!(out, "# seeds={}", seeds.join(" ")).unwrap();
        let (a, b, c) = self.split_sizes;
        writeln!(out, "# split={a}/{b}/{c} redraws={}", self.redraws).unwrap();
        writeln!(out, "metric,mean,std,repeats").unwrap();
        for m in &self.metrics {
            writeln!(out, "{},{:?},{:?},{}", m.name, m.mean, m.std, m.repeats).unwrap();
        }
        String::from_utf8(out).unwrap()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

pub fn fairness_metric_name(kind: &str, f: &FairnessSetting) -> String {
    format!("{kind}_r{}_q{}", f.r, f.q)
}

/// Probe, fairness, and clustering metrics over `spec.probe_repeats`
/// seeds derived from `seed`. Repeats run in parallel; results are
/// aggregated in seed order. A repeat whose test groups share no class
/// contributes no equal-opportunity value, so that metric's `repeats` can
/// be lower.
pub fn evaluate(z: &Tensor, g: &Graph, spec: &EvalSpec, seed: u64) -> Result<EvalReport> {
    spec.validate()?;
    let labels = g
        .labels()
        .ok_or_else(|| Error::Evaluation("graph has no labels".into()))?;
    let c = g.num_classes().unwrap_or(0);
    let clusters = spec.clusters.unwrap_or(c);
    let gds: Vec<Vec<usize>> = spec
        .fairness
        .iter()
        .map(|f| generalized_degree(g, f.r))
        .collect::<Result<_>>()?;
    let seeds: Vec<u64> = (0..spec.probe_repeats as u64).map(|i| derive_seed(seed, i)).collect();
    let runs: Vec<(ProbeRun, Vec<(f64, Option<f64>)>, ClusterQuality)> = seeds
        .par_iter()
        .map(|&s| {
            let run = linear_probe(z, labels, c, s)?;
            let fair = spec
                .fairness
                .iter()
                .zip(&gds)
                .map(|(f, gd)| {
                    let groups = FairnessGroups::from_degrees(gd, &run.split.test, f.r, f.q)?;
                    Ok((
                        delta_sp(&run.predictions, &groups, c)?,
                        delta_eo(&run.predictions, labels, &groups, c).ok(),
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let cq = clustering_quality(z, g, clusters, s)?;
            Ok((run, fair, cq))
        })
        .collect::<Result<_>>()?;

    let mut metrics = vec![MetricSummary::from_values(
        "accuracy",
        &runs.iter().map(|r| r.0.test_accuracy).collect::<Vec<_>>(),
    )];
    for (i, f) in spec.fairness.iter().enumerate() {
        let sp: Vec<f64> = runs.iter().map(|r| r.1[i].0).collect();
        let eo: Vec<f64> = runs.iter().filter_map(|r| r.1[i].1).collect();
        metrics.push(MetricSummary::from_values(fairness_metric_name("delta_sp", f), &sp));
        metrics.push(MetricSummary::from_values(fairness_metric_name("delta_eo", f), &eo));
    }
    metrics.push(MetricSummary::from_values(
        "conductance",
        &runs.iter().map(|r| r.2.conductance).collect::<Vec<_>>(),
    ));
    metrics.push(MetricSummary::from_values(
        "modularity",
        &runs.iter().map(|r| r.2.modularity).collect::<Vec<_>>(),
    ));
    let s = &runs[0].0.split;
    Ok(EvalReport {
        metrics,
        seeds,
        split_sizes: (s.train.len(), s.val.len(), s.test.len()),
        redraws: runs.iter().map(|r| r.0.redraws).sum(),
        config_hash: None,
    })
}
