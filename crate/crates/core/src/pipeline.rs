//! End-to-end commands over a [`RunConfig`]. Each writes its artifacts
//! under the configured output directory and stamps them with the config
//! hash.

use std::path::{Path, PathBuf};

use crate::augment::{sample_augmented, AugmentedGraph, SampleMode};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::graph::{read_features, write_csv_matrix, write_edges, write_labels, Graph};
use crate::rng::derive_seed;
use crate::structure::StructuralContext;
use crate::tensor::Tensor;
use crate::train::{restore_checkpoint, seeds, write_loss_csv, Trainer};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const HASH_RECORD_PREFIX: &str = "meta.config_hash.";

/// Seed label for the evaluation repeats.
const EVAL_SEED: u64 = 5;

fn prepare(cfg: &RunConfig) -> Result<(Graph, PathBuf)> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output)?;
    Ok((cfg.load_graph()?, cfg.output.clone()))
}

/// Structural context exactly as training builds it.
pub fn context_for(g: &Graph, cfg: &RunConfig) -> Result<StructuralContext> {
    let t = cfg.train_config();
    StructuralContext::build(g, &t.context_config(), derive_seed(t.seed, seeds::CLUSTERS))
}

#[derive(Debug)]
pub struct PretrainArtifacts {
    pub trainer: Trainer,
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PretrainArtifacts> {
    let (g, out) = prepare(cfg)?;
    let train = cfg.train_config();
    let mut trainer = Trainer::new(&g, &train)?;
    trainer.run(train.epochs)?;
    let hash = cfg.hash();
    let mut ck = trainer.to_checkpoint();
    ck.push_scalar(format!("{HASH_RECORD_PREFIX}{hash}"), 0.0);
    let checkpoint = out.join(CHECKPOINT_FILE);
    ck.save(&checkpoint)?;
    let loss_csv = out.join(LOSS_FILE);
    write_loss_csv(&loss_csv, &trainer.history, Some(&hash))?;
    Ok(PretrainArtifacts {
        trainer,
        checkpoint,
        loss_csv,
    })
}

/// Config hash recorded in a checkpoint, if any.
pub fn checkpoint_hash(ck: &Checkpoint) -> Option<&str> {
    ck.records
        .iter()
        .find_map(|(n, _)| n.strip_prefix(HASH_RECORD_PREFIX))
}

/// Eval-mode embeddings from a saved checkpoint.
pub fn embed_from_checkpoint(g: &Graph, cfg: &RunConfig, path: &Path) -> Result<Tensor> {
    let state = restore_checkpoint(&Checkpoint::load(path)?)?;
    if state.model.input_dim != g.feature_dim() {
        return Err(Error::Consistency(format!(
            "checkpoint expects {} input features, dataset has {}",
            state.model.input_dim,
            g.feature_dim()
        )));
    }
    if state.model.khop != cfg.train.khop {
        return Err(Error::Consistency(format!(
            "checkpoint uses khop {}, config has {}",
            state.model.khop, cfg.train.khop
        )));
    }
    let ctx = context_for(g, cfg)?;
    Ok(if state.augment {
        state.model.embed(g, &ctx)
    } else {
        state.model.embed_with(g, &ctx, &AugmentedGraph::identity(g))
    })
}

/// Headerless CSV, one row per node, preceded by a `# config_hash=` line.
pub fn write_embeddings(dir: &Path, z: &Tensor, hash: &str) -> Result<PathBuf> {
    let path = dir.join(EMBEDDINGS_FILE);
    let mut text = format!("# config_hash={hash}\n");
    for r in 0..z.rows() {
        let row: Vec<String> = z.row(r).iter().map(|x| format!("{x:?}")).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(&path, text)?;
    Ok(path)
}

/// Writes embeddings for `checkpoint`; optionally also dumps one sampled
/// augmented graph as an edge list.
pub fn cmd_embed(cfg: &RunConfig, checkpoint: &Path, dump_augmented: Option<&Path>) -> Result<PathBuf> {
    let (g, out) = prepare(cfg)?;
    let z = embed_from_checkpoint(&g, cfg, checkpoint)?;
    if let Some(dump) = dump_augmented {
        let ctx = context_for(&g, cfg)?;
        let t = cfg.train_config();
        let seed = derive_seed(derive_seed(t.seed, seeds::SAMPLES), 0);
        let aug = sample_augmented(&ctx.a_tilde, t.tau, seed, SampleMode::Hard)?;
        write_edges(dump, &aug.hard_edges())?;
    }
    write_embeddings(&out, &z, &cfg.hash())
}

#[derive(Debug, Clone)]
pub enum EmbeddingSource {
    Checkpoint(PathBuf),
    Embeddings(PathBuf),
}

pub fn evaluate_embeddings(z: &Tensor, g: &Graph, cfg: &RunConfig) -> Result<EvalReport> {
    if z.rows() != g.n() {
        return Err(Error::Consistency(format!(
            "{} embedding rows for {} nodes",
            z.rows(),
            g.n()
        )));
    }
    let mut report = evaluate(z, g, &cfg.eval, derive_seed(cfg.seed, EVAL_SEED))?;
    report.config_hash = Some(cfg.hash());
    Ok(report)
}

pub fn cmd_evaluate(cfg: &RunConfig, source: &EmbeddingSource) -> Result<(EvalReport, PathBuf)> {
    let (g, out) = prepare(cfg)?;
    let z = match source {
        EmbeddingSource::Checkpoint(p) => embed_from_checkpoint(&g, cfg, p)?,
        EmbeddingSource::Embeddings(p) => read_features(p)?,
    };
    let report = evaluate_embeddings(&z, &g, cfg)?;
    let path = out.join(REPORT_FILE);
    report.write_csv(&path)?;
    Ok((report, path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationCell {
    pub augment: bool,
    pub attention: bool,
}

impl AblationCell {
    pub const ALL: [AblationCell; 4] = [
        AblationCell { augment: true, attention: true },
        AblationCell { augment: false, attention: true },
        AblationCell { augment: true, attention: false },
        AblationCell { augment: false, attention: false },
    ];

    pub fn name(&self) -> String {
        let flag = |on| if on { "on" } else { "off" };
        format!("aug-{}_att-{}", flag(self.augment), flag(self.attention))
    }

    pub fn apply(&self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        c.train.augment = self.augment;
        c.train.structural_attention = self.attention;
        c
    }
}

/// Trains and evaluates `cell` on `g`; returns the report and the trainer.
pub fn run_cell(g: &Graph, cfg: &RunConfig, cell: AblationCell) -> Result<(EvalReport, Trainer)> {
    let c = cell.apply(cfg);
    let train = c.train_config();
    let mut trainer = Trainer::new(g, &train)?;
    trainer.run(train.epochs)?;
    let z = trainer.embed();
    Ok((evaluate_embeddings(&z, g, &c)?, trainer))
}

/// All four Aug×Att cells. Reports go to `ablation/<cell>/report.csv`,
/// plus a combined `ablation/summary.csv`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<(AblationCell, EvalReport)>> {
    let (g, out) = prepare(cfg)?;
    let root = out.join("ablation");
    let mut results = Vec::new();
    let mut summary = format!("# config_hash={}\ncell,metric,mean,std,repeats\n", cfg.hash());
    for cell in AblationCell::ALL {
        let (report, trainer) = run_cell(&g, cfg, cell)?;
        let dir = root.join(cell.name());
        std::fs::create_dir_all(&dir)?;
        report.write_csv(&dir.join(REPORT_FILE))?;
        write_loss_csv(&dir.join(LOSS_FILE), &trainer.history, report.config_hash.as_deref())?;
        for m in &report.metrics {
            summary.push_str(&format!(
                "{},{},{:?},{:?},{}\n",
                cell.name(),
                m.name,
                m.mean,
                m.std,
                m.repeats
            ));
        }
        results.push((cell, report));
    }
    std::fs::write(root.join("summary.csv"), summary)?;
    Ok(results)
}

#[derive(Debug, Clone)]
pub struct SynthArtifacts {
    pub edges: PathBuf,
    pub features: PathBuf,
    pub labels: PathBuf,
}

/// Writes the configured synthetic graph as dataset files.
pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthArtifacts> {
    if cfg.synthetic.is_none() {
        return Err(Error::config("synthetic", "the synth command needs a synthetic spec"));
    }
    let (g, out) = prepare(cfg)?;
    let a = SynthArtifacts {
        edges: out.join("edges.txt"),
        features: out.join("features.csv"),
        labels: out.join("labels.txt"),
    };
    write_edges(&a.edges, g.edges())?;
    write_csv_matrix(&a.features, g.features())?;
    write_labels(&a.labels, g.labels().unwrap_or(&[]))?;
    Ok(a)
}
