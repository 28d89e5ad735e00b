//! Self-supervised objective and the pre-training loop.
//!
//! ```text
//! L1 = β1 Σ_p ||M^(p) − Z*||_F² + β2 · mean_i ||X_i − X̂_i||₂
//! L2 = BCE(A', A) over the sampling support
//! L  = L1 + α L2
//! ```
//!
//! `Z*` is the cosine-similarity matrix of the embeddings. Every epoch draws
//! a fresh straight-through sample of `A'` keyed on the master seed and the
//! epoch index.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{augmentation_bce, sample_augmented, AugmentedGraph, SampleMode};
use crate::autodiff::{AdamConfig, AdamState, Binding, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Model, ModelConfig, Topology};
use crate::rng::derive_seed;
use crate::structure::{check_coefficients, ContextConfig, StructuralContext};
use crate::tensor::Tensor;

/// Labels for seeds derived from the master seed.
pub mod seeds {
    pub const CLUSTERS: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SAMPLES: u64 = 3;
    pub const DROPOUT: u64 = 4;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub xi: f64,
    pub zeta: f64,
    pub clusters: usize,
    pub dropout: f64,
    pub p_steps: usize,
    pub khop: usize,
    pub tau: f64,
    pub seed: u64,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Train on sampled augmented graphs. When off, the original graph is
    /// used and the augmentation loss is dropped.
    pub augment: bool,
    pub structural_attention: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            lr: 1e-4,
            weight_decay: 1e-5,
            alpha: 1.0,
            beta1: 0.5,
            beta2: 0.5,
            xi: 0.8,
            zeta: 0.2,
            clusters: 5,
            dropout: 0.1,
            p_steps: 3,
            khop: 2,
            tau: 1.0,
            seed: 0,
            layers: 4,
            heads: 4,
            hidden: 64,
            augment: true,
            structural_attention: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("lr", self.lr), ("tau", self.tau)];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("weight_decay", self.weight_decay),
            ("alpha", self.alpha),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ];
        for (field, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be non-negative, got {v}")));
            }
        }
        for (field, v) in [("clusters", self.clusters), ("p_steps", self.p_steps), ("khop", self.khop), ("layers", self.layers)] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        check_coefficients(self.xi, self.zeta).map_err(|e| Error::config("xi/zeta", e.to_string()))?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            heads: self.heads,
            hidden: self.hidden,
            dropout: self.dropout,
            structural_attention: self.structural_attention,
        }
    }

    pub fn context_config(&self) -> ContextConfig {
        ContextConfig {
            khop: self.khop,
            clusters: self.clusters,
            xi: self.xi,
            zeta: self.zeta,
            p_steps: self.p_steps,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Structure and feature reconstruction loss.
#[allow(clippy::too_many_arguments)]
pub fn loss_l1(
    tape: &mut Tape,
    z: Var,
    x_hat: Var,
    x: &Tensor,
    targets: &[Tensor],
    beta1: f64,
    beta2: f64,
) -> Var {
    let zs = tape.cosine_similarity_matrix(z);
    let mut structure = None;
    for m in targets {
        let mv = tape.constant(m.clone());
        let diff = tape.sub(mv, zs);
        let sq = tape.frob_sq(diff);
        structure = Some(match structure {
            None => sq,
            Some(acc) => tape.add(acc, sq),
        });
    }
    let xv = tape.constant(x.clone());
    let res = tape.sub(xv, x_hat);
    let norms = tape.row_norm(res);
    let feature = tape.mean(norms);
    let feature = tape.scale(feature, beta2);
    match structure {
        Some(s) => {
            let s = tape.scale(s, beta1);
            tape.add(s, feature)
        }
        None => feature,
    }
}

pub fn total_loss(tape: &mut Tape, l1: Var, l2: Var, alpha: f64) -> Var {
    let weighted = tape.scale(l2, alpha);
    tape.add(l1, weighted)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub l1: Var,
    pub l2: Option<Var>,
    pub total: Var,
}

/// Owns everything needed to run epochs: the precomputed structure, the
/// model, and the optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub graph: Graph,
    pub config: TrainConfig,
    pub ctx: StructuralContext,
    pub model: Model,
    pub adam: AdamState,
    pub topology: Topology,
    pub history: Vec<LossRecord>,
}

impl Trainer {
    pub fn new(g: &Graph, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let ctx = StructuralContext::build(
            g,
            &config.context_config(),
            derive_seed(config.seed, seeds::CLUSTERS),
        )?;
        Self::with_context(g, config, ctx)
    }

    /// Uses a precomputed structural context (and its clustering).
    pub fn with_context(g: &Graph, config: &TrainConfig, ctx: StructuralContext) -> Result<Self> {
        config.validate()?;
        let model = Model::new(
            config.model_config(),
            g.feature_dim(),
            config.khop,
            derive_seed(config.seed, seeds::INIT),
        )?;
        let adam = AdamState::new(config.adam_config(), &model.params);
        let pairs: Vec<(usize, usize)> = if config.augment {
            ctx.a_tilde.entries().iter().map(|e| e.0).collect()
        } else {
            g.edges().to_vec()
        };
        let topology = Topology::new(&ctx, &pairs, None);
        Ok(Trainer {
            graph: g.clone(),
            config: config.clone(),
            ctx,
            model,
            adam,
            topology,
            history: Vec::new(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.history.len()
    }

    /// The straight-through sample for epoch `e`, or `None` without augmentation.
    pub fn sample(&self, e: usize) -> Result<Option<AugmentedGraph>> {
        if !self.config.augment {
            return Ok(None);
        }
        let seed = derive_seed(derive_seed(self.config.seed, seeds::SAMPLES), e as u64);
        sample_augmented(&self.ctx.a_tilde, self.config.tau, seed, SampleMode::StraightThrough).map(Some)
    }

    /// Builds the full loss on `tape` for a given sample.
    pub fn objective(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        aug: Option<&AugmentedGraph>,
        train: bool,
        seed: u64,
    ) -> Objective {
        let (weights, l2) = match aug {
            Some(a) => {
                let (w, soft) = a.weight_var(tape);
                (Some(w), Some(augmentation_bce(tape, soft, a, &self.graph)))
            }
            None => (None, None),
        };
        let out = self.model.forward(tape, bind, &self.graph, &self.topology, weights, train, seed);
        let l1 = loss_l1(
            tape,
            out.z,
            out.x_hat,
            self.graph.features(),
            &self.ctx.m_targets,
            self.config.beta1,
            self.config.beta2,
        );
        let total = match l2 {
            Some(l2) => total_loss(tape, l1, l2, self.config.alpha),
            None => l1,
        };
        Objective { l1, l2, total }
    }

    /// Runs one epoch: sample, forward, backward, Adam step.
    pub fn step(&mut self) -> Result<LossRecord> {
        let e = self.epoch();
        let aug = self.sample(e)?;
        let mut tape = Tape::new();
        let bind = self.model.params.bind(&mut tape);
        let dropout_seed = derive_seed(derive_seed(self.config.seed, seeds::DROPOUT), e as u64);
        let obj = self.objective(&mut tape, &bind, aug.as_ref(), true, dropout_seed);
        let rec = LossRecord {
            epoch: e,
            l1: tape.value(obj.l1).item(),
            l2: obj.l2.map_or(0.0, |v| tape.value(v).item()),
            total: tape.value(obj.total).item(),
        };
        for (term, value) in [("l1", rec.l1), ("l2", rec.l2), ("total", rec.total)] {
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: e, term, value });
            }
        }
        let grads = tape.backward(obj.total)?;
        self.model.params.accumulate_grads(&grads, &bind);
        self.adam.step(&mut self.model.params);
        self.history.push(rec);
        Ok(rec)
    }

    pub fn run(&mut self, epochs: usize) -> Result<()> {
        for _ in 0..epochs {
            self.step()?;
        }
        Ok(())
    }

    /// Eval-mode embeddings on the deterministic augmented graph (or the
    /// original graph without augmentation).
    pub fn embed(&self) -> Tensor {
        if self.config.augment {
            self.model.embed(&self.graph, &self.ctx)
        } else {
            self.model.embed_with(&self.graph, &self.ctx, &AugmentedGraph::identity(&self.graph))
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        state_checkpoint(&self.model, &self.adam, self.config.augment)
    }
}

/// Pre-trains for `config.epochs` epochs and returns the trainer, which
/// holds the final parameters and the loss history.
pub fn pretrain(g: &Graph, config: &TrainConfig) -> Result<Trainer> {
    let mut t = Trainer::new(g, config)?;
    t.run(config.epochs)?;
    Ok(t)
}

pub fn write_loss_csv(path: &Path, history: &[LossRecord], config_hash: Option<&str>) -> Result<()> {
    let mut out = Vec::new();
    if let Some(h) = config_hash {
        writeln!(out, "# config_hash={h}")?;
    }
    writeln!(out, "epoch,l1,l2,total")?;
    for r in history {
        writeln!(out, "{},{:?},{:?},{:?}", r.epoch, r.l1, r.l2, r.total)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parameters, optimizer moments, and enough architecture metadata to
/// rebuild the model.
pub fn state_checkpoint(model: &Model, adam: &AdamState, augment: bool) -> Checkpoint {
    let mut ck = Checkpoint::new();
    let c = &model.config;
    ck.push_scalar("meta.layers", c.layers as f64);
    ck.push_scalar("meta.heads", c.heads as f64);
    ck.push_scalar("meta.hidden", c.hidden as f64);
    ck.push_scalar("meta.dropout", c.dropout);
    ck.push_scalar("meta.structural_attention", f64::from(u8::from(c.structural_attention)));
    ck.push_scalar("meta.augment", f64::from(u8::from(augment)));
    ck.push_scalar("meta.input_dim", model.input_dim as f64);
    ck.push_scalar("meta.khop", model.khop as f64);
    for p in model.params.iter() {
        ck.push(format!("param.{}", p.name), p.value.clone());
    }
    let a = &adam.config;
    ck.push_scalar("adam.lr", a.lr);
    ck.push_scalar("adam.weight_decay", a.weight_decay);
    ck.push_scalar("adam.beta1", a.beta1);
    ck.push_scalar("adam.beta2", a.beta2);
    ck.push_scalar("adam.eps", a.eps);
    ck.push_scalar("adam.step", adam.step as f64);
    for ((p, m), v) in model.params.iter().zip(&adam.m).zip(&adam.v) {
        ck.push(format!("adam.m.{}", p.name), m.clone());
        ck.push(format!("adam.v.{}", p.name), v.clone());
    }
    ck
}

#[derive(Debug, Clone)]
pub struct RestoredState {
    pub model: Model,
    pub adam: AdamState,
    pub augment: bool,
}

pub fn restore_checkpoint(ck: &Checkpoint) -> Result<RestoredState> {
    let int = |name: &str| -> Result<usize> {
        let v = ck.scalar(name)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Checkpoint(format!("record `{name}` is not a count")));
        }
        Ok(v as usize)
    };
    let config = ModelConfig {
        layers: int("meta.layers")?,
        heads: int("meta.heads")?,
        hidden: int("meta.hidden")?,
        dropout: ck.scalar("meta.dropout")?,
        structural_attention: ck.scalar("meta.structural_attention")? != 0.0,
    };
    let mut model = Model::new(config, int("meta.input_dim")?, int("meta.khop")?, 0)?;
    let ids: Vec<_> = model.params.ids().collect();
    let adam_config = AdamConfig {
        lr: ck.scalar("adam.lr")?,
        weight_decay: ck.scalar("adam.weight_decay")?,
        beta1: ck.scalar("adam.beta1")?,
        beta2: ck.scalar("adam.beta2")?,
        eps: ck.scalar("adam.eps")?,
    };
    let mut adam = AdamState::new(adam_config, &model.params);
    adam.step = int("adam.step")? as u64;
    for (slot, id) in ids.into_iter().enumerate() {
        let name = model.params.get(id).name.clone();
        let shape = model.params.value(id).shape().to_vec();
        let fetch = |key: String| -> Result<Tensor> {
            let t = ck.require(&key)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "record `{key}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.clone())
        };
        model.params.get_mut(id).value = fetch(format!("param.{name}"))?;
        adam.m[slot] = fetch(format!("adam.m.{name}"))?;
        adam.v[slot] = fetch(format!("adam.v.{name}"))?;
    }
    Ok(RestoredState {
        model,
        adam,
        augment: ck.scalar("meta.augment")? != 0.0,
    })
}
