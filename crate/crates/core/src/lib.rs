//! Degree-fair graph transformer.
//!
//! Nodes attend over an augmented graph whose extra edges are sampled
//! between same-community nodes within `k` hops, biased toward low-degree
//! pairs. Attention scores carry high-order proximity and degree terms.
//! The encoder is pre-trained self-supervised (transition-matrix and
//! feature reconstruction plus an augmentation regularizer), then frozen
//! embeddings are scored for accuracy, clustering quality and the
//! accuracy gap between low- and high-degree nodes.
//!
//! Pipeline order: [`graph`] → [`structure`] → [`augment`] → [`model`] →
//! [`train`] → [`eval`]. [`pipeline`] ties these to a [`config::RunConfig`].

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod graph;
pub mod kmeans;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod structure;
pub mod synth;
pub mod tensor;
pub mod train;

pub use augment::{sample_augmented, AugmentedGraph, SampleMode};
pub use checkpoint::Checkpoint;
pub use config::{DatasetPaths, RunConfig};
pub use error::{Error, Result};
pub use eval::{EvalReport, EvalSpec, FairnessGroups, FairnessSetting};
pub use graph::{build_khop_index, load_graph, transition_powers, Graph, KHopIndex};
pub use kmeans::{kmeans, ClusterAssignment};
pub use model::{Model, ModelConfig, Topology};
pub use structure::{ContextConfig, StructuralContext, SymSparse};
pub use synth::{synth_sbm, SbmSpec};
pub use tensor::Tensor;
pub use train::{pretrain, LossRecord, TrainConfig, Trainer};
