//! Run configuration: one JSON document naming the data source, training
//! and evaluation settings, the output directory and the master seed.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::EvalSpec;
use crate::graph::{load_graph, Graph};
use crate::synth::{synth_sbm, SbmSpec};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    pub edges: PathBuf,
    pub features: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetPaths>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SbmSpec>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn synthetic(spec: SbmSpec, train: TrainConfig, seed: u64) -> Self {
        RunConfig {
            dataset: None,
            synthetic: Some(spec),
            train,
            eval: EvalSpec::default(),
            output: default_output(),
            seed,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Parses `path`; relative dataset and output paths are taken relative
    /// to the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(base) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = &mut self.dataset {
            fix(&mut d.edges);
            fix(&mut d.features);
            if let Some(l) = &mut d.labels {
                fix(l);
            }
        }
        fix(&mut self.output);
    }

    /// The training config with the master seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.dataset, &self.synthetic) {
            (Some(_), Some(_)) => {
                return Err(Error::config("dataset/synthetic", "give exactly one, not both"))
            }
            (None, None) => return Err(Error::config("dataset/synthetic", "one is required")),
            (Some(d), None) => {
                let mut files = vec![("dataset.edges", &d.edges), ("dataset.features", &d.features)];
                if let Some(l) = &d.labels {
                    files.push(("dataset.labels", l));
                }
                for (field, p) in files {
                    if !p.is_file() {
                        return Err(Error::config(field, format!("{} does not exist", p.display())));
                    }
                }
            }
            (None, Some(s)) => s.validate()?,
        }
        if self.train.seed != 0 && self.train.seed != self.seed {
            return Err(Error::config("train.seed", "set the master seed at the top level"));
        }
        self.train.validate()?;
        self.eval.validate()
    }

    /// Hex SHA-256 of the canonical JSON form. The output directory is left
    /// out so that the same run written to two places hashes alike.
    pub fn hash(&self) -> String {
        let keyed = RunConfig {
            output: PathBuf::new(),
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&keyed).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn load_graph(&self) -> Result<Graph> {
        match (&self.dataset, &self.synthetic) {
            (Some(d), _) => load_graph(&d.edges, &d.features, d.labels.as_deref()),
            (None, Some(s)) => synth_sbm(s),
            (None, None) => Err(Error::config("dataset/synthetic", "one is required")),
        }
    }
}
