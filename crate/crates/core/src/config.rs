//! Run configuration: one JSON file, every key validated, unknown keys
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::SyntheticSpec;
use crate::gfm::GfmConfig;
use crate::inference::InferenceConfig;
use crate::kg::io::read_text;
use crate::kg::EmbeddingProvider;
use crate::pretrain::TrainConfig;
use crate::selector::FinetuneConfig;

/// Input locations; anything unset falls back to the layout under `out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out: PathBuf,
    /// Directory holding the graph files.
    pub kg: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    /// JSONL table of `{"key", "vector"}` records replacing token hashing.
    pub embeddings: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            kg: None,
            corpus: None,
            queries: None,
            embeddings: None,
            checkpoints: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub text_dim: usize,
    pub prompt_dim: usize,
    /// Seed of the token-hash text encoder. Kept apart from the run seed so
    /// that checkpoints stay valid under `--seed`.
    pub embedding_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let g = GfmConfig::default();
        Self {
            hidden: g.hidden,
            layers: g.layers,
            text_dim: g.text_dim,
            prompt_dim: 64,
            embedding_seed: 1024,
        }
    }
}

impl ModelConfig {
    pub fn gfm(&self) -> GfmConfig {
        GfmConfig {
            hidden: self.hidden,
            layers: self.layers,
            text_dim: self.text_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexConfig {
    /// Add equivalence edges between entities with similar names.
    pub resolve: bool,
    pub threshold: f64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            resolve: true,
            threshold: 0.8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub model: ModelConfig,
    /// Synthetic benchmark shape; its seed is always the run seed.
    pub synth: SyntheticSpec,
    pub index: IndexConfig,
    pub pretrain: TrainConfig,
    pub finetune: FinetuneConfig,
    pub inference: InferenceConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path).map_err(|e| match e {
            Error::MissingArtifact(p) => Error::Config(format!("config file {} not found", p.display())),
            other => other,
        })?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.gfm().validate()?;
        if self.model.prompt_dim == 0 {
            return Err(Error::Config("model.prompt_dim must be >= 1".into()));
        }
        self.synth_spec().validate()?;
        if !(self.index.threshold > 0.0 && self.index.threshold <= 1.0) {
            return Err(Error::Config(format!("index.threshold must lie in (0, 1], got {}", self.index.threshold)));
        }
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.inference.validate()?;
        Ok(())
    }

    pub fn synth_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    pub fn layout(&self) -> Layout {
        Layout {
            out: self.paths.out.clone(),
        }
    }

    pub fn kg_source(&self) -> PathBuf {
        self.paths.kg.clone().unwrap_or_else(|| self.layout().data_dir())
    }

    pub fn corpus_source(&self) -> PathBuf {
        self.paths
            .corpus
            .clone()
            .unwrap_or_else(|| self.layout().data_dir().join(crate::kg::io::CORPUS_FILE))
    }

    pub fn queries_source(&self) -> PathBuf {
        self.paths
            .queries
            .clone()
            .unwrap_or_else(|| self.layout().data_dir().join(crate::eval::synthetic::QUERIES_FILE))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.paths.checkpoints.clone().unwrap_or_else(|| self.layout().out.join("checkpoints"))
    }

    pub fn provider(&self) -> Result<EmbeddingProvider> {
        match &self.paths.embeddings {
            Some(path) => {
                let p = EmbeddingProvider::from_file(path)?;
                if p.dim() != self.model.text_dim {
                    return Err(Error::Config(format!(
                        "embedding table has dimension {}, model.text_dim is {}",
                        p.dim(),
                        self.model.text_dim
                    )));
                }
                Ok(p)
            }
            None => EmbeddingProvider::token_hash(self.model.text_dim, self.model.embedding_seed),
        }
    }
}

/// Output directory layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub out: PathBuf,
}

impl Layout {
    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn index_dir(&self) -> PathBuf {
        self.out.join("index")
    }

    pub fn index_file(&self) -> PathBuf {
        self.index_dir().join("entity_docs.jsonl")
    }

    pub fn logs_dir(&self) -> PathBuf {
        self.out.join("logs")
    }

    pub fn retrieve_dir(&self) -> PathBuf {
        self.out.join("retrieve")
    }

    pub fn metrics_file(&self) -> PathBuf {
        self.out.join("eval").join("metrics.json")
    }
}
