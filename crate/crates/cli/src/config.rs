//! Run configuration: one JSON document, overridden by command-line flags.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use ramehr::experiment::ExperimentConfig;
use ramehr::retrieval::{hash_embedder, Embedder, PrecomputedEmbedder};
use ramehr::summarizer::{HttpClient, HttpClientConfig, StubClient, SummaryClient};
use ramehr::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderChoice {
    /// Seeded character 3-gram hashing embedder.
    #[default]
    Hash,
    /// Vectors precomputed by an external encoder.
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ClientChoice {
    #[default]
    Stub,
    Http,
}

/// File locations. Relative paths resolve against the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub vocab: PathBuf,
    pub task: PathBuf,
    pub dataset: PathBuf,
    /// Raw passage and triplet files read by `ingest`.
    pub inputs: Vec<PathBuf>,
    pub corpus: PathBuf,
    pub index: PathBuf,
    pub retrieval: PathBuf,
    pub cache: PathBuf,
    pub aug_checkpoint: PathBuf,
    pub local_checkpoint: PathBuf,
    pub log: PathBuf,
    pub report: PathBuf,
    /// Query and passage vectors for `--embedder file`.
    pub query_vectors: PathBuf,
    pub passage_vectors: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            vocab: "vocab.jsonl".into(),
            task: "task.json".into(),
            dataset: "dataset.jsonl".into(),
            inputs: vec!["passages.jsonl".into(), "triplets.jsonl".into()],
            corpus: "corpus.jsonl".into(),
            index: "index.bin".into(),
            retrieval: "retrieval.jsonl".into(),
            cache: "summaries.jsonl".into(),
            aug_checkpoint: "aug.ckpt".into(),
            local_checkpoint: "local.ckpt".into(),
            log: "train_log.csv".into(),
            report: "report.json".into(),
            query_vectors: "query_vectors.bin".into(),
            passage_vectors: "passage_vectors.bin".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub workdir: PathBuf,
    /// Drives synthesis, the hashing embedder, the split and training.
    pub seed: u64,
    pub paths: Paths,
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
    pub embedder: EmbedderChoice,
    pub client: ClientChoice,
    pub http: Option<HttpClientConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            workdir: ".".into(),
            seed: 0,
            paths: Paths::default(),
            experiment: ExperimentConfig::default(),
            embedder: EmbedderChoice::Hash,
            client: ClientChoice::Stub,
            http: None,
        }
    }
}

/// Values given on the command line; `None` keeps the configured value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub workdir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub beta: Option<f64>,
    pub lambda: Option<f64>,
    pub epochs: Option<usize>,
    pub client: Option<ClientChoice>,
    pub embedder: Option<EmbedderChoice>,
}

impl RunConfig {
    /// Reads a config document. Keys it omits, at any depth, keep their
    /// values from [`RunConfig::default`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::InvalidArgument(format!("config {}: {e}", path.display())))
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        let overlay: Value = serde_json::from_str(text)?;
        let mut base = serde_json::to_value(RunConfig::default())?;
        merge(&mut base, overlay);
        serde_json::from_value(base)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(w) = &o.workdir {
            self.workdir = w.clone();
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(k) = o.k {
            self.experiment.k = k;
        }
        if let Some(b) = o.beta {
            self.experiment.cotrain.beta = b;
        }
        if let Some(l) = o.lambda {
            self.experiment.cotrain.lambda = l;
        }
        if let Some(e) = o.epochs {
            self.experiment.cotrain.epochs = e;
        }
        if let Some(c) = o.client {
            self.client = c;
        }
        if let Some(e) = o.embedder {
            self.embedder = e;
        }
        self.experiment.synth.seed = self.seed;
        self.experiment.cotrain.seed = self.seed;
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }

    pub fn embedder(&self) -> Result<Box<dyn Embedder>> {
        Ok(match self.embedder {
            EmbedderChoice::Hash => Box::new(hash_embedder(self.experiment.embed_dim, self.seed)?),
            EmbedderChoice::File => Box::new(PrecomputedEmbedder::load(
                self.path(&self.paths.query_vectors),
                self.path(&self.paths.passage_vectors),
            )?),
        })
    }

    pub fn client(&self) -> Result<Box<dyn SummaryClient>> {
        Ok(match self.client {
            ClientChoice::Stub => Box::new(StubClient::new(self.experiment.stub_words)),
            ClientChoice::Http => {
                let cfg = self.http.clone().ok_or_else(|| {
                    Error::InvalidArgument("--client http needs an \"http\" section in the config".into())
                })?;
                Box::new(HttpClient::new(cfg)?)
            }
        })
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
