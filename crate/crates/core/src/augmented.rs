//! The knowledge-augmented model: each patient becomes three documents
//! (one per code type) of code names and summaries, encoded by one shared
//! text encoder; the three CLS vectors feed a classification head.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ehr::{CodeType, PatientRecord, Vocabulary};
use crate::hashing::hash_bytes;
use crate::hygt::sigmoid;
use crate::nn::{AttentionBlock, AttentionConfig, Mlp};
use crate::summarizer::SummaryCache;
use crate::tensor::{normal_tensor, Binding, Graph, ParamId, ParamStore, Scalar, Var};
use crate::{Error, Result};

pub const CLS: u32 = 0;
pub const DEFAULT_TOKEN_VOCAB: usize = 1 << 16;
pub const DEFAULT_MAX_LEN: usize = 512;
const TOKEN_SEED: u64 = 0x7a3c_15e1;

/// Code id → summary text for one task.
pub type Summaries = BTreeMap<String, String>;

pub fn summaries_for_task(cache: &SummaryCache, task: &str) -> Summaries {
    cache
        .entries()
        .into_iter()
        .filter(|s| s.task == task)
        .map(|s| (s.code, s.text))
        .collect()
}

/// Whitespace tokenization with hashed ids in `1..vocab`; id 0 is CLS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Flattener {
    pub token_vocab: usize,
    pub max_len: usize,
}

impl Default for Flattener {
    fn default() -> Self {
        Flattener {
            token_vocab: DEFAULT_TOKEN_VOCAB,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlattenedDoc {
    pub kind: CodeType,
    pub tokens: Vec<u32>,
}

impl Flattener {
    pub fn token_id(&self, word: &str) -> u32 {
        let h = hash_bytes(TOKEN_SEED, word.to_lowercase().as_bytes());
        1 + (h % (self.token_vocab as u64 - 1)) as u32
    }

    /// `[CLS]` followed by the patient's codes of `kind`, most recent visit
    /// first and vocabulary order within a visit, each as its name and
    /// summary (the name alone when no summary exists).
    pub fn flatten(&self, p: &PatientRecord, kind: CodeType, summaries: &Summaries, vocab: &Vocabulary) -> FlattenedDoc {
        let max_len = self.max_len.max(1);
        let mut tokens = vec![CLS];
        'visits: for visit in p.visits.iter().rev() {
            let mut codes: Vec<(usize, &str)> = visit
                .codes
                .iter()
                .filter_map(|c| vocab.index_of(c).map(|i| (i, c.as_str())))
                .filter(|&(i, _)| vocab.by_index(i).kind == kind)
                .collect();
            codes.sort_unstable();
            for (i, id) in codes {
                let name = &vocab.by_index(i).name;
                let summary = summaries.get(id).map(String::as_str).unwrap_or("");
                for w in name.split_whitespace().chain(summary.split_whitespace()) {
                    if tokens.len() == max_len {
                        break 'visits;
                    }
                    tokens.push(self.token_id(w));
                }
            }
        }
        FlattenedDoc { kind, tokens }
    }

    /// The three documents in [`CodeType::ALL`] order.
    pub fn patient_docs(&self, p: &PatientRecord, summaries: &Summaries, vocab: &Vocabulary) -> [FlattenedDoc; 3] {
        CodeType::ALL.map(|k| self.flatten(p, k, summaries, vocab))
    }
}

pub fn flatten_patient(
    p: &PatientRecord,
    kind: CodeType,
    summaries: &Summaries,
    vocab: &Vocabulary,
    max_len: usize,
) -> FlattenedDoc {
    Flattener {
        max_len,
        ..Flattener::default()
    }
    .flatten(p, kind, summaries, vocab)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Transformer,
    /// Mean of token embeddings, no positions: an order-invariant ablation.
    MeanPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugConfig {
    pub encoder: EncoderKind,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub readout_hidden: usize,
    pub init_std: f64,
    pub flatten: Flattener,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            encoder: EncoderKind::Transformer,
            layers: 2,
            dim: 64,
            heads: 4,
            ffn_dim: 128,
            readout_hidden: 64,
            init_std: 0.02,
            flatten: Flattener::default(),
        }
    }
}

/// ŷ₁ for one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugPrediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AugModel {
    cfg: AugConfig,
    num_labels: usize,
    token_emb: ParamId,
    pos_emb: Option<ParamId>,
    blocks: Vec<AttentionBlock>,
    readout: Mlp,
}

impl AugModel {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: AugConfig, num_labels: usize, rng: &mut R) -> Result<Self> {
        if num_labels == 0 || cfg.dim == 0 || cfg.flatten.token_vocab < 2 || cfg.flatten.max_len == 0 {
            return Err(Error::InvalidArgument("labels, dim, vocabulary and max_len must be positive".into()));
        }
        let token_emb = store.add(
            "aug.token_emb",
            normal_tensor(rng, cfg.flatten.token_vocab, cfg.dim, cfg.init_std),
        );
        let (pos_emb, blocks) = match cfg.encoder {
            EncoderKind::Transformer => {
                if cfg.layers == 0 {
                    return Err(Error::InvalidArgument("a transformer encoder needs a layer".into()));
                }
                let att = AttentionConfig {
                    dim: cfg.dim,
                    heads: cfg.heads,
                    ffn_dim: cfg.ffn_dim,
                };
                let pos = store.add("aug.pos_emb", normal_tensor(rng, cfg.flatten.max_len, cfg.dim, cfg.init_std));
                let blocks = (0..cfg.layers)
                    .map(|l| AttentionBlock::new(store, &format!("aug.layer{l}"), att, rng))
                    .collect::<Result<_>>()?;
                (Some(pos), blocks)
            }
            EncoderKind::MeanPool => (None, Vec::new()),
        };
        let readout = Mlp::new(store, "aug.readout", &[3 * cfg.dim, cfg.readout_hidden, num_labels], rng);
        Ok(AugModel {
            cfg,
            num_labels,
            token_emb,
            pos_emb,
            blocks,
            readout,
        })
    }

    pub fn config(&self) -> AugConfig {
        self.cfg
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn token_embedding(&self) -> ParamId {
        self.token_emb
    }

    fn check_doc(&self, d: &FlattenedDoc) -> Result<()> {
        if d.tokens.first() != Some(&CLS) || d.tokens.len() > self.cfg.flatten.max_len {
            return Err(Error::InvalidArgument(format!(
                "a document must start with CLS and hold at most {} tokens",
                self.cfg.flatten.max_len
            )));
        }
        if let Some(t) = d.tokens.iter().find(|&&t| t as usize >= self.cfg.flatten.token_vocab) {
            return Err(Error::InvalidArgument(format!("token {t} outside the vocabulary")));
        }
        Ok(())
    }

    /// CLS encodings `[docs.len(), dim]`, one row per document, all through
    /// the same parameters.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, b: &Binding, docs: &[&FlattenedDoc]) -> Result<Var> {
        for d in docs {
            self.check_doc(d)?;
        }
        let Some(pos_emb) = self.pos_emb else {
            let segments = docs
                .iter()
                .map(|d| d.tokens.iter().map(|&t| t as usize).collect())
                .collect();
            return g.segment_mean(b.var(self.token_emb), segments);
        };
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut ranges = Vec::with_capacity(docs.len());
        for d in docs {
            let start = tokens.len();
            tokens.extend(d.tokens.iter().map(|&t| t as usize));
            positions.extend(0..d.tokens.len());
            ranges.push(start..tokens.len());
        }
        let tok = g.gather_rows(b.var(self.token_emb), &tokens)?;
        let pos = g.gather_rows(b.var(pos_emb), &positions)?;
        let mut h = g.add(tok, pos)?;
        let (last, inner) = self.blocks.split_last().expect("transformer has a layer");
        for block in inner {
            let mut queries = Vec::with_capacity(tokens.len());
            let mut segments = Vec::with_capacity(tokens.len());
            for r in &ranges {
                for q in r.clone() {
                    queries.push(q);
                    segments.push(r.clone().collect());
                }
            }
            h = block.forward(g, b, h, &queries, segments)?;
        }
        let starts: Vec<usize> = ranges.iter().map(|r| r.start).collect();
        last.forward(g, b, h, &starts, ranges.into_iter().map(|r| r.collect()).collect())
    }

    /// Logits `[patients.len(), num_labels]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Binding, patients: &[&[FlattenedDoc; 3]]) -> Result<Var> {
        if patients.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for p in patients {
            if p.iter().zip(CodeType::ALL).any(|(d, k)| d.kind != k) {
                return Err(Error::InvalidArgument("documents must follow disease, medication, procedure".into()));
            }
        }
        let docs: Vec<&FlattenedDoc> = patients.iter().flat_map(|p| p.iter()).collect();
        let cls = self.encode(g, b, &docs)?;
        let m = patients.len();
        let per_type = (0..3)
            .map(|t| g.gather_rows(cls, &(0..m).map(|i| 3 * i + t).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let joined = g.concat(&per_type, 1)?;
        self.readout.forward(g, b, joined)
    }

    /// Inference-only logits, computed in chunks of `batch` patients.
    pub fn predict_logits<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        patients: &[&[FlattenedDoc; 3]],
        batch: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(patients.len());
        for chunk in patients.chunks(batch.max(1)) {
            let mut g = Graph::new();
            let b = store.bind(&mut g, false);
            let z = self.forward(&mut g, &b, chunk)?;
            let z = g.value(z);
            out.extend((0..z.rows()).map(|i| z.row(i).iter().map(|v| v.f64()).collect::<Vec<_>>()));
        }
        Ok(out)
    }

    /// ŷ₁ for one patient.
    pub fn aug_forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        p: &PatientRecord,
        summaries: &Summaries,
        vocab: &Vocabulary,
    ) -> Result<AugPrediction> {
        let docs = self.cfg.flatten.patient_docs(p, summaries, vocab);
        let logits = self.predict_logits(store, &[&docs], 1)?.remove(0);
        let probs = logits.iter().map(|&z| sigmoid(z)).collect();
        Ok(AugPrediction { logits, probs })
    }
}
