//! End-to-end run on the synthetic benchmark: corpus, index, stub
//! summaries, then co-training against single-model and permuted-label
//! controls.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmented::{summaries_for_task, AugConfig, Flattener, FlattenedDoc};
use crate::cotrain::{init_aug, init_local, stream_seed, CoTrainConfig, CoTrainData, CoTrainer};
use crate::ehr::{split_indices, LabelVector};
use crate::hygt::{build_hypergraph, HygtConfig};
use crate::metrics::{evaluate, EvalReport};
use crate::retrieval::{build_index, hash_embedder};
use crate::summarizer::{KnowledgeBase, StubClient, Summarizer, SummaryCache};
use crate::synth::{generate, SynthConfig};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub cotrain: CoTrainConfig,
    pub aug: AugConfig,
    pub local: HygtConfig,
    pub embed_dim: usize,
    pub k: usize,
    pub stub_words: usize,
    pub split: (f64, f64, f64),
}

impl Default for ExperimentConfig {
    /// Small models and from-scratch learning rates sized to train in
    /// seconds on one core.
    fn default() -> Self {
        ExperimentConfig {
            synth: SynthConfig::default(),
            cotrain: CoTrainConfig {
                lr_aug: 2e-3,
                lr_local: 2e-3,
                ..CoTrainConfig::default()
            },
            aug: AugConfig {
                layers: 1,
                dim: 32,
                heads: 2,
                ffn_dim: 64,
                readout_hidden: 32,
                flatten: Flattener {
                    max_len: 128,
                    ..Flattener::default()
                },
                ..AugConfig::default()
            },
            local: HygtConfig {
                layers: 2,
                dim: 32,
                heads: 2,
                ffn_dim: 64,
                readout_hidden: 32,
                ..HygtConfig::default()
            },
            embed_dim: 256,
            k: 5,
            stub_words: 16,
            split: (0.8, 0.1, 0.1),
        }
    }
}

/// Test-set reports. Everything here is deterministic given the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub blended: EvalReport,
    pub local_only: EvalReport,
    pub aug_only: EvalReport,
    pub permuted: EvalReport,
    pub stub_calls: usize,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub seconds: f64,
}

const PERMUTE: u64 = 4;

pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let start = Instant::now();
    let bench = generate(&cfg.synth)?;
    let corpus = bench.corpus()?;
    let embedder = hash_embedder(cfg.embed_dim, cfg.synth.seed)?;
    let index = build_index(&corpus, &embedder)?;
    let client = StubClient::new(cfg.stub_words);
    let cache = SummaryCache::in_memory();
    let mut summarizer = Summarizer::new(&client, &cache);
    summarizer.k = cfg.k;
    let kb = KnowledgeBase {
        corpus: &corpus,
        index: &index,
        embedder: &embedder,
    };
    summarizer.summarize_all(bench.vocab.iter(), &bench.task, kb)?;
    let summaries = summaries_for_task(&cache, &bench.task.name);
    log::info!("summarized {} codes in {:.1}s", cache.len(), start.elapsed().as_secs_f64());

    let ds = &bench.dataset;
    let hg = build_hypergraph(ds)?;
    let docs: Vec<[FlattenedDoc; 3]> = ds
        .patients
        .iter()
        .map(|p| cfg.aug.flatten.patient_docs(p, &summaries, &bench.vocab))
        .collect();
    let labels: Vec<LabelVector> = ds.patients.iter().map(|p| p.labels.clone()).collect();
    let [train, val, test] = split_indices(ds.len(), cfg.split, cfg.cotrain.seed)?;
    let names = &bench.task.label_names;
    let nl = ds.num_labels;
    let threshold = cfg.cotrain.threshold;
    let test_labels = |ls: &[LabelVector]| -> Vec<LabelVector> { test.iter().map(|&i| ls[i].clone()).collect() };

    let train_run = |c: CoTrainConfig, ls: &[LabelVector]| -> Result<CoTrainer> {
        let data = CoTrainData {
            hypergraph: &hg,
            docs: &docs,
            labels: ls,
        };
        let mut t = CoTrainer::new(
            c,
            Some(init_aug(cfg.aug, nl, c.seed)?),
            Some(init_local(cfg.local, hg.num_nodes(), nl, c.seed)?),
        )?;
        t.train(&data, &train, Some(&val))?;
        Ok(t)
    };
    let data = CoTrainData {
        hypergraph: &hg,
        docs: &docs,
        labels: &labels,
    };

    let joint = train_run(cfg.cotrain, &labels)?;
    let blended = evaluate(&joint.predict_blend(&data, &test)?, &test_labels(&labels), names, threshold)?;
    log::info!("co-trained AUROC {:.4} at {:.1}s", blended.auroc, start.elapsed().as_secs_f64());

    // λ = 0 trains the two models independently.
    let single = train_run(CoTrainConfig { lambda: 0.0, ..cfg.cotrain }, &labels)?;
    let aug_only = evaluate(&single.predict_aug(&data, &test)?, &test_labels(&labels), names, threshold)?;
    let local_only = evaluate(&single.predict_local(&data, &test)?, &test_labels(&labels), names, threshold)?;
    log::info!(
        "augmented-only AUROC {:.4}, local-only AUROC {:.4} at {:.1}s",
        aug_only.auroc,
        local_only.auroc,
        start.elapsed().as_secs_f64()
    );

    let mut permuted_labels = labels.clone();
    permuted_labels.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(cfg.cotrain.seed, PERMUTE)));
    let control = train_run(cfg.cotrain, &permuted_labels)?;
    let permuted_data = CoTrainData {
        labels: &permuted_labels,
        ..data
    };
    let permuted = evaluate(
        &control.predict_blend(&permuted_data, &test)?,
        &test_labels(&permuted_labels),
        names,
        threshold,
    )?;
    log::info!("permuted-label AUROC {:.4}", permuted.auroc);

    Ok(ExperimentOutcome {
        report: ExperimentReport {
            blended,
            local_only,
            aug_only,
            permuted,
            stub_calls: client.calls(),
        },
        seconds: start.elapsed().as_secs_f64(),
    })
}
