//! The full pipeline through files: synthetic data on disk, ingestion,
//! a saved index, a persistent summary cache and checkpointed models.

use ramehr::augmented::{summaries_for_task, AugConfig, Flattener, FlattenedDoc};
use ramehr::corpus::ingest;
use ramehr::cotrain::{init_aug, init_local, CoTrainConfig, CoTrainData, CoTrainer};
use ramehr::ehr::{load_dataset, split_indices, LabelVector, TaskSpec, Vocabulary};
use ramehr::hygt::{build_hypergraph, HygtConfig, Hypergraph};
use ramehr::metrics::evaluate;
use ramehr::retrieval::{build_index, hash_embedder, topk, VectorIndex};
use ramehr::summarizer::{KnowledgeBase, StubClient, Summarizer, SummaryCache};
use ramehr::synth::{generate, SynthConfig};
use ramehr::tensor::{load_checkpoint, save_checkpoint};

fn small() -> SynthConfig {
    SynthConfig {
        num_patients: 200,
        num_codes: 20,
        num_labels: 3,
        knowledge_codes_per_label: 10,
        ..SynthConfig::default()
    }
}

#[test]
fn files_round_trip_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let bench = generate(&small()).unwrap();
    bench.save(root).unwrap();

    let vocab = Vocabulary::load(root.join("vocab.jsonl")).unwrap();
    let task = TaskSpec::load(root.join("task.json")).unwrap();
    let ds = load_dataset(root.join("dataset.jsonl"), &vocab, &task).unwrap();
    assert_eq!(ds, bench.dataset);

    let corpus = ingest(&[root.join("passages.jsonl"), root.join("triplets.jsonl")]).unwrap();
    assert_eq!(corpus, bench.corpus().unwrap());

    let emb = hash_embedder(64, 0).unwrap();
    let index = build_index(&corpus, &emb).unwrap();
    index.save(root.join("index.bin")).unwrap();
    let loaded = VectorIndex::load(root.join("index.bin")).unwrap();
    assert_eq!(loaded, index);
    let code = vocab.by_index(0);
    assert_eq!(
        topk(&index, &emb, &code.id, &code.name, 5).unwrap(),
        topk(&loaded, &emb, &code.id, &code.name, 5).unwrap()
    );

    let client = StubClient::new(12);
    let cache_path = root.join("summaries.jsonl");
    let kb = KnowledgeBase {
        corpus: &corpus,
        index: &loaded,
        embedder: &emb,
    };
    {
        let cache = SummaryCache::open(&cache_path).unwrap();
        Summarizer::new(&client, &cache).summarize_all(vocab.iter(), &task, kb).unwrap();
    }
    assert_eq!(client.calls(), vocab.len());
    let cache = SummaryCache::open(&cache_path).unwrap();
    assert_eq!(cache.len(), vocab.len());
    let summaries = summaries_for_task(&cache, &task.name);

    let hg = build_hypergraph(&ds).unwrap();
    hg.save_json(root.join("hypergraph.json")).unwrap();
    assert_eq!(Hypergraph::load_json(root.join("hypergraph.json")).unwrap(), hg);

    let aug_cfg = AugConfig {
        layers: 1,
        dim: 16,
        heads: 2,
        ffn_dim: 16,
        readout_hidden: 16,
        flatten: Flattener {
            token_vocab: 1 << 12,
            max_len: 48,
        },
        ..AugConfig::default()
    };
    let local_cfg = HygtConfig {
        layers: 1,
        dim: 16,
        heads: 2,
        ffn_dim: 16,
        readout_hidden: 16,
        ..HygtConfig::default()
    };
    let docs: Vec<[FlattenedDoc; 3]> = ds.patients.iter().map(|p| aug_cfg.flatten.patient_docs(p, &summaries, &vocab)).collect();
    let labels: Vec<LabelVector> = ds.patients.iter().map(|p| p.labels.clone()).collect();
    let data = CoTrainData {
        hypergraph: &hg,
        docs: &docs,
        labels: &labels,
    };
    let cfg = CoTrainConfig {
        lr_aug: 2e-3,
        lr_local: 2e-3,
        epochs: 2,
        ..CoTrainConfig::default()
    };
    let [train, val, test] = split_indices(ds.len(), (0.8, 0.1, 0.1), 0).unwrap();
    let new_trainer = || {
        CoTrainer::new(
            cfg,
            Some(init_aug(aug_cfg, ds.num_labels, cfg.seed).unwrap()),
            Some(init_local(local_cfg, hg.num_nodes(), ds.num_labels, cfg.seed).unwrap()),
        )
        .unwrap()
    };
    let mut trainer = new_trainer();
    let log = trainer.train(&data, &train, Some(&val)).unwrap();
    assert_eq!(log.last().unwrap().epoch, 1);
    assert!(log.last().unwrap().val_auroc.is_some());

    save_checkpoint(root.join("aug.ckpt"), &trainer.aug.as_ref().unwrap().params).unwrap();
    save_checkpoint(root.join("local.ckpt"), &trainer.local.as_ref().unwrap().params).unwrap();
    let mut restored = new_trainer();
    restored.aug.as_mut().unwrap().params.assign_from(&load_checkpoint(root.join("aug.ckpt")).unwrap()).unwrap();
    restored.local.as_mut().unwrap().params.assign_from(&load_checkpoint(root.join("local.ckpt")).unwrap()).unwrap();

    let before = trainer.predict_blend(&data, &test).unwrap();
    let after = restored.predict_blend(&data, &test).unwrap();
    assert_eq!(before, after);
    let test_labels: Vec<LabelVector> = test.iter().map(|&i| labels[i].clone()).collect();
    let report = evaluate(&after, &test_labels, &task.label_names, 0.5).unwrap();
    assert!(report.auroc > 0.5, "{}", report.auroc);
}
