use std::path::Path;

use ramehr::augmented::{summaries_for_task, FlattenedDoc};
use ramehr::corpus::{ingest, Corpus};
use ramehr::cotrain::{init_aug, init_local, write_log_csv, CoTrainData, CoTrainer};
use ramehr::ehr::{load_dataset, split_indices, write_jsonl, Dataset, LabelVector, TaskSpec, Vocabulary};
use ramehr::hygt::{build_hypergraph, Hypergraph};
use ramehr::metrics::{evaluate, EvalReport};
use ramehr::retrieval::{build_index, topk, RetrievalResult, VectorIndex};
use ramehr::summarizer::{KnowledgeBase, Summarizer, SummaryCache};
use ramehr::synth::generate;
use ramehr::tensor::{load_checkpoint, save_checkpoint};
use ramehr::{Error, Result};

use crate::config::RunConfig;

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let bench = generate(&cfg.experiment.synth)?;
    bench.save(&cfg.workdir)?;
    log::info!(
        "wrote {} patients, {} codes, {} passages to {}",
        bench.dataset.len(),
        bench.vocab.len(),
        bench.passages.len(),
        cfg.workdir.display()
    );
    Ok(())
}

pub fn ingest_cmd(cfg: &RunConfig) -> Result<()> {
    let inputs: Vec<_> = cfg.paths.inputs.iter().map(|p| cfg.path(p)).collect();
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no input files to ingest".into()));
    }
    let corpus = ingest(&inputs)?;
    corpus.save(cfg.path(&cfg.paths.corpus))?;
    log::info!("ingested {} passages", corpus.len());
    Ok(())
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    ingest(&[cfg.path(&cfg.paths.corpus)])
}

pub fn index(cfg: &RunConfig) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let emb = cfg.embedder()?;
    let index = build_index(&corpus, emb.as_ref())?;
    index.save(cfg.path(&cfg.paths.index))?;
    log::info!("indexed {} passages at dim {}", index.len(), index.dim);
    Ok(())
}

pub fn retrieve(cfg: &RunConfig) -> Result<()> {
    let vocab = Vocabulary::load(cfg.path(&cfg.paths.vocab))?;
    let index = VectorIndex::load(cfg.path(&cfg.paths.index))?;
    let emb = cfg.embedder()?;
    let results = vocab
        .iter()
        .map(|c| topk(&index, emb.as_ref(), &c.id, &c.name, cfg.experiment.k))
        .collect::<Result<Vec<RetrievalResult>>>()?;
    write_jsonl(cfg.path(&cfg.paths.retrieval), &results)?;
    log::info!("retrieved top-{} passages for {} codes", cfg.experiment.k, results.len());
    Ok(())
}

pub fn summarize(cfg: &RunConfig) -> Result<()> {
    let vocab = Vocabulary::load(cfg.path(&cfg.paths.vocab))?;
    let task = TaskSpec::load(cfg.path(&cfg.paths.task))?;
    let corpus = load_corpus(cfg)?;
    let index = VectorIndex::load(cfg.path(&cfg.paths.index))?;
    let emb = cfg.embedder()?;
    let client = cfg.client()?;
    let cache = SummaryCache::open(cfg.path(&cfg.paths.cache))?;
    let mut summarizer = Summarizer::new(client.as_ref(), &cache);
    summarizer.k = cfg.experiment.k;
    let kb = KnowledgeBase {
        corpus: &corpus,
        index: &index,
        embedder: emb.as_ref(),
    };
    let fresh = summarizer.summarize_all(vocab.iter(), &task, kb)?;
    log::info!("{fresh} new summaries, {} cached in total", cache.len());
    Ok(())
}

/// Everything `train` and `evaluate` share: the dataset, its hypergraph,
/// flattened documents and the patient split.
struct Prepared {
    task: TaskSpec,
    hypergraph: Hypergraph,
    docs: Vec<[FlattenedDoc; 3]>,
    labels: Vec<LabelVector>,
    split: [Vec<usize>; 3],
    num_labels: usize,
}

impl Prepared {
    fn load(cfg: &RunConfig) -> Result<Self> {
        let vocab = Vocabulary::load(cfg.path(&cfg.paths.vocab))?;
        let task = TaskSpec::load(cfg.path(&cfg.paths.task))?;
        let ds: Dataset = load_dataset(cfg.path(&cfg.paths.dataset), &vocab, &task)?;
        let cache_path = cfg.path(&cfg.paths.cache);
        if !cache_path.exists() {
            log::warn!("no summary cache at {}; documents carry code names only", cache_path.display());
        }
        let cache = SummaryCache::open(&cache_path)?;
        let summaries = summaries_for_task(&cache, &task.name);
        let flatten = cfg.experiment.aug.flatten;
        Ok(Prepared {
            hypergraph: build_hypergraph(&ds)?,
            docs: ds.patients.iter().map(|p| flatten.patient_docs(p, &summaries, &vocab)).collect(),
            labels: ds.patients.iter().map(|p| p.labels.clone()).collect(),
            split: split_indices(ds.len(), cfg.experiment.split, cfg.seed)?,
            num_labels: ds.num_labels,
            task,
        })
    }

    fn data(&self) -> CoTrainData<'_> {
        CoTrainData {
            hypergraph: &self.hypergraph,
            docs: &self.docs,
            labels: &self.labels,
        }
    }

    fn trainer(&self, cfg: &RunConfig) -> Result<CoTrainer> {
        let e = &cfg.experiment;
        CoTrainer::new(
            e.cotrain,
            Some(init_aug(e.aug, self.num_labels, e.cotrain.seed)?),
            Some(init_local(e.local, self.hypergraph.num_nodes(), self.num_labels, e.cotrain.seed)?),
        )
    }
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    cfg.experiment.cotrain.validate()?;
    let prep = Prepared::load(cfg)?;
    let mut trainer = prep.trainer(cfg)?;
    let [train, val, _] = &prep.split;
    let log = trainer.train(&prep.data(), train, Some(val))?;
    let (aug, local) = (trainer.aug.as_ref().unwrap(), trainer.local.as_ref().unwrap());
    save_checkpoint(cfg.path(&cfg.paths.aug_checkpoint), &aug.params)?;
    save_checkpoint(cfg.path(&cfg.paths.local_checkpoint), &local.params)?;
    write_log_csv(cfg.path(&cfg.paths.log), &log)?;
    if let Some(auroc) = log.iter().rev().find_map(|r| r.val_auroc) {
        log::info!("final validation AUROC {auroc:.4}");
    }
    Ok(())
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Data(format!("checkpoint {} not found; run `train` first", path.display())))
    }
}

pub fn evaluate_cmd(cfg: &RunConfig) -> Result<EvalReport> {
    let aug_path = cfg.path(&cfg.paths.aug_checkpoint);
    let local_path = cfg.path(&cfg.paths.local_checkpoint);
    require(&aug_path)?;
    require(&local_path)?;
    let prep = Prepared::load(cfg)?;
    let mut trainer = prep.trainer(cfg)?;
    trainer.aug.as_mut().unwrap().params.assign_from(&load_checkpoint(&aug_path)?)?;
    trainer.local.as_mut().unwrap().params.assign_from(&load_checkpoint(&local_path)?)?;
    let test = &prep.split[2];
    let scores = trainer.predict_blend(&prep.data(), test)?;
    let labels: Vec<LabelVector> = test.iter().map(|&i| prep.labels[i].clone()).collect();
    let report = evaluate(&scores, &labels, &prep.task.label_names, cfg.experiment.cotrain.threshold)?;
    let path = cfg.path(&cfg.paths.report);
    std::fs::write(&path, report.to_json() + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(report)
}
