//! Joint training of the augmented model (ŷ₁) and the local model (ŷ₂).
//!
//! Each model minimizes its own BCE plus `λ·KL(ŷ, ỹ)` towards the blend
//! `ỹ = β·ŷ₁ + (1−β)·ŷ₂`. By default `ỹ` is a constant and each model
//! runs on its own graph; the coupled variant back-propagates the sum of
//! both losses through `ỹ` in one graph.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmented::{AugConfig, AugModel, FlattenedDoc};
use crate::ehr::LabelVector;
use crate::hashing::hash_pair;
use crate::hygt::{sigmoid, HygtConfig, HygtModel, Hypergraph};
use crate::metrics;
use crate::tensor::{self, Adam, AdamConfig, Binding, Graph, ParamStore, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoTrainConfig {
    pub beta: f64,
    pub lambda: f64,
    pub lr_aug: f64,
    pub lr_local: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub threshold: f64,
    /// Treat ỹ as a constant in both KL terms.
    pub detach: bool,
}

impl Default for CoTrainConfig {
    fn default() -> Self {
        CoTrainConfig {
            beta: 0.2,
            lambda: 1.0,
            lr_aug: 5e-5,
            lr_local: 1e-4,
            batch_size: 32,
            epochs: 5,
            seed: 0,
            threshold: 0.5,
            detach: true,
        }
    }
}

impl CoTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1]");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if !(self.lr_aug > 0.0 && self.lr_local > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        Ok(())
    }
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidArgument(format!("{a} predictions for {b} targets")));
    }
    Ok(())
}

/// Mean binary cross-entropy over labels, probabilities clamped to
/// `[1e-7, 1 − 1e-7]`.
pub fn bce(pred: &[f64], target: &[f64]) -> Result<f64> {
    same_len(pred.len(), target.len())?;
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| tensor::binary_cross_entropy(p, y))
        .sum();
    Ok(s / pred.len() as f64)
}

/// Mean per-label Bernoulli `KL(p ‖ q)`.
pub fn bernoulli_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    same_len(p.len(), q.len())?;
    let s: f64 = p.iter().zip(q).map(|(&a, &b)| tensor::bernoulli_kl(a, b)).sum();
    Ok(s / p.len() as f64)
}

/// `β·y1 + (1−β)·y2`, evaluated as `y2 + β·(y1 − y2)` so that it returns
/// exactly `y1` at β = 1, exactly `y2` at β = 0 and exactly the common
/// value when `y1 = y2`.
pub fn blend(y1: &[f64], y2: &[f64], beta: f64) -> Vec<f64> {
    y1.iter()
        .zip(y2)
        .map(|(&a, &b)| if beta == 1.0 { a } else { b + beta * (a - b) })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionPair {
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub y_blend: Vec<f64>,
}

impl PredictionPair {
    pub fn new(y1: Vec<f64>, y2: Vec<f64>, beta: f64) -> Result<Self> {
        same_len(y1.len(), y2.len())?;
        let y_blend = blend(&y1, &y2, beta);
        Ok(PredictionPair { y1, y2, y_blend })
    }

    pub fn hard_labels(&self, threshold: f64) -> Vec<u8> {
        self.y_blend.iter().map(|&p| u8::from(p >= threshold)).collect()
    }
}

/// Everything the two models read, indexed by patient: hyperedge `i` of
/// the hypergraph, `docs[i]` and `labels[i]` describe the same patient.
#[derive(Debug, Clone, Copy)]
pub struct CoTrainData<'a> {
    pub hypergraph: &'a Hypergraph,
    pub docs: &'a [[FlattenedDoc; 3]],
    pub labels: &'a [LabelVector],
}

impl CoTrainData<'_> {
    fn check(&self) -> Result<()> {
        if self.docs.len() != self.labels.len() || self.hypergraph.num_edges() != self.labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} hyperedges, {} document sets and {} label vectors",
                self.hypergraph.num_edges(),
                self.docs.len(),
                self.labels.len()
            )));
        }
        Ok(())
    }

    fn targets(&self, batch: &[usize]) -> Vec<f64> {
        batch
            .iter()
            .flat_map(|&i| self.labels[i].values().iter().map(|&y| f64::from(y)))
            .collect()
    }
}

pub struct AugPart {
    pub model: AugModel,
    pub params: ParamStore<f32>,
    opt: Adam,
}

pub struct LocalPart {
    pub model: HygtModel,
    pub params: ParamStore<f32>,
    opt: Adam,
}

/// Seed of the stream used for purpose `tag` (model init, batch order).
pub fn stream_seed(seed: u64, tag: u64) -> u64 {
    hash_pair(seed, tag)
}

const INIT_AUG: u64 = 1;
const INIT_LOCAL: u64 = 2;
const SHUFFLE: u64 = 3;

pub fn init_aug(cfg: AugConfig, num_labels: usize, seed: u64) -> Result<(AugModel, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, INIT_AUG));
    let model = AugModel::new(&mut store, cfg, num_labels, &mut rng)?;
    Ok((model, store))
}

pub fn init_local(cfg: HygtConfig, num_nodes: usize, num_labels: usize, seed: u64) -> Result<(HygtModel, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, INIT_LOCAL));
    let model = HygtModel::new(&mut store, cfg, num_nodes, num_labels, &mut rng)?;
    Ok((model, store))
}

/// Losses of one step; `None` for an absent model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub loss_aug: Option<f64>,
    pub loss_loc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss_aug: Option<f64>,
    pub loss_loc: Option<f64>,
    pub val_auroc: Option<f64>,
}

pub struct CoTrainer {
    cfg: CoTrainConfig,
    pub aug: Option<AugPart>,
    pub local: Option<LocalPart>,
    steps: usize,
}

fn scalar(g: &Graph<f32>, v: Var) -> f64 {
    f64::from(g.value(v).data()[0])
}

fn probs(g: &Graph<f32>, p: Var) -> Vec<f64> {
    g.value(p).data().iter().map(|&v| f64::from(v)).collect()
}

impl CoTrainer {
    /// Either model may be absent for single-model baselines, which then
    /// need `λ = 0`.
    pub fn new(
        cfg: CoTrainConfig,
        aug: Option<(AugModel, ParamStore<f32>)>,
        local: Option<(HygtModel, ParamStore<f32>)>,
    ) -> Result<Self> {
        cfg.validate()?;
        if aug.is_none() && local.is_none() {
            return Err(Error::InvalidArgument("co-training needs at least one model".into()));
        }
        if (aug.is_none() || local.is_none()) && cfg.lambda != 0.0 {
            return Err(Error::InvalidArgument("a single model trains with lambda = 0".into()));
        }
        if !cfg.detach && (aug.is_none() || local.is_none()) {
            return Err(Error::InvalidArgument("the coupled variant needs both models".into()));
        }
        Ok(CoTrainer {
            cfg,
            aug: aug.map(|(model, params)| {
                let opt = Adam::new(AdamConfig::with_lr(cfg.lr_aug), &params);
                AugPart { model, params, opt }
            }),
            local: local.map(|(model, params)| {
                let opt = Adam::new(AdamConfig::with_lr(cfg.lr_local), &params);
                LocalPart { model, params, opt }
            }),
            steps: 0,
        })
    }

    pub fn config(&self) -> &CoTrainConfig {
        &self.cfg
    }

    fn aug_probs(&self, g: &mut Graph<f32>, b: &Binding, data: &CoTrainData, batch: &[usize]) -> Result<Option<Var>> {
        let Some(a) = &self.aug else { return Ok(None) };
        let docs: Vec<&[FlattenedDoc; 3]> = batch.iter().map(|&i| &data.docs[i]).collect();
        let z = a.model.forward(g, b, &docs)?;
        Ok(Some(g.sigmoid(z)?))
    }

    fn local_probs(&self, g: &mut Graph<f32>, b: &Binding, data: &CoTrainData, batch: &[usize]) -> Result<Option<Var>> {
        let Some(l) = &self.local else { return Ok(None) };
        let z = l.model.forward(g, b, data.hypergraph, batch)?;
        Ok(Some(g.sigmoid(z)?))
    }

    /// BCE plus, when λ ≠ 0, λ·KL towards the constant blend.
    fn detached_loss(&self, g: &mut Graph<f32>, p: Var, y: &[f64], blend: Option<&[f64]>) -> Result<Var> {
        let mut rows = g.bce_rows(p, y)?;
        if self.cfg.lambda != 0.0 {
            let kl = g.kl_rows(p, blend.expect("both models present when lambda is nonzero"))?;
            let kl = g.scale(kl, self.cfg.lambda)?;
            rows = g.add(rows, kl)?;
        }
        g.mean_all(rows)
    }

    /// One update of both models from a single forward pass over `batch`.
    pub fn step(&mut self, data: &CoTrainData, batch: &[usize]) -> Result<StepLosses> {
        data.check()?;
        let index = self.steps;
        self.steps += 1;
        let result = if self.cfg.detach {
            self.step_detached(data, batch)
        } else {
            self.step_coupled(data, batch)
        };
        result.map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("batch {index}: {m}")),
            other => other,
        })
    }

    fn step_detached(&mut self, data: &CoTrainData, batch: &[usize]) -> Result<StepLosses> {
        let y = data.targets(batch);
        let mut ga = Graph::new();
        let ba = self.aug.as_ref().map(|a| a.params.bind(&mut ga, true));
        let pa = match &ba {
            Some(b) => self.aug_probs(&mut ga, b, data, batch)?,
            None => None,
        };
        let mut gl = Graph::new();
        let bl = self.local.as_ref().map(|l| l.params.bind(&mut gl, true));
        let pl = match &bl {
            Some(b) => self.local_probs(&mut gl, b, data, batch)?,
            None => None,
        };
        let blend_target = match (pa, pl) {
            (Some(a), Some(l)) if self.cfg.lambda != 0.0 => Some(blend(&probs(&ga, a), &probs(&gl, l), self.cfg.beta)),
            _ => None,
        };

        let mut losses = StepLosses {
            loss_aug: None,
            loss_loc: None,
        };
        if let (Some(p), Some(b)) = (pa, &ba) {
            let loss = self.detached_loss(&mut ga, p, &y, blend_target.as_deref())?;
            losses.loss_aug = Some(scalar(&ga, loss));
            ga.backward(loss)?;
            let part = self.aug.as_mut().expect("bound above");
            let grads = part.params.gradients(&ga, b);
            part.opt.step(&mut part.params, &grads)?;
        }
        if let (Some(p), Some(b)) = (pl, &bl) {
            let loss = self.detached_loss(&mut gl, p, &y, blend_target.as_deref())?;
            losses.loss_loc = Some(scalar(&gl, loss));
            gl.backward(loss)?;
            let part = self.local.as_mut().expect("bound above");
            let grads = part.params.gradients(&gl, b);
            part.opt.step(&mut part.params, &grads)?;
        }
        Ok(losses)
    }

    fn step_coupled(&mut self, data: &CoTrainData, batch: &[usize]) -> Result<StepLosses> {
        let y = data.targets(batch);
        let (a, l) = (
            self.aug.as_ref().expect("checked in new"),
            self.local.as_ref().expect("checked in new"),
        );
        let mut g = Graph::new();
        let ba = a.params.bind(&mut g, true);
        let bl = l.params.bind(&mut g, true);
        let pa = self.aug_probs(&mut g, &ba, data, batch)?.expect("present");
        let pl = self.local_probs(&mut g, &bl, data, batch)?.expect("present");
        let wa = g.scale(pa, self.cfg.beta)?;
        let wl = g.scale(pl, 1.0 - self.cfg.beta)?;
        let yt = g.add(wa, wl)?;
        let mut total_parts = Vec::with_capacity(2);
        for p in [pa, pl] {
            let mut rows = g.bce_rows(p, &y)?;
            if self.cfg.lambda != 0.0 {
                let kl = g.kl_rows_var(p, yt)?;
                let kl = g.scale(kl, self.cfg.lambda)?;
                rows = g.add(rows, kl)?;
            }
            total_parts.push(g.mean_all(rows)?);
        }
        let total = g.add(total_parts[0], total_parts[1])?;
        let losses = StepLosses {
            loss_aug: Some(scalar(&g, total_parts[0])),
            loss_loc: Some(scalar(&g, total_parts[1])),
        };
        g.backward(total)?;
        let a = self.aug.as_mut().expect("present");
        let grads = a.params.gradients(&g, &ba);
        a.opt.step(&mut a.params, &grads)?;
        let l = self.local.as_mut().expect("present");
        let grads = l.params.gradients(&g, &bl);
        l.opt.step(&mut l.params, &grads)?;
        Ok(losses)
    }

    /// Runs `epochs` passes over `train` in seeded shuffled batches; after
    /// each epoch records the validation AUROC of the blended prediction
    /// (or of the single model) when `val` is given.
    pub fn train(&mut self, data: &CoTrainData, train: &[usize], val: Option<&[usize]>) -> Result<Vec<LogRow>> {
        data.check()?;
        if train.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed, SHUFFLE));
        let mut order = train.to_vec();
        let mut log = Vec::new();
        for epoch in 0..self.cfg.epochs {
            order.shuffle(&mut rng);
            for (step, batch) in order.chunks(self.cfg.batch_size).enumerate() {
                let l = self.step(data, batch)?;
                log.push(LogRow {
                    epoch,
                    step,
                    loss_aug: l.loss_aug,
                    loss_loc: l.loss_loc,
                    val_auroc: None,
                });
                log::debug!("epoch {epoch} step {step} {:?} {:?}", l.loss_aug, l.loss_loc);
            }
            if let Some(v) = val.filter(|v| !v.is_empty()) {
                let auroc = self.validation_auroc(data, v)?;
                log::info!("epoch {epoch} validation AUROC {auroc:?}");
                if let Some(last) = log.last_mut() {
                    last.val_auroc = auroc;
                }
            }
        }
        Ok(log)
    }

    fn validation_auroc(&self, data: &CoTrainData, val: &[usize]) -> Result<Option<f64>> {
        let scores = self.predict_blend(data, val)?;
        let labels: Vec<LabelVector> = val.iter().map(|&i| data.labels[i].clone()).collect();
        let names: Vec<String> = Vec::new();
        Ok(metrics::evaluate(&scores, &labels, &names, self.cfg.threshold)
            .ok()
            .map(|r| r.auroc))
    }

    /// ŷ₁ for each patient in `idx`.
    pub fn predict_aug(&self, data: &CoTrainData, idx: &[usize]) -> Result<Vec<Vec<f64>>> {
        let a = self
            .aug
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("no augmented model".into()))?;
        let docs: Vec<&[FlattenedDoc; 3]> = idx.iter().map(|&i| &data.docs[i]).collect();
        Ok(to_probs(a.model.predict_logits(&a.params, &docs, PREDICT_BATCH)?))
    }

    /// ŷ₂ for each patient in `idx`.
    pub fn predict_local(&self, data: &CoTrainData, idx: &[usize]) -> Result<Vec<Vec<f64>>> {
        let l = self
            .local
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("no local model".into()))?;
        Ok(to_probs(l.model.predict_logits(&l.params, data.hypergraph, idx, PREDICT_BATCH)?))
    }

    /// Blended predictions and hard labels for each patient in `idx`.
    pub fn infer(&self, data: &CoTrainData, idx: &[usize]) -> Result<Vec<PredictionPair>> {
        let y1 = self.predict_aug(data, idx)?;
        let y2 = self.predict_local(data, idx)?;
        y1.into_iter()
            .zip(y2)
            .map(|(a, b)| PredictionPair::new(a, b, self.cfg.beta))
            .collect()
    }

    /// `y_blend` rows, or the single model's probabilities.
    pub fn predict_blend(&self, data: &CoTrainData, idx: &[usize]) -> Result<Vec<Vec<f64>>> {
        match (&self.aug, &self.local) {
            (Some(_), Some(_)) => Ok(self.infer(data, idx)?.into_iter().map(|p| p.y_blend).collect()),
            (Some(_), None) => self.predict_aug(data, idx),
            _ => self.predict_local(data, idx),
        }
    }
}

const PREDICT_BATCH: usize = 256;

fn to_probs(logits: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    logits
        .into_iter()
        .map(|r| r.into_iter().map(sigmoid).collect())
        .collect()
}

pub fn write_log_csv(path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,step,loss_aug,loss_loc,val_auroc\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch,
            r.step,
            opt(r.loss_aug),
            opt(r.loss_loc),
            opt(r.val_auroc)
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Picks the (β, λ) cell with the best validation score; ties go to the
/// smaller λ, then the smaller β.
pub fn select_hyperparams<F>(base: &CoTrainConfig, betas: &[f64], lambdas: &[f64], mut score: F) -> Result<(CoTrainConfig, f64)>
where
    F: FnMut(&CoTrainConfig) -> Result<f64>,
{
    if betas.is_empty() || lambdas.is_empty() {
        return Err(Error::InvalidArgument("empty hyperparameter grid".into()));
    }
    let mut cells: Vec<(f64, f64)> = lambdas.iter().flat_map(|&l| betas.iter().map(move |&b| (l, b))).collect();
    cells.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    let mut best: Option<(CoTrainConfig, f64)> = None;
    for (lambda, beta) in cells {
        let cfg = CoTrainConfig { beta, lambda, ..*base };
        cfg.validate()?;
        let s = score(&cfg)?;
        if best.as_ref().is_none_or(|(_, b)| s > *b) {
            best = Some((cfg, s));
        }
    }
    Ok(best.expect("grid is nonempty"))
}
