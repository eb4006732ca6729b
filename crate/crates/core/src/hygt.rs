//! The local model: a hypergraph transformer over codes (nodes) and
//! patients (hyperedges).
//!
//! Each layer updates every hyperedge by self-attention over the sequence
//! `[E_e; X_v for v in e]` and every node by self-attention over
//! `[X_v; E_e for e ∋ v]`, reading the result at position 0. A batch only
//! computes the rows its outputs depend on: walking the layers top-down,
//! each level's needed rows are the previous level's plus their neighbors.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ehr::Dataset;
use crate::nn::{AttentionBlock, AttentionConfig, Mlp};
use crate::tensor::{normal_tensor, Binding, Graph, ParamId, ParamStore, Scalar, Var};
use crate::{Error, Result};

/// Codes as nodes, patients as hyperedges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypergraph {
    /// Code ids, sorted.
    pub nodes: Vec<String>,
    /// Patient ids in dataset order.
    pub edges: Vec<String>,
    /// Sorted member node indices per hyperedge.
    pub incidence: Vec<Vec<usize>>,
    #[serde(skip)]
    node_edges: Vec<Vec<usize>>,
}

pub fn build_hypergraph(ds: &Dataset) -> Result<Hypergraph> {
    if ds.patients.is_empty() {
        return Err(Error::Data("cannot build a hypergraph from an empty dataset".into()));
    }
    let mut nodes: Vec<String> = ds
        .patients
        .iter()
        .flat_map(|p| p.visits.iter().flat_map(|v| v.codes.iter().cloned()))
        .collect();
    nodes.sort();
    nodes.dedup();
    let mut edges = Vec::with_capacity(ds.len());
    let mut incidence = Vec::with_capacity(ds.len());
    for p in &ds.patients {
        let mut members: Vec<usize> = p
            .all_codes()
            .into_iter()
            .map(|c| nodes.binary_search_by(|n| n.as_str().cmp(c)).expect("node set covers every code"))
            .collect();
        if members.is_empty() {
            return Err(Error::Data(format!("patient {} has no codes", p.patient_id)));
        }
        members.sort_unstable();
        members.dedup();
        edges.push(p.patient_id.clone());
        incidence.push(members);
    }
    Hypergraph::new(nodes, edges, incidence)
}

impl Hypergraph {
    pub fn new(nodes: Vec<String>, edges: Vec<String>, incidence: Vec<Vec<usize>>) -> Result<Self> {
        if edges.len() != incidence.len() {
            return Err(Error::Data("one incidence list per hyperedge required".into()));
        }
        let mut node_edges = vec![Vec::new(); nodes.len()];
        for (e, members) in incidence.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Data(format!("hyperedge {} is empty", edges[e])));
            }
            if members.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Data(format!("incidence of {} is not sorted and unique", edges[e])));
            }
            for &v in members {
                node_edges
                    .get_mut(v)
                    .ok_or_else(|| Error::Data(format!("hyperedge {} names node {v}", edges[e])))?
                    .push(e);
            }
        }
        if let Some(v) = node_edges.iter().position(Vec::is_empty) {
            return Err(Error::Data(format!("node {} is isolated", nodes[v])));
        }
        Ok(Hypergraph {
            nodes,
            edges,
            incidence,
            node_edges,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Hyperedges containing node `v`, ascending.
    pub fn node_edges(&self, v: usize) -> &[usize] {
        &self.node_edges[v]
    }

    pub fn edge_index(&self, patient_id: &str) -> Option<usize> {
        self.edges.iter().position(|e| e == patient_id)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: Hypergraph = serde_json::from_str(&text).map_err(|e| Error::record(path, 1, e.to_string()))?;
        Hypergraph::new(raw.nodes, raw.edges, raw.incidence)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HygtConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub readout_hidden: usize,
    pub init_std: f64,
}

impl Default for HygtConfig {
    fn default() -> Self {
        HygtConfig {
            layers: 2,
            dim: 64,
            heads: 4,
            ffn_dim: 128,
            readout_hidden: 64,
            init_std: 0.02,
        }
    }
}

/// ŷ₂ for one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalPrediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HygtModel {
    cfg: HygtConfig,
    num_nodes: usize,
    num_labels: usize,
    node_emb: ParamId,
    edge_bias: ParamId,
    blocks: Vec<AttentionBlock>,
    readout: Mlp,
}

/// Row positions of nodes and hyperedges in the current level's table.
struct Level {
    edge_pos: Vec<usize>,
    node_pos: Vec<usize>,
}

fn mark(mask: &mut [bool], items: impl IntoIterator<Item = usize>) {
    for i in items {
        mask[i] = true;
    }
}

fn collect_marked(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

impl HygtModel {
    /// Initial hyperedge states are the mean of their members' node
    /// embeddings plus a shared learned bias, so the model is a function
    /// of each patient's code set and embeds patients unseen in training.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: HygtConfig,
        num_nodes: usize,
        num_labels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.layers == 0 || num_nodes == 0 || num_labels == 0 {
            return Err(Error::InvalidArgument("layers, nodes and labels must be positive".into()));
        }
        let att = AttentionConfig {
            dim: cfg.dim,
            heads: cfg.heads,
            ffn_dim: cfg.ffn_dim,
        };
        att.validate()?;
        let node_emb = store.add("hygt.node_emb", normal_tensor(rng, num_nodes, cfg.dim, cfg.init_std));
        let edge_bias = store.add("hygt.edge_bias", normal_tensor(rng, 1, cfg.dim, cfg.init_std));
        let blocks = (0..cfg.layers)
            .map(|l| AttentionBlock::new(store, &format!("hygt.layer{l}"), att, rng))
            .collect::<Result<_>>()?;
        let readout = Mlp::new(store, "hygt.readout", &[cfg.dim, cfg.readout_hidden, num_labels], rng);
        Ok(HygtModel {
            cfg,
            num_nodes,
            num_labels,
            node_emb,
            edge_bias,
            blocks,
            readout,
        })
    }

    pub fn config(&self) -> HygtConfig {
        self.cfg
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    /// Logits `[edges.len(), num_labels]` for the given hyperedges.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Binding, hg: &Hypergraph, edges: &[usize]) -> Result<Var> {
        if hg.num_nodes() != self.num_nodes {
            return Err(Error::Shape(format!(
                "model has {} node embeddings, hypergraph {} nodes",
                self.num_nodes,
                hg.num_nodes()
            )));
        }
        if let Some(&e) = edges.iter().find(|&&e| e >= hg.num_edges()) {
            return Err(Error::InvalidArgument(format!("unknown patient index {e}")));
        }
        if edges.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let levels = self.cfg.layers;
        let mut need_e = vec![Vec::new(); levels + 1];
        let mut need_x = vec![Vec::new(); levels + 1];
        let mut em = vec![false; hg.num_edges()];
        let mut xm = vec![false; hg.num_nodes()];
        mark(&mut em, edges.iter().copied());
        need_e[levels] = collect_marked(&em);
        for l in (1..=levels).rev() {
            for &v in &need_x[l] {
                mark(&mut em, hg.node_edges(v).iter().copied());
            }
            for &e in &need_e[l] {
                mark(&mut xm, hg.incidence[e].iter().copied());
            }
            need_e[l - 1] = collect_marked(&em);
            need_x[l - 1] = collect_marked(&xm);
        }

        let table0_e = g.segment_mean(
            b.var(self.node_emb),
            need_e[0].iter().map(|&e| hg.incidence[e].clone()).collect(),
        )?;
        let table0_e = g.add_row(table0_e, b.var(self.edge_bias))?;
        let table0_x = g.gather_rows(b.var(self.node_emb), &need_x[0])?;
        let mut table = g.concat(&[table0_e, table0_x], 0)?;
        let mut level = self.level(hg, &need_e[0], &need_x[0]);

        for (l, block) in self.blocks.iter().enumerate() {
            let out_e = std::mem::take(&mut need_e[l + 1]);
            let out_x = std::mem::take(&mut need_x[l + 1]);
            let mut queries = Vec::with_capacity(out_e.len() + out_x.len());
            let mut segments = Vec::with_capacity(out_e.len() + out_x.len());
            for &e in &out_e {
                let q = level.edge_pos[e];
                let mut seg = Vec::with_capacity(hg.incidence[e].len() + 1);
                seg.push(q);
                seg.extend(hg.incidence[e].iter().map(|&v| level.node_pos[v]));
                queries.push(q);
                segments.push(seg);
            }
            for &v in &out_x {
                let q = level.node_pos[v];
                let mut seg = Vec::with_capacity(hg.node_edges(v).len() + 1);
                seg.push(q);
                seg.extend(hg.node_edges(v).iter().map(|&e| level.edge_pos[e]));
                queries.push(q);
                segments.push(seg);
            }
            debug_assert!(segments.iter().flatten().all(|&p| p != usize::MAX));
            table = block.forward(g, b, table, &queries, segments)?;
            level = self.level(hg, &out_e, &out_x);
        }

        let rows: Vec<usize> = edges.iter().map(|&e| level.edge_pos[e]).collect();
        let reps = g.gather_rows(table, &rows)?;
        self.readout.forward(g, b, reps)
    }

    fn level(&self, hg: &Hypergraph, edges: &[usize], nodes: &[usize]) -> Level {
        let mut edge_pos = vec![usize::MAX; hg.num_edges()];
        let mut node_pos = vec![usize::MAX; hg.num_nodes()];
        for (i, &e) in edges.iter().enumerate() {
            edge_pos[e] = i;
        }
        for (i, &v) in nodes.iter().enumerate() {
            node_pos[v] = edges.len() + i;
        }
        Level { edge_pos, node_pos }
    }

    /// ŷ₂ for one patient, by hyperedge index.
    pub fn local_forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        hg: &Hypergraph,
        patient: usize,
    ) -> Result<LocalPrediction> {
        let logits = self.predict_logits(store, hg, &[patient], 1)?.remove(0);
        let probs = logits.iter().map(|&z| sigmoid(z)).collect();
        Ok(LocalPrediction { logits, probs })
    }

    /// Inference-only logits, computed in chunks of `batch` hyperedges.
    pub fn predict_logits<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        hg: &Hypergraph,
        edges: &[usize],
        batch: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(edges.len());
        for chunk in edges.chunks(batch.max(1)) {
            let mut g = Graph::new();
            let b = store.bind(&mut g, false);
            let z = self.forward(&mut g, &b, hg, chunk)?;
            let z = g.value(z);
            out.extend((0..z.rows()).map(|i| z.row(i).iter().map(|v| v.f64()).collect::<Vec<_>>()));
        }
        Ok(out)
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::{LabelVector, PatientRecord, Visit};
    use crate::tensor::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn patient(id: &str, visits: &[&[&str]]) -> PatientRecord {
        PatientRecord {
            patient_id: id.into(),
            visits: visits
                .iter()
                .enumerate()
                .map(|(i, codes)| Visit {
                    codes: codes.iter().map(|c| c.to_string()).collect(),
                    timestamp_rank: i as u32,
                })
                .collect(),
            labels: LabelVector::new(vec![0]).unwrap(),
        }
    }

    fn dataset(ps: Vec<PatientRecord>) -> Dataset {
        Dataset {
            patients: ps,
            num_labels: 1,
        }
    }

    fn small_cfg() -> HygtConfig {
        HygtConfig {
            layers: 2,
            dim: 4,
            heads: 2,
            ffn_dim: 6,
            readout_hidden: 3,
            init_std: 0.5,
        }
    }

    #[test]
    fn two_patients_sharing_one_code() {
        let ds = dataset(vec![patient("p1", &[&["a", "b"]]), patient("p2", &[&["b"], &["c"]])]);
        let hg = build_hypergraph(&ds).unwrap();
        assert_eq!(hg.num_nodes(), 3);
        assert_eq!(hg.num_edges(), 2);
        assert_eq!(hg.incidence, vec![vec![0, 1], vec![1, 2]]);
        assert_eq!(hg.node_edges(1), &[0, 1]);
    }

    #[test]
    fn code_order_does_not_matter() {
        let a = dataset(vec![patient("p1", &[&["x", "a", "m"]]), patient("p2", &[&["m"]])]);
        let b = dataset(vec![patient("p1", &[&["m", "x", "a"]]), patient("p2", &[&["m"]])]);
        assert_eq!(build_hypergraph(&a).unwrap(), build_hypergraph(&b).unwrap());
    }

    #[test]
    fn patient_without_codes_is_an_error() {
        let ds = dataset(vec![patient("p1", &[&["a"]]), patient("empty", &[&[]])]);
        let err = build_hypergraph(&ds).unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");
    }

    #[test]
    fn json_round_trip() {
        let ds = dataset(vec![patient("p1", &[&["a", "b"]]), patient("p2", &[&["b", "c"]])]);
        let hg = build_hypergraph(&ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hg.json");
        hg.save_json(&path).unwrap();
        let back = Hypergraph::load_json(&path).unwrap();
        assert_eq!(back, hg);
        assert_eq!(back.node_edges(1), hg.node_edges(1));
    }

    fn model(hg: &Hypergraph, labels: usize, seed: u64) -> (ParamStore<f64>, HygtModel) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = HygtModel::new(&mut store, small_cfg(), hg.num_nodes(), labels, &mut rng).unwrap();
        (store, m)
    }

    #[test]
    fn probabilities_in_unit_interval_and_identical_code_sets_agree() {
        let ds = dataset(vec![
            patient("p1", &[&["a", "b"], &["c"]]),
            patient("p2", &[&["c", "d"]]),
            patient("p3", &[&["c"], &["b", "a"]]),
        ]);
        let hg = build_hypergraph(&ds).unwrap();
        let (store, m) = model(&hg, 3, 1);
        let p1 = m.local_forward(&store, &hg, 0).unwrap();
        let p3 = m.local_forward(&store, &hg, 2).unwrap();
        assert!(p1.probs.iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(p1, p3);
        assert!(m.local_forward(&store, &hg, 3).is_err());
    }

    #[test]
    fn batched_logits_match_single_patient_logits() {
        let ds = dataset(vec![
            patient("p1", &[&["a", "b"]]),
            patient("p2", &[&["b", "c"]]),
            patient("p3", &[&["c", "d", "e"]]),
            patient("p4", &[&["a", "e"]]),
        ]);
        let hg = build_hypergraph(&ds).unwrap();
        let (store, m) = model(&hg, 2, 2);
        let all = m.predict_logits(&store, &hg, &[3, 0, 2, 1], 4).unwrap();
        for (row, e) in all.iter().zip([3, 0, 2, 1]) {
            let single = m.local_forward(&store, &hg, e).unwrap().logits;
            for (a, b) in row.iter().zip(&single) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_on_three_nodes_two_edges() {
        let ds = dataset(vec![patient("p1", &[&["a", "b"]]), patient("p2", &[&["b", "c"]])]);
        let hg = build_hypergraph(&ds).unwrap();
        let (store, m) = model(&hg, 2, 3);
        let targets = [1.0, 0.0, 0.0, 1.0];
        let err = gradcheck::max_relative_error(store.tensors(), gradcheck::DEFAULT_STEP, |g, vars| {
            let b = Binding::from(vars.to_vec());
            let z = m.forward(g, &b, &hg, &[0, 1])?;
            let p = g.sigmoid(z)?;
            let l = g.bce_rows(p, &targets)?;
            g.mean_all(l)
        })
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn overfits_four_patients() {
        use crate::tensor::{Adam, AdamConfig};
        let ds = dataset(vec![
            patient("p1", &[&["a", "b"]]),
            patient("p2", &[&["b", "c"]]),
            patient("p3", &[&["c", "d"]]),
            patient("p4", &[&["d", "a"]]),
        ]);
        let hg = build_hypergraph(&ds).unwrap();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = HygtConfig {
            dim: 16,
            heads: 2,
            ffn_dim: 16,
            readout_hidden: 16,
            ..HygtConfig::default()
        };
        let m = HygtModel::new(&mut store, cfg, hg.num_nodes(), 2, &mut rng).unwrap();
        let y = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        let mut opt = Adam::new(AdamConfig::with_lr(1e-2), &store);
        let mut loss = f64::INFINITY;
        for _ in 0..500 {
            let mut g = Graph::new();
            let b = store.bind(&mut g, true);
            let z = m.forward(&mut g, &b, &hg, &[0, 1, 2, 3]).unwrap();
            let p = g.sigmoid(z).unwrap();
            let l = g.bce_rows(p, &y).unwrap();
            let l = g.mean_all(l).unwrap();
            loss = g.value(l).data()[0] as f64;
            g.backward(l).unwrap();
            let grads = store.gradients(&g, &b);
            opt.step(&mut store, &grads).unwrap();
        }
        assert!(loss < 0.05, "loss {loss}");
    }
}
