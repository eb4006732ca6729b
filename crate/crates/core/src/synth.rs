//! Synthetic benchmark with planted signal for both models.
//!
//! Every label owns two kinds of predictive codes:
//!
//! * co-occurrence codes (diseases) that share their name with a frequent
//!   decoy code, so only the code id carries the signal and only the local
//!   model can use it;
//! * knowledge codes (medications), drawn from a large per-label pool so
//!   each id is rare, whose passages mention a label marker word that the
//!   augmented model can pick up from the summaries.
//!
//! A positive patient receives one co-occurrence code with probability
//! `rho_c` and one knowledge code with probability `rho_k`.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{verbalize_triplet, Corpus, Passage, SourceTag, Triplet};
use crate::ehr::{write_jsonl, CodeType, Dataset, LabelVector, MedicalCode, PatientRecord, TaskSpec, Visit, Vocabulary};
use crate::summarizer::KnowledgeSummary;
use crate::{Error, Result};

/// File stem under which triplets are written, so ingesting the written
/// files yields the same passage ids as [`SynthBenchmark::corpus`].
pub const TRIPLET_STEM: &str = "triplets";
pub const ORACLE_TAG: &str = "oracle";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_patients: usize,
    /// Background (label-independent) codes per code type.
    pub num_codes: usize,
    pub num_labels: usize,
    pub codes_per_visit: usize,
    pub visits_per_patient: usize,
    pub rho_k: f64,
    pub rho_c: f64,
    pub prevalence: f64,
    pub cooccurrence_codes_per_label: usize,
    pub knowledge_codes_per_label: usize,
    /// Chance that a patient carries each decoy code.
    pub decoy_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_patients: 2000,
            num_codes: 60,
            num_labels: 5,
            codes_per_visit: 4,
            visits_per_patient: 3,
            rho_k: 0.7,
            rho_c: 0.7,
            prevalence: 0.3,
            cooccurrence_codes_per_label: 3,
            knowledge_codes_per_label: 200,
            decoy_rate: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.num_patients,
            self.num_codes,
            self.num_labels,
            self.codes_per_visit,
            self.visits_per_patient,
            self.cooccurrence_codes_per_label,
            self.knowledge_codes_per_label,
        ];
        if counts.contains(&0) {
            return Err(Error::InvalidArgument("synthetic counts must be at least 1".into()));
        }
        for (name, v) in [
            ("rho_k", self.rho_k),
            ("rho_c", self.rho_c),
            ("prevalence", self.prevalence),
            ("decoy_rate", self.decoy_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.codes_per_visit > 3 * self.num_codes {
            return Err(Error::InvalidArgument("more codes per visit than background codes".into()));
        }
        if self.num_codes < self.num_labels * self.cooccurrence_codes_per_label {
            return Err(Error::InvalidArgument("too few disease codes to serve as decoys".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthBenchmark {
    pub vocab: Vocabulary,
    pub task: TaskSpec,
    pub dataset: Dataset,
    pub passages: Vec<Passage>,
    pub triplets: Vec<Triplet>,
    /// Ground-truth summaries, for runs that skip retrieval.
    pub oracle_summaries: Vec<KnowledgeSummary>,
    /// Marker word of each label.
    pub markers: Vec<String>,
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];
const CODAS: [&str; 6] = ["", "", "n", "r", "l", "s"];

struct Words {
    rng: ChaCha8Rng,
    used: BTreeSet<String>,
}

impl Words {
    fn word(&mut self, syllables: usize) -> String {
        loop {
            let w: String = (0..syllables)
                .map(|_| {
                    format!(
                        "{}{}{}",
                        ONSETS[self.rng.random_range(0..ONSETS.len())],
                        NUCLEI[self.rng.random_range(0..NUCLEI.len())],
                        CODAS[self.rng.random_range(0..CODAS.len())]
                    )
                })
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn kind_word(kind: CodeType) -> &'static str {
    match kind {
        CodeType::Disease => "condition",
        CodeType::Medication => "drug",
        CodeType::Procedure => "procedure",
    }
}

const FILLER: [&str; 6] = [
    "is routinely recorded during hospital stays",
    "appears in many inpatient records",
    "is documented by the care team on admission",
    "is reviewed at discharge",
    "is common in general medical wards",
    "is coded in routine clinical practice",
];

pub fn generate(cfg: &SynthConfig) -> Result<SynthBenchmark> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut words = Words {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9),
        used: BTreeSet::new(),
    };
    let markers: Vec<String> = (0..cfg.num_labels).map(|_| words.word(4)).collect();

    let mut codes = Vec::new();
    let mut background: Vec<usize> = Vec::new();
    for kind in CodeType::ALL {
        let prefix = &kind.as_str()[..1].to_uppercase();
        for i in 0..cfg.num_codes {
            background.push(codes.len());
            codes.push(MedicalCode {
                id: format!("SYN-{prefix}:{i:04}"),
                kind,
                name: format!("{} {}", words.word(2), words.word(3)),
            });
        }
    }
    // The first diseases double as decoys for the co-occurrence codes.
    let cpl = cfg.cooccurrence_codes_per_label;
    let decoys: Vec<usize> = (0..cfg.num_labels * cpl).collect();
    let mut cooc = vec![Vec::new(); cfg.num_labels];
    for (j, per_label) in cooc.iter_mut().enumerate() {
        for c in 0..cpl {
            per_label.push(codes.len());
            codes.push(MedicalCode {
                id: format!("SYN-D:S{j}-{c}"),
                kind: CodeType::Disease,
                name: codes[decoys[j * cpl + c]].name.clone(),
            });
        }
    }
    let mut knowledge = vec![Vec::new(); cfg.num_labels];
    for (j, per_label) in knowledge.iter_mut().enumerate() {
        for c in 0..cfg.knowledge_codes_per_label {
            per_label.push(codes.len());
            codes.push(MedicalCode {
                id: format!("SYN-M:K{j}-{c:03}"),
                kind: CodeType::Medication,
                name: format!("{} {}", words.word(2), words.word(3)),
            });
        }
    }

    let mut passages = Vec::new();
    let mut triplets = Vec::new();
    let mut oracle = Vec::new();
    let task = TaskSpec {
        name: "synthetic-phenotyping".into(),
        num_labels: cfg.num_labels,
        label_names: markers.iter().map(|m| format!("{m} syndrome")).collect(),
        description: format!(
            "predicting which of {} synthetic phenotypes occur in the next visit",
            cfg.num_labels
        ),
    };
    let knowledge_label: Vec<Option<usize>> = (0..codes.len())
        .map(|i| knowledge.iter().position(|k| k.contains(&i)))
        .collect();
    for (i, code) in codes.iter().enumerate() {
        // Co-occurrence codes are indistinguishable from their decoys by name
        // and get no passages of their own.
        if cooc.iter().any(|c| c.contains(&i)) {
            continue;
        }
        let kind = kind_word(code.kind);
        let text = match knowledge_label[i] {
            Some(j) => format!(
                "{} is a {kind} often given to patients with {} syndrome",
                code.name, markers[j]
            ),
            None => format!(
                "{} is a {kind} that {}",
                code.name,
                FILLER[rng.random_range(0..FILLER.len())]
            ),
        };
        let source = match code.kind {
            CodeType::Medication => SourceTag::DrugBank,
            CodeType::Disease => SourceTag::MeSH,
            CodeType::Procedure => SourceTag::Wikipedia,
        };
        passages.push(Passage {
            id: format!("syn:{}", passages.len()),
            source,
            text,
        });
        match knowledge_label[i] {
            Some(j) => {
                triplets.push(Triplet {
                    head: format!("{} syndrome", markers[j]),
                    relation: "associated with".into(),
                    tail: code.name.clone(),
                });
                oracle.push(summary(code, &task, format!("{} treats {} syndrome", code.name, markers[j])));
            }
            None => {
                if code.kind == CodeType::Medication {
                    triplets.push(Triplet {
                        head: code.name.clone(),
                        relation: "side effect".into(),
                        tail: words.word(3),
                    });
                }
                oracle.push(summary(code, &task, format!("{} is a {kind}", code.name)));
            }
        }
    }
    for &i in cooc.iter().flatten() {
        oracle.push(summary(&codes[i], &task, format!("{} is a condition", codes[i].name)));
    }
    // Background passages unrelated to any code, as retrieval distractors.
    for _ in 0..cfg.num_codes {
        passages.push(Passage {
            id: format!("syn:{}", passages.len()),
            source: SourceTag::PubMed,
            text: format!("{} {} {}", words.word(2), words.word(3), FILLER[rng.random_range(0..FILLER.len())]),
        });
    }

    let mut patients = Vec::with_capacity(cfg.num_patients);
    for p in 0..cfg.num_patients {
        let labels: Vec<u8> = (0..cfg.num_labels)
            .map(|_| u8::from(rng.random::<f64>() < cfg.prevalence))
            .collect();
        let mut visits: Vec<Vec<usize>> = (0..cfg.visits_per_patient)
            .map(|_| {
                sample(&mut rng, background.len(), cfg.codes_per_visit)
                    .into_iter()
                    .map(|i| background[i])
                    .collect()
            })
            .collect();
        let mut plant = |rng: &mut ChaCha8Rng, code: usize| {
            let v = rng.random_range(0..visits.len());
            if !visits[v].contains(&code) {
                visits[v].push(code);
            }
        };
        for &d in &decoys {
            if rng.random::<f64>() < cfg.decoy_rate {
                plant(&mut rng, d);
            }
        }
        for (j, &y) in labels.iter().enumerate() {
            let c = rng.random_range(0..cooc[j].len());
            let k = rng.random_range(0..knowledge[j].len());
            let (use_c, use_k) = (rng.random::<f64>() < cfg.rho_c, rng.random::<f64>() < cfg.rho_k);
            if y == 1 && use_c {
                plant(&mut rng, cooc[j][c]);
            }
            if y == 1 && use_k {
                plant(&mut rng, knowledge[j][k]);
            }
        }
        patients.push(PatientRecord {
            patient_id: format!("P{p:05}"),
            visits: visits
                .into_iter()
                .enumerate()
                .map(|(rank, v)| Visit {
                    codes: v.into_iter().map(|i| codes[i].id.clone()).collect(),
                    timestamp_rank: rank as u32,
                })
                .collect(),
            labels: LabelVector::new(labels)?,
        });
    }

    Ok(SynthBenchmark {
        vocab: Vocabulary::new(codes)?,
        task,
        dataset: Dataset {
            patients,
            num_labels: cfg.num_labels,
        },
        passages,
        triplets,
        oracle_summaries: oracle,
        markers,
    })
}

fn summary(code: &MedicalCode, task: &TaskSpec, text: String) -> KnowledgeSummary {
    KnowledgeSummary {
        code: code.id.clone(),
        task: task.name.clone(),
        text,
        provenance: Vec::new(),
        client_tag: ORACLE_TAG.into(),
    }
}

impl SynthBenchmark {
    /// Passages followed by the verbalized triplets, as ingesting the files
    /// written by [`SynthBenchmark::save`] would produce.
    pub fn corpus(&self) -> Result<Corpus> {
        let mut all = self.passages.clone();
        for (i, t) in self.triplets.iter().enumerate() {
            all.push(Passage {
                id: format!("{TRIPLET_STEM}:{}", i + 1),
                source: SourceTag::KG,
                text: verbalize_triplet(t)?,
            });
        }
        Corpus::from_passages(all)
    }

    /// Writes `vocab.jsonl`, `task.json`, `dataset.jsonl`, `passages.jsonl`,
    /// `triplets.jsonl` and `oracle_summaries.jsonl` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.vocab.save(dir.join("vocab.jsonl"))?;
        self.task.save(dir.join("task.json"))?;
        self.dataset.save(dir.join("dataset.jsonl"))?;
        write_jsonl(dir.join("passages.jsonl"), &self.passages)?;
        write_jsonl(dir.join(format!("{TRIPLET_STEM}.jsonl")), &self.triplets)?;
        write_jsonl(dir.join("oracle_summaries.jsonl"), &self.oracle_summaries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ingest;
    use crate::ehr::load_dataset;

    fn small() -> SynthConfig {
        SynthConfig {
            num_patients: 300,
            num_codes: 20,
            knowledge_codes_per_label: 10,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_benchmark() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.passages, b.passages);
        let c = generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn label_marginals_near_prevalence() {
        let b = generate(&SynthConfig::default()).unwrap();
        for j in 0..5 {
            let pos = b.dataset.patients.iter().filter(|p| p.labels.values()[j] == 1).count();
            let rate = pos as f64 / b.dataset.len() as f64;
            assert!((rate - 0.3).abs() < 0.05, "label {j}: {rate}");
        }
    }

    #[test]
    fn cooccurrence_codes_share_decoy_names() {
        let b = generate(&small()).unwrap();
        let s = b.vocab.get("SYN-D:S0-0").unwrap();
        let decoy = b.vocab.get("SYN-D:0000").unwrap();
        assert_eq!(s.name, decoy.name);
    }

    #[test]
    fn knowledge_passages_carry_markers() {
        let b = generate(&small()).unwrap();
        let name = &b.vocab.get("SYN-M:K2-003").unwrap().name;
        let p = b.passages.iter().find(|p| p.text.starts_with(name.as_str())).unwrap();
        assert!(p.text.contains(&b.markers[2]));
    }

    #[test]
    fn written_files_load_back() {
        let b = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        let vocab = Vocabulary::load(dir.path().join("vocab.jsonl")).unwrap();
        let task = TaskSpec::load(dir.path().join("task.json")).unwrap();
        let ds = load_dataset(dir.path().join("dataset.jsonl"), &vocab, &task).unwrap();
        assert_eq!(ds, b.dataset);
        let corpus = ingest(&[dir.path().join("passages.jsonl"), dir.path().join("triplets.jsonl")]).unwrap();
        assert_eq!(corpus.passages(), b.corpus().unwrap().passages());
    }
}
