//! Patients, visits, medical codes and task definitions.
//!
//! Visits refer to codes by id; the [`Vocabulary`] is the single owner of
//! code metadata (type and surface name).

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodeType {
    Disease,
    Medication,
    Procedure,
}

impl CodeType {
    pub const ALL: [CodeType; 3] = [CodeType::Disease, CodeType::Medication, CodeType::Procedure];

    /// The lowercase word used in file formats and prompts.
    pub fn as_str(self) -> &'static str {
        match self {
            CodeType::Disease => "disease",
            CodeType::Medication => "medication",
            CodeType::Procedure => "procedure",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for CodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedicalCode {
    #[serde(rename = "code")]
    pub id: String,
    #[serde(rename = "type")]
    pub kind: CodeType,
    pub name: String,
}

/// Code table. Codes keep the order in which they were loaded; that order
/// is the "vocabulary index" used wherever a canonical code order is needed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocabulary {
    codes: Vec<MedicalCode>,
    by_id: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(codes: Vec<MedicalCode>) -> Result<Self> {
        let mut vocab = Vocabulary::default();
        for code in codes {
            vocab.push(code)?;
        }
        Ok(vocab)
    }

    fn push(&mut self, code: MedicalCode) -> Result<()> {
        if code.name.trim().is_empty() {
            return Err(Error::Data(format!("code {} has an empty name", code.id)));
        }
        if self.by_id.contains_key(&code.id) {
            return Err(Error::Data(format!("duplicate code id {}", code.id)));
        }
        self.by_id.insert(code.id.clone(), self.codes.len());
        self.codes.push(code);
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut vocab = Vocabulary::default();
        for (line_no, line) in read_lines(path)? {
            let code: MedicalCode = serde_json::from_str(&line)
                .map_err(|e| Error::record(path, line_no, e.to_string()))?;
            vocab
                .push(code)
                .map_err(|e| Error::record(path, line_no, e.to_string()))?;
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_jsonl(path, &self.codes)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&MedicalCode> {
        self.by_id.get(id).map(|&i| &self.codes[i])
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn by_index(&self, index: usize) -> &MedicalCode {
        &self.codes[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &MedicalCode> {
        self.codes.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Visit {
    pub codes: Vec<String>,
    pub timestamp_rank: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector(Vec<u8>);

impl LabelVector {
    pub fn new(values: Vec<u8>) -> Result<Self> {
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::Data(format!("label entry {v} is not binary")));
        }
        Ok(LabelVector(values))
    }

    pub fn values(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub visits: Vec<Visit>,
    pub labels: LabelVector,
}

impl PatientRecord {
    /// Every code id the patient carries, across visits, deduplicated, in
    /// first-occurrence order.
    pub fn all_codes(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.visits
            .iter()
            .flat_map(|v| v.codes.iter())
            .filter(|c| seen.insert(c.as_str()))
            .map(String::as_str)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub num_labels: usize,
    pub label_names: Vec<String>,
    pub description: String,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_labels == 0 {
            return Err(Error::Data("task must have at least one label".into()));
        }
        if self.label_names.len() != self.num_labels {
            return Err(Error::Data(format!(
                "task {} declares {} labels but names {}",
                self.name,
                self.num_labels,
                self.label_names.len()
            )));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let task: TaskSpec =
            serde_json::from_str(&text).map_err(|e| Error::record(path, 1, e.to_string()))?;
        task.validate()?;
        Ok(task)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("task serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub patients: Vec<PatientRecord>,
    pub num_labels: usize,
}

#[derive(Serialize, Deserialize)]
struct VisitLine {
    codes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct PatientLine {
    patient_id: String,
    visits: Vec<VisitLine>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    /// Subset in the given index order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            patients: indices.iter().map(|&i| self.patients[i].clone()).collect(),
            num_labels: self.num_labels,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let lines: Vec<PatientLine> = self
            .patients
            .iter()
            .map(|p| PatientLine {
                patient_id: p.patient_id.clone(),
                visits: p
                    .visits
                    .iter()
                    .map(|v| VisitLine {
                        codes: v.codes.clone(),
                    })
                    .collect(),
                labels: p.labels.values().to_vec(),
            })
            .collect();
        write_jsonl(path, &lines)
    }
}

/// Loads a patient JSONL file, validating every code against `vocab` and
/// every label vector against `task`.
pub fn load_dataset(path: impl AsRef<Path>, vocab: &Vocabulary, task: &TaskSpec) -> Result<Dataset> {
    let path = path.as_ref();
    task.validate()?;
    let mut patients = Vec::new();
    let mut ids = HashSet::new();
    for (line_no, line) in read_lines(path)? {
        let raw: PatientLine = serde_json::from_str(&line)
            .map_err(|e| Error::record(path, line_no, e.to_string()))?;
        let bad = |msg: String| Error::record(path, line_no, msg);
        if !ids.insert(raw.patient_id.clone()) {
            return Err(bad(format!("duplicate patient id {}", raw.patient_id)));
        }
        if raw.visits.is_empty() {
            return Err(bad(format!("patient {} has no visits", raw.patient_id)));
        }
        if raw.labels.len() != task.num_labels {
            return Err(bad(format!(
                "patient {} has {} labels, task {} expects {}",
                raw.patient_id,
                raw.labels.len(),
                task.name,
                task.num_labels
            )));
        }
        let labels = LabelVector::new(raw.labels).map_err(|e| bad(e.to_string()))?;
        let mut visits = Vec::with_capacity(raw.visits.len());
        for (rank, v) in raw.visits.into_iter().enumerate() {
            let mut seen = HashSet::new();
            for code in &v.codes {
                if vocab.get(code).is_none() {
                    return Err(bad(format!("unknown code id {code}")));
                }
                if !seen.insert(code.as_str()) {
                    return Err(bad(format!("code {code} repeated within one visit")));
                }
            }
            visits.push(Visit {
                codes: v.codes,
                timestamp_rank: rank as u32,
            });
        }
        patients.push(PatientRecord {
            patient_id: raw.patient_id,
            visits,
            labels,
        });
    }
    Ok(Dataset {
        patients,
        num_labels: task.num_labels,
    })
}

fn check_fractions(fractions: (f64, f64, f64)) -> Result<()> {
    let (a, b, c) = fractions;
    let all_positive = [a, b, c].iter().all(|f| f.is_finite() && *f > 0.0);
    if !all_positive || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions {fractions:?} must be positive and sum to 1"
        )));
    }
    Ok(())
}

/// Patient-level split into (train, val, test) index lists. Each list is
/// in ascending index order.
pub fn split_indices(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<[Vec<usize>; 3]> {
    check_fractions(fractions)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * fractions.0).round() as usize;
    let n_val = (((n as f64) * fractions.1).round() as usize).min(n - n_train);
    let mut parts = [
        order[..n_train].to_vec(),
        order[n_train..n_train + n_val].to_vec(),
        order[n_train + n_val..].to_vec(),
    ];
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

pub fn split_dataset(
    ds: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let [train, val, test] = split_indices(ds.len(), fractions, seed)?;
    Ok((ds.select(&train), ds.select(&val), ds.select(&test)))
}

/// Non-empty lines with their 1-based line numbers.
pub(crate) fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(vec![
            MedicalCode {
                id: "ICD9:428.0".into(),
                kind: CodeType::Disease,
                name: "congestive heart failure".into(),
            },
            MedicalCode {
                id: "ATC:B01AC06".into(),
                kind: CodeType::Medication,
                name: "aspirin".into(),
            },
            MedicalCode {
                id: "ICD9P:36.06".into(),
                kind: CodeType::Procedure,
                name: "coronary stent insertion".into(),
            },
        ])
        .unwrap()
    }

    fn task(n: usize) -> TaskSpec {
        TaskSpec {
            name: "pheno".into(),
            num_labels: n,
            label_names: (0..n).map(|i| format!("l{i}")).collect(),
            description: "predict phenotypes".into(),
        }
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_two_patients() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "d.jsonl",
            concat!(
                r#"{"patient_id":"p1","visits":[{"codes":["ICD9:428.0"]},{"codes":["ATC:B01AC06","ICD9P:36.06"]}],"labels":[1,0]}"#,
                "\n",
                r#"{"patient_id":"p2","visits":[{"codes":["ATC:B01AC06"]}],"labels":[0,0]}"#,
                "\n"
            ),
        );
        let ds = load_dataset(&p, &vocab(), &task(2)).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.patients[0].patient_id, "p1");
        assert_eq!(ds.patients[0].visits[1].timestamp_rank, 1);
        assert_eq!(ds.patients[0].all_codes().len(), 3);

        let again = dir.path().join("again.jsonl");
        ds.save(&again).unwrap();
        assert_eq!(load_dataset(&again, &vocab(), &task(2)).unwrap(), ds);
    }

    #[test]
    fn unknown_code_names_line_and_code() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "d.jsonl",
            concat!(
                r#"{"patient_id":"p1","visits":[{"codes":["ICD9:428.0"]}],"labels":[1]}"#,
                "\n",
                r#"{"patient_id":"p2","visits":[{"codes":["ICD9:999"]}],"labels":[0]}"#,
                "\n"
            ),
        );
        let err = load_dataset(&p, &vocab(), &task(1)).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
        assert!(err.contains("ICD9:999"), "{err}");
    }

    #[test]
    fn label_length_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let labels = vec!["0"; 24].join(",");
        let p = write(
            &dir,
            "d.jsonl",
            &format!(r#"{{"patient_id":"p1","visits":[{{"codes":["ICD9:428.0"]}}],"labels":[{labels}]}}"#),
        );
        let err = load_dataset(&p, &vocab(), &task(25)).unwrap_err();
        assert!(err.to_string().contains("24 labels"), "{err}");
    }

    #[test]
    fn duplicate_code_in_visit_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "d.jsonl",
            r#"{"patient_id":"p1","visits":[{"codes":["ICD9:428.0","ICD9:428.0"]}],"labels":[1]}"#,
        );
        assert!(load_dataset(&p, &vocab(), &task(1)).is_err());
    }

    #[test]
    fn vocabulary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.jsonl");
        vocab().save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains(r#""type":"medication""#));
        assert_eq!(Vocabulary::load(&p).unwrap(), vocab());
    }

    #[test]
    fn task_spec_validation() {
        let mut t = task(3);
        t.label_names.pop();
        assert!(t.validate().is_err());
    }

    fn toy(n: usize) -> Dataset {
        Dataset {
            patients: (0..n)
                .map(|i| PatientRecord {
                    patient_id: format!("p{i}"),
                    visits: vec![Visit {
                        codes: vec!["ICD9:428.0".into()],
                        timestamp_rank: 0,
                    }],
                    labels: LabelVector::new(vec![0]).unwrap(),
                })
                .collect(),
            num_labels: 1,
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = toy(10);
        let (a, b, c) = split_dataset(&ds, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        let again = split_dataset(&ds, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((a, b, c), again);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        assert!(split_dataset(&toy(10), (0.5, 0.5, 0.5), 7).is_err());
        assert!(split_dataset(&toy(10), (1.0, 0.0, 0.0), 7).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 0usize..300, seed in any::<u64>(), a in 1u32..8, b in 1u32..8, c in 1u32..8) {
            let total = f64::from(a + b + c);
            let fr = (f64::from(a) / total, f64::from(b) / total, 1.0 - f64::from(a + b) / total);
            let parts = split_indices(n, fr, seed).unwrap();
            let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
