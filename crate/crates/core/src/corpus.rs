//! Multi-source passage corpus.
//!
//! Free-text sources arrive as passage JSONL; knowledge-graph triplets are
//! verbalized into sentences through a fixed relation template table.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ehr::{read_lines, write_jsonl};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    PubMed,
    DrugBank,
    MeSH,
    Wikipedia,
    #[serde(rename = "kg")]
    KG,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub source: SourceTag,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

/// Relation name to sentence template. `[ent1]` is the head entity and
/// `[ent2]` the tail.
pub const RELATION_TEMPLATES: [(&str, &str); 8] = [
    ("phenotype present", "[ent1] has the phenotype [ent2]"),
    ("carrier", "[ent1] interacts with the carrier [ent2]"),
    ("enzyme", "[ent1] interacts with the enzyme [ent2]"),
    ("target", "The target of [ent1] is [ent2]"),
    ("transporter", "[ent2] transports [ent1]"),
    ("associated with", "[ent2] is associated with [ent1]"),
    ("parent-child", "[ent2] is a subclass of [ent1]"),
    ("side effect", "[ent1] has the side effect of [ent2]"),
];

pub fn verbalize_triplet(t: &Triplet) -> Result<String> {
    let template = RELATION_TEMPLATES
        .iter()
        .find(|(rel, _)| *rel == t.relation)
        .map(|(_, tpl)| *tpl)
        .ok_or_else(|| Error::UnknownRelation(t.relation.clone()))?;
    Ok(template.replace("[ent1]", &t.head).replace("[ent2]", &t.tail))
}

/// Collapses whitespace runs to single spaces and trims both ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_passages(passages: Vec<Passage>) -> Result<Self> {
        let mut corpus = Corpus::default();
        for p in passages {
            corpus.insert(p)?;
        }
        Ok(corpus)
    }

    fn insert(&mut self, mut p: Passage) -> Result<()> {
        p.text = normalize_whitespace(&p.text);
        if p.text.is_empty() {
            return Err(Error::Data(format!("passage {} has empty text", p.id)));
        }
        if self.by_id.contains_key(&p.id) {
            return Err(Error::Data(format!("duplicate passage id {}", p.id)));
        }
        self.by_id.insert(p.id.clone(), self.passages.len());
        self.passages.push(p);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.by_id.get(id).map(|&i| &self.passages[i])
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    /// Writes the corpus as passage JSONL, readable again by [`ingest`].
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_jsonl(path, &self.passages)
    }
}

/// A line in an ingest file: either a passage or a triplet.
#[derive(Deserialize)]
#[serde(untagged)]
enum IngestLine {
    Passage(Passage),
    Triplet(Triplet),
}

/// Builds a corpus from passage and triplet JSONL files, in argument order
/// and line order.
///
/// Triplet lines become KG passages with id `<file stem>:<line>`.
pub fn ingest<P: AsRef<Path>>(paths: &[P]) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    for path in paths {
        let path = path.as_ref();
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        for (line_no, line) in read_lines(path)? {
            let parsed: IngestLine = serde_json::from_str(&line).map_err(|_| {
                Error::record(path, line_no, "expected a passage or a triplet object")
            })?;
            let passage = match parsed {
                IngestLine::Passage(p) => p,
                IngestLine::Triplet(t) => Passage {
                    id: format!("{stem}:{line_no}"),
                    source: SourceTag::KG,
                    text: verbalize_triplet(&t)
                        .map_err(|e| Error::record(path, line_no, e.to_string()))?,
                },
            };
            corpus
                .insert(passage)
                .map_err(|e| Error::record(path, line_no, e.to_string()))?;
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(h: &str, r: &str, tail: &str) -> Triplet {
        Triplet {
            head: h.into(),
            relation: r.into(),
            tail: tail.into(),
        }
    }

    #[test]
    fn side_effect_template() {
        assert_eq!(
            verbalize_triplet(&t("aspirin", "side effect", "nausea")).unwrap(),
            "aspirin has the side effect of nausea"
        );
        assert_eq!(
            verbalize_triplet(&t("diabetes", "phenotype present", "neuropathy")).unwrap(),
            "diabetes has the phenotype neuropathy"
        );
    }

    #[test]
    fn reversed_templates_put_tail_first() {
        assert_eq!(
            verbalize_triplet(&t("heparin", "transporter", "ABCB1")).unwrap(),
            "ABCB1 transports heparin"
        );
        assert_eq!(
            verbalize_triplet(&t("heart disease", "parent-child", "heart failure")).unwrap(),
            "heart failure is a subclass of heart disease"
        );
    }

    #[test]
    fn unknown_relation_carries_name() {
        match verbalize_triplet(&t("a", "unknown_rel", "b")) {
            Err(Error::UnknownRelation(r)) => assert_eq!(r, "unknown_rel"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn whitespace_is_normalized() {
        assert_eq!(normalize_whitespace("  a \t b\n\nc  "), "a b c");
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn ingest_passages_and_triplets() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(
            &dir,
            "pubmed.jsonl",
            concat!(
                r#"{"id":"pm1","source":"pubmed","text":"Heart  failure is\tcommon."}"#,
                "\n",
                r#"{"id":"pm2","source":"pubmed","text":"Aspirin inhibits platelets."}"#,
                "\n",
                r#"{"id":"w1","source":"wikipedia","text":"Insulin is a hormone."}"#,
                "\n"
            ),
        );
        let corpus = ingest(&[&a]).unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus.get("pm1").unwrap().text, "Heart failure is common.");

        let b = write(
            &dir,
            "mixed.jsonl",
            concat!(
                r#"{"id":"m1","source":"mesh","text":"Neuropathy is nerve damage."}"#,
                "\n",
                r#"{"head":"aspirin","relation":"side effect","tail":"nausea"}"#,
                "\n"
            ),
        );
        let corpus = ingest(&[&b]).unwrap();
        assert_eq!(corpus.len(), 2);
        let kg = corpus.get("mixed:2").unwrap();
        assert_eq!(kg.source, SourceTag::KG);
        assert_eq!(kg.text, "aspirin has the side effect of nausea");
    }

    #[test]
    fn duplicate_ids_across_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(&dir, "a.jsonl", r#"{"id":"x","source":"mesh","text":"one"}"#);
        let b = write(&dir, "b.jsonl", r#"{"id":"x","source":"drugbank","text":"two"}"#);
        let err = ingest(&[a, b]).unwrap_err().to_string();
        assert!(err.contains("duplicate passage id x"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(
            &dir,
            "a.jsonl",
            "{\"id\":\"x\",\"source\":\"mesh\",\"text\":\"one\"}\n{\"oops\":1}\n",
        );
        let err = ingest(&[a]).unwrap_err();
        assert!(matches!(err, Error::Record { line: 2, .. }), "{err}");
    }

    #[test]
    fn reingest_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(
            &dir,
            "kg.jsonl",
            concat!(
                r#"{"head":"warfarin","relation":"enzyme","tail":"CYP2C9"}"#,
                "\n",
                r#"{"id":"d1","source":"drugbank","text":" Warfarin   is an anticoagulant "}"#,
                "\n"
            ),
        );
        let first = ingest(&[&a]).unwrap();
        let out = dir.path().join("corpus.jsonl");
        first.save(&out).unwrap();
        let second = ingest(&[&out]).unwrap();
        assert_eq!(first, second);
    }

    proptest! {
        #[test]
        fn verbalized_contains_entities(
            head in "[a-z][a-z ]{0,12}[a-z]",
            tail in "[A-Za-z0-9][A-Za-z0-9 ]{0,12}",
            which in 0usize..8,
        ) {
            let rel = RELATION_TEMPLATES[which].0;
            let s = verbalize_triplet(&t(&head, rel, &tail)).unwrap();
            prop_assert!(s.contains(&head));
            prop_assert!(s.contains(&tail));
            prop_assert!(!s.contains("[ent1]") && !s.contains("[ent2]"));
        }
    }
}
