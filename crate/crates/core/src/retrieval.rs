//! Dense passage retrieval: embedders, a flat inner-product index, exact
//! top-k search.
//!
//! Scores are the raw inner product `encode_query(q) · encode_passage(d)`
//! accumulated in f64 and reported as f32. Ties are broken by ascending
//! passage id.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::hashing::{hash_bytes, hash_pair};
use crate::{Error, Result};

pub const INDEX_MAGIC: &[u8; 7] = b"RAMIDX1";

/// Query/passage encoder pair sharing one output dimension.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode_query(&self, text: &str) -> Result<Vec<f32>>;
    fn encode_passage(&self, text: &str) -> Result<Vec<f32>>;
}

/// Character 3-gram feature hashing followed by a seeded signed random
/// projection, L2-normalized. Both roles use the same projection.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

/// Size of the hashed 3-gram feature space before projection.
const FEATURE_BUCKETS: u64 = 1 << 20;

pub fn hash_embedder(dim: usize, seed: u64) -> Result<HashEmbedder> {
    if dim < 8 {
        return Err(Error::InvalidArgument(format!("embedding dim {dim} < 8")));
    }
    Ok(HashEmbedder { dim, seed })
}

impl HashEmbedder {
    pub fn encode(&self, text: &str) -> Vec<f32> {
        let lowered = text.to_lowercase();
        let trimmed = lowered.trim();
        if trimmed.is_empty() {
            return vec![(1.0 / (self.dim as f64).sqrt()) as f32; self.dim];
        }
        // Boundary markers so that texts shorter than three characters
        // still yield at least one 3-gram.
        let chars: Vec<char> = std::iter::once('\u{2}')
            .chain(trimmed.chars())
            .chain(std::iter::once('\u{3}'))
            .collect();
        let mut features: HashMap<u64, f64> = HashMap::new();
        let mut buf = String::new();
        for w in chars.windows(3) {
            buf.clear();
            buf.extend(w);
            let bucket = hash_bytes(self.seed, buf.as_bytes()) % FEATURE_BUCKETS;
            *features.entry(bucket).or_default() += 1.0;
        }
        let mut features: Vec<(u64, f64)> = features.into_iter().collect();
        features.sort_unstable_by_key(|&(b, _)| b);

        let mut acc = vec![0.0f64; self.dim];
        for (bucket, count) in features {
            let row = hash_pair(self.seed, bucket);
            for (j, a) in acc.iter_mut().enumerate() {
                let bit = hash_pair(row, j as u64) & 1;
                *a += if bit == 1 { count } else { -count };
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return vec![(1.0 / (self.dim as f64).sqrt()) as f32; self.dim];
        }
        acc.iter().map(|v| (v / norm) as f32).collect()
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_query(&self, text: &str) -> Result<Vec<f32>> {
        Ok(self.encode(text))
    }

    fn encode_passage(&self, text: &str) -> Result<Vec<f32>> {
        Ok(self.encode(text))
    }
}

/// Looks up vectors computed by an external encoder.
///
/// Each role is backed by a file in the index binary format whose sibling
/// ids file lists the exact (whitespace-normalized) text of each row.
#[derive(Debug, Clone)]
pub struct PrecomputedEmbedder {
    dim: usize,
    queries: HashMap<String, Vec<f32>>,
    passages: HashMap<String, Vec<f32>>,
}

impl PrecomputedEmbedder {
    pub fn load(query_file: impl AsRef<Path>, passage_file: impl AsRef<Path>) -> Result<Self> {
        let q = VectorIndex::load(query_file.as_ref())?;
        let p = VectorIndex::load(passage_file.as_ref())?;
        if q.dim != p.dim {
            return Err(Error::Data(format!(
                "query vectors have dim {} but passage vectors have dim {}",
                q.dim, p.dim
            )));
        }
        let to_map = |ix: &VectorIndex| {
            ix.ids
                .iter()
                .enumerate()
                .map(|(i, t)| (t.clone(), ix.row(i).to_vec()))
                .collect::<HashMap<_, _>>()
        };
        Ok(PrecomputedEmbedder {
            dim: q.dim,
            queries: to_map(&q),
            passages: to_map(&p),
        })
    }

    fn lookup(map: &HashMap<String, Vec<f32>>, role: &str, text: &str) -> Result<Vec<f32>> {
        let key = crate::corpus::normalize_whitespace(text);
        map.get(&key)
            .cloned()
            .ok_or_else(|| Error::Data(format!("no precomputed {role} vector for {key:?}")))
    }
}

impl Embedder for PrecomputedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_query(&self, text: &str) -> Result<Vec<f32>> {
        Self::lookup(&self.queries, "query", text)
    }

    fn encode_passage(&self, text: &str) -> Result<Vec<f32>> {
        Self::lookup(&self.passages, "passage", text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    pub ids: Vec<String>,
    pub dim: usize,
    /// Row-major, `ids.len() * dim` values.
    pub matrix: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_code: String,
    pub hits: Vec<(String, f32)>,
}

impl VectorIndex {
    pub fn from_rows(ids: Vec<String>, dim: usize, rows: Vec<Vec<f32>>) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::Shape(format!("{} ids for {} rows", ids.len(), rows.len())));
        }
        let mut matrix = Vec::with_capacity(ids.len() * dim);
        for (id, row) in ids.iter().zip(&rows) {
            if row.len() != dim {
                return Err(Error::Shape(format!(
                    "vector for {id} has length {}, expected {dim}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("embedding of passage {id}")));
            }
            matrix.extend_from_slice(row);
        }
        Ok(VectorIndex { ids, dim, matrix })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    /// Path of the ids file that accompanies a binary index file.
    pub fn ids_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".ids");
        PathBuf::from(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(INDEX_MAGIC).map_err(io)?;
        w.write_all(&(self.dim as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.ids.len() as u64).to_le_bytes()).map_err(io)?;
        for v in &self.matrix {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)?;

        let ids_path = Self::ids_path(path);
        let file = File::create(&ids_path).map_err(|e| Error::io(&ids_path, e))?;
        let mut w = BufWriter::new(file);
        for id in &self.ids {
            if id.contains('\n') {
                return Err(Error::Data(format!("id {id:?} contains a newline")));
            }
            writeln!(w, "{id}").map_err(|e| Error::io(&ids_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&ids_path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::Data(format!("{} is not an index file", path.display())));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4).map_err(io)?;
        let dim = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8).map_err(io)?;
        let count = u64::from_le_bytes(b8) as usize;
        let mut matrix = Vec::with_capacity(count * dim);
        for _ in 0..count * dim {
            r.read_exact(&mut b4).map_err(io)?;
            matrix.push(f32::from_le_bytes(b4));
        }
        if r.read(&mut b4).map_err(io)? != 0 {
            return Err(Error::Data(format!("{}: trailing bytes", path.display())));
        }

        let ids_path = Self::ids_path(path);
        let f = File::open(&ids_path).map_err(|e| Error::io(&ids_path, e))?;
        let ids = BufReader::new(f)
            .lines()
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(&ids_path, e))?;
        if ids.len() != count {
            return Err(Error::Data(format!(
                "{} lists {} ids for {count} vectors",
                ids_path.display(),
                ids.len()
            )));
        }
        Ok(VectorIndex { ids, dim, matrix })
    }
}

pub fn build_index(corpus: &Corpus, emb: &dyn Embedder) -> Result<VectorIndex> {
    if corpus.is_empty() {
        return Err(Error::Data("cannot index an empty corpus".into()));
    }
    let mut ids = Vec::with_capacity(corpus.len());
    let mut rows = Vec::with_capacity(corpus.len());
    for p in corpus.passages() {
        ids.push(p.id.clone());
        rows.push(emb.encode_passage(&p.text)?);
    }
    VectorIndex::from_rows(ids, emb.dim(), rows)
}

/// Score ordering: higher score first, then ascending id.
fn rank_order(a: &(usize, f32), b: &(usize, f32), ids: &[String]) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| ids[a.0].cmp(&ids[b.0]))
}

/// Exact top-k over a query vector.
pub fn topk_vector(index: &VectorIndex, query: &[f32], k: usize) -> Result<Vec<(String, f32)>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if query.len() != index.dim {
        return Err(Error::Shape(format!(
            "query has dim {}, index has dim {}",
            query.len(),
            index.dim
        )));
    }
    let mut scored: Vec<(usize, f32)> = (0..index.len())
        .map(|i| {
            let dot: f64 = index
                .row(i)
                .iter()
                .zip(query)
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum();
            // + 0.0 folds -0.0 into +0.0 so the two rank as a tie.
            (i, dot as f32 + 0.0)
        })
        .collect();
    let cmp = |a: &(usize, f32), b: &(usize, f32)| rank_order(a, b, &index.ids);
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    Ok(scored
        .into_iter()
        .map(|(i, s)| (index.ids[i].clone(), s))
        .collect())
}

/// Retrieves the `k` passages with the largest inner product against the
/// query encoding of `query`.
pub fn topk(
    index: &VectorIndex,
    emb: &dyn Embedder,
    query_code: &str,
    query: &str,
    k: usize,
) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let q = emb.encode_query(query)?;
    Ok(RetrievalResult {
        query_code: query_code.to_string(),
        hits: topk_vector(index, &q, k)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Passage, SourceTag};
    use proptest::prelude::*;

    #[test]
    fn signed_zero_scores_tie_by_id() {
        // Row "a" scores -0.0 (= -1 * 0), row "b" scores +0.0.
        let index = VectorIndex::from_rows(vec!["b".into(), "a".into()], 1, vec![vec![1.0], vec![-1.0]]).unwrap();
        let hits = topk_vector(&index, &[0.0], 2).unwrap();
        assert_eq!(hits, vec![("a".to_string(), 0.0), ("b".to_string(), 0.0)]);
        assert!(hits.iter().all(|h| h.1.is_sign_positive()));
    }

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
    }

    /// Embedder that returns canned vectors.
    struct Fixed(HashMap<String, Vec<f32>>, usize);

    impl Embedder for Fixed {
        fn dim(&self) -> usize {
            self.1
        }
        fn encode_query(&self, text: &str) -> Result<Vec<f32>> {
            Ok(self.0[text].clone())
        }
        fn encode_passage(&self, text: &str) -> Result<Vec<f32>> {
            Ok(self.0[text].clone())
        }
    }

    fn corpus(texts: &[&str]) -> Corpus {
        Corpus::from_passages(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Passage {
                    id: format!("p{}", i + 1),
                    source: SourceTag::PubMed,
                    text: t.to_string(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn orthonormal_lookup() {
        let mut m = HashMap::new();
        m.insert("one".to_string(), vec![1.0, 0.0]);
        m.insert("two".to_string(), vec![0.0, 1.0]);
        let emb = Fixed(m, 2);
        let ix = build_index(&corpus(&["one", "two"]), &emb).unwrap();
        let r = topk(&ix, &emb, "c", "one", 1).unwrap();
        assert_eq!(r.hits, vec![("p1".to_string(), 1.0)]);
    }

    #[test]
    fn index_shape_and_small_corpus() {
        let emb = hash_embedder(8, 1).unwrap();
        let ix = build_index(&corpus(&["a b", "c d", "e f"]), &emb).unwrap();
        assert_eq!(ix.len(), 3);
        assert_eq!(ix.matrix.len(), 24);
        let r = topk(&ix, &emb, "c", "a b", 5).unwrap();
        assert_eq!(r.hits.len(), 3);
        assert_eq!(r.hits[0].0, "p1");
    }

    #[test]
    fn k_zero_and_empty_corpus_rejected() {
        let emb = hash_embedder(8, 1).unwrap();
        let ix = build_index(&corpus(&["a"]), &emb).unwrap();
        assert!(topk(&ix, &emb, "c", "a", 0).is_err());
        assert!(build_index(&Corpus::default(), &emb).is_err());
        assert!(hash_embedder(7, 1).is_err());
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let ix = VectorIndex::from_rows(
            vec!["b".into(), "a".into(), "c".into()],
            2,
            vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.5, 0.0]],
        )
        .unwrap();
        let hits = topk_vector(&ix, &[1.0, 0.0], 2).unwrap();
        assert_eq!(hits[0].0, "a");
        assert_eq!(hits[1].0, "b");
    }

    #[test]
    fn non_finite_embedding_names_passage() {
        let err = VectorIndex::from_rows(vec!["bad".into()], 1, vec![vec![f32::NAN]]).unwrap_err();
        assert!(err.to_string().contains("bad"));
    }

    #[test]
    fn hash_embedder_similarity_ordering() {
        let emb = hash_embedder(256, 0).unwrap();
        let hf = emb.encode("heart failure");
        let typo = emb.encode("heart failur");
        let insulin = emb.encode("insulin");
        let near = cosine(&hf, &typo);
        let far = cosine(&hf, &insulin);
        assert!(near > far, "{near} vs {far}");
        assert!(near > 0.8, "{near}");
        assert_eq!(hf, emb.encode("heart failure"));
    }

    #[test]
    fn empty_text_is_uniform_unit_vector() {
        let emb = hash_embedder(16, 3).unwrap();
        let v = emb.encode("   ");
        assert!(v.iter().all(|&x| (x - 0.25).abs() < 1e-7));
    }

    #[test]
    fn index_file_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let emb = hash_embedder(8, 5).unwrap();
        let c = corpus(&["heart failure", "insulin therapy", "aspirin"]);
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        build_index(&c, &emb).unwrap().save(&a).unwrap();
        build_index(&c, &emb).unwrap().save(&b).unwrap();
        let bytes = std::fs::read(&a).unwrap();
        assert_eq!(bytes, std::fs::read(&b).unwrap());
        assert_eq!(&bytes[..7], b"RAMIDX1");
        assert_eq!(bytes.len(), 7 + 4 + 8 + 3 * 8 * 4);
        let loaded = VectorIndex::load(&a).unwrap();
        assert_eq!(loaded, build_index(&c, &emb).unwrap());
    }

    #[test]
    fn precomputed_embedder_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let q = VectorIndex::from_rows(vec!["aspirin".into()], 2, vec![vec![0.0, 1.0]]).unwrap();
        let p = VectorIndex::from_rows(
            vec!["one".into(), "two".into()],
            2,
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        q.save(dir.path().join("q.bin")).unwrap();
        p.save(dir.path().join("p.bin")).unwrap();
        let emb = PrecomputedEmbedder::load(dir.path().join("q.bin"), dir.path().join("p.bin")).unwrap();
        let ix = build_index(&corpus(&["one", "two"]), &emb).unwrap();
        let r = topk(&ix, &emb, "ATC:1", "aspirin", 1).unwrap();
        assert_eq!(r.hits[0].0, "p2");
        assert!(emb.encode_query("unknown").is_err());
    }

    proptest! {
        #[test]
        fn hash_embedding_is_unit_norm(text in ".{0,60}", dim in 8usize..80, seed in any::<u64>()) {
            let v = hash_embedder(dim, seed).unwrap().encode(&text);
            prop_assert_eq!(v.len(), dim);
            let n: f64 = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
        }
    }
}
