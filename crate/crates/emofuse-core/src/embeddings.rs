//! Word-embedding sequences: file ingestion and deterministic pseudo
//! generators.
//!
//! Real exports (from a contextual or a static embedding model) are
//! ingested from a documented file format. For self-contained experiments
//! two pseudo generators stand in for those models: a context-free one
//! whose vector depends only on the token string, and a contextual one
//! that mixes each token's vector with its ±2-token neighborhood, so the
//! same token embeds differently next to a negation.

use crate::error::{Error, Result};
use crate::util;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

const EMBED_MAGIC: &[u8; 8] = b"EMFEMBD1";

/// Mixing weights by neighbor distance: self, ±1, ±2.
const CONTEXT_WEIGHTS: [f64; 3] = [1.0, 0.6, 0.3];

/// One utterance's token vectors, T × D.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub id: String,
    pub vectors: Array2<f32>,
}

impl EmbeddingSequence {
    pub fn new(id: impl Into<String>, vectors: Array2<f32>) -> Result<Self> {
        if vectors.nrows() == 0 || vectors.ncols() == 0 {
            return Err(Error::Embedding(format!(
                "embedding sequence must be non-empty, got {:?}",
                vectors.dim()
            )));
        }
        Ok(EmbeddingSequence {
            id: id.into(),
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// All embedding sequences for a dataset, every one of the same width.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    declared_dim: usize,
    map: BTreeMap<String, EmbeddingSequence>,
}

impl EmbeddingStore {
    pub fn new(declared_dim: usize) -> Result<Self> {
        if declared_dim == 0 {
            return Err(Error::Embedding("declared dimension must be positive".into()));
        }
        Ok(EmbeddingStore {
            declared_dim,
            map: BTreeMap::new(),
        })
    }

    pub fn insert(&mut self, seq: EmbeddingSequence) -> Result<()> {
        if seq.dim() != self.declared_dim {
            return Err(Error::Embedding(format!(
                "sequence '{}' has width {}, store declares {}",
                seq.id,
                seq.dim(),
                self.declared_dim
            )));
        }
        if self.map.contains_key(&seq.id) {
            return Err(Error::Embedding(format!("duplicate id '{}'", seq.id)));
        }
        self.map.insert(seq.id.clone(), seq);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingSequence> {
        self.map.get(id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.declared_dim
    }

    /// Sequences in id order.
    pub fn iter(&self) -> impl Iterator<Item = &EmbeddingSequence> {
        self.map.values()
    }
}

#[derive(Serialize, Deserialize)]
struct TextRecord {
    id: String,
    vectors: Vec<Vec<f32>>,
}

/// Load an embedding file, either the binary record format written by
/// [`save_embeddings`] or line-delimited JSON records
/// `{"id": ..., "vectors": [[...], ...]}` for small fixtures. The format
/// is detected from the file's leading bytes.
pub fn load_embeddings(path: &Path, expected_dim: usize) -> Result<EmbeddingStore> {
    let seqs = read_sequences(path)?;
    let mut store = EmbeddingStore::new(expected_dim)?;
    for seq in seqs {
        store.insert(seq)?;
    }
    Ok(store)
}

/// Like [`load_embeddings`], adopting the file's own width as the
/// store's declared dimension.
pub fn load_embeddings_autodim(path: &Path) -> Result<EmbeddingStore> {
    let seqs = read_sequences(path)?;
    let mut store = EmbeddingStore::new(seqs[0].dim())?;
    for seq in seqs {
        store.insert(seq)?;
    }
    Ok(store)
}

fn read_sequences(path: &Path) -> Result<Vec<EmbeddingSequence>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;

    let mut seqs = Vec::new();
    if bytes.starts_with(EMBED_MAGIC) {
        let records = util::parse_matrix_records(&bytes, EMBED_MAGIC)
            .map_err(|detail| Error::format(path.display().to_string(), detail))?;
        for (id, vectors) in records {
            seqs.push(EmbeddingSequence::new(id, vectors)?);
        }
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: TextRecord = serde_json::from_str(line).map_err(|e| {
                Error::format(path.display().to_string(), format!("line {}: {e}", lineno + 1))
            })?;
            let rows = rec.vectors.len();
            let cols = rec.vectors.first().map_or(0, |r| r.len());
            if rec.vectors.iter().any(|r| r.len() != cols) {
                return Err(Error::Embedding(format!(
                    "sequence '{}' has ragged rows",
                    rec.id
                )));
            }
            let flat: Vec<f32> = rec.vectors.into_iter().flatten().collect();
            let vectors = Array2::from_shape_vec((rows, cols), flat)
                .map_err(|e| Error::Embedding(e.to_string()))?;
            seqs.push(EmbeddingSequence::new(rec.id, vectors)?);
        }
    }
    if seqs.is_empty() {
        return Err(Error::Embedding(format!(
            "no embedding records in {}",
            path.display()
        )));
    }
    Ok(seqs)
}

/// Write a store in the binary record format, sequences in id order.
pub fn save_embeddings(path: &Path, store: &EmbeddingStore) -> Result<()> {
    let records: Vec<(&str, &Array2<f32>)> = store
        .iter()
        .map(|s| (s.id.as_str(), &s.vectors))
        .collect();
    util::write_matrix_records(path, EMBED_MAGIC, &records)
}

fn static_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = util::derive_rng(seed, &["pseudo-static", token]);
    let mut v: Vec<f64> = (0..dim).map(|_| util::standard_normal(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    } else {
        v[0] = 1.0;
    }
    v
}

fn to_f32_matrix(rows: Vec<Vec<f64>>, dim: usize) -> Array2<f32> {
    let data: Vec<f32> = rows.iter().flatten().map(|&x| x as f32).collect();
    Array2::from_shape_vec((rows.len(), dim), data).expect("row construction is uniform")
}

/// Context-free token vectors: each token maps to a hash-seeded unit-norm
/// Gaussian direction, identical wherever the token appears.
pub fn pseudo_static_embeddings(
    id: impl Into<String>,
    tokens: &[String],
    dim: usize,
    seed: u64,
) -> Result<EmbeddingSequence> {
    if tokens.is_empty() || dim == 0 {
        return Err(Error::Embedding(
            "need at least one token and a positive dimension".into(),
        ));
    }
    let rows: Vec<Vec<f64>> = tokens
        .iter()
        .map(|t| static_vector(t, dim, seed))
        .collect();
    EmbeddingSequence::new(id, to_f32_matrix(rows, dim))
}

fn sign_vector(offset: i64, dim: usize, seed: u64) -> Vec<f64> {
    let tag = format!("ctx-sign:{offset}");
    let mut rng = util::derive_rng(seed, &[&tag]);
    (0..dim)
        .map(|_| if util::bernoulli(&mut rng, 0.5) { 1.0 } else { -1.0 })
        .collect()
}

/// Context-dependent token vectors: each output is the token's static
/// vector plus sign-modulated contributions from its ±2 neighbors,
/// renormalized. A token therefore embeds differently when the nearby
/// words change, while tokens further than two positions away have no
/// influence at all.
pub fn pseudo_contextual_embeddings(
    id: impl Into<String>,
    tokens: &[String],
    dim: usize,
    seed: u64,
) -> Result<EmbeddingSequence> {
    if tokens.is_empty() || dim == 0 {
        return Err(Error::Embedding(
            "need at least one token and a positive dimension".into(),
        ));
    }
    let statics: Vec<Vec<f64>> = tokens
        .iter()
        .map(|t| static_vector(t, dim, seed))
        .collect();
    let signs: BTreeMap<i64, Vec<f64>> = [-2i64, -1, 1, 2]
        .into_iter()
        .map(|k| (k, sign_vector(k, dim, seed)))
        .collect();

    let mut rows = Vec::with_capacity(tokens.len());
    for i in 0..tokens.len() {
        let mut v = statics[i].clone();
        for (&k, sign) in &signs {
            let j = i as i64 + k;
            if j < 0 || j >= tokens.len() as i64 {
                continue;
            }
            let w = CONTEXT_WEIGHTS[k.unsigned_abs() as usize];
            let neighbor = &statics[j as usize];
            for d in 0..dim {
                v[d] += w * sign[d] * neighbor[d];
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for x in &mut v {
                *x /= norm;
            }
        } else {
            v.copy_from_slice(&statics[i]);
        }
        rows.push(v);
    }
    EmbeddingSequence::new(id, to_f32_matrix(rows, dim))
}

/// Which pseudo generator stands in for the embedding model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoEmbeddingKind {
    Static,
    Contextual,
}

impl PseudoEmbeddingKind {
    pub fn name(&self) -> &'static str {
        match self {
            PseudoEmbeddingKind::Static => "static",
            PseudoEmbeddingKind::Contextual => "contextual",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "static" => Ok(PseudoEmbeddingKind::Static),
            "contextual" => Ok(PseudoEmbeddingKind::Contextual),
            other => Err(Error::Config(format!(
                "unknown embedding kind '{other}' (expected static or contextual)"
            ))),
        }
    }
}

/// Run one pseudo generator over every (id, tokens) pair and collect the
/// results into a store.
pub fn pseudo_embedding_store<'a>(
    items: impl IntoIterator<Item = (&'a str, &'a [String])>,
    kind: PseudoEmbeddingKind,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingStore> {
    let mut store = EmbeddingStore::new(dim)?;
    for (id, tokens) in items {
        let seq = match kind {
            PseudoEmbeddingKind::Static => pseudo_static_embeddings(id, tokens, dim, seed)?,
            PseudoEmbeddingKind::Contextual => {
                pseudo_contextual_embeddings(id, tokens, dim, seed)?
            }
        };
        store.insert(seq)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn store_load_single_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let mut store = EmbeddingStore::new(768).unwrap();
        store
            .insert(EmbeddingSequence::new("u1", Array2::from_elem((3, 768), 0.25)).unwrap())
            .unwrap();
        save_embeddings(&path, &store).unwrap();
        let back = load_embeddings(&path, 768).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back.get("u1").unwrap().vectors, store.get("u1").unwrap().vectors);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let mut store = EmbeddingStore::new(300).unwrap();
        store
            .insert(EmbeddingSequence::new("u1", Array2::from_elem((2, 300), 1.0)).unwrap())
            .unwrap();
        save_embeddings(&path, &store).unwrap();
        assert!(load_embeddings(&path, 768).is_err());
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let mut store = EmbeddingStore::new(4).unwrap();
        let seq = EmbeddingSequence::new("dup", Array2::from_elem((1, 4), 0.5)).unwrap();
        store.insert(seq.clone()).unwrap();
        assert!(store.insert(seq).is_err());
    }

    #[test]
    fn empty_sequence_is_rejected() {
        assert!(EmbeddingSequence::new("e", Array2::<f32>::zeros((0, 4))).is_err());
    }

    #[test]
    fn jsonl_fixture_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"vectors\":[[1.0,2.0],[3.0,4.0]]}\n{\"id\":\"b\",\"vectors\":[[5.0,6.0]]}\n",
        )
        .unwrap();
        let store = load_embeddings(&path, 2).unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(store.get("a").unwrap().vectors[[1, 0]], 3.0);
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let seq = pseudo_static_embeddings("u", &toks(&["alpha", "beta", "gamma"]), 32, 5).unwrap();
        let mut store = EmbeddingStore::new(32).unwrap();
        store.insert(seq.clone()).unwrap();
        save_embeddings(&path, &store).unwrap();
        let back = load_embeddings(&path, 32).unwrap();
        assert_eq!(back.get("u").unwrap().vectors, seq.vectors);
    }

    #[test]
    fn static_vectors_ignore_context() {
        let a = pseudo_static_embeddings("a", &toks(&["i", "am", "sad"]), 64, 7).unwrap();
        let b = pseudo_static_embeddings("b", &toks(&["you", "look", "sad", "today"]), 64, 7).unwrap();
        assert_eq!(a.vectors.row(2), b.vectors.row(2));
    }

    #[test]
    fn static_vectors_are_unit_norm() {
        let seq = pseudo_static_embeddings("u", &toks(&["one", "two"]), 48, 3).unwrap();
        for row in seq.vectors.rows() {
            let norm: f64 = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5, "norm {norm}");
        }
    }

    #[test]
    fn distinct_tokens_are_nearly_orthogonal() {
        let dim = 64;
        let mut far = 0;
        for i in 0..1000 {
            let pair = toks(&[&format!("tok{i}a"), &format!("tok{i}b")]);
            let seq = pseudo_static_embeddings("p", &pair, dim, 11).unwrap();
            let cos: f64 = seq
                .vectors
                .row(0)
                .iter()
                .zip(seq.vectors.row(1))
                .map(|(&x, &y)| x as f64 * y as f64)
                .sum();
            if cos.abs() < 0.5 {
                far += 1;
            }
        }
        assert!(far >= 990, "only {far}/1000 pairs below |cos| = 0.5");
    }

    #[test]
    fn negation_shifts_contextual_vector() {
        let plain = pseudo_contextual_embeddings("a", &toks(&["i", "am", "sad"]), 64, 7).unwrap();
        let negated =
            pseudo_contextual_embeddings("b", &toks(&["i", "am", "not", "sad"]), 64, 7).unwrap();
        let d: f64 = plain
            .vectors
            .row(2)
            .iter()
            .zip(negated.vectors.row(3))
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(d > 1e-3, "negation left the vector unchanged ({d})");
    }

    #[test]
    fn single_token_keeps_its_static_direction() {
        let stat = pseudo_static_embeddings("s", &toks(&["lonely"]), 32, 9).unwrap();
        let ctx = pseudo_contextual_embeddings("c", &toks(&["lonely"]), 32, 9).unwrap();
        for (a, b) in stat.vectors.iter().zip(ctx.vectors.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn store_builder_embeds_every_item() {
        let a = toks(&["happy", "day"]);
        let b = toks(&["neg", "happy"]);
        let items = vec![("u1", a.as_slice()), ("u2", b.as_slice())];
        let store =
            pseudo_embedding_store(items.iter().copied(), PseudoEmbeddingKind::Static, 16, 2)
                .unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(store.dim(), 16);
        assert_eq!(store.get("u1").unwrap().len(), 2);
        assert_eq!(
            PseudoEmbeddingKind::parse("contextual").unwrap(),
            PseudoEmbeddingKind::Contextual
        );
        assert!(PseudoEmbeddingKind::parse("bert").is_err());
    }

    #[test]
    fn generators_are_reproducible() {
        let t = toks(&["a", "b", "c", "d"]);
        assert_eq!(
            pseudo_static_embeddings("u", &t, 16, 4).unwrap().vectors,
            pseudo_static_embeddings("u", &t, 16, 4).unwrap().vectors
        );
        assert_eq!(
            pseudo_contextual_embeddings("u", &t, 16, 4).unwrap().vectors,
            pseudo_contextual_embeddings("u", &t, 16, 4).unwrap().vectors
        );
    }

    proptest! {
        #[test]
        fn context_influence_stops_at_two_tokens(
            n in 6usize..12,
            swap in 0usize..100,
            seed in 0u64..50,
        ) {
            let base: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
            let mut changed = base.clone();
            // permute tokens at positions 3.. (outside position 0's window)
            let i = 3 + swap % (n - 3);
            let j = 3 + (swap / 7) % (n - 3);
            changed.swap(i, j);
            changed[3] = "replaced".to_string();
            let a = pseudo_contextual_embeddings("x", &base, 24, seed).unwrap();
            let b = pseudo_contextual_embeddings("x", &changed, 24, seed).unwrap();
            prop_assert_eq!(a.vectors.row(0), b.vectors.row(0));
        }
    }
}
