//! Candidate concept sets with frozen text embeddings.
//!
//! The order concepts are loaded in is the canonical concept axis: column `i`
//! of every similarity matrix refers to `pool.concepts()[i]`, and every
//! selector keeps surviving concepts in that order.

mod select;

use std::fs;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_rows, Matrix, NORM_EPS};

pub use select::{
    coverage, discriminability, mean_similarities, select_by_similarity, select_kmeans, select_random,
    select_submodular, select_svd, submodular_greedy, GreedyTrace, SubmodularWeights,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: String,
    pub class_hint: String,
    pub text: String,
    pub embedding: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoolFile {
    dim: usize,
    concepts: Vec<Concept>,
}

const UNIT_TOL: f64 = 4.0 * f64::EPSILON;

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptPool {
    concepts: Vec<Concept>,
    dim: usize,
    per_class_counts: IndexMap<String, usize>,
}

impl ConceptPool {
    /// Validates the concepts and L2-normalizes their embeddings.
    pub fn new(dim: usize, concepts: Vec<Concept>) -> Result<Self> {
        if concepts.is_empty() {
            return Err(Error::EmptyPool);
        }
        let mut seen = std::collections::HashSet::new();
        let mut per_class_counts = IndexMap::new();
        let mut normalized = Vec::with_capacity(concepts.len());
        for mut c in concepts {
            if c.embedding.len() != dim {
                return Err(Error::ConceptDimMismatch {
                    id: c.id,
                    expected: dim,
                    found: c.embedding.len(),
                });
            }
            if c.embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "concept {:?} has a non-finite embedding",
                    c.id
                )));
            }
            if !seen.insert(c.id.clone()) {
                return Err(Error::DuplicateConceptId(c.id));
            }
            // Rows that are already unit length keep their exact bits, so
            // reloading or subsetting a pool never drifts.
            let norm = c.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOL {
                let row = Matrix::row_vector(&c.embedding);
                c.embedding = l2_normalize_rows(&row, NORM_EPS).into_data();
            }
            *per_class_counts.entry(c.class_hint.clone()).or_insert(0) += 1;
            normalized.push(c);
        }
        Ok(ConceptPool {
            concepts: normalized,
            dim,
            per_class_counts,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        let file: PoolFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        ConceptPool::new(file.dim, file.concepts)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = PoolFile {
            dim: self.dim,
            concepts: self.concepts.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn per_class_counts(&self) -> &IndexMap<String, usize> {
        &self.per_class_counts
    }

    /// Class hints in order of first appearance.
    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.per_class_counts.keys().map(String::as_str)
    }

    /// Canonical indices of the concepts generated for `class`.
    pub fn class_indices(&self, class: &str) -> Vec<usize> {
        self.concepts
            .iter()
            .enumerate()
            .filter(|(_, c)| c.class_hint == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// N x D matrix of unit-norm concept embeddings.
    pub fn embeddings(&self) -> Matrix {
        let data = self.concepts.iter().flat_map(|c| c.embedding.iter().copied()).collect();
        Matrix::new(self.concepts.len(), self.dim, data).expect("pool invariant")
    }

    /// Hex SHA-256 over the concept ids in canonical order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.concepts {
            h.update(c.id.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    /// Keeps the concepts at `indices`, in canonical order.
    pub fn subset(&self, indices: &[usize]) -> ConceptPool {
        let mut keep = vec![false; self.concepts.len()];
        for &i in indices {
            keep[i] = true;
        }
        let concepts: Vec<Concept> = self
            .concepts
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(c, _)| c.clone())
            .collect();
        ConceptPool::new(self.dim, concepts).expect("subset of a valid pool")
    }

    pub(crate) fn check_k(&self, k_per_class: usize) -> Result<()> {
        if k_per_class == 0 {
            return Err(Error::InvalidArgument("k_per_class must be at least 1".into()));
        }
        for (class, &available) in &self.per_class_counts {
            if available < k_per_class {
                return Err(Error::InsufficientConcepts {
                    class: class.clone(),
                    available,
                    requested: k_per_class,
                });
            }
        }
        Ok(())
    }
}

/// The concept-selection strategies, by CLI name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    None,
    Random,
    Svd,
    Kmeans,
    Similarity,
    Submodular,
}

impl SelectionMethod {
    pub const ALL: [SelectionMethod; 6] = [
        SelectionMethod::None,
        SelectionMethod::Random,
        SelectionMethod::Svd,
        SelectionMethod::Kmeans,
        SelectionMethod::Similarity,
        SelectionMethod::Submodular,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectionMethod::None => "none",
            SelectionMethod::Random => "random",
            SelectionMethod::Svd => "svd",
            SelectionMethod::Kmeans => "kmeans",
            SelectionMethod::Similarity => "similarity",
            SelectionMethod::Submodular => "submodular",
        }
    }

    pub fn needs_images(self) -> bool {
        matches!(self, SelectionMethod::Similarity | SelectionMethod::Submodular)
    }
}

impl std::fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SelectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SelectionMethod::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = SelectionMethod::ALL.iter().map(|m| m.name()).collect();
            Error::InvalidArgument(format!(
                "unknown selection method {s:?}; valid methods: {{{}}}",
                valid.join(",")
            ))
        })
    }
}

/// Knobs shared by the selectors that need them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams {
    pub seed: u64,
    pub kmeans_max_iters: usize,
    pub weights: SubmodularWeights,
}

impl Default for SelectionParams {
    fn default() -> Self {
        SelectionParams {
            seed: 0,
            kmeans_max_iters: 100,
            weights: SubmodularWeights::default(),
        }
    }
}

/// Runs `method`; `images` must be given for the image-driven methods.
pub fn select(
    pool: &ConceptPool,
    method: SelectionMethod,
    k_per_class: usize,
    images: Option<&Matrix>,
    params: &SelectionParams,
) -> Result<ConceptPool> {
    let need_images = || images.ok_or(Error::EmptyReferenceSet);
    match method {
        SelectionMethod::None => Ok(pool.clone()),
        SelectionMethod::Random => select_random(pool, k_per_class, params.seed),
        SelectionMethod::Svd => select_svd(pool, k_per_class),
        SelectionMethod::Kmeans => select_kmeans(pool, k_per_class, params.seed, params.kmeans_max_iters),
        SelectionMethod::Similarity => select_by_similarity(pool, k_per_class, need_images()?),
        SelectionMethod::Submodular => select_submodular(pool, k_per_class, need_images()?, params.weights),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn concept(id: &str, class: &str, emb: &[f64]) -> Concept {
        Concept {
            id: id.into(),
            class_hint: class.into(),
            text: format!("{id} text"),
            embedding: emb.to_vec(),
        }
    }

    #[test]
    fn normalizes_on_construction() {
        let pool = ConceptPool::new(2, vec![concept("a", "x", &[3.0, 4.0])]).unwrap();
        assert_eq!(pool.concepts()[0].embedding, vec![0.6, 0.8]);
        assert_eq!(pool.len(), 1);
    }

    #[test]
    fn rejects_bad_pools() {
        assert!(matches!(ConceptPool::new(2, vec![]), Err(Error::EmptyPool)));
        let dup = vec![concept("a", "x", &[1.0, 0.0]), concept("a", "y", &[0.0, 1.0])];
        assert!(matches!(ConceptPool::new(2, dup), Err(Error::DuplicateConceptId(_))));
        let mixed = vec![concept("a", "x", &[1.0, 0.0]), concept("b", "x", &[0.0, 1.0, 0.0])];
        assert!(matches!(
            ConceptPool::new(2, mixed),
            Err(Error::ConceptDimMismatch {
                expected: 2,
                found: 3,
                ..
            })
        ));
    }

    #[test]
    fn load_round_trip_and_mixed_dims() {
        let dir = tempfile::tempdir().unwrap();
        let mut concepts = Vec::new();
        for class in 0..9 {
            for j in 0..10 {
                let mut e = vec![0.0; 16];
                e[(class + j) % 16] = 1.0;
                e[(class * 3 + j * 7) % 16] += 0.5;
                concepts.push(concept(&format!("c{class}_{j}"), &format!("class{class}"), &e));
            }
        }
        let pool = ConceptPool::new(16, concepts).unwrap();
        let path = dir.path().join("pool.json");
        pool.save(&path).unwrap();
        let loaded = ConceptPool::load(&path).unwrap();
        assert_eq!(loaded.len(), 90);
        assert_eq!(loaded, pool);
        assert!(loaded.per_class_counts().values().all(|&n| n == 10));

        let bad = r#"{"dim": 16, "concepts": [
            {"id": "a", "class_hint": "x", "text": "", "embedding": [1,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0]},
            {"id": "b", "class_hint": "x", "text": "", "embedding": [1,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0]}]}"#;
        let path = dir.path().join("bad.json");
        std::fs::write(&path, bad).unwrap();
        assert!(matches!(
            ConceptPool::load(&path),
            Err(Error::ConceptDimMismatch { found: 17, .. })
        ));
        assert!(matches!(
            ConceptPool::load(dir.path().join("nope.json")),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn unknown_method_lists_valid_names() {
        let err = "pca".parse::<SelectionMethod>().unwrap_err().to_string();
        assert!(err.contains("{none,random,svd,kmeans,similarity,submodular}"), "{err}");
        assert_eq!("kmeans".parse::<SelectionMethod>().unwrap(), SelectionMethod::Kmeans);
    }

    #[test]
    fn fingerprint_tracks_ids_only() {
        let a = ConceptPool::new(2, vec![concept("a", "x", &[1.0, 0.0])]).unwrap();
        let b = ConceptPool::new(2, vec![concept("a", "x", &[0.0, 1.0])]).unwrap();
        let c = ConceptPool::new(2, vec![concept("b", "x", &[1.0, 0.0])]).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }
}
