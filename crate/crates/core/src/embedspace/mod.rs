//! Embedding data model, file I/O, the centering/whitening/length-norm chain,
//! and cosine scoring.

mod io;
mod preprocess;

use std::collections::HashMap;

pub use io::{load_embeddings, read_embeddings, save_embeddings, write_embeddings, EmbeddingFormat};
pub use preprocess::{apply_preprocess, fit_preprocess, PreprocessChain};

use crate::error::{Error, Result};

/// One speaker embedding with its optional metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub id: String,
    pub vector: Vec<f64>,
    pub speaker: Option<String>,
    pub domain: Option<String>,
    pub duration_s: Option<f64>,
    pub partition: Option<String>,
}

impl Embedding {
    pub fn new(id: impl Into<String>, vector: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            vector,
            speaker: None,
            domain: None,
            duration_s: None,
            partition: None,
        }
    }

    pub fn with_speaker(mut self, speaker: impl Into<String>) -> Self {
        self.speaker = Some(speaker.into());
        self
    }

    pub fn with_domain(mut self, domain: impl Into<String>) -> Self {
        self.domain = Some(domain.into());
        self
    }

    pub fn with_duration(mut self, seconds: f64) -> Self {
        self.duration_s = Some(seconds);
        self
    }

    pub fn with_partition(mut self, partition: impl Into<String>) -> Self {
        self.partition = Some(partition.into());
        self
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.vector)
    }
}

/// An ordered set of embeddings sharing one dimension, with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    items: Vec<Embedding>,
    index: HashMap<String, usize>,
}

impl EmbeddingSet {
    /// Validates dimension, finiteness, duration sign and id uniqueness.
    /// Record numbers in errors are 1-based.
    pub fn new(dim: usize, items: Vec<Embedding>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
        }
        let mut index = HashMap::with_capacity(items.len());
        for (i, e) in items.iter().enumerate() {
            let record = i + 1;
            if e.vector.len() != dim {
                return Err(Error::DimensionMismatch {
                    record,
                    expected: dim,
                    found: e.vector.len(),
                });
            }
            if e.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::format("embedding", record, "non-finite component"));
            }
            if let Some(d) = e.duration_s {
                if !(d >= 0.0) || !d.is_finite() {
                    return Err(Error::format("embedding", record, "duration must be finite and nonnegative"));
                }
            }
            if index.insert(e.id.clone(), i).is_some() {
                return Err(Error::DuplicateId {
                    record,
                    id: e.id.clone(),
                });
            }
        }
        Ok(Self { dim, items, index })
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Embedding] {
        &self.items
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Embedding> {
        self.items.iter()
    }

    pub fn get(&self, id: &str) -> Option<&Embedding> {
        self.index.get(id).map(|&i| &self.items[i])
    }

    pub fn into_items(self) -> Vec<Embedding> {
        self.items
    }

    /// Groups item indices by speaker label, in first-appearance order.
    /// Fails if any item lacks a label.
    pub fn speaker_groups(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut order: Vec<(String, Vec<usize>)> = Vec::new();
        let mut pos: HashMap<&str, usize> = HashMap::new();
        for (i, e) in self.items.iter().enumerate() {
            let spk = e.speaker.as_deref().ok_or_else(|| {
                Error::MissingData(format!("embedding {:?} (record {}) has no speaker label", e.id, i + 1))
            })?;
            match pos.get(spk) {
                Some(&g) => order[g].1.push(i),
                None => {
                    pos.insert(spk, order.len());
                    order.push((spk.to_string(), vec![i]));
                }
            }
        }
        Ok(order)
    }

    /// Prefixes every id and speaker label, e.g. to keep synthetic sets disjoint.
    pub fn with_id_prefix(&self, prefix: &str) -> EmbeddingSet {
        let items = self
            .items
            .iter()
            .map(|e| Embedding {
                id: format!("{prefix}{}", e.id),
                speaker: e.speaker.as_ref().map(|s| format!("{prefix}{s}")),
                ..e.clone()
            })
            .collect();
        EmbeddingSet::new(self.dim, items).expect("prefixing preserves validity")
    }

    /// Returns a copy with every item's domain and partition set.
    pub fn tagged(&self, domain: Option<&str>, partition: Option<&str>) -> EmbeddingSet {
        let items = self
            .items
            .iter()
            .map(|e| Embedding {
                domain: domain.map(str::to_string).or_else(|| e.domain.clone()),
                partition: partition.map(str::to_string).or_else(|| e.partition.clone()),
                ..e.clone()
            })
            .collect();
        EmbeddingSet::new(self.dim, items).expect("tagging preserves validity")
    }

    /// Concatenates two sets of the same dimension.
    pub fn concat(&self, other: &EmbeddingSet) -> Result<EmbeddingSet> {
        if self.dim != other.dim {
            return Err(Error::Shape(format!("cannot concatenate dim {} with dim {}", self.dim, other.dim)));
        }
        let mut items = self.items.clone();
        items.extend(other.items.iter().cloned());
        EmbeddingSet::new(self.dim, items)
    }
}

impl<'a> IntoIterator for &'a EmbeddingSet {
    type Item = &'a Embedding;
    type IntoIter = std::slice::Iter<'a, Embedding>;

    fn into_iter(self) -> Self::IntoIter {
        self.items.iter()
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity between two vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of dim {} and dim {}", a.len(), b.len())));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cosine of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine back-end score.
pub fn score_cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    cosine(&a.vector, &b.vector)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        let a = Embedding::new("a", vec![1.0, 1.0]);
        let b = Embedding::new("b", vec![1.0, 0.0]);
        assert!((score_cosine(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((score_cosine(&a, &b).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let c = Embedding::new("c", vec![0.0, 1.0]);
        assert_eq!(score_cosine(&b, &c).unwrap(), 0.0);
    }

    #[test]
    fn cosine_zero_vector_rejected() {
        let a = Embedding::new("a", vec![0.0, 0.0]);
        let b = Embedding::new("b", vec![1.0, 0.0]);
        assert!(score_cosine(&a, &b).is_err());
    }

    #[test]
    fn set_rejects_duplicates_and_bad_dims() {
        let e = |id: &str, n| Embedding::new(id, vec![0.0; n]);
        match EmbeddingSet::new(2, vec![e("a", 2), e("a", 2)]) {
            Err(Error::DuplicateId { record: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        match EmbeddingSet::new(2, vec![e("a", 2), e("b", 3)]) {
            Err(Error::DimensionMismatch { record: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn speaker_groups_need_labels() {
        let s = EmbeddingSet::new(1, vec![Embedding::new("a", vec![0.0])]).unwrap();
        assert!(s.speaker_groups().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cosine_symmetric_and_scale_invariant(
                a in prop::collection::vec(-10.0f64..10.0, 4),
                b in prop::collection::vec(-10.0f64..10.0, 4),
                k in 0.01f64..100.0,
            ) {
                prop_assume!(l2_norm(&a) > 1e-3 && l2_norm(&b) > 1e-3);
                let ab = cosine(&a, &b).unwrap();
                prop_assert_eq!(ab, cosine(&b, &a).unwrap());
                let ka: Vec<f64> = a.iter().map(|v| v * k).collect();
                prop_assert!((cosine(&ka, &b).unwrap() - ab).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&ab));
            }
        }
    }
}
