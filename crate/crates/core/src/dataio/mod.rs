//! Feature sets, the FVEC interchange container, zero-shot splits and the
//! synthetic two-domain generator.

mod fvec;
mod split;
mod synthetic;
mod words;

use std::collections::BTreeSet;

use diffmath::Matrix;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fvec::{
    read_container, read_fvec, write_container, write_fvec, FvecManifest, TensorEntry,
    FORMAT_VERSION,
};
pub(crate) use fvec::write_fvec_kind as fvec_write_kind;
pub use split::{assert_disjoint, make_zero_shot_split, SplitSpec};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticData, SKETCH_NOISE_FACTOR};
pub use words::{read_word_vectors, write_word_vectors, WordVectors, ALTERNATES_PER_CLASS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Sketch,
    Image,
    /// Word-embedding rows (anchor interchange files only).
    Word,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Sketch => "sketch",
            Domain::Image => "image",
            Domain::Word => "word",
        }
    }
}

/// Labeled, domain-tagged embedding vectors.
///
/// Labels index into `class_names`; every vector has length `dim()`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    vectors: Matrix,
    labels: Vec<usize>,
    domains: Vec<Domain>,
    class_names: Vec<String>,
}

impl FeatureSet {
    pub fn new(
        vectors: Matrix,
        labels: Vec<usize>,
        domains: Vec<Domain>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let count = vectors.rows();
        if labels.len() != count {
            return Err(Error::Contract(format!(
                "{} labels for {count} vectors",
                labels.len()
            )));
        }
        if domains.len() != count {
            return Err(Error::Contract(format!(
                "{} domain tags for {count} vectors",
                domains.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        if !vectors.is_finite() {
            return Err(Error::Contract("feature vectors must be finite".into()));
        }
        Ok(Self {
            vectors,
            labels,
            domains,
            class_names,
        })
    }

    /// Every item tagged with the same domain.
    pub fn single_domain(
        vectors: Matrix,
        labels: Vec<usize>,
        domain: Domain,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let n = vectors.rows();
        Self::new(vectors, labels, vec![domain; n], class_names)
    }

    pub fn empty(dim: usize, class_names: Vec<String>) -> Self {
        Self {
            vectors: Matrix::zeros(0, dim),
            labels: Vec::new(),
            domains: Vec::new(),
            class_names,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Item indices grouped by class id; entry `c` lists items of class `c`.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.class_names.len()];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups
    }

    pub fn classes_present(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    /// Items at `indices`, in that order. Class names are kept.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            vectors: self.vectors.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            domains: indices.iter().map(|&i| self.domains[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Items whose class is in `classes`, preserving order.
    pub fn restrict_classes(&self, classes: &[usize]) -> Self {
        let keep: BTreeSet<usize> = classes.iter().copied().collect();
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| keep.contains(&self.labels[i]))
            .collect();
        self.subset(&idx)
    }

    pub fn restrict_domain(&self, domain: Domain) -> Self {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| self.domains[i] == domain)
            .collect();
        self.subset(&idx)
    }

    /// At most `n` items per class, drawn uniformly without replacement.
    /// Output is grouped by class in ascending class order.
    pub fn sample_per_class<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Self {
        let mut idx = Vec::new();
        for group in self.indices_by_class() {
            if group.len() <= n {
                idx.extend(group);
            } else {
                let mut picked: Vec<usize> = sample(rng, group.len(), n)
                    .into_iter()
                    .map(|k| group[k])
                    .collect();
                picked.sort_unstable();
                idx.extend(picked);
            }
        }
        self.subset(&idx)
    }

    /// Appends `other`, which must share dimension and class names.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::Contract(format!(
                "cannot concatenate dim {} with dim {}",
                self.dim(),
                other.dim()
            )));
        }
        if self.class_names != other.class_names {
            return Err(Error::Contract(
                "cannot concatenate feature sets with different class names".into(),
            ));
        }
        let mut data = self.vectors.data().to_vec();
        data.extend_from_slice(other.vectors.data());
        let vectors = Matrix::new(self.len() + other.len(), self.dim(), data)?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut domains = self.domains.clone();
        domains.extend_from_slice(&other.domains);
        Ok(Self {
            vectors,
            labels,
            domains,
            class_names: self.class_names.clone(),
        })
    }

    /// Copy with every vector rounded to `f32`, matching what the FVEC
    /// container stores.
    pub fn rounded_to_f32(&self) -> Self {
        let mut out = self.clone();
        out.vectors = self.vectors.map(|x| x as f32 as f64);
        out
    }
}
