//! Word-vector interchange: one main vector per class plus a companion
//! container with exactly [`ALTERNATES_PER_CLASS`] neighbor vectors per class.

use std::path::Path;

use diffmath::Matrix;

use super::fvec::{read_container, write_container, FvecManifest};
use super::Domain;
use crate::error::{Error, Result};

pub const ALTERNATES_PER_CLASS: usize = 10;

const KIND_MAIN: &str = "word-vectors";
const KIND_ALTERNATES: &str = "word-alternates";

/// Per-class word vectors indexed by class id.
#[derive(Clone, Debug, PartialEq)]
pub struct WordVectors {
    pub class_names: Vec<String>,
    /// `C x Dw`, row `c` is class `c`.
    pub vectors: Matrix,
    /// Either empty, or `C` matrices of shape `ALTERNATES_PER_CLASS x Dw`.
    pub alternates: Vec<Matrix>,
}

impl WordVectors {
    pub fn new(class_names: Vec<String>, vectors: Matrix, alternates: Vec<Matrix>) -> Result<Self> {
        if vectors.rows() != class_names.len() {
            return Err(Error::Contract(format!(
                "{} word vectors for {} classes",
                vectors.rows(),
                class_names.len()
            )));
        }
        if !alternates.is_empty() {
            if alternates.len() != class_names.len() {
                return Err(Error::Contract(format!(
                    "alternates for {} of {} classes",
                    alternates.len(),
                    class_names.len()
                )));
            }
            for (c, alt) in alternates.iter().enumerate() {
                if alt.shape() != (ALTERNATES_PER_CLASS, vectors.cols()) {
                    return Err(Error::Contract(format!(
                        "class `{}` has alternates of shape {:?}, expected {:?}",
                        class_names[c],
                        alt.shape(),
                        (ALTERNATES_PER_CLASS, vectors.cols())
                    )));
                }
            }
        }
        Ok(Self {
            class_names,
            vectors,
            alternates,
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn has_alternates(&self) -> bool {
        !self.alternates.is_empty()
    }

    /// Rows for the listed class ids, in order, with their alternates.
    pub fn select(&self, classes: &[usize]) -> Self {
        Self {
            class_names: classes.iter().map(|&c| self.class_names[c].clone()).collect(),
            vectors: self.vectors.select_rows(classes),
            alternates: if self.alternates.is_empty() {
                Vec::new()
            } else {
                classes.iter().map(|&c| self.alternates[c].clone()).collect()
            },
        }
    }
}

fn to_f32(m: &Matrix) -> impl Iterator<Item = f32> + '_ {
    m.data().iter().map(|&x| x as f32)
}

/// Writes the main container at `main` and, when present, the alternates at
/// `alternates`.
pub fn write_word_vectors(words: &WordVectors, main: &Path, alternates: Option<&Path>) -> Result<()> {
    let c = words.class_names.len();
    let mut manifest = FvecManifest::new(words.dim(), c);
    manifest.kind = Some(KIND_MAIN.into());
    manifest.class_names = words.class_names.clone();
    manifest.labels = (0..c).collect();
    manifest.domain = vec![Domain::Word; c];
    write_container(main, manifest, &to_f32(&words.vectors).collect::<Vec<_>>())?;

    if let Some(path) = alternates {
        if !words.has_alternates() {
            return Err(Error::Config(
                "alternates path given but the word vectors carry no alternates".into(),
            ));
        }
        let mut manifest = FvecManifest::new(words.dim(), c * ALTERNATES_PER_CLASS);
        manifest.kind = Some(KIND_ALTERNATES.into());
        manifest.class_names = words.class_names.clone();
        manifest.labels = (0..c)
            .flat_map(|k| std::iter::repeat_n(k, ALTERNATES_PER_CLASS))
            .collect();
        manifest.domain = vec![Domain::Word; c * ALTERNATES_PER_CLASS];
        let values: Vec<f32> = words.alternates.iter().flat_map(to_f32).collect();
        write_container(path, manifest, &values)?;
    }
    Ok(())
}

pub fn read_word_vectors(main: &Path, alternates: Option<&Path>) -> Result<WordVectors> {
    let (m, values) = read_container(main)?;
    if m.count != m.class_names.len() {
        return Err(Error::format(
            "count",
            format!("{} word vectors for {} class names", m.count, m.class_names.len()),
        ));
    }
    if !m.labels.is_empty() && m.labels != (0..m.count).collect::<Vec<_>>() {
        return Err(Error::format("labels", "word vectors must be listed in class order"));
    }
    let vectors = Matrix::new(m.count, m.dim, values.into_iter().map(f64::from).collect())?;

    let mut alts = Vec::new();
    if let Some(path) = alternates {
        let (am, avalues) = read_container(path)?;
        if am.dim != m.dim {
            return Err(Error::format(
                "dim",
                format!("alternates have dim {}, word vectors {}", am.dim, m.dim),
            ));
        }
        if am.class_names != m.class_names {
            return Err(Error::format(
                "class_names",
                "alternates list different classes than the word vectors",
            ));
        }
        if am.count != m.count * ALTERNATES_PER_CLASS {
            return Err(Error::format(
                "count",
                format!(
                    "{} alternates for {} classes, expected exactly {ALTERNATES_PER_CLASS} each",
                    am.count, m.count
                ),
            ));
        }
        let expected: Vec<usize> = (0..m.count)
            .flat_map(|k| std::iter::repeat_n(k, ALTERNATES_PER_CLASS))
            .collect();
        if !am.labels.is_empty() && am.labels != expected {
            return Err(Error::format(
                "labels",
                "alternates must be grouped by class in class order",
            ));
        }
        let block = ALTERNATES_PER_CLASS * m.dim;
        for chunk in avalues.chunks_exact(block.max(1)).take(m.count) {
            alts.push(Matrix::new(
                ALTERNATES_PER_CLASS,
                m.dim,
                chunk.iter().map(|&x| f64::from(x)).collect(),
            )?);
        }
    }
    WordVectors::new(m.class_names, vectors, alts)
}
