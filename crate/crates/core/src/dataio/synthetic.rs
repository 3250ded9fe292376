//! Two-domain synthetic features: a well-clustered "image" space and a mixed,
//! noisier "sketch" space over the same class prototypes.

use diffmath::Matrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::words::{WordVectors, ALTERNATES_PER_CLASS};
use super::{Domain, FeatureSet};
use crate::error::{Error, Result};

/// Sketch noise relative to image noise.
pub const SKETCH_NOISE_FACTOR: f64 = 2.0;

/// Per-dimension standard deviation of the unit noise draw `ε`.
const NOISE_DIM_STD: f64 = 0.75;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// 0 leaves sketches on the image prototypes; 1 mixes them with a full
    /// random rotation.
    pub domain_gap: f64,
    pub noise: f64,
    pub word_dim: usize,
    /// Size of the perturbation that produces word alternates.
    pub word_jitter: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 12,
            per_class: 200,
            dim: 32,
            domain_gap: 0.6,
            noise: 0.25,
            word_dim: 300,
            word_jitter: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub images: FeatureSet,
    pub sketches: FeatureSet,
    /// `classes x dim`, unit rows.
    pub prototypes: Matrix,
    /// The sketch mixing map, rows normalized.
    pub mixing: Matrix,
    pub words: WordVectors,
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Haar-random orthogonal matrix from Gram-Schmidt on Gaussian columns.
pub(crate) fn random_orthogonal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while cols.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        // two passes keep the basis orthogonal to working precision
        for _ in 0..2 {
            for q in &cols {
                let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        cols.push(v);
    }
    Matrix::from_fn(dim, dim, |r, c| cols[c][r])
}

pub fn generate_synthetic<R: Rng + ?Sized>(
    config: &SyntheticConfig,
    rng: &mut R,
) -> Result<SyntheticData> {
    let SyntheticConfig {
        classes,
        per_class,
        dim,
        domain_gap,
        noise,
        word_dim,
        word_jitter,
    } = *config;
    if dim < 2 {
        return Err(Error::Config(format!("synthetic dim must be >= 2, got {dim}")));
    }
    if classes == 0 || word_dim == 0 {
        return Err(Error::Config("need at least one class and word_dim >= 1".into()));
    }
    if !(0.0..=1.0).contains(&domain_gap) || noise < 0.0 || word_jitter < 0.0 {
        return Err(Error::Config(
            "domain_gap must lie in [0, 1]; noise and word_jitter must be >= 0".into(),
        ));
    }

    let mut prototypes = Matrix::from_fn(classes, dim, |_, _| gaussian(rng));
    for c in 0..classes {
        normalize(prototypes.row_mut(c));
    }

    let q = random_orthogonal(dim, rng);
    let mut mixing = Matrix::from_fn(dim, dim, |r, c| {
        let eye = if r == c { 1.0 - domain_gap } else { 0.0 };
        eye + domain_gap * q.get(r, c)
    });
    for r in 0..dim {
        normalize(mixing.row_mut(r));
    }

    let class_names: Vec<String> = (0..classes).map(|c| format!("class_{c:02}")).collect();
    let labels: Vec<usize> = (0..classes)
        .flat_map(|c| std::iter::repeat_n(c, per_class))
        .collect();

    let image_sigma = noise * NOISE_DIM_STD;
    let mut images = Matrix::zeros(classes * per_class, dim);
    for (i, &c) in labels.iter().enumerate() {
        let row = images.row_mut(i);
        for (x, &u) in row.iter_mut().zip(prototypes.row(c)) {
            *x = u + image_sigma * gaussian(rng);
        }
        normalize(row);
    }

    let mixed = prototypes.matmul(&mixing.transpose())?;
    let sketch_sigma = SKETCH_NOISE_FACTOR * image_sigma;
    let mut sketches = Matrix::zeros(classes * per_class, dim);
    for (i, &c) in labels.iter().enumerate() {
        let row = sketches.row_mut(i);
        for (x, &m) in row.iter_mut().zip(mixed.row(c)) {
            *x = m + sketch_sigma * gaussian(rng);
        }
        normalize(row);
    }

    // word space: an independent random linear embedding of the prototypes
    let embed_scale = 1.0 / (dim as f64).sqrt();
    let embed = Matrix::from_fn(word_dim, dim, |_, _| gaussian(rng) * embed_scale);
    let mut word_vectors = prototypes.matmul(&embed.transpose())?;
    for c in 0..classes {
        normalize(word_vectors.row_mut(c));
    }
    let jitter_scale = word_jitter / (word_dim as f64).sqrt();
    let alternates = (0..classes)
        .map(|c| {
            let mut alt = Matrix::from_fn(ALTERNATES_PER_CLASS, word_dim, |_, k| {
                word_vectors.get(c, k) + jitter_scale * gaussian(rng)
            });
            for r in 0..ALTERNATES_PER_CLASS {
                normalize(alt.row_mut(r));
            }
            alt
        })
        .collect();

    Ok(SyntheticData {
        images: FeatureSet::single_domain(images, labels.clone(), Domain::Image, class_names.clone())?,
        sketches: FeatureSet::single_domain(sketches, labels, Domain::Sketch, class_names.clone())?,
        prototypes,
        mixing,
        words: WordVectors::new(class_names, word_vectors, alternates)?,
    })
}
