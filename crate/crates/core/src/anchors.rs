//! Semantic anchors: per-class word vectors and visual class statistics,
//! their cosine similarity matrices, and per-iteration randomization.

use std::path::Path;

use diffmath::Matrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataio::{read_fvec, Domain, FeatureSet, WordVectors, ALTERNATES_PER_CLASS};
use crate::error::{Error, Result};

/// Anchors for an ordered list of classes. Row `i` of every matrix belongs to
/// `class_ids[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    class_ids: Vec<usize>,
    /// Name table of the dataset the class ids index into.
    class_names: Vec<String>,
    word_vectors: Matrix,
    word_alternates: Vec<Matrix>,
    visual_means: Matrix,
    visual_stds: Matrix,
    sim_word: Matrix,
    sim_visual: Matrix,
}

/// Per-class mean and population standard deviation of raw image features.
///
/// Row `i` of both outputs describes `classes[i]`.
pub fn compute_visual_anchors(images: &FeatureSet, classes: &[usize]) -> Result<(Matrix, Matrix)> {
    let dim = images.dim();
    let mut count = vec![0usize; images.num_classes()];
    let mut mean = vec![vec![0.0f64; dim]; images.num_classes()];
    let mut m2 = vec![vec![0.0f64; dim]; images.num_classes()];
    // Welford's update, one pass over the items
    for i in 0..images.len() {
        let c = images.labels()[i];
        count[c] += 1;
        let n = count[c] as f64;
        for ((mu, s), &x) in mean[c].iter_mut().zip(m2[c].iter_mut()).zip(images.vector(i)) {
            let delta = x - *mu;
            *mu += delta / n;
            *s += delta * (x - *mu);
        }
    }

    let mut means = Matrix::zeros(classes.len(), dim);
    let mut stds = Matrix::zeros(classes.len(), dim);
    for (row, &c) in classes.iter().enumerate() {
        let n = *count.get(c).ok_or_else(|| {
            Error::Contract(format!(
                "class id {c} out of range for {} classes",
                images.num_classes()
            ))
        })?;
        if n == 0 {
            return Err(Error::MissingClass(images.class_names()[c].clone()));
        }
        means.row_mut(row).copy_from_slice(&mean[c]);
        for (s, &v) in stds.row_mut(row).iter_mut().zip(&m2[c]) {
            *s = (v.max(0.0) / n as f64).sqrt();
        }
    }
    Ok((means, stds))
}

/// Cosine similarity between every pair of rows.
pub fn build_similarity_matrix(anchors: &Matrix) -> Result<Matrix> {
    if let Some(r) = (0..anchors.rows()).find(|&r| anchors.row(r).iter().all(|&x| x == 0.0)) {
        return Err(Error::DegenerateAnchor(format!("anchor row {r} is zero")));
    }
    let unit = anchors.normalize_rows();
    let mut sim = unit.matmul(&unit.transpose())?;
    let n = sim.rows();
    for i in 0..n {
        sim.set(i, i, 1.0);
        for j in 0..i {
            let v = 0.5 * (sim.get(i, j) + sim.get(j, i));
            sim.set(i, j, v);
            sim.set(j, i, v);
        }
    }
    Ok(sim)
}

impl AnchorSet {
    pub fn new(
        class_ids: Vec<usize>,
        class_names: Vec<String>,
        word_vectors: Matrix,
        word_alternates: Vec<Matrix>,
        visual_means: Matrix,
        visual_stds: Matrix,
    ) -> Result<Self> {
        let c = class_ids.len();
        if word_vectors.rows() != c || visual_means.rows() != c {
            return Err(Error::Contract(format!(
                "{c} classes but {} word rows and {} visual rows",
                word_vectors.rows(),
                visual_means.rows()
            )));
        }
        if visual_stds.shape() != visual_means.shape() {
            return Err(Error::Contract("visual std shape differs from means".into()));
        }
        if visual_stds.data().iter().any(|&s| s < 0.0 || !s.is_finite()) {
            return Err(Error::Contract("visual stds must be finite and >= 0".into()));
        }
        if let Some(&bad) = class_ids.iter().find(|&&id| id >= class_names.len()) {
            return Err(Error::Contract(format!("class id {bad} has no name")));
        }
        if !word_alternates.is_empty() {
            if word_alternates.len() != c {
                return Err(Error::Contract(format!(
                    "alternates for {} of {c} classes",
                    word_alternates.len()
                )));
            }
            if let Some(bad) = word_alternates
                .iter()
                .position(|a| a.shape() != (ALTERNATES_PER_CLASS, word_vectors.cols()))
            {
                return Err(Error::Contract(format!(
                    "class `{}` does not have exactly {ALTERNATES_PER_CLASS} alternates of dim {}",
                    class_names[class_ids[bad]],
                    word_vectors.cols()
                )));
            }
        }
        let sim_word = build_similarity_matrix(&word_vectors)?;
        let sim_visual = build_similarity_matrix(&visual_means)?;
        Ok(Self {
            class_ids,
            class_names,
            word_vectors,
            word_alternates,
            visual_means,
            visual_stds,
            sim_word,
            sim_visual,
        })
    }

    /// Anchors for `classes` from raw image features and class word vectors.
    /// `words` is indexed by the same class ids as `images`.
    pub fn from_features(images: &FeatureSet, words: &WordVectors, classes: &[usize]) -> Result<Self> {
        if words.class_names.len() != images.num_classes() {
            return Err(Error::Contract(format!(
                "word vectors cover {} classes, image features {}",
                words.class_names.len(),
                images.num_classes()
            )));
        }
        let (means, stds) = compute_visual_anchors(images, classes)?;
        let w = words.select(classes);
        Self::new(
            classes.to_vec(),
            images.class_names().to_vec(),
            w.vectors,
            w.alternates,
            means,
            stds,
        )
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Row index of a dataset class id.
    pub fn row_of(&self, class_id: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }

    pub fn word_vectors(&self) -> &Matrix {
        &self.word_vectors
    }

    pub fn word_alternates(&self) -> &[Matrix] {
        &self.word_alternates
    }

    pub fn visual_means(&self) -> &Matrix {
        &self.visual_means
    }

    pub fn visual_stds(&self) -> &Matrix {
        &self.visual_stds
    }

    pub fn sim_word(&self) -> &Matrix {
        &self.sim_word
    }

    pub fn sim_visual(&self) -> &Matrix {
        &self.sim_visual
    }

    pub fn word_dim(&self) -> usize {
        self.word_vectors.cols()
    }

    pub fn visual_dim(&self) -> usize {
        self.visual_means.cols()
    }

    /// `mean + std * eps` with `eps` i.i.d. standard normal per dimension.
    pub fn randomize_visual_anchor<R: Rng + ?Sized>(&self, row: usize, rng: &mut R) -> Vec<f64> {
        self.visual_means
            .row(row)
            .iter()
            .zip(self.visual_stds.row(row))
            .map(|(&m, &s)| {
                let eps: f64 = StandardNormal.sample(rng);
                m + s * eps
            })
            .collect()
    }

    /// The original word vector with probability `1 - swap_prob`, otherwise
    /// one of the class's alternates chosen uniformly. Consumes the same
    /// amount of randomness whatever the outcome.
    pub fn randomize_word_anchor<R: Rng + ?Sized>(
        &self,
        row: usize,
        rng: &mut R,
        swap_prob: f64,
    ) -> Result<Vec<f64>> {
        if self.word_alternates.is_empty() {
            return Err(Error::Config(format!(
                "class `{}` has no word alternates to swap in",
                self.class_names[self.class_ids[row]]
            )));
        }
        let u: f64 = rng.random();
        let pick = rng.random_range(0..ALTERNATES_PER_CLASS);
        Ok(if u < swap_prob {
            self.word_alternates[row].row(pick).to_vec()
        } else {
            self.word_vectors.row(row).to_vec()
        })
    }

    /// One randomized visual anchor per class, stacked.
    pub fn randomized_visual<R: Rng + ?Sized>(&self, rng: &mut R) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..self.len())
            .map(|r| self.randomize_visual_anchor(r, rng))
            .collect();
        Matrix::from_rows(&rows).expect("rows share the visual dim")
    }

    /// One randomized word anchor per class, stacked.
    pub fn randomized_word<R: Rng + ?Sized>(&self, rng: &mut R, swap_prob: f64) -> Result<Matrix> {
        let rows = (0..self.len())
            .map(|r| self.randomize_word_anchor(r, rng, swap_prob))
            .collect::<Result<Vec<_>>>()?;
        Ok(Matrix::from_rows(&rows)?)
    }

    /// Writes `word.fvec`, `visual_mean.fvec`, `visual_std.fvec` and, when
    /// present, `word_alternates.fvec` into `dir`. Labels are dataset class ids.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let labeled = |m: &Matrix, labels: Vec<usize>, domain| {
            FeatureSet::single_domain(m.clone(), labels, domain, self.class_names.clone())
        };
        let ids = self.class_ids.clone();
        crate::dataio::fvec_write_kind(
            &labeled(&self.word_vectors, ids.clone(), Domain::Word)?,
            &dir.join("word.fvec"),
            "anchor-word",
        )?;
        crate::dataio::fvec_write_kind(
            &labeled(&self.visual_means, ids.clone(), Domain::Image)?,
            &dir.join("visual_mean.fvec"),
            "anchor-visual-mean",
        )?;
        crate::dataio::fvec_write_kind(
            &labeled(&self.visual_stds, ids.clone(), Domain::Image)?,
            &dir.join("visual_std.fvec"),
            "anchor-visual-std",
        )?;
        if !self.word_alternates.is_empty() {
            let mut data = Vec::new();
            let mut labels = Vec::new();
            for (alt, &id) in self.word_alternates.iter().zip(&ids) {
                data.extend_from_slice(alt.data());
                labels.extend(std::iter::repeat_n(id, ALTERNATES_PER_CLASS));
            }
            let m = Matrix::new(labels.len(), self.word_dim(), data)?;
            crate::dataio::fvec_write_kind(
                &labeled(&m, labels, Domain::Word)?,
                &dir.join("word_alternates.fvec"),
                "anchor-word-alternates",
            )?;
        }
        Ok(())
    }

    /// Inverse of [`AnchorSet::save`]. Values come back at `f32` precision.
    pub fn load(dir: &Path) -> Result<Self> {
        let word = read_fvec(&dir.join("word.fvec"))?;
        let mean = read_fvec(&dir.join("visual_mean.fvec"))?;
        let std = read_fvec(&dir.join("visual_std.fvec"))?;
        let ids = word.labels().to_vec();
        if mean.labels() != ids.as_slice() || std.labels() != ids.as_slice() {
            return Err(Error::format(
                "labels",
                "anchor files list different classes",
            ));
        }
        let alt_path = dir.join("word_alternates.fvec");
        let alternates = if alt_path.exists() {
            let alt = read_fvec(&alt_path)?;
            let expected: Vec<usize> = ids
                .iter()
                .flat_map(|&c| std::iter::repeat_n(c, ALTERNATES_PER_CLASS))
                .collect();
            if alt.labels() != expected.as_slice() {
                return Err(Error::format(
                    "labels",
                    format!("word alternates must hold exactly {ALTERNATES_PER_CLASS} rows per class"),
                ));
            }
            (0..ids.len())
                .map(|k| {
                    let idx: Vec<usize> =
                        (k * ALTERNATES_PER_CLASS..(k + 1) * ALTERNATES_PER_CLASS).collect();
                    alt.vectors().select_rows(&idx)
                })
                .collect()
        } else {
            Vec::new()
        };
        Self::new(
            ids,
            word.class_names().to_vec(),
            word.vectors().clone(),
            alternates,
            mean.vectors().clone(),
            std.vectors().clone(),
        )
    }
}
