//! Cosine ranking, average precision, retrieval reports, generalized
//! galleries and anchor-distance image selection.

use std::fmt::Write as _;
use std::path::Path;

use diffmath::Matrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::dataio::FeatureSet;
use crate::error::{Error, Result};

/// Where a gallery item came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GallerySource {
    UnseenTest,
    SeenInjected,
}

/// Unit-norm gallery rows with their labels and sources.
#[derive(Clone, Debug, PartialEq)]
pub struct Gallery {
    features: Matrix,
    labels: Vec<usize>,
    sources: Vec<GallerySource>,
}

impl Gallery {
    /// Rows are L2-normalized on construction.
    pub fn new(features: Matrix, labels: Vec<usize>, sources: Vec<GallerySource>) -> Result<Self> {
        if labels.len() != features.rows() || sources.len() != features.rows() {
            return Err(Error::Contract(format!(
                "gallery of {} rows has {} labels and {} source tags",
                features.rows(),
                labels.len(),
                sources.len()
            )));
        }
        Ok(Self {
            features: features.normalize_rows(),
            labels,
            sources,
        })
    }

    /// Every row of `set`, tagged as unseen-test.
    pub fn from_features(set: &FeatureSet) -> Self {
        Self {
            features: set.vectors().normalize_rows(),
            labels: set.labels().to_vec(),
            sources: vec![GallerySource::UnseenTest; set.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sources(&self) -> &[GallerySource] {
        &self.sources
    }

    pub fn count_source(&self, source: GallerySource) -> usize {
        self.sources.iter().filter(|&&s| s == source).count()
    }
}

fn order_by_score(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // descending score, ascending index on ties
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Gallery indices by descending cosine similarity to `query`.
pub fn rank_gallery(query: &[f64], gallery: &Gallery) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(Error::Contract("cannot rank an empty gallery".into()));
    }
    if query.len() != gallery.dim() {
        return Err(Error::Contract(format!(
            "query dim {} differs from gallery dim {}",
            query.len(),
            gallery.dim()
        )));
    }
    let q = Matrix::new(1, query.len(), query.to_vec())?.normalize_rows();
    let scores = gallery.features.matmul(&q.transpose())?;
    Ok(order_by_score(scores.data()))
}

/// Average precision of a ranked relevance list. With `truncate_at = Some(k)`
/// only the first `k` ranks count and the sum is divided by `min(R, k)`.
pub fn average_precision(relevance: &[bool], truncate_at: Option<usize>) -> f64 {
    let total: usize = relevance.iter().filter(|&&r| r).count();
    let depth = truncate_at.map_or(relevance.len(), |k| k.min(relevance.len()));
    let denom = truncate_at.map_or(total, |k| total.min(k));
    if denom == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &rel) in relevance[..depth].iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / denom as f64
}

/// Truncation depth of `map_at_200`.
pub const MAP_DEPTH: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: usize,
    pub label: usize,
    pub ap: f64,
    pub ap_at_200: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub map: f64,
    pub map_at_200: f64,
    /// `(K, P@K)` in the requested order.
    pub p_at_k: Vec<(usize, f64)>,
    pub per_query: Vec<QueryResult>,
}

impl RetrievalReport {
    pub fn p_at(&self, k: usize) -> Option<f64> {
        self.p_at_k.iter().find(|(kk, _)| *kk == k).map(|&(_, p)| p)
    }

    /// Columns `metric,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "mAP,{}", self.map);
        let _ = writeln!(s, "mAP@{MAP_DEPTH},{}", self.map_at_200);
        for (k, p) in &self.p_at_k {
            let _ = writeln!(s, "P@{k},{p}");
        }
        let _ = writeln!(s, "queries,{}", self.per_query.len());
        s
    }

    /// Columns `query,label,ap,ap_at_200`.
    pub fn per_query_csv(&self) -> String {
        let mut s = String::from("query,label,ap,ap_at_200\n");
        for q in &self.per_query {
            let _ = writeln!(s, "{},{},{},{}", q.query, q.label, q.ap, q.ap_at_200);
        }
        s
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>8}", "metric", "value");
        let _ = writeln!(s, "{:<10} {:>8.4}", "mAP", self.map);
        let _ = writeln!(s, "{:<10} {:>8.4}", format!("mAP@{MAP_DEPTH}"), self.map_at_200);
        for (k, p) in &self.p_at_k {
            let _ = writeln!(s, "{:<10} {:>8.4}", format!("P@{k}"), p);
        }
        let _ = writeln!(s, "{:<10} {:>8}", "queries", self.per_query.len());
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_per_query_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.per_query_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Ranks the gallery for every query and aggregates AP and P@K. A gallery
/// item is relevant when it shares the query's label.
pub fn evaluate(queries: &FeatureSet, gallery: &Gallery, ks: &[usize]) -> Result<RetrievalReport> {
    if gallery.is_empty() {
        return Err(Error::Contract("cannot evaluate against an empty gallery".into()));
    }
    if queries.dim() != gallery.dim() {
        return Err(Error::Contract(format!(
            "query dim {} differs from gallery dim {}",
            queries.dim(),
            gallery.dim()
        )));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0) {
        return Err(Error::Config(format!("P@K needs K >= 1, got {k}")));
    }
    let q = queries.vectors().normalize_rows();
    let scores = q.matmul(&gallery.features.transpose())?;
    let mut per_query = Vec::with_capacity(queries.len());
    let mut p_sum = vec![0.0; ks.len()];
    let mut relevance = vec![false; gallery.len()];
    for i in 0..queries.len() {
        let label = queries.labels()[i];
        let order = order_by_score(scores.row(i));
        for (slot, &g) in relevance.iter_mut().zip(&order) {
            *slot = gallery.labels[g] == label;
        }
        for (acc, &k) in p_sum.iter_mut().zip(ks) {
            let hits = relevance.iter().take(k).filter(|&&r| r).count();
            *acc += hits as f64 / k as f64;
        }
        per_query.push(QueryResult {
            query: i,
            label,
            ap: average_precision(&relevance, None),
            ap_at_200: average_precision(&relevance, Some(MAP_DEPTH)),
        });
    }
    let n = queries.len().max(1) as f64;
    Ok(RetrievalReport {
        map: per_query.iter().map(|q| q.ap).sum::<f64>() / n,
        map_at_200: per_query.iter().map(|q| q.ap_at_200).sum::<f64>() / n,
        p_at_k: ks.iter().zip(&p_sum).map(|(&k, &s)| (k, s / n)).collect(),
        per_query,
    })
}

/// Test gallery plus `floor(fraction * count)` images of every class in
/// `train_images`, drawn uniformly per class.
pub fn make_generalized_gallery<R: Rng + ?Sized>(
    train_images: &FeatureSet,
    test_images: &FeatureSet,
    fraction: f64,
    rng: &mut R,
) -> Result<Gallery> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "gallery fraction must lie in (0, 1), got {fraction}"
        )));
    }
    if train_images.dim() != test_images.dim() {
        return Err(Error::Contract(format!(
            "train images have dim {}, test images {}",
            train_images.dim(),
            test_images.dim()
        )));
    }
    let mut rows: Vec<Vec<f64>> = test_images.vectors().row_iter().map(<[f64]>::to_vec).collect();
    let mut labels = test_images.labels().to_vec();
    let mut sources = vec![GallerySource::UnseenTest; test_images.len()];
    for (class, members) in train_images.indices_by_class().into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let take = (fraction * members.len() as f64).floor() as usize;
        if take == 0 {
            log::warn!(
                "class `{}` has {} images; {fraction} of them rounds down to none injected",
                train_images.class_names()[class],
                members.len()
            );
            continue;
        }
        let mut chosen = members.clone();
        chosen.shuffle(rng);
        chosen.truncate(take);
        chosen.sort_unstable();
        for i in chosen {
            rows.push(train_images.vector(i).to_vec());
            labels.push(class);
            sources.push(GallerySource::SeenInjected);
        }
    }
    let features = if rows.is_empty() {
        Matrix::zeros(0, test_images.dim())
    } else {
        Matrix::from_rows(&rows)?
    };
    Gallery::new(features, labels, sources)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    Closest,
    Farthest,
}

impl SelectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionMode::Closest => "closest",
            SelectionMode::Farthest => "farthest",
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Keeps, per class, the `n` images with the smallest (or largest) cosine
/// distance to that class's visual mean. Classes with fewer than `n` images
/// keep all of them. The result preserves the original item order.
pub fn select_images_by_anchor_distance(
    images: &FeatureSet,
    anchors: &AnchorSet,
    n: usize,
    mode: SelectionMode,
) -> Result<FeatureSet> {
    let mut keep = Vec::new();
    for (class, members) in images.indices_by_class().into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let row = anchors.row_of(class).ok_or_else(|| {
            Error::Contract(format!(
                "class `{}` has images but no visual anchor",
                images.class_names()[class]
            ))
        })?;
        if members.len() < n {
            log::warn!(
                "class `{}` has only {} images, keeping all for N={n}",
                images.class_names()[class],
                members.len()
            );
        }
        let mean = anchors.visual_means().row(row);
        let dist: Vec<f64> = members
            .iter()
            .map(|&i| 1.0 - cosine(images.vector(i), mean))
            .collect();
        let mut order: Vec<usize> = (0..members.len()).collect();
        order.sort_by(|&a, &b| {
            let c = dist[a].total_cmp(&dist[b]);
            let c = if mode == SelectionMode::Farthest { c.reverse() } else { c };
            c.then(a.cmp(&b))
        });
        keep.extend(order.into_iter().take(n).map(|k| members[k]));
    }
    keep.sort_unstable();
    Ok(images.subset(&keep))
}
