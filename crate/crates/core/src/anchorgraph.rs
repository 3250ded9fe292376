//! The unified word+visual anchor graph and the GCN producing adapted anchors.
//!
//! Node rows `0..C` hold word anchors and rows `C..2C` visual anchors, both
//! already projected to the common dimension. The adjacency is built from the
//! cosine similarities of those inputs and is treated as a constant: no
//! gradient flows through the edge weights.

use diffmath::{Matrix, Real, Tape, Var};
use rand::Rng;

use crate::anchors::build_similarity_matrix;
use crate::error::{Error, Result};
use crate::init::{block_selector, glorot};

#[derive(Clone, Debug, PartialEq)]
pub struct UnifiedGraph {
    /// `2C x D`.
    pub nodes: Matrix,
    /// `2C x 2C`, row-stochastic.
    pub adjacency: Matrix,
}

impl UnifiedGraph {
    pub fn classes(&self) -> usize {
        self.nodes.rows() / 2
    }
}

/// Row-softmaxed adjacency over the `2C` anchor nodes. Within-modality blocks
/// carry cosine similarities, `(i, C+i)` and `(C+i, i)` carry 1 and every other
/// cross entry is excluded.
pub fn unified_adjacency(word: &Matrix, visual: &Matrix) -> Result<Matrix> {
    if word.shape() != visual.shape() {
        return Err(Error::Contract(format!(
            "word anchors {:?} and visual anchors {:?} differ in shape",
            word.shape(),
            visual.shape()
        )));
    }
    let c = word.rows();
    let sw = build_similarity_matrix(word)?;
    let sv = build_similarity_matrix(visual)?;
    let mut logits = Matrix::filled(2 * c, 2 * c, f64::NEG_INFINITY);
    for i in 0..c {
        for j in 0..c {
            logits.set(i, j, sw.get(i, j));
            logits.set(c + i, c + j, sv.get(i, j));
        }
        logits.set(i, c + i, 1.0);
        logits.set(c + i, i, 1.0);
    }
    for r in 0..2 * c {
        let row = logits.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        row.iter_mut().for_each(|x| *x /= total);
    }
    Ok(logits)
}

pub fn build_unified_graph(word: &Matrix, visual: &Matrix) -> Result<UnifiedGraph> {
    let adjacency = unified_adjacency(word, visual)?;
    let c = word.rows();
    let mut data = Vec::with_capacity(2 * word.len());
    data.extend_from_slice(word.data());
    data.extend_from_slice(visual.data());
    Ok(UnifiedGraph {
        nodes: Matrix::new(2 * c, word.cols(), data)?,
        adjacency,
    })
}

/// Per-layer `D x D` weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnParams {
    pub layers: Vec<Matrix>,
}

impl GcnParams {
    pub fn new(layers: Vec<Matrix>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::Config("a GCN needs at least one layer".into()));
        };
        let d = first.rows();
        if layers.iter().any(|w| w.shape() != (d, d)) {
            return Err(Error::Contract(format!("every GCN layer must be {d}x{d}")));
        }
        if layers.iter().any(|w| !w.is_finite()) {
            return Err(Error::Contract("GCN weights must be finite".into()));
        }
        Ok(Self { layers })
    }

    pub fn glorot<R: Rng + ?Sized>(layers: usize, dim: usize, rng: &mut R) -> Result<Self> {
        Self::new((0..layers).map(|_| glorot(dim, dim, rng)).collect())
    }

    pub fn dim(&self) -> usize {
        self.layers[0].rows()
    }
}

/// Records `L` layers of `A V W` (ReLU between layers, none after the last)
/// followed by row normalization.
pub fn gcn_on_tape<T: Real>(
    tape: &mut Tape<T>,
    adjacency: Var,
    nodes: Var,
    layers: &[Var],
) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::Config("a GCN needs at least one layer".into()));
    }
    let mut v = nodes;
    for (l, &w) in layers.iter().enumerate() {
        let av = tape.matmul(adjacency, v)?;
        v = tape.matmul(av, w)?;
        if l + 1 < layers.len() {
            v = tape.relu(v)?;
        }
    }
    Ok(tape.row_l2_normalize(v)?)
}

/// Adapted word and visual anchors, each `C x D` with unit rows.
pub fn gcn_forward(graph: &UnifiedGraph, params: &GcnParams) -> Result<(Matrix, Matrix)> {
    if graph.nodes.cols() != params.dim() {
        return Err(Error::Contract(format!(
            "graph nodes have dim {}, GCN expects {}",
            graph.nodes.cols(),
            params.dim()
        )));
    }
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(graph.adjacency.clone());
    let v = tape.constant(graph.nodes.clone());
    let ws: Vec<Var> = params.layers.iter().map(|w| tape.constant(w.clone())).collect();
    let out = gcn_on_tape(&mut tape, a, v, &ws)?;
    let out = tape.value(out);
    if let Some(r) = (0..out.rows()).find(|&r| out.row(r).iter().all(|&x| x == 0.0)) {
        return Err(Error::DegenerateAnchor(format!(
            "GCN output row {r} is zero before normalization"
        )));
    }
    let c = graph.classes();
    let word = out.select_rows(&(0..c).collect::<Vec<_>>());
    let visual = out.select_rows(&(c..2 * c).collect::<Vec<_>>());
    Ok((word, visual))
}

/// Tape handles of the adapted anchors.
#[derive(Clone, Copy, Debug)]
pub struct AdaptedAnchors {
    pub word: Var,
    pub visual: Var,
}

/// Projects raw anchors to the common dimension and, when `gcn` is given,
/// runs them through the unified graph. Without a GCN the adapted anchors
/// are the normalized projections.
pub fn adapt_anchors<T: Real>(
    tape: &mut Tape<T>,
    word_in: Var,
    visual_in: Var,
    proj_word: Var,
    proj_visual: Var,
    gcn: Option<&[Var]>,
) -> Result<AdaptedAnchors> {
    let pw = tape.matmul(word_in, proj_word)?;
    let pv = tape.matmul(visual_in, proj_visual)?;
    let Some(layers) = gcn else {
        return Ok(AdaptedAnchors {
            word: tape.row_l2_normalize(pw)?,
            visual: tape.row_l2_normalize(pv)?,
        });
    };
    let c = tape.shape(pw).0;
    let adjacency = unified_adjacency(&tape.value(pw).cast(), &tape.value(pv).cast())?;
    let a = tape.constant(adjacency.cast());

    // stack [pw; pv] with constant placement matrices
    let top = tape.constant(block_selector(c, 2 * c, 0).transpose().cast());
    let bottom = tape.constant(block_selector(c, 2 * c, c).transpose().cast());
    let vw = tape.matmul(top, pw)?;
    let vv = tape.matmul(bottom, pv)?;
    let nodes = tape.add(vw, vv)?;

    let out = gcn_on_tape(tape, a, nodes, layers)?;
    let take_word = tape.constant(block_selector(c, 2 * c, 0).cast());
    let take_visual = tape.constant(block_selector(c, 2 * c, c).cast());
    Ok(AdaptedAnchors {
        word: tape.matmul(take_word, out)?,
        visual: tape.matmul(take_visual, out)?,
    })
}
