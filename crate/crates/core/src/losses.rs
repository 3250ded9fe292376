//! Training objectives: in-batch InfoNCE, the anchored semantic loss against
//! per-class anchors, the anchored sample loss between sketches and images,
//! and their equal-weight sum.
//!
//! Every `*_on` function records onto a tape; the plain-named functions are
//! value-only conveniences over the same recording.

use std::fmt;

use diffmath::{Matrix, Real, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::encoder::Representations;
use crate::error::{Error, Result};
use crate::init::one_hot;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Base,
    SemWordSketch,
    SemWordImage,
    SemVisualSketch,
    SemVisualImage,
    SampleWord,
    SampleVisual,
}

impl LossTerm {
    pub const ALL: [LossTerm; 7] = [
        LossTerm::Base,
        LossTerm::SemWordSketch,
        LossTerm::SemWordImage,
        LossTerm::SemVisualSketch,
        LossTerm::SemVisualImage,
        LossTerm::SampleWord,
        LossTerm::SampleVisual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Base => "base",
            LossTerm::SemWordSketch => "sem_word_sketch",
            LossTerm::SemWordImage => "sem_word_image",
            LossTerm::SemVisualSketch => "sem_visual_sketch",
            LossTerm::SemVisualImage => "sem_visual_image",
            LossTerm::SampleWord => "sample_word",
            LossTerm::SampleVisual => "sample_visual",
        }
    }

    pub fn index(self) -> usize {
        LossTerm::ALL.iter().position(|&t| t == self).unwrap_or(0)
    }

    /// Whether the term needs anchors at all.
    pub fn uses_anchors(self) -> bool {
        self != LossTerm::Base
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub tau: f64,
    pub enabled: Vec<LossTerm>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            enabled: LossTerm::ALL.to_vec(),
        }
    }
}

impl LossConfig {
    pub fn with_terms(tau: f64, terms: &[LossTerm]) -> Self {
        Self {
            tau,
            enabled: terms.to_vec(),
        }
    }

    pub fn is_enabled(&self, term: LossTerm) -> bool {
        self.enabled.contains(&term)
    }

    pub fn needs_anchors(&self) -> bool {
        self.enabled.iter().any(|t| t.uses_anchors())
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if self.enabled.is_empty() {
            return Err(Error::Config("no loss term enabled".into()));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be > 0, got {tau}")))
    }
}

fn check_ids(ids: &[usize], classes: usize) -> Result<()> {
    match ids.iter().find(|&&c| c >= classes) {
        Some(bad) => Err(Error::Contract(format!(
            "class id {bad} out of range for {classes} anchors"
        ))),
        None => Ok(()),
    }
}

/// `-(1/N) sum(targets * log p)` with `p = row_softmax(logits)`.
fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, targets: Var) -> Result<Var> {
    let n = tape.shape(logits).0;
    let p = tape.row_softmax(logits)?;
    let logp = tape.log(p)?;
    let weighted = tape.mul(targets, logp)?;
    let total = tape.sum(weighted)?;
    Ok(tape.scale(total, -1.0 / n as f64)?)
}

/// Image-side-negative InfoNCE over paired rows.
pub fn info_nce_on<T: Real>(tape: &mut Tape<T>, r_skt: Var, r_img: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let n = tape.shape(r_skt).0;
    let sim = tape.matmul_t(r_skt, r_img)?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    let eye = tape.constant(Matrix::identity(n));
    cross_entropy(tape, logits, eye)
}

/// Cross-entropy of `softmax(r anchors^T / tau)` against
/// `softmax(anchor_sim[gamma_i])`. `one_hot` is the `N x C` class indicator.
pub fn anchored_semantic_on<T: Real>(
    tape: &mut Tape<T>,
    r: Var,
    one_hot: Var,
    anchors: Var,
    anchor_sim: Var,
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    let rows = tape.matmul(one_hot, anchor_sim)?;
    let t = tape.row_softmax(rows)?;
    let targets = tape.stop_gradient(t)?;
    let sim = tape.matmul_t(r, anchors)?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    cross_entropy(tape, logits, targets)
}

/// Cross-entropy of `softmax(r_skt r_img^T / tau)` against
/// `softmax_j(anchor_sim[gamma_i, gamma_j])`.
pub fn anchored_sample_on<T: Real>(
    tape: &mut Tape<T>,
    r_skt: Var,
    r_img: Var,
    one_hot: Var,
    anchor_sim: Var,
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    let rows = tape.matmul(one_hot, anchor_sim)?;
    let pair = tape.matmul_t(rows, one_hot)?;
    let t = tape.row_softmax(pair)?;
    let targets = tape.stop_gradient(t)?;
    let sim = tape.matmul_t(r_skt, r_img)?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    cross_entropy(tape, logits, targets)
}

/// Detached cosine similarity of unit-row anchors.
pub fn anchor_similarity_on<T: Real>(tape: &mut Tape<T>, anchors: Var) -> Result<Var> {
    let s = tape.matmul_t(anchors, anchors)?;
    Ok(tape.stop_gradient(s)?)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> f64 {
    tape.value(v).get(0, 0)
}

pub fn info_nce(r_skt: &Matrix, r_img: &Matrix, tau: f64) -> Result<f64> {
    let mut t = Tape::<f64>::new();
    let a = t.constant(r_skt.clone());
    let b = t.constant(r_img.clone());
    let out = info_nce_on(&mut t, a, b, tau)?;
    Ok(scalar_of(&t, out))
}

pub fn anchored_semantic_loss(
    r: &Matrix,
    class_ids: &[usize],
    anchors: &Matrix,
    anchor_sim: &Matrix,
    tau: f64,
) -> Result<f64> {
    check_ids(class_ids, anchors.rows())?;
    let mut t = Tape::<f64>::new();
    let rv = t.constant(r.clone());
    let oh = t.constant(one_hot(class_ids, anchors.rows()));
    let av = t.constant(anchors.clone());
    let sv = t.constant(anchor_sim.clone());
    let out = anchored_semantic_on(&mut t, rv, oh, av, sv, tau)?;
    Ok(scalar_of(&t, out))
}

pub fn anchored_sample_loss(
    r_skt: &Matrix,
    r_img: &Matrix,
    class_ids: &[usize],
    anchor_sim: &Matrix,
    tau: f64,
) -> Result<f64> {
    check_ids(class_ids, anchor_sim.rows())?;
    let mut t = Tape::<f64>::new();
    let a = t.constant(r_skt.clone());
    let b = t.constant(r_img.clone());
    let oh = t.constant(one_hot(class_ids, anchor_sim.rows()));
    let sv = t.constant(anchor_sim.clone());
    let out = anchored_sample_on(&mut t, a, b, oh, sv, tau)?;
    Ok(scalar_of(&t, out))
}

/// The three representation heads of one side of a batch.
#[derive(Clone, Copy, Debug)]
pub struct SideVars {
    pub r_word: Var,
    pub r_visual: Var,
    pub r_final: Var,
}

/// Adapted anchors on the tape with their detached similarity matrices.
#[derive(Clone, Copy, Debug)]
pub struct AnchorVars {
    pub word: Var,
    pub visual: Var,
    pub sim_word: Var,
    pub sim_visual: Var,
    /// `N x C` indicator of the batch classes.
    pub one_hot: Var,
}

#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub terms: Vec<(LossTerm, Var)>,
}

/// Records every enabled term and their sum with weight one.
pub fn total_loss_on<T: Real>(
    tape: &mut Tape<T>,
    sketch: &SideVars,
    image: &SideVars,
    anchors: Option<&AnchorVars>,
    config: &LossConfig,
) -> Result<LossVars> {
    config.validate()?;
    let tau = config.tau;
    let mut terms = Vec::new();
    for term in LossTerm::ALL {
        if !config.is_enabled(term) {
            continue;
        }
        let a = match (term.uses_anchors(), anchors) {
            (true, None) => {
                return Err(Error::Config(format!("loss term `{term}` needs anchors")));
            }
            (_, a) => a,
        };
        let v = match term {
            LossTerm::Base => info_nce_on(tape, sketch.r_final, image.r_final, tau)?,
            _ => {
                let a = a.expect("checked above");
                match term {
                    LossTerm::SemWordSketch => {
                        anchored_semantic_on(tape, sketch.r_word, a.one_hot, a.word, a.sim_word, tau)?
                    }
                    LossTerm::SemWordImage => {
                        anchored_semantic_on(tape, image.r_word, a.one_hot, a.word, a.sim_word, tau)?
                    }
                    LossTerm::SemVisualSketch => anchored_semantic_on(
                        tape,
                        sketch.r_visual,
                        a.one_hot,
                        a.visual,
                        a.sim_visual,
                        tau,
                    )?,
                    LossTerm::SemVisualImage => anchored_semantic_on(
                        tape,
                        image.r_visual,
                        a.one_hot,
                        a.visual,
                        a.sim_visual,
                        tau,
                    )?,
                    LossTerm::SampleWord => {
                        anchored_sample_on(tape, sketch.r_word, image.r_word, a.one_hot, a.sim_word, tau)?
                    }
                    LossTerm::SampleVisual => anchored_sample_on(
                        tape,
                        sketch.r_visual,
                        image.r_visual,
                        a.one_hot,
                        a.sim_visual,
                        tau,
                    )?,
                    LossTerm::Base => unreachable!(),
                }
            }
        };
        terms.push((term, v));
    }
    let mut total = terms[0].1;
    for &(_, v) in &terms[1..] {
        total = tape.add(total, v)?;
    }
    Ok(LossVars { total, terms })
}

/// Loss values for one batch; disabled terms read as exactly 0.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: [f64; 7],
}

impl LossBreakdown {
    pub fn from_tape<T: Real>(tape: &Tape<T>, vars: &LossVars) -> Self {
        let mut terms = [0.0; 7];
        for &(term, v) in &vars.terms {
            terms[term.index()] = tape.value(v).get(0, 0).as_f64();
        }
        Self {
            total: tape.value(vars.total).get(0, 0).as_f64(),
            terms,
        }
    }

    pub fn term(&self, term: LossTerm) -> f64 {
        self.terms[term.index()]
    }
}

/// Value-only total over already-encoded sketches and images. `anchors` holds
/// the adapted (word, visual) anchors with unit rows.
pub fn total_loss(
    sketch: &Representations,
    image: &Representations,
    class_ids: &[usize],
    anchors: Option<(&Matrix, &Matrix)>,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    let mut t = Tape::<f64>::new();
    let side = |t: &mut Tape<f64>, r: &Representations| SideVars {
        r_word: t.constant(r.word.clone()),
        r_visual: t.constant(r.visual.clone()),
        r_final: t.constant(r.fin.clone()),
    };
    let s = side(&mut t, sketch);
    let i = side(&mut t, image);
    let a = match anchors {
        Some((w, v)) => {
            check_ids(class_ids, w.rows())?;
            let word = t.constant(w.clone());
            let visual = t.constant(v.clone());
            Some(AnchorVars {
                word,
                visual,
                sim_word: anchor_similarity_on(&mut t, word)?,
                sim_visual: anchor_similarity_on(&mut t, visual)?,
                one_hot: t.constant(one_hot(class_ids, w.rows())),
            })
        }
        None => None,
    };
    let vars = total_loss_on(&mut t, &s, &i, a.as_ref(), config)?;
    Ok(LossBreakdown::from_tape(&t, &vars))
}
