//! Optimization loop: class-paired batches, Adam with warmup and cosine
//! decay, backbone gradient scaling, ablation flags and metric curves.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use diffmath::{Matrix, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchorgraph::{adapt_anchors, GcnParams};
use crate::anchors::AnchorSet;
use crate::dataio::{assert_disjoint, read_container, write_container, FeatureSet, FvecManifest, TensorEntry};
use crate::encoder::{encode_features, encode_on_tape, EncoderDims, EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::init::{block_selector, glorot, one_hot, stream_rng, Stream};
use crate::losses::{anchor_similarity_on, total_loss_on, AnchorVars, LossBreakdown, LossConfig, LossTerm, SideVars};
use crate::retrieval::{evaluate, Gallery};

/// Rows of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    Base,
    A1,
    A2,
    B1,
    B2,
    Ours,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Base,
        Ablation::A1,
        Ablation::A2,
        Ablation::B1,
        Ablation::B2,
        Ablation::Ours,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Base => "Base",
            Ablation::A1 => "A1",
            Ablation::A2 => "A2",
            Ablation::B1 => "B1",
            Ablation::B2 => "B2",
            Ablation::Ours => "Ours",
        }
    }

    pub fn terms(self) -> Vec<LossTerm> {
        use LossTerm::*;
        match self {
            Ablation::Base => vec![Base],
            Ablation::A1 => vec![Base, SemVisualSketch, SemVisualImage, SampleVisual],
            _ => LossTerm::ALL.to_vec(),
        }
    }

    pub fn visual_anchors(self) -> bool {
        self != Ablation::Base
    }

    pub fn word_anchors(self) -> bool {
        !matches!(self, Ablation::Base | Ablation::A1)
    }

    pub fn randomized_inputs(self) -> bool {
        matches!(self, Ablation::B1 | Ablation::Ours)
    }

    pub fn gcn(self) -> bool {
        matches!(self, Ablation::B2 | Ablation::Ours)
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}` (Base, A1, A2, B1, B2, Ours)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_iters: usize,
    pub backbone_grad_scale: f64,
    pub tau: f64,
    pub seed: u64,
    pub ablation: Ablation,
    /// Overrides the loss terms implied by `ablation`.
    pub loss_terms: Option<Vec<LossTerm>>,
    pub eval_every: usize,
    pub swap_prob: f64,
    pub gcn_layers: usize,
    pub encoder: EncoderDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            iterations: 1500,
            base_lr: 1e-3,
            min_lr: 2e-4,
            warmup_iters: 150,
            backbone_grad_scale: 0.1,
            tau: 0.1,
            seed: 0,
            ablation: Ablation::Ours,
            loss_terms: None,
            eval_every: 50,
            swap_prob: 0.5,
            gcn_layers: 4,
            encoder: EncoderDims::default(),
        }
    }
}

impl TrainConfig {
    /// The reference schedule: 5e-6 warmed up over 150 of 1500 iterations,
    /// decayed to 1e-6.
    pub fn reference_schedule() -> Self {
        Self {
            base_lr: 5e-6,
            min_lr: 1e-6,
            ..Self::default()
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig::with_terms(
            self.tau,
            &self.loss_terms.clone().unwrap_or_else(|| self.ablation.terms()),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.iterations > 0 && self.warmup_iters >= self.iterations {
            return bad(format!(
                "warmup_iters ({}) must be below iterations ({})",
                self.warmup_iters, self.iterations
            ));
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.base_lr && self.base_lr.is_finite()) {
            return bad(format!(
                "need 0 < min_lr <= base_lr, got {} and {}",
                self.min_lr, self.base_lr
            ));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.swap_prob) {
            return bad(format!("swap_prob must lie in [0, 1], got {}", self.swap_prob));
        }
        if self.gcn_layers == 0 {
            return bad("gcn_layers must be >= 1".into());
        }
        if !self.backbone_grad_scale.is_finite() {
            return bad("backbone_grad_scale must be finite".into());
        }
        self.loss_config().validate()
    }
}

/// Linear warmup from `base_lr / warmup`, then cosine decay to `min_lr`.
pub fn lr_at(iter: usize, config: &TrainConfig) -> f64 {
    let (base, min) = (config.base_lr, config.min_lr);
    let warmup = config.warmup_iters;
    if iter < warmup {
        return base * ((iter + 1) as f64 / warmup as f64);
    }
    let span = config.iterations.saturating_sub(warmup).max(1) as f64;
    let progress = ((iter - warmup) as f64 / span).min(1.0);
    // written as a drop from `base` so the boundary is exact and rounding
    // cannot push a step above its predecessor
    base - 0.5 * (base - min) * (1.0 - (std::f64::consts::PI * progress).cos())
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(params: &mut [&mut Matrix], grads: &[Matrix], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[k].shape() {
            return Err(Error::Contract(format!(
                "parameter {k} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (((theta, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *theta -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Class-paired batch: position `i` holds a sketch and an image of class
/// `classes[class_rows[i]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub sketch_idx: Vec<usize>,
    pub image_idx: Vec<usize>,
    /// Positions into the trainer's class list (the anchor rows).
    pub class_rows: Vec<usize>,
}

/// Per-class item lists for uniform class-paired sampling.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    sketches: Vec<Vec<usize>>,
    images: Vec<Vec<usize>>,
}

impl BatchSampler {
    pub fn new(sketches: &FeatureSet, images: &FeatureSet, classes: &[usize]) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Data("no training classes".into()));
        }
        let by_s = sketches.indices_by_class();
        let by_i = images.indices_by_class();
        let mut s = Vec::with_capacity(classes.len());
        let mut im = Vec::with_capacity(classes.len());
        for &c in classes {
            let name = || sketches.class_names().get(c).cloned().unwrap_or_else(|| c.to_string());
            let cs = by_s.get(c).cloned().unwrap_or_default();
            let ci = by_i.get(c).cloned().unwrap_or_default();
            if cs.is_empty() {
                return Err(Error::Data(format!("class `{}` has no sketches", name())));
            }
            if ci.is_empty() {
                return Err(Error::Data(format!("class `{}` has no images", name())));
            }
            s.push(cs);
            im.push(ci);
        }
        Ok(Self {
            sketches: s,
            images: im,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Batch {
        let mut b = Batch {
            sketch_idx: Vec::with_capacity(batch_size),
            image_idx: Vec::with_capacity(batch_size),
            class_rows: Vec::with_capacity(batch_size),
        };
        for _ in 0..batch_size {
            let k = rng.random_range(0..self.sketches.len());
            let s = &self.sketches[k];
            let i = &self.images[k];
            b.class_rows.push(k);
            b.sketch_idx.push(s[rng.random_range(0..s.len())]);
            b.image_idx.push(i[rng.random_range(0..i.len())]);
        }
        b
    }
}

pub fn sample_batch<R: Rng + ?Sized>(
    sketches: &FeatureSet,
    images: &FeatureSet,
    classes: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Result<Batch> {
    Ok(BatchSampler::new(sketches, images, classes)?.sample(batch_size, rng))
}

/// Trainable projections of both anchor modalities and the GCN weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorParams {
    pub proj_word: Matrix,
    pub proj_visual: Matrix,
    pub gcn: GcnParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    /// Absent when training without anchors.
    pub anchor: Option<AnchorParams>,
}

impl ModelParams {
    /// Encoder and anchor weights come from separate streams of `seed`, so
    /// the encoder starts identical whatever the ablation.
    pub fn init(config: &TrainConfig, anchor_dims: Option<(usize, usize)>) -> Result<Self> {
        let encoder = EncoderParams::init(config.encoder, &mut stream_rng(config.seed, Stream::EncoderInit));
        let anchor = match anchor_dims {
            Some((word_dim, visual_dim)) => {
                let mut rng = stream_rng(config.seed, Stream::AnchorInit);
                let d = config.encoder.proj_dim;
                Some(AnchorParams {
                    proj_word: glorot(word_dim, d, &mut rng),
                    proj_visual: glorot(visual_dim, d, &mut rng),
                    gcn: GcnParams::glorot(config.gcn_layers, d, &mut rng)?,
                })
            }
            None => None,
        };
        Ok(Self { encoder, anchor })
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names: Vec<String> = EncoderParams::tensor_names().iter().map(|s| s.to_string()).collect();
        if let Some(a) = &self.anchor {
            names.push("anchor.proj_word".into());
            names.push("anchor.proj_visual".into());
            names.extend((0..a.gcn.layers.len()).map(|l| format!("gcn.{l}")));
        }
        names
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = self.encoder.tensors();
        if let Some(a) = &self.anchor {
            out.push(&a.proj_word);
            out.push(&a.proj_visual);
            out.extend(a.gcn.layers.iter());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.encoder.tensors_mut();
        if let Some(a) = &mut self.anchor {
            out.push(&mut a.proj_word);
            out.push(&mut a.proj_visual);
            out.extend(a.gcn.layers.iter_mut());
        }
        out
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors().iter().map(|m| m.shape()).collect()
    }

    /// Writes every tensor into one FVEC container of kind `checkpoint`.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let tensors = self.tensors();
        let values: Vec<f32> = tensors.iter().flat_map(|m| m.data().iter().map(|&x| x as f32)).collect();
        let mut manifest = FvecManifest::new(1, values.len());
        manifest.kind = Some("checkpoint".into());
        manifest.tensors = self
            .tensor_names()
            .into_iter()
            .zip(&tensors)
            .map(|(name, m)| TensorEntry {
                name,
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect();
        write_container(path, manifest, &values)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let (manifest, values) = read_container(path)?;
        if manifest.kind.as_deref() != Some("checkpoint") {
            return Err(Error::format("kind", "container is not a checkpoint"));
        }
        let mut offset = 0;
        let mut by_name = std::collections::HashMap::new();
        for t in &manifest.tensors {
            let n = t.rows * t.cols;
            let data = values[offset..offset + n].iter().map(|&x| f64::from(x)).collect();
            by_name.insert(t.name.clone(), Matrix::new(t.rows, t.cols, data)?);
            offset += n;
        }
        let mut take = |name: &str| {
            by_name
                .remove(name)
                .ok_or_else(|| Error::format("tensors", format!("checkpoint lacks `{name}`")))
        };
        let names = EncoderParams::tensor_names();
        let enc: Vec<Matrix> = names.iter().map(|n| take(n)).collect::<Result<_>>()?;
        let dims = EncoderDims {
            input_dim: enc[0].rows(),
            hidden_dim: enc[0].cols(),
            token_dim: enc[2].cols(),
            proj_dim: enc[6].cols(),
            attn_dim: enc[14].cols(),
        };
        let mut encoder = EncoderParams::init(dims, &mut stream_rng(0, Stream::EncoderInit));
        for (slot, m) in encoder.tensors_mut().into_iter().zip(enc) {
            if slot.shape() != m.shape() {
                return Err(Error::format("tensors", "encoder tensor shapes are inconsistent"));
            }
            *slot = m;
        }
        let anchor = match take("anchor.proj_word") {
            Ok(proj_word) => {
                let proj_visual = take("anchor.proj_visual")?;
                let mut layers = Vec::new();
                while let Ok(w) = take(&format!("gcn.{}", layers.len())) {
                    layers.push(w);
                }
                Some(AnchorParams {
                    proj_word,
                    proj_visual,
                    gcn: GcnParams::new(layers)?,
                })
            }
            Err(_) => None,
        };
        Ok(Self { encoder, anchor })
    }
}

/// Held-out-class data ranked during training.
#[derive(Clone, Debug)]
pub struct Validation {
    pub queries: FeatureSet,
    pub gallery: FeatureSet,
}

impl Validation {
    pub fn map(&self, params: &EncoderParams) -> Result<f64> {
        let q = encode_features(params, &self.queries)?;
        let g = encode_features(params, &self.gallery)?;
        Ok(evaluate(&q, &Gallery::from_features(&g), &[])?.map)
    }
}

#[derive(Clone, Debug)]
pub struct TrainData {
    /// Seen-class sketches.
    pub sketches: FeatureSet,
    /// Seen-class images.
    pub images: FeatureSet,
    /// Anchors of the seen classes. Required unless only the base term runs.
    pub anchors: Option<AnchorSet>,
    pub validation: Option<Validation>,
}

/// One optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub iteration: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Validation mAP after this step's update, on evaluation steps.
    pub val_map: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub curve: Vec<CurveRow>,
    /// `(updates completed, validation mAP)`, starting with the untrained model.
    pub checkpoints: Vec<(usize, f64)>,
}

impl TrainOutcome {
    pub fn initial_map(&self) -> Option<f64> {
        self.checkpoints.first().map(|c| c.1)
    }

    pub fn final_map(&self) -> Option<f64> {
        self.checkpoints.last().map(|c| c.1)
    }

    pub fn best_map(&self) -> Option<f64> {
        self.checkpoints.iter().map(|c| c.1).reduce(f64::max)
    }

    /// Columns `iteration,lr,total_loss,<one per term>,val_mAP`.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("iteration,lr,total_loss");
        for t in LossTerm::ALL {
            s.push(',');
            s.push_str(t.name());
        }
        s.push_str(",val_mAP\n");
        for r in &self.curve {
            let _ = write!(s, "{},{},{}", r.iteration, r.lr, r.loss.total);
            for v in r.loss.terms {
                let _ = write!(s, ",{v}");
            }
            match r.val_map {
                Some(m) => {
                    let _ = writeln!(s, ",{m}");
                }
                None => s.push_str(",\n"),
            }
        }
        s
    }

    /// Long format, columns `iteration,term,value`, enabled terms only.
    pub fn loss_log_csv(&self, terms: &[LossTerm]) -> String {
        let mut s = String::from("iteration,term,value\n");
        for r in &self.curve {
            for &t in LossTerm::ALL.iter().filter(|t| terms.contains(t)) {
                let _ = writeln!(s, "{},{},{}", r.iteration, t.name(), r.loss.term(t));
            }
        }
        s
    }
}

/// Gradients of one batch for the trained tensors, in [`ModelParams::tensors`] order.
struct StepResult {
    loss: LossBreakdown,
    grads: Vec<Matrix>,
}

struct Step<'a> {
    data: &'a TrainData,
    config: &'a TrainConfig,
    loss_config: LossConfig,
    /// Per tensor of [`ModelParams::tensors`]: whether this row trains it.
    trained: Vec<bool>,
}

impl<'a> Step<'a> {
    fn new(data: &'a TrainData, config: &'a TrainConfig, params: &ModelParams) -> Self {
        let loss_config = config.loss_config();
        let anchored = loss_config.needs_anchors();
        let mut trained = vec![true; EncoderParams::tensor_names().len()];
        if let Some(a) = &params.anchor {
            trained.extend([anchored, anchored]);
            trained.extend(a.gcn.layers.iter().map(|_| anchored && config.ablation.gcn()));
        }
        Self {
            data,
            config,
            loss_config,
            trained,
        }
    }

    fn trained_names(&self, params: &ModelParams) -> Vec<String> {
        let names = params.tensor_names().into_iter().zip(&self.trained);
        names.filter(|(_, &on)| on).map(|(n, _)| n).collect()
    }

    fn trained_tensors<'p>(&self, params: &'p mut ModelParams) -> Vec<&'p mut Matrix> {
        let tensors = params.tensors_mut().into_iter().zip(&self.trained);
        tensors.filter(|(_, &on)| on).map(|(m, _)| m).collect()
    }
}

impl Step<'_> {
    fn run<R: Rng + ?Sized>(&self, params: &ModelParams, batch: &Batch, noise: &mut R) -> Result<StepResult> {
        let mut tape = Tape::<f64>::new();
        let all_vars: Vec<Option<Var>> = params
            .tensors()
            .into_iter()
            .zip(&self.trained)
            .map(|(m, &on)| on.then(|| tape.input(m.clone())))
            .collect();
        let enc_count = EncoderParams::tensor_names().len();
        let enc_vars: Vec<Var> = all_vars[..enc_count].iter().flatten().copied().collect();
        let enc = EncoderVars::from_slice(&enc_vars);

        let n = batch.class_rows.len();
        let mut idx_rows = self.data.sketches.vectors().select_rows(&batch.sketch_idx).into_data();
        idx_rows.extend(self.data.images.vectors().select_rows(&batch.image_idx).into_data());
        let x = tape.constant(Matrix::new(2 * n, self.data.sketches.dim(), idx_rows)?);
        let out = encode_on_tape(&mut tape, x, &enc, self.config.backbone_grad_scale)?;

        let take_s = tape.constant(block_selector(n, 2 * n, 0));
        let take_i = tape.constant(block_selector(n, 2 * n, n));
        let mut side = |sel: Var| -> Result<SideVars> {
            Ok(SideVars {
                r_word: tape.matmul(sel, out.r_word)?,
                r_visual: tape.matmul(sel, out.r_visual)?,
                r_final: tape.matmul(sel, out.r_final)?,
            })
        };
        let sketch = side(take_s)?;
        let image = side(take_i)?;

        let anchor_vars = if self.loss_config.needs_anchors() {
            let anchors = self.data.anchors.as_ref().ok_or_else(|| {
                Error::Config("the enabled loss terms need anchors".into())
            })?;
            let (words, visual) = if self.config.ablation.randomized_inputs() {
                let v = anchors.randomized_visual(noise);
                (anchors.randomized_word(noise, self.config.swap_prob)?, v)
            } else {
                (anchors.word_vectors().clone(), anchors.visual_means().clone())
            };
            let wi = tape.constant(words);
            let vi = tape.constant(visual);
            let av: Vec<Var> = all_vars[enc_count..].iter().flatten().copied().collect();
            let gcn = self.config.ablation.gcn().then(|| &av[2..]);
            let adapted = adapt_anchors(&mut tape, wi, vi, av[0], av[1], gcn)?;
            Some(AnchorVars {
                word: adapted.word,
                visual: adapted.visual,
                sim_word: anchor_similarity_on(&mut tape, adapted.word)?,
                sim_visual: anchor_similarity_on(&mut tape, adapted.visual)?,
                one_hot: tape.constant(one_hot(&batch.class_rows, anchors.len())),
            })
        } else {
            None
        };

        let vars = total_loss_on(&mut tape, &sketch, &image, anchor_vars.as_ref(), &self.loss_config)?;
        let loss = LossBreakdown::from_tape(&tape, &vars);
        let grads = tape.backward_from(vars.total)?.inputs();
        Ok(StepResult { loss, grads })
    }
}

/// Trains from scratch. The trainer never sees validation or test classes:
/// their disjointness from the training classes is checked up front.
pub fn train(data: &TrainData, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.sketches.dim() != config.encoder.input_dim || data.images.dim() != config.encoder.input_dim {
        return Err(Error::Config(format!(
            "encoder input_dim is {} but features have dim {}",
            config.encoder.input_dim,
            data.sketches.dim()
        )));
    }
    if let Some(v) = &data.validation {
        assert_disjoint(&data.sketches, &v.queries)?;
        assert_disjoint(&data.images, &v.gallery)?;
    }
    let loss_config = config.loss_config();
    let anchors = if loss_config.needs_anchors() {
        Some(data.anchors.as_ref().ok_or_else(|| {
            Error::Config(format!("ablation {} needs anchors", config.ablation.name()))
        })?)
    } else {
        None
    };
    let word_anchor_terms = [LossTerm::SemWordSketch, LossTerm::SemWordImage, LossTerm::SampleWord];
    if config.ablation.randomized_inputs()
        && anchors.is_some_and(|a| a.word_alternates().is_empty())
        && word_anchor_terms.iter().any(|&t| loss_config.is_enabled(t))
    {
        return Err(Error::Config("randomized word anchors need word alternates".into()));
    }

    let classes: Vec<usize> = match anchors {
        Some(a) => a.class_ids().to_vec(),
        None => data.sketches.classes_present().into_iter().collect(),
    };
    let sampler = BatchSampler::new(&data.sketches, &data.images, &classes)?;
    let mut params = ModelParams::init(config, anchors.map(|a| (a.word_dim(), a.visual_dim())))?;
    let step = Step::new(data, config, &params);
    let names = step.trained_names(&params);
    let shapes: Vec<_> = step.trained_tensors(&mut params).iter().map(|m| m.shape()).collect();
    let mut adam = AdamState::new(&shapes);
    let mut batch_rng = stream_rng(config.seed, Stream::Batches);
    let mut noise_rng = stream_rng(config.seed, Stream::AnchorNoise);

    let mut checkpoints = Vec::new();
    if let Some(v) = &data.validation {
        checkpoints.push((0, v.map(&params.encoder)?));
    }
    let mut curve = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let lr = lr_at(iteration, config);
        let batch = sampler.sample(config.batch_size, &mut batch_rng);
        let StepResult { loss, grads } = step.run(&params, &batch, &mut noise_rng)?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged {
                iteration,
                detail: format!("total loss is {}", loss.total),
            });
        }
        if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                iteration,
                detail: format!("gradient of `{}` is not finite", names[k]),
            });
        }
        adam_step(&mut step.trained_tensors(&mut params), &grads, &mut adam, lr)?;

        let done = iteration + 1;
        let val_map = match &data.validation {
            Some(v) if done % config.eval_every == 0 || done == config.iterations => {
                let m = v.map(&params.encoder)?;
                checkpoints.push((done, m));
                log::debug!("iteration {done}: loss {:.4}, val mAP {m:.4}", loss.total);
                Some(m)
            }
            _ => None,
        };
        curve.push(CurveRow {
            iteration,
            lr,
            loss,
            val_map,
        });
    }
    Ok(TrainOutcome {
        params,
        curve,
        checkpoints,
    })
}

/// Loss breakdown of the untrained model on the first batch, for checking
/// that toggling terms leaves the others unchanged.
pub fn initial_loss(data: &TrainData, config: &TrainConfig) -> Result<LossBreakdown> {
    config.validate()?;
    let loss_config = config.loss_config();
    let anchors = data.anchors.as_ref().filter(|_| loss_config.needs_anchors());
    let classes: Vec<usize> = match (anchors, &data.anchors) {
        (_, Some(a)) => a.class_ids().to_vec(),
        _ => data.sketches.classes_present().into_iter().collect(),
    };
    let sampler = BatchSampler::new(&data.sketches, &data.images, &classes)?;
    let params = ModelParams::init(config, data.anchors.as_ref().map(|a| (a.word_dim(), a.visual_dim())))?;
    let batch = sampler.sample(config.batch_size, &mut stream_rng(config.seed, Stream::Batches));
    let step = Step::new(data, config, &params);
    Ok(step.run(&params, &batch, &mut stream_rng(config.seed, Stream::AnchorNoise))?.loss)
}
