//! Trainable forward path: a shared tanh trunk with two token heads, a gated
//! projection per head and an attention aggregator producing the retrieval
//! representation.
//!
//! Row-vector convention throughout: a batch is `N x in` and a layer computes
//! `X W + 1 b`.

use diffmath::{Matrix, Real, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Domain, FeatureSet};
use crate::error::{Error, Result};
use crate::init::glorot;

/// Layer widths of the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Width of each trunk head (`h_w`, `h_v`).
    pub token_dim: usize,
    pub proj_dim: usize,
    pub attn_dim: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden_dim: 128,
            token_dim: 128,
            proj_dim: 512,
            attn_dim: 64,
        }
    }
}

/// `y = (h W1 + b1) * sigmoid((h W1 + b1) W2 + b2)`, then row-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedProjection {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl GatedProjection {
    pub fn glorot<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w1: glorot(input, output, rng),
            b1: Matrix::zeros(1, output),
            w2: glorot(output, output, rng),
            b2: Matrix::zeros(1, output),
        }
    }

    fn tensors(&self) -> [&Matrix; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Scores `s_k = tanh(h_k Wa + ba) q`, weights `softmax(s_w, s_v)` and a
/// gated projection of the weighted mix.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub wa: Matrix,
    pub ba: Matrix,
    /// `attn_dim x 1`.
    pub q: Matrix,
    pub proj: GatedProjection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub trunk_w: Matrix,
    pub trunk_b: Matrix,
    pub head_word_w: Matrix,
    pub head_word_b: Matrix,
    pub head_visual_w: Matrix,
    pub head_visual_b: Matrix,
    pub proj_word: GatedProjection,
    pub proj_visual: GatedProjection,
    pub agg: Attention,
}

const TENSOR_NAMES: [&str; 21] = [
    "trunk.w",
    "trunk.b",
    "head_word.w",
    "head_word.b",
    "head_visual.w",
    "head_visual.b",
    "proj_word.w1",
    "proj_word.b1",
    "proj_word.w2",
    "proj_word.b2",
    "proj_visual.w1",
    "proj_visual.b1",
    "proj_visual.w2",
    "proj_visual.b2",
    "agg.wa",
    "agg.ba",
    "agg.q",
    "agg.proj.w1",
    "agg.proj.b1",
    "agg.proj.w2",
    "agg.proj.b2",
];

impl EncoderParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(dims: EncoderDims, rng: &mut R) -> Self {
        let EncoderDims {
            input_dim,
            hidden_dim,
            token_dim,
            proj_dim,
            attn_dim,
        } = dims;
        Self {
            dims,
            trunk_w: glorot(input_dim, hidden_dim, rng),
            trunk_b: Matrix::zeros(1, hidden_dim),
            head_word_w: glorot(hidden_dim, token_dim, rng),
            head_word_b: Matrix::zeros(1, token_dim),
            head_visual_w: glorot(hidden_dim, token_dim, rng),
            head_visual_b: Matrix::zeros(1, token_dim),
            proj_word: GatedProjection::glorot(token_dim, proj_dim, rng),
            proj_visual: GatedProjection::glorot(token_dim, proj_dim, rng),
            agg: Attention {
                wa: glorot(token_dim, attn_dim, rng),
                ba: Matrix::zeros(1, attn_dim),
                q: glorot(attn_dim, 1, rng),
                proj: GatedProjection::glorot(token_dim, proj_dim, rng),
            },
        }
    }

    pub fn tensor_names() -> &'static [&'static str] {
        &TENSOR_NAMES
    }

    /// Every tensor, in the fixed order of [`EncoderParams::tensor_names`].
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![
            &self.trunk_w,
            &self.trunk_b,
            &self.head_word_w,
            &self.head_word_b,
            &self.head_visual_w,
            &self.head_visual_b,
        ];
        out.extend(self.proj_word.tensors());
        out.extend(self.proj_visual.tensors());
        out.extend([&self.agg.wa, &self.agg.ba, &self.agg.q]);
        out.extend(self.agg.proj.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![
            &mut self.trunk_w,
            &mut self.trunk_b,
            &mut self.head_word_w,
            &mut self.head_word_b,
            &mut self.head_visual_w,
            &mut self.head_visual_b,
        ];
        out.extend(self.proj_word.tensors_mut());
        out.extend(self.proj_visual.tensors_mut());
        out.extend([&mut self.agg.wa, &mut self.agg.ba, &mut self.agg.q]);
        out.extend(self.agg.proj.tensors_mut());
        out
    }

    /// Number of leading tensors that belong to the trunk.
    pub const TRUNK_TENSORS: usize = 6;

    /// Records every tensor on `tape`, as inputs (trainable) or as constants.
    pub fn register<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> EncoderVars {
        let v: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|m| {
                if trainable {
                    tape.input(m.cast())
                } else {
                    tape.constant(m.cast())
                }
            })
            .collect();
        EncoderVars::from_slice(&v)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GatedVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wa: Var,
    pub ba: Var,
    pub q: Var,
    pub proj: GatedVars,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub trunk_w: Var,
    pub trunk_b: Var,
    pub head_word_w: Var,
    pub head_word_b: Var,
    pub head_visual_w: Var,
    pub head_visual_b: Var,
    pub proj_word: GatedVars,
    pub proj_visual: GatedVars,
    pub agg: AttentionVars,
}

impl GatedVars {
    fn from_slice(v: &[Var]) -> Self {
        Self {
            w1: v[0],
            b1: v[1],
            w2: v[2],
            b2: v[3],
        }
    }
}

impl EncoderVars {
    /// Handles in [`EncoderParams::tensors`] order.
    pub fn from_slice(v: &[Var]) -> Self {
        Self {
            trunk_w: v[0],
            trunk_b: v[1],
            head_word_w: v[2],
            head_word_b: v[3],
            head_visual_w: v[4],
            head_visual_b: v[5],
            proj_word: GatedVars::from_slice(&v[6..10]),
            proj_visual: GatedVars::from_slice(&v[10..14]),
            agg: AttentionVars {
                wa: v[14],
                ba: v[15],
                q: v[16],
                proj: GatedVars::from_slice(&v[17..21]),
            },
        }
    }
}

/// `x W + 1 b` with the bias broadcast by a ones column.
pub fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let n = tape.shape(x).0;
    let xw = tape.matmul(x, w)?;
    let ones = tape.ones(n, 1);
    let bias = tape.matmul(ones, b)?;
    Ok(tape.add(xw, bias)?)
}

pub fn gated_projection_on_tape<T: Real>(tape: &mut Tape<T>, h: Var, p: &GatedVars) -> Result<Var> {
    let z = linear(tape, h, p.w1, p.b1)?;
    let g = linear(tape, z, p.w2, p.b2)?;
    let gate = tape.sigmoid(g)?;
    let y = tape.mul(z, gate)?;
    Ok(tape.row_l2_normalize(y)?)
}

/// Returns the aggregated representation and the `N x 2` attention weights.
pub fn attention_on_tape<T: Real>(
    tape: &mut Tape<T>,
    h_word: Var,
    h_visual: Var,
    p: &AttentionVars,
) -> Result<(Var, Var)> {
    let (n, h) = tape.shape(h_word);
    let score = |tape: &mut Tape<T>, hk: Var| -> Result<Var> {
        let a = linear(tape, hk, p.wa, p.ba)?;
        let t = tape.tanh(a)?;
        Ok(tape.matmul(t, p.q)?)
    };
    let sw = score(tape, h_word)?;
    let sv = score(tape, h_visual)?;

    let first = tape.constant(Matrix::from_rows(&[[T::one(), T::zero()]])?);
    let second = tape.constant(Matrix::from_rows(&[[T::zero(), T::one()]])?);
    let place_w = tape.matmul(sw, first)?;
    let place_v = tape.matmul(sv, second)?;
    let scores = tape.add(place_w, place_v)?;
    let alpha = tape.row_softmax(scores)?;

    // broadcast each weight column across the token width
    let column = |k: usize| Matrix::from_fn(2, h, |r, _| if r == k { T::one() } else { T::zero() });
    let spread_w = tape.constant(column(0));
    let spread_v = tape.constant(column(1));
    let aw = tape.matmul(alpha, spread_w)?;
    let av = tape.matmul(alpha, spread_v)?;
    let mw = tape.mul(aw, h_word)?;
    let mv = tape.mul(av, h_visual)?;
    let mix = tape.add(mw, mv)?;
    debug_assert_eq!(tape.shape(mix), (n, h));
    let out = gated_projection_on_tape(tape, mix, &p.proj)?;
    Ok((out, alpha))
}

/// Tape handles of one encoded batch.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    pub r_word: Var,
    pub r_visual: Var,
    pub r_final: Var,
    pub alpha: Var,
}

/// Full forward path for an `N x input_dim` batch. Gradients reaching the
/// trunk are multiplied by `backbone_grad_scale`.
pub fn encode_on_tape<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &EncoderVars,
    backbone_grad_scale: f64,
) -> Result<EncodedVars> {
    let pre = linear(tape, x, p.trunk_w, p.trunk_b)?;
    let hidden = tape.tanh(pre)?;
    let hw = linear(tape, hidden, p.head_word_w, p.head_word_b)?;
    let hv = linear(tape, hidden, p.head_visual_w, p.head_visual_b)?;
    let hw = tape.scale_gradient(hw, backbone_grad_scale)?;
    let hv = tape.scale_gradient(hv, backbone_grad_scale)?;

    let r_word = gated_projection_on_tape(tape, hw, &p.proj_word)?;
    let r_visual = gated_projection_on_tape(tape, hv, &p.proj_visual)?;
    let (r_final, alpha) = attention_on_tape(tape, hw, hv, &p.agg)?;
    Ok(EncodedVars {
        r_word,
        r_visual,
        r_final,
        alpha,
    })
}

/// Encoded rows of a batch, all unit-norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Representations {
    pub word: Matrix,
    pub visual: Matrix,
    pub fin: Matrix,
    /// `N x 2` attention weights `(alpha_w, alpha_v)`.
    pub alpha: Matrix,
}

/// One encoded input.
#[derive(Clone, Debug, PartialEq)]
pub struct Representation {
    pub r_word: Vec<f64>,
    pub r_visual: Vec<f64>,
    pub r_final: Vec<f64>,
    pub domain: Domain,
}

fn check_input(params: &EncoderParams, cols: usize) -> Result<()> {
    if cols != params.dims.input_dim {
        return Err(Error::Contract(format!(
            "encoder expects inputs of dim {}, got {cols}",
            params.dims.input_dim
        )));
    }
    Ok(())
}

/// Value-only forward pass for an `N x input_dim` batch.
pub fn encode(params: &EncoderParams, x: &Matrix) -> Result<Representations> {
    check_input(params, x.cols())?;
    let mut tape = Tape::<f64>::new();
    let vars = params.register(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = encode_on_tape(&mut tape, xv, &vars, 1.0)?;
    Ok(Representations {
        word: tape.value(out.r_word).clone(),
        visual: tape.value(out.r_visual).clone(),
        fin: tape.value(out.r_final).clone(),
        alpha: tape.value(out.alpha).clone(),
    })
}

/// Encodes a single vector. The domain tag is carried along as metadata.
pub fn encode_one(params: &EncoderParams, x: &[f64], domain: Domain) -> Result<Representation> {
    let reps = encode(params, &Matrix::new(1, x.len(), x.to_vec())?)?;
    Ok(Representation {
        r_word: reps.word.row(0).to_vec(),
        r_visual: reps.visual.row(0).to_vec(),
        r_final: reps.fin.row(0).to_vec(),
        domain,
    })
}

/// Value-only gated projection of the rows of `h`.
pub fn gated_projection(h: &Matrix, p: &GatedProjection) -> Result<Matrix> {
    let mut tape = Tape::<f64>::new();
    let hv = tape.constant(h.clone());
    let vars = GatedVars::from_slice(&p.tensors().map(|m| tape.constant(m.clone())));
    let out = gated_projection_on_tape(&mut tape, hv, &vars)?;
    Ok(tape.value(out).clone())
}

/// Value-only attention aggregation; returns the representation and weights.
pub fn attention_aggregate(h_word: &Matrix, h_visual: &Matrix, p: &Attention) -> Result<(Matrix, Matrix)> {
    if h_word.shape() != h_visual.shape() {
        return Err(Error::Contract("attention inputs differ in shape".into()));
    }
    let mut tape = Tape::<f64>::new();
    let hw = tape.constant(h_word.clone());
    let hv = tape.constant(h_visual.clone());
    let vars = AttentionVars {
        wa: tape.constant(p.wa.clone()),
        ba: tape.constant(p.ba.clone()),
        q: tape.constant(p.q.clone()),
        proj: GatedVars::from_slice(&p.proj.tensors().map(|m| tape.constant(m.clone()))),
    };
    let (out, alpha) = attention_on_tape(&mut tape, hw, hv, &vars)?;
    Ok((tape.value(out).clone(), tape.value(alpha).clone()))
}

const ENCODE_CHUNK: usize = 256;

/// Final representations of every vector in `set`, keeping labels and domains.
pub fn encode_features(params: &EncoderParams, set: &FeatureSet) -> Result<FeatureSet> {
    check_input(params, set.dim())?;
    let mut data = Vec::with_capacity(set.len() * params.dims.proj_dim);
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(ENCODE_CHUNK) {
        let x = set.vectors().select_rows(chunk);
        data.extend_from_slice(encode(params, &x)?.fin.data());
    }
    FeatureSet::new(
        Matrix::new(set.len(), params.dims.proj_dim, data)?,
        set.labels().to_vec(),
        set.domains().to_vec(),
        set.class_names().to_vec(),
    )
}
