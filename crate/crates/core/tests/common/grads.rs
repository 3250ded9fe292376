//! Gradient checks of every differentiable component at small sizes.

use diffmath::{grad_check, Matrix, Tape, Var};
use sketch_anchor::anchorgraph::{adapt_anchors, GcnParams};
use sketch_anchor::encoder::{attention_on_tape, encode_on_tape, gated_projection_on_tape, EncoderDims, EncoderParams};
use sketch_anchor::losses::{total_loss_on, AnchorVars, LossConfig, LossTerm, SideVars};

use super::{one_hot, random_matrix, rng};

pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const TOL_F32: f64 = 1e-4;
pub const TOL_F64: f64 = 1e-6;

const DIMS: EncoderDims = EncoderDims {
    input_dim: 4,
    hidden_dim: 6,
    token_dim: 5,
    proj_dim: 6,
    attn_dim: 3,
};
const N: usize = 4;
const C: usize = 3;
const WORD_DIM: usize = 5;
const VISUAL_DIM: usize = 4;
const GCN_LAYERS: usize = 4;
const TAU: f64 = 0.5;

#[derive(Debug)]
pub struct GradResult {
    pub component: String,
    pub seed: u64,
    pub rel_err_f32: f64,
    pub rel_err_f64: f64,
}

impl GradResult {
    pub fn passed(&self) -> bool {
        self.rel_err_f32 < TOL_F32 && self.rel_err_f64 < TOL_F64
    }
}

fn inputs_of(tape: &Tape<f64>) -> Vec<Matrix> {
    tape.input_vars().iter().map(|&v| tape.value(v).clone()).collect()
}

/// Reduces `outs` to a scalar with fixed random weights and checks the tape
/// in both precisions.
fn finish(component: &str, seed: u64, mut tape: Tape<f64>, outs: &[Var]) -> GradResult {
    let mut r = rng(seed ^ 0xfeed);
    let mut total = None;
    for &o in outs {
        let (rows, cols) = tape.shape(o);
        let w = tape.constant(random_matrix(rows, cols, &mut r));
        let m = tape.mul(o, w).unwrap();
        let s = tape.sum(m).unwrap();
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s).unwrap(),
        });
    }
    let _ = total.expect("at least one output");
    scalar_result(component, seed, tape)
}

/// Checks a tape whose last node is already the scalar objective.
fn scalar_result(component: &str, seed: u64, mut tape: Tape<f64>) -> GradResult {
    let inputs = inputs_of(&tape);
    let r64 = grad_check(&mut tape, &inputs, TOL_F64).unwrap();
    let mut t32 = tape.to_precision::<f32>().unwrap();
    let in32: Vec<Matrix<f32>> = inputs.iter().map(Matrix::cast).collect();
    let r32 = grad_check(&mut t32, &in32, TOL_F32).unwrap();
    GradResult {
        component: component.into(),
        seed,
        rel_err_f32: r32.max_rel_err(),
        rel_err_f64: r64.max_rel_err(),
    }
}

fn gated_inputs(tape: &mut Tape<f64>, input: usize, output: usize, r: &mut impl rand::Rng) -> sketch_anchor::encoder::GatedVars {
    sketch_anchor::encoder::GatedVars {
        w1: tape.input(random_matrix(input, output, r)),
        b1: tape.input(random_matrix(1, output, r).map(|x| 0.1 * x)),
        w2: tape.input(random_matrix(output, output, r)),
        b2: tape.input(random_matrix(1, output, r).map(|x| 0.1 * x)),
    }
}

pub fn gated_projection(seed: u64) -> GradResult {
    let mut r = rng(seed);
    let mut t = Tape::<f64>::new();
    let h = t.input(random_matrix(N, 5, &mut r));
    let p = gated_inputs(&mut t, 5, 6, &mut r);
    let out = gated_projection_on_tape(&mut t, h, &p).unwrap();
    finish("gated projection", seed, t, &[out])
}

pub fn attention(seed: u64) -> GradResult {
    let mut r = rng(seed);
    let mut t = Tape::<f64>::new();
    let hw = t.input(random_matrix(N, 5, &mut r));
    let hv = t.input(random_matrix(N, 5, &mut r));
    let vars = sketch_anchor::encoder::AttentionVars {
        wa: t.input(random_matrix(5, 3, &mut r)),
        ba: t.input(random_matrix(1, 3, &mut r).map(|x| 0.1 * x)),
        q: t.input(random_matrix(3, 1, &mut r)),
        proj: gated_inputs(&mut t, 5, 6, &mut r),
    };
    let (out, alpha) = attention_on_tape(&mut t, hw, hv, &vars).unwrap();
    finish("attention aggregation", seed, t, &[out, alpha])
}

pub fn gcn(seed: u64) -> GradResult {
    let mut r = rng(seed);
    let mut t = Tape::<f64>::new();
    let wi = t.constant(random_matrix(C, WORD_DIM, &mut r));
    let vi = t.constant(random_matrix(C, VISUAL_DIM, &mut r));
    let pw = t.input(random_matrix(WORD_DIM, 6, &mut r));
    let pv = t.input(random_matrix(VISUAL_DIM, 6, &mut r));
    let layers: Vec<Var> = (0..GCN_LAYERS).map(|_| t.input(random_matrix(6, 6, &mut r))).collect();
    let a = adapt_anchors(&mut t, wi, vi, pw, pv, Some(&layers)).unwrap();
    finish("GCN", seed, t, &[a.word, a.visual])
}

fn side(t: &mut Tape<f64>, r: &mut impl rand::Rng) -> SideVars {
    let mut head = |t: &mut Tape<f64>| {
        let raw = t.input(random_matrix(N, 6, r));
        t.row_l2_normalize(raw).unwrap()
    };
    SideVars {
        r_word: head(t),
        r_visual: head(t),
        r_final: head(t),
    }
}

fn ids(seed: u64) -> Vec<usize> {
    (0..N).map(|i| (i + seed as usize) % C).collect()
}

/// Anchors are inputs; their similarity targets are detached constants
/// computed at the check point, as the stop-gradient prescribes.
fn anchor_vars(t: &mut Tape<f64>, r: &mut impl rand::Rng, seed: u64, word: Var, visual: Var) -> AnchorVars {
    let _ = r;
    let sim = |t: &mut Tape<f64>, a: Var| {
        let v = t.value(a).clone();
        t.constant(v.matmul(&v.transpose()).unwrap())
    };
    AnchorVars {
        word,
        visual,
        sim_word: sim(t, word),
        sim_visual: sim(t, visual),
        one_hot: t.constant(one_hot(&ids(seed), C)),
    }
}

pub fn loss_term(term: LossTerm, seed: u64) -> GradResult {
    let mut r = rng(seed);
    let mut t = Tape::<f64>::new();
    let s = side(&mut t, &mut r);
    let i = side(&mut t, &mut r);
    let aw = t.input(random_matrix(C, 6, &mut r));
    let aw = t.row_l2_normalize(aw).unwrap();
    let av = t.input(random_matrix(C, 6, &mut r));
    let av = t.row_l2_normalize(av).unwrap();
    let anchors = anchor_vars(&mut t, &mut r, seed, aw, av);
    let config = LossConfig::with_terms(TAU, &[term]);
    total_loss_on(&mut t, &s, &i, Some(&anchors), &config).unwrap();
    scalar_result(&format!("loss {}", term.name()), seed, t)
}

fn selector(k: usize, n: usize, offset: usize) -> Matrix {
    Matrix::from_fn(k, n, |r, c| if c == offset + r { 1.0 } else { 0.0 })
}

/// Encoder, anchor projections, GCN and all seven terms on one tape.
pub fn composite(seed: u64) -> GradResult {
    let mut r = rng(seed);
    let enc = EncoderParams::init(DIMS, &mut r);
    let mut t = Tape::<f64>::new();
    let ev = enc.register(&mut t, true);
    let pw = t.input(random_matrix(WORD_DIM, DIMS.proj_dim, &mut r));
    let pv = t.input(random_matrix(VISUAL_DIM, DIMS.proj_dim, &mut r));
    // the training initialization; uniform(-1, 1) weights inflate the node
    // norms and leave these gradients near the roundoff floor
    let gcn = GcnParams::glorot(GCN_LAYERS, DIMS.proj_dim, &mut r).unwrap();
    let layers: Vec<Var> = gcn.layers.into_iter().map(|w| t.input(w)).collect();

    let x = t.constant(random_matrix(2 * N, DIMS.input_dim, &mut r));
    let out = encode_on_tape(&mut t, x, &ev, 1.0).unwrap();
    let take_s = t.constant(selector(N, 2 * N, 0));
    let take_i = t.constant(selector(N, 2 * N, N));
    let mut pick = |sel: Var| SideVars {
        r_word: t.matmul(sel, out.r_word).unwrap(),
        r_visual: t.matmul(sel, out.r_visual).unwrap(),
        r_final: t.matmul(sel, out.r_final).unwrap(),
    };
    let s = pick(take_s);
    let i = pick(take_i);

    let wi = t.constant(random_matrix(C, WORD_DIM, &mut r));
    let vi = t.constant(random_matrix(C, VISUAL_DIM, &mut r));
    let adapted = adapt_anchors(&mut t, wi, vi, pw, pv, Some(&layers)).unwrap();
    let anchors = anchor_vars(&mut t, &mut r, seed, adapted.word, adapted.visual);
    let config = LossConfig::with_terms(TAU, &LossTerm::ALL);
    total_loss_on(&mut t, &s, &i, Some(&anchors), &config).unwrap();
    scalar_result("full composite", seed, t)
}

/// Every component at every seed.
pub fn suite() -> Vec<GradResult> {
    let mut out = Vec::new();
    for seed in SEEDS {
        out.push(gated_projection(seed));
        out.push(attention(seed));
        out.push(gcn(seed));
        for term in LossTerm::ALL {
            out.push(loss_term(term, seed));
        }
        out.push(composite(seed));
    }
    out
}

