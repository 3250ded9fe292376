//! Hand-computed values and the reference schedule.

use diffmath::{Matrix, Tape};
use sketch_anchor::losses::{anchored_semantic_on, info_nce};
use sketch_anchor::retrieval::average_precision;
use sketch_anchor::trainer::{lr_at, TrainConfig};

use super::{one_hot, oracle, random_matrix, rng};

#[derive(Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, got: f64, want: f64, tol: f64) -> Check {
    let err = (got - want).abs();
    Check {
        name: name.into(),
        passed: err <= tol,
        detail: format!("got {got:.12}, want {want:.12}, |err| {err:.1e} (tol {tol:.0e})"),
    }
}

/// Minimizes the anchored semantic loss of one representation by gradient
/// descent on its free parameter `theta`. Returns (final loss, target entropy).
fn minimize_semantic(anchor_sim: &Matrix, anchors: &Matrix, class: usize, start: Matrix, normalize: bool) -> (f64, f64) {
    let c = anchors.rows();
    let mut tape = Tape::<f64>::new();
    let theta = tape.input(start.clone());
    let r = if normalize {
        tape.row_l2_normalize(theta).unwrap()
    } else {
        theta
    };
    let oh = tape.constant(one_hot(&[class], c));
    let a = tape.constant(anchors.clone());
    let s = tape.constant(anchor_sim.clone());
    anchored_semantic_on(&mut tape, r, oh, a, s, 1.0).unwrap();

    let mut point = start;
    let mut loss = f64::INFINITY;
    for _ in 0..20_000 {
        loss = tape.forward(std::slice::from_ref(&point)).unwrap().get(0, 0);
        let g = tape.backward().unwrap().wrt(theta);
        point = Matrix::from_fn(1, point.cols(), |_, j| point.get(0, j) - 0.5 * g.get(0, j));
    }
    let t = oracle::softmax(anchor_sim.row(class));
    let entropy = -t.iter().map(|p| p * p.ln()).sum::<f64>();
    (loss, entropy)
}

pub fn hand_values() -> Vec<Check> {
    let eye = Matrix::<f64>::identity(2);
    let mut out = vec![
        check("info_nce 2x2 identity = ln(1+e^-1)", info_nce(&eye, &eye, 1.0).unwrap(), (1.0 + (-1.0f64).exp()).ln(), 1e-9),
        {
            let same = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
            check("info_nce uniform = ln 2", info_nce(&same, &same, 1.0).unwrap(), 2f64.ln(), 1e-12)
        },
        check("AP([1,0,1,0]) = 5/6", average_precision(&[true, false, true, false], None), 5.0 / 6.0, 1e-12),
    ];

    // on the unit circle against orthonormal anchors the optimum sits on the
    // class's own anchor, where predictions equal the targets
    let start = Matrix::from_rows(&[[0.3, -0.8]]).unwrap();
    let (loss, h) = minimize_semantic(&eye, &eye, 0, start, true);
    out.push(check("anchored-semantic minimum (C=2, unit r) = target entropy", loss, h, 1e-4));
    out.push(check("target entropy of softmax([1,0])", h, 0.5822, 1e-4));

    // free logits against a random similarity table
    let mut r = rng(17);
    let a = random_matrix(4, 6, &mut r).normalize_rows();
    let sim = Matrix::from_rows(&oracle::similarity(&super::to_rows(&a))).unwrap();
    let start = random_matrix(1, 4, &mut r);
    let (loss, h) = minimize_semantic(&sim, &Matrix::identity(4), 2, start, false);
    out.push(check("anchored-semantic minimum (C=4, free r) = target entropy", loss, h, 1e-4));
    out
}

pub fn schedule() -> Vec<Check> {
    let c = TrainConfig::reference_schedule();
    let mut out = vec![
        check("lr(150) = 5e-6", lr_at(150, &c), 5e-6, 1e-18),
        check("lr(1500) = 1e-6", lr_at(1500, &c), 1e-6, 1e-18),
        check("warmup/decay boundary", lr_at(c.warmup_iters - 1, &c), lr_at(c.warmup_iters, &c), 1e-12),
    ];
    let after: Vec<f64> = (c.warmup_iters - 1..=c.iterations).map(|t| lr_at(t, &c)).collect();
    let monotone = after.windows(2).all(|w| w[1] <= w[0]);
    out.push(Check {
        name: "monotone nonincreasing after warmup".into(),
        passed: monotone,
        detail: format!("{} steps checked", after.len() - 1),
    });
    out
}
