//! Library functions against the loop oracles on random small instances.

use diffmath::Matrix;
use rand::Rng;
use sketch_anchor::anchorgraph::{build_unified_graph, gcn_forward, GcnParams};
use sketch_anchor::dataio::{Domain, FeatureSet};
use sketch_anchor::losses::{anchored_sample_loss, anchored_semantic_loss, info_nce};
use sketch_anchor::retrieval::{average_precision, evaluate, Gallery, GallerySource};

use super::{oracle, random_matrix, rng, to_rows, unit_rows};

pub const INSTANCES: u64 = 100;
pub const TOLERANCE: f64 = 1e-10;

/// Largest absolute library-vs-oracle difference per function.
#[derive(Debug)]
pub struct Equivalence {
    pub function: &'static str,
    pub max_abs_diff: f64,
}

fn class_ids(n: usize, c: usize, r: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..c)).collect()
}

fn max_diff(a: &[Vec<f64>], b: &Matrix) -> f64 {
    let mut m: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            m = m.max((x - b.get(i, j)).abs());
        }
    }
    m
}

fn losses(seed: u64) -> [f64; 3] {
    let mut r = rng(seed);
    let n = r.random_range(1..=8);
    let c = r.random_range(1..=6);
    let d = r.random_range(2..=8);
    let tau = r.random_range(0.05..1.0);
    let skt = unit_rows(n, d, &mut r);
    let img = unit_rows(n, d, &mut r);
    let anchors = unit_rows(c, d, &mut r);
    let sim = oracle::similarity(&to_rows(&unit_rows(c, d, &mut r)));
    let sim_m = Matrix::from_rows(&sim).unwrap();
    let ids = class_ids(n, c, &mut r);
    let (s, i, a) = (to_rows(&skt), to_rows(&img), to_rows(&anchors));
    [
        (info_nce(&skt, &img, tau).unwrap() - oracle::info_nce(&s, &i, tau)).abs(),
        (anchored_semantic_loss(&skt, &ids, &anchors, &sim_m, tau).unwrap()
            - oracle::anchored_semantic(&s, &ids, &a, &sim, tau))
        .abs(),
        (anchored_sample_loss(&skt, &img, &ids, &sim_m, tau).unwrap() - oracle::anchored_sample(&s, &i, &ids, &sim, tau))
            .abs(),
    ]
}

fn gcn(seed: u64) -> f64 {
    let mut r = rng(seed);
    let c = r.random_range(1..=6);
    let d = r.random_range(2..=8);
    let layers = r.random_range(1..=4);
    let word = random_matrix(c, d, &mut r);
    let visual = random_matrix(c, d, &mut r);
    let ws: Vec<Matrix> = (0..layers).map(|_| random_matrix(d, d, &mut r)).collect();
    let ws_rows: Vec<Vec<Vec<f64>>> = ws.iter().map(to_rows).collect();
    let (ow, ov) = oracle::gcn(&to_rows(&word), &to_rows(&visual), &ws_rows);
    let g = build_unified_graph(&word, &visual).unwrap();
    let (aw, av) = match gcn_forward(&g, &GcnParams::new(ws).unwrap()) {
        Ok(out) => out,
        // ReLU zeroed a whole row: the oracle must see the same zero row
        Err(sketch_anchor::Error::DegenerateAnchor(_)) => {
            let zero = ow.iter().chain(&ov).any(|row| row.iter().all(|&x| x == 0.0));
            return if zero { 0.0 } else { f64::INFINITY };
        }
        Err(e) => panic!("gcn_forward: {e}"),
    };
    max_diff(&ow, &aw).max(max_diff(&ov, &av))
}

fn ap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let len = r.random_range(1..=50);
    let p = r.random_range(0.05..0.95);
    let rel: Vec<bool> = (0..len).map(|_| r.random_bool(p)).collect();
    let k = r.random_range(1..=60);
    let full = (average_precision(&rel, None) - oracle::average_precision(&rel)).abs();
    let cut = (average_precision(&rel, Some(k)) - oracle::average_precision_at(&rel, k)).abs();
    full.max(cut)
}

fn eval(seed: u64) -> f64 {
    let mut r = rng(seed);
    let c = r.random_range(1..=6);
    let d = r.random_range(2..=8);
    let nq = r.random_range(1..=8);
    let ng = r.random_range(1..=50);
    let queries = random_matrix(nq, d, &mut r);
    let mut gallery = random_matrix(ng, d, &mut r);
    // exact duplicates exercise the tie order
    for g in 1..ng {
        if r.random_bool(0.2) {
            let src = r.random_range(0..g);
            let row = gallery.row(src).to_vec();
            gallery.row_mut(g).copy_from_slice(&row);
        }
    }
    let ql = class_ids(nq, c, &mut r);
    let gl = class_ids(ng, c, &mut r);
    let ks = [1, r.random_range(1..=ng), ng + 3];
    let names: Vec<String> = (0..c).map(|i| format!("c{i}")).collect();
    let q = FeatureSet::single_domain(queries.clone(), ql.clone(), Domain::Sketch, names).unwrap();
    let gal = Gallery::new(gallery.clone(), gl.clone(), vec![GallerySource::UnseenTest; ng]).unwrap();
    let lib = evaluate(&q, &gal, &ks).unwrap();
    let o = oracle::evaluate(&to_rows(&queries), &ql, &to_rows(&gallery), &gl, &ks);
    let mut m = (lib.map - o.map).abs().max((lib.map_at_200 - o.map_at_200).abs());
    for ((_, p), op) in lib.p_at_k.iter().zip(&o.p_at_k) {
        m = m.max((p - op).abs());
    }
    m
}

pub fn suite() -> Vec<Equivalence> {
    let mut worst = [0.0f64; 6];
    for seed in 0..INSTANCES {
        let [a, b, c] = losses(seed);
        let rest = [gcn(seed), ap(seed), eval(seed)];
        for (w, v) in worst.iter_mut().zip([a, b, c, rest[0], rest[1], rest[2]]) {
            *w = w.max(v);
        }
    }
    let names = [
        "info_nce",
        "anchored_semantic_loss",
        "anchored_sample_loss",
        "gcn_forward",
        "average_precision",
        "evaluate",
    ];
    names
        .into_iter()
        .zip(worst)
        .map(|(function, max_abs_diff)| Equivalence { function, max_abs_diff })
        .collect()
}
