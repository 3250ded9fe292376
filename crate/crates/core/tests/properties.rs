mod common;

use common::{random_matrix, rng, unit_rows};
use diffmath::Matrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use sketch_anchor::anchorgraph::{build_unified_graph, gcn_forward, unified_adjacency, GcnParams};
use sketch_anchor::anchors::{build_similarity_matrix, compute_visual_anchors, AnchorSet};
use sketch_anchor::dataio::{
    generate_synthetic, make_zero_shot_split, read_fvec, write_fvec, Domain, FeatureSet, SyntheticConfig,
    ALTERNATES_PER_CLASS,
};
use sketch_anchor::encoder::{encode, encode_one, EncoderDims, EncoderParams};
use sketch_anchor::losses::{anchored_sample_loss, anchored_semantic_loss, info_nce};
use sketch_anchor::retrieval::{average_precision, evaluate, make_generalized_gallery, Gallery, GallerySource};
use sketch_anchor::trainer::{lr_at, TrainConfig};

fn names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("c{i}")).collect()
}

/// Random orthogonal matrix by Gram-Schmidt.
fn orthogonal(d: usize, r: &mut impl Rng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        for _ in 0..2 {
            for q in &cols {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            cols.push(v.iter().map(|x| x / n).collect());
        }
    }
    Matrix::from_fn(d, d, |i, j| cols[j][i])
}

fn rotate(m: &Matrix, q: &Matrix) -> Matrix {
    m.matmul(q).unwrap()
}

/// Features with every one of `c` classes present at least once.
fn labeled_set(n_per: &[usize], d: usize, r: &mut impl Rng) -> FeatureSet {
    let labels: Vec<usize> = n_per.iter().enumerate().flat_map(|(c, &k)| vec![c; k]).collect();
    let n = labels.len();
    FeatureSet::single_domain(random_matrix(n, d, r), labels, Domain::Image, names(n_per.len())).unwrap()
}

fn anchor_set(c: usize, d: usize, r: &mut impl Rng) -> AnchorSet {
    let alternates = (0..c).map(|_| random_matrix(ALTERNATES_PER_CLASS, d, r)).collect();
    let stds = random_matrix(c, d, r).map(f64::abs);
    AnchorSet::new(
        (0..c).collect(),
        names(c),
        random_matrix(c, d, r),
        alternates,
        random_matrix(c, d, r),
        stds,
    )
    .unwrap()
}

fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
}

fn assert_symmetric_unit_diagonal(s: &Matrix) -> Result<(), TestCaseError> {
    for i in 0..s.rows() {
        prop_assert!((s.get(i, i) - 1.0).abs() < 1e-12);
        for j in 0..s.cols() {
            prop_assert!((s.get(i, j) - s.get(j, i)).abs() < 1e-15);
        }
    }
    Ok(())
}

fn assert_adjacency_shape(a: &Matrix, c: usize) -> Result<(), TestCaseError> {
    for i in 0..2 * c {
        let row = a.row(i);
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(row.iter().all(|&x| x >= 0.0));
        for (j, &x) in row.iter().enumerate() {
            let cross = (i < c) != (j < c);
            if cross && j % c != i % c {
                prop_assert_eq!(x, 0.0);
            }
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn similarity_ignores_row_scale(seed in any::<u64>(), c in 1usize..7, d in 1usize..9) {
        let mut r = rng(seed);
        let a = random_matrix(c, d, &mut r);
        prop_assume!(a.row_iter().all(|row| row.iter().any(|&x| x.abs() > 1e-3)));
        let scales: Vec<f64> = (0..c).map(|_| r.random_range(0.01..100.0)).collect();
        let scaled = Matrix::from_fn(c, d, |i, j| scales[i] * a.get(i, j));
        let s = build_similarity_matrix(&a).unwrap();
        assert_symmetric_unit_diagonal(&s)?;
        prop_assert!(close(&s, &build_similarity_matrix(&scaled).unwrap(), 1e-12));
    }

    #[test]
    fn visual_anchors_ignore_sample_order(seed in any::<u64>(), per in prop::collection::vec(1usize..6, 1..5), d in 1usize..5) {
        let mut r = rng(seed);
        let set = labeled_set(&per, d, &mut r);
        let classes: Vec<usize> = (0..per.len()).collect();
        let (means, stds) = compute_visual_anchors(&set, &classes).unwrap();
        prop_assert!(stds.data().iter().all(|&s| s >= 0.0));
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut r);
        let (m2, s2) = compute_visual_anchors(&set.subset(&order), &classes).unwrap();
        prop_assert!(close(&means, &m2, 1e-12) && close(&stds, &s2, 1e-12));
    }

    #[test]
    fn randomized_anchor_similarities_stay_well_formed(seed in any::<u64>(), c in 1usize..6, d in 2usize..6) {
        let mut r = rng(seed);
        let a = anchor_set(c, d, &mut r);
        for _ in 0..5 {
            let v = a.randomized_visual(&mut r);
            let w = a.randomized_word(&mut r, 0.5).unwrap();
            prop_assume!(v.row_iter().chain(w.row_iter()).all(|row| row.iter().any(|&x| x != 0.0)));
            assert_symmetric_unit_diagonal(&build_similarity_matrix(&v).unwrap())?;
            assert_symmetric_unit_diagonal(&build_similarity_matrix(&w).unwrap())?;
            assert_adjacency_shape(&unified_adjacency(&w, &v).unwrap(), c)?;
        }
    }

    #[test]
    fn adjacency_is_row_stochastic(seed in any::<u64>(), c in 1usize..7, d in 1usize..6) {
        let mut r = rng(seed);
        let (w, v) = (unit_rows(c, d, &mut r), unit_rows(c, d, &mut r));
        assert_adjacency_shape(&unified_adjacency(&w, &v).unwrap(), c)?;
    }

    #[test]
    fn gcn_is_class_permutation_equivariant(seed in any::<u64>(), c in 1usize..6, d in 2usize..7, layers in 1usize..5) {
        let mut r = rng(seed);
        let (w, v) = (random_matrix(c, d, &mut r), random_matrix(c, d, &mut r));
        let params = GcnParams::glorot(layers, d, &mut r).unwrap();
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut r);
        let permute = |m: &Matrix| Matrix::from_fn(c, d, |i, j| m.get(perm[i], j));
        let out = gcn_forward(&build_unified_graph(&w, &v).unwrap(), &params);
        let out_p = gcn_forward(&build_unified_graph(&permute(&w), &permute(&v)).unwrap(), &params);
        match (out, out_p) {
            (Ok((aw, av)), Ok((pw, pv))) => {
                prop_assert!(close(&permute(&aw), &pw, 1e-10));
                prop_assert!(close(&permute(&av), &pv, 1e-10));
            }
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "one ordering failed: {:?} / {:?}", a.err(), b.err()),
        }
    }

    #[test]
    fn encoder_outputs_unit_and_domain_blind(seed in any::<u64>(), n in 1usize..6) {
        let mut r = rng(seed);
        let dims = EncoderDims { input_dim: 5, hidden_dim: 7, token_dim: 6, proj_dim: 8, attn_dim: 3 };
        let params = EncoderParams::init(dims, &mut r);
        let x = random_matrix(n, 5, &mut r);
        let reps = encode(&params, &x).unwrap();
        for m in [&reps.word, &reps.visual, &reps.fin] {
            for row in m.row_iter() {
                prop_assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
            }
        }
        let s = encode_one(&params, x.row(0), Domain::Sketch).unwrap();
        let i = encode_one(&params, x.row(0), Domain::Image).unwrap();
        prop_assert_eq!(&s.r_final, &i.r_final);
        prop_assert_eq!(&s.r_word, &i.r_word);
        prop_assert_eq!(&s.r_visual, &i.r_visual);
    }

    #[test]
    fn losses_are_rotation_and_scale_invariant(seed in any::<u64>(), n in 1usize..7, c in 1usize..5, d in 2usize..7, tau in 0.05f64..1.0) {
        let mut r = rng(seed);
        let (s, i, a) = (unit_rows(n, d, &mut r), unit_rows(n, d, &mut r), unit_rows(c, d, &mut r));
        let sim = build_similarity_matrix(&a).unwrap();
        let ids: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let q = orthogonal(d, &mut r);
        let (sq, iq, aq) = (rotate(&s, &q), rotate(&i, &q), rotate(&a, &q));
        let scales: Vec<f64> = (0..n).map(|_| r.random_range(0.1..10.0)).collect();
        let rescaled = Matrix::from_fn(n, d, |k, j| scales[k] * s.get(k, j)).normalize_rows();

        let base = info_nce(&s, &i, tau).unwrap();
        prop_assert!((base - info_nce(&sq, &iq, tau).unwrap()).abs() < 1e-10);
        prop_assert!((base - info_nce(&rescaled, &i, tau).unwrap()).abs() < 1e-10);
        let sem = anchored_semantic_loss(&s, &ids, &a, &sim, tau).unwrap();
        prop_assert!((sem - anchored_semantic_loss(&sq, &ids, &aq, &sim, tau).unwrap()).abs() < 1e-10);
        prop_assert!((sem - anchored_semantic_loss(&rescaled, &ids, &a, &sim, tau).unwrap()).abs() < 1e-10);
        let smp = anchored_sample_loss(&s, &i, &ids, &sim, tau).unwrap();
        prop_assert!((smp - anchored_sample_loss(&sq, &iq, &ids, &sim, tau).unwrap()).abs() < 1e-10);
    }

    /// Sketches are the standard basis, so `sim[i][j]` is coordinate `i` of
    /// image `j`; a slack coordinate keeps images on the unit sphere.
    #[test]
    fn info_nce_responds_to_pair_similarities(seed in any::<u64>(), n in 2usize..6, tau in 0.05f64..1.0) {
        let mut r = rng(seed);
        let sims = Matrix::from_fn(n, n, |_, _| r.random_range(-0.3..0.3));
        let images = |m: &Matrix| {
            Matrix::from_fn(n, n + 1, |j, k| {
                if k < n {
                    m.get(k, j)
                } else {
                    (1.0 - (0..n).map(|i| m.get(i, j).powi(2)).sum::<f64>()).sqrt()
                }
            })
        };
        let sketches = Matrix::from_fn(n, n + 1, |i, k| if i == k { 1.0 } else { 0.0 });
        let base = info_nce(&sketches, &images(&sims), tau).unwrap();
        let (i, j) = (r.random_range(0..n), r.random_range(0..n));
        let mut bumped = sims.clone();
        bumped.set(i, j, sims.get(i, j) + 0.05);
        let moved = info_nce(&sketches, &images(&bumped), tau).unwrap();
        if i == j {
            prop_assert!(moved < base);
        } else {
            prop_assert!(moved > base);
        }
    }

    #[test]
    fn retrieval_metrics_are_rotation_invariant(seed in any::<u64>(), nq in 1usize..6, ng in 2usize..30, c in 1usize..4, d in 2usize..6) {
        let mut r = rng(seed);
        let (q, g) = (random_matrix(nq, d, &mut r), random_matrix(ng, d, &mut r));
        let ql: Vec<usize> = (0..nq).map(|_| r.random_range(0..c)).collect();
        let gl: Vec<usize> = (0..ng).map(|_| r.random_range(0..c)).collect();
        let rot = orthogonal(d, &mut r);
        let run = |q: Matrix, g: Matrix| {
            let qs = FeatureSet::single_domain(q, ql.clone(), Domain::Sketch, names(c)).unwrap();
            let gal = Gallery::new(g, gl.clone(), vec![GallerySource::UnseenTest; ng]).unwrap();
            evaluate(&qs, &gal, &[1, 5]).unwrap()
        };
        let (a, b) = (run(q.clone(), g.clone()), run(rotate(&q, &rot), rotate(&g, &rot)));
        prop_assert!((a.map - b.map).abs() < 1e-9);
        for ((_, x), (_, y)) in a.p_at_k.iter().zip(&b.p_at_k) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn ap_is_bounded_and_monotone(rel in prop::collection::vec(any::<bool>(), 1..40), k in 1usize..50, pick in any::<prop::sample::Index>()) {
        for cut in [None, Some(k)] {
            let ap = average_precision(&rel, cut);
            prop_assert!((0.0..=1.0).contains(&ap));
        }
        let pairs: Vec<(usize, usize)> = (0..rel.len())
            .flat_map(|i| (i + 1..rel.len()).map(move |j| (i, j)))
            .filter(|&(i, j)| !rel[i] && rel[j])
            .collect();
        prop_assume!(!pairs.is_empty());
        let (i, j) = pairs[pick.index(pairs.len())];
        let mut better = rel.clone();
        better.swap(i, j);
        for cut in [None, Some(k)] {
            prop_assert!(average_precision(&better, cut) >= average_precision(&rel, cut) - 1e-15);
        }
    }

    #[test]
    fn generalized_gallery_injects_floor_fraction(seed in any::<u64>(), per in prop::collection::vec(1usize..30, 1..5), fraction in 0.01f64..0.99) {
        let mut r = rng(seed);
        let train = labeled_set(&per, 3, &mut r);
        let test = labeled_set(&[4, 6], 3, &mut r);
        let g = make_generalized_gallery(&train, &test, fraction, &mut r).unwrap();
        let plain = Gallery::from_features(&test);
        prop_assert_eq!(g.count_source(GallerySource::UnseenTest), test.len());
        prop_assert!(close(&Matrix::from_fn(test.len(), 3, |i, j| g.features().get(i, j)), plain.features(), 0.0));
        prop_assert_eq!(&g.labels()[..test.len()], test.labels());
        let want: usize = per.iter().map(|&n| (fraction * n as f64).floor() as usize).sum();
        prop_assert_eq!(g.count_source(GallerySource::SeenInjected), want);
        for (c, &n) in per.iter().enumerate() {
            let injected = g.labels().iter().zip(g.sources())
                .filter(|&(&l, &s)| l == c && s == GallerySource::SeenInjected)
                .count();
            prop_assert_eq!(injected, (fraction * n as f64).floor() as usize);
        }
        prop_assert!(g.len() >= plain.len());
    }

    #[test]
    fn schedule_is_continuous_and_monotone(iterations in 2usize..3000, warmup_frac in 0.0f64..1.0, base in 1e-6f64..1.0, ratio in 0.0f64..1.0) {
        let warmup = ((iterations - 1) as f64 * warmup_frac) as usize;
        let config = TrainConfig {
            iterations,
            warmup_iters: warmup.max(1),
            base_lr: base,
            min_lr: (base * ratio).max(1e-9).min(base),
            ..TrainConfig::default()
        };
        prop_assume!(config.warmup_iters < iterations);
        let w = config.warmup_iters;
        prop_assert!((lr_at(w - 1, &config) - lr_at(w, &config)).abs() <= 1e-12 * base);
        for t in 0..w - 1 {
            prop_assert!(lr_at(t + 1, &config) >= lr_at(t, &config));
        }
        for t in w - 1..iterations {
            prop_assert!(lr_at(t + 1, &config) <= lr_at(t, &config));
            prop_assert!(lr_at(t, &config) >= config.min_lr * (1.0 - 1e-12));
        }
    }

    #[test]
    fn split_partitions_classes(seed in any::<u64>(), classes in 2usize..40, frac in 0.0f64..1.0) {
        let unseen = ((classes - 1) as f64 * frac) as usize;
        let s = make_zero_shot_split(classes, unseen, &mut rng(seed)).unwrap();
        prop_assert_eq!(s.unseen.len(), unseen);
        prop_assert!(s.seen.iter().all(|c| !s.unseen.contains(c)));
        let mut all = s.all_classes();
        all.sort_unstable();
        prop_assert_eq!(all, (0..classes).collect::<Vec<_>>());
        prop_assert!(s.validate().is_ok());
    }

    #[test]
    fn fvec_round_trip_is_identity(seed in any::<u64>(), per in prop::collection::vec(0usize..6, 1..5), d in 1usize..8) {
        let mut r = rng(seed);
        let base = labeled_set(&per, d, &mut r);
        let domains: Vec<Domain> = (0..base.len()).map(|_| if r.random_bool(0.5) { Domain::Sketch } else { Domain::Image }).collect();
        let set = FeatureSet::new(base.vectors().clone(), base.labels().to_vec(), domains, names(per.len()))
            .unwrap()
            .rounded_to_f32();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.fvec");
        write_fvec(&set, &path).unwrap();
        let back = read_fvec(&path).unwrap();
        prop_assert_eq!(back.dim(), set.dim());
        prop_assert_eq!(back.labels(), set.labels());
        prop_assert_eq!(back.domains(), set.domains());
        prop_assert!(back.vectors().data().iter().zip(set.vectors().data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn noiseless_images_retrieve_their_prototype(seed in any::<u64>(), classes in 2usize..8, dim in 2usize..12, gap in 0.0f64..1.0) {
        let config = SyntheticConfig { classes, per_class: 5, dim, domain_gap: gap, noise: 0.0, word_dim: 4, ..Default::default() };
        let data = generate_synthetic(&config, &mut rng(seed)).unwrap();
        let protos = FeatureSet::single_domain(data.prototypes.clone(), (0..classes).collect(), Domain::Image, names(classes)).unwrap();
        let report = evaluate(&data.images, &Gallery::from_features(&protos), &[1]).unwrap();
        // distinct random prototypes never coincide, so rank 1 is exact
        prop_assert_eq!(report.p_at(1), Some(1.0));
    }
}
