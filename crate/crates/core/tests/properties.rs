mod common;

use proptest::prelude::*;
use proptest::sample::subsequence;

use reid_core::attention::{
    apply_channel_gate, apply_spatial_gate, FeatureMap, SpatialGate,
};
use reid_core::data::{
    decode_camera_graph, decode_features, decode_metadata, encode_camera_graph, encode_features,
    encode_metadata, CameraGraph, MetaRecord,
};
use reid_core::division::{assemble_embedding, concat, divide, pool_parts, Axis};
use reid_core::linalg::Matrix;
use reid_core::losses::{combine, cross_entropy, smooth_labels};
use reid_core::metrics::{cmc, evaluate, Protocol};
use reid_core::retrieval::{
    fuse, k_reciprocal_rerank, rank, DistanceMatrix, FuseOptions, RerankParams, SameCameraPolicy,
};
use reid_core::spatiotemporal::{
    affinity_from_density, collect_st_samples, density, fit_log_normal, log_likelihood,
    log_normal_pdf, LogNormalParams, PairingRule, StModel,
};

fn map_strategy() -> impl Strategy<Value = FeatureMap> {
    (1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(c, h, w)| {
        prop::collection::vec(-5.0f64..5.0, c * h * w)
            .prop_map(move |data| FeatureMap::new(c, h, w, data).unwrap())
    })
}

fn matrix_strategy(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> impl Strategy<Value = Matrix> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f64..10.0, r * c).prop_map(move |v| Matrix::from_vec(r, c, v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_shift_invariance(logits in matrix_strategy(1..5, 2..8), shift in -50.0f64..50.0, eps in 0.0f64..1.0) {
        let labels: Vec<usize> = (0..logits.rows()).map(|i| i % logits.cols()).collect();
        let shifted = Matrix::from_fn(logits.rows(), logits.cols(), |i, j| logits.get(i, j) + shift);
        let (a, ga) = cross_entropy(&logits, &labels, eps).unwrap();
        let (b, gb) = cross_entropy(&shifted, &labels, eps).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        for (x, y) in ga.as_slice().iter().zip(gb.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn smoothed_labels_are_a_distribution(k in 2usize..40, eps in 0.0f64..=1.0, label_seed in 0usize..1000) {
        let p = smooth_labels(label_seed % k, k, eps).unwrap();
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn total_is_plain_multiply_add(ce in 0.0f64..10.0, tri in 0.0f64..10.0, lambda in 0.0f64..2.0) {
        prop_assert_eq!(combine(ce, tri, lambda), ce + lambda * tri);
    }

    #[test]
    fn divide_concat_roundtrip(x in map_strategy(), parts in 1usize..5) {
        for axis in [Axis::Height, Axis::Width, Axis::Channel] {
            let size = match axis {
                Axis::Channel => x.channels(),
                Axis::Height => x.height(),
                Axis::Width => x.width(),
            };
            if parts > size {
                prop_assert!(divide(&x, axis, parts).is_err());
                continue;
            }
            let set = divide(&x, axis, parts).unwrap();
            prop_assert_eq!(concat(&set).unwrap(), x.clone());
        }
    }

    #[test]
    fn pooling_commutes_with_scaling(x in map_strategy(), alpha in 0.01f64..10.0) {
        let parts = x.height().min(2);
        let a = pool_parts(&divide(&x.scaled(alpha), Axis::Height, parts).unwrap());
        let b = pool_parts(&divide(&x, Axis::Height, parts).unwrap());
        for (ra, rb) in a.iter().zip(&b) {
            for (u, v) in ra.iter().zip(rb) {
                prop_assert!((u - alpha * v).abs() <= 1e-12 * (1.0 + u.abs()));
            }
        }
    }

    #[test]
    fn assemble_is_deterministic(x in map_strategy(), normalize in any::<bool>()) {
        let pooled = pool_parts(&divide(&x, Axis::Channel, 1).unwrap());
        let coarse = pooled[0].clone();
        let run = || assemble_embedding(&coarse, &coarse, &[pooled.clone()], normalize);
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn gate_application_is_homogeneous(x in map_strategy(), alpha in 0.0f64..10.0, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let gc: Vec<f64> = (0..x.channels()).map(|_| rng.random_range(0.01..0.99)).collect();
        let gs = SpatialGate {
            height: x.height(),
            width: x.width(),
            values: (0..x.height() * x.width()).map(|_| rng.random_range(0.01..0.99)).collect(),
        };
        let lhs = apply_channel_gate(&x.scaled(alpha), &gc).unwrap();
        let rhs = apply_channel_gate(&x, &gc).unwrap().scaled(alpha);
        for (a, b) in lhs.as_slice().iter().zip(rhs.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
        let lhs = apply_spatial_gate(&x.scaled(alpha), &gs).unwrap();
        let rhs = apply_spatial_gate(&x, &gs).unwrap().scaled(alpha);
        for (a, b) in lhs.as_slice().iter().zip(rhs.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn features_roundtrip_bytes(rows in 1usize..6, cols in 1usize..9, seed in prop::collection::vec(any::<f32>(), 54)) {
        let vals: Vec<f64> = seed
            .iter()
            .cycle()
            .take(rows * cols)
            .map(|&v| if v.is_finite() { v as f64 } else { 0.5 })
            .collect();
        let m = Matrix::from_vec(rows, cols, vals).unwrap();
        let bytes = encode_features(&m);
        let back = decode_features(&bytes).unwrap();
        prop_assert_eq!(encode_features(&back), bytes);
        prop_assert_eq!(back, m);
    }

    #[test]
    fn metadata_order_preserved(times in prop::collection::vec(0.0f64..1e6, 1..20)) {
        let recs: Vec<MetaRecord> = times
            .iter()
            .enumerate()
            .map(|(i, &t)| MetaRecord {
                image_id: format!("img{i}"),
                vehicle_id: format!("v{}", i % 3),
                camera_id: format!("c{}", i % 4),
                timestamp: t,
            })
            .collect();
        let back = decode_metadata(&encode_metadata(&recs)).unwrap();
        prop_assert_eq!(back, recs);
    }

    #[test]
    fn camera_graph_symmetric(edges in prop::collection::vec((0usize..6, 0usize..6, 0.1f64..100.0), 1..15)) {
        let mut g = CameraGraph::new();
        for (a, b, d) in edges {
            if a == b {
                continue;
            }
            let (a, b) = (format!("c{a}"), format!("c{b}"));
            if g.distance(&a, &b).is_none() {
                g.insert(&a, &b, d).unwrap();
            }
        }
        let parsed = decode_camera_graph(&encode_camera_graph(&g)).unwrap();
        let cams: Vec<String> = parsed.cameras().map(str::to_string).collect();
        for a in &cams {
            for b in &cams {
                prop_assert_eq!(parsed.distance(a, b), parsed.distance(b, a));
                prop_assert_eq!(parsed.distance(a, b), g.distance(a, b));
            }
        }
    }

    #[test]
    fn pdf_integrates_to_one(mu in -2.0f64..2.0, sigma in 0.1f64..1.5) {
        // substitute x = exp(u) and integrate over u with Simpson's rule
        let p = LogNormalParams::new(mu, sigma).unwrap();
        let (lo, hi) = (mu - 12.0 * sigma, mu + 12.0 * sigma);
        let n = 4000;
        let h = (hi - lo) / n as f64;
        let f = |u: f64| log_normal_pdf(u.exp(), &p).unwrap() * u.exp();
        let mut s = f(lo) + f(hi);
        for i in 1..n {
            s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        prop_assert!((s * h / 3.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn mle_is_a_maximum(xs in prop::collection::vec(0.01f64..100.0, 2..60), h in 1e-4f64..0.1) {
        prop_assume!(xs.iter().any(|&x| (x.ln() - xs[0].ln()).abs() > 1e-6));
        let fit = fit_log_normal(&xs).unwrap();
        let best = log_likelihood(&xs, &fit);
        for (dm, ds) in [(h, 0.0), (-h, 0.0), (0.0, h), (0.0, -h)] {
            if fit.sigma + ds <= 0.0 {
                continue;
            }
            let p = LogNormalParams::new(fit.mu + dm, fit.sigma + ds).unwrap();
            prop_assert!(log_likelihood(&xs, &p) <= best);
        }
    }

    #[test]
    fn affinity_decreasing_and_bounded(a in 0.0f64..5.0, b in 0.0f64..5.0, shape in 0.1f64..10.0, offset in 0.0f64..2.0) {
        prop_assume!(a < b);
        let (fa, fb) = (affinity_from_density(a, shape, offset), affinity_from_density(b, shape, offset));
        prop_assert!(fa > 0.0 && fa < 1.0 && fb > 0.0 && fb < 1.0);
        prop_assert!(fb <= fa);
    }

    #[test]
    fn st_samples_order_independent(seed in 0u64..500) {
        let out = reid_core::synth::generate(&reid_core::synth::SynthConfig {
            n_identities: 6,
            cameras: 4,
            sightings_per_identity: 4,
            embedding_dim: 4,
            seed,
            ..Default::default()
        })
        .unwrap();
        let metas = out.dataset.metas();
        let mut rev = metas.clone();
        rev.reverse();
        for rule in [PairingRule::Consecutive, PairingRule::AllPairs] {
            let a = collect_st_samples(&metas, &out.graph, rule).unwrap();
            let b = collect_st_samples(&rev, &out.graph, rule).unwrap();
            let sorted = |v: &[f64]| {
                let mut v = v.to_vec();
                v.sort_by(f64::total_cmp);
                v
            };
            prop_assert_eq!(sorted(&a.delta), sorted(&b.delta));
            prop_assert_eq!(sorted(&a.tau), sorted(&b.tau));
        }
    }

    #[test]
    fn rank_rows_are_permutations(d in matrix_strategy(1..6, 1..12)) {
        let abs = Matrix::from_fn(d.rows(), d.cols(), |i, j| d.get(i, j).abs().round());
        let dm = DistanceMatrix::new(
            abs.clone(),
            (0..d.rows()).map(|i| format!("q{i}")).collect(),
            (0..d.cols()).map(|j| format!("g{j}")).collect(),
        )
        .unwrap();
        let r = rank(&dm);
        for (i, row) in r.order.iter().enumerate() {
            let mut seen = row.clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..d.cols()).collect::<Vec<_>>());
            for w in row.windows(2) {
                let (a, b) = (abs.get(i, w[0]), abs.get(i, w[1]));
                prop_assert!(a < b || (a == b && w[0] < w[1]));
            }
        }
        prop_assert_eq!(rank(&dm), r);
    }

    #[test]
    fn rerank_output_nonnegative_finite(seed in any::<u64>(), nq in 1usize..4, ng in 2usize..10) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (qg, qq, gg) = common::random_blocks(nq, ng, 3, &mut rng);
        let out = k_reciprocal_rerank(&qg, &qq, &gg, RerankParams { k1: 3, k2: 2, lambda: 0.3 }).unwrap();
        prop_assert!(out.as_slice().iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn map_ignores_order_of_tail_irrelevant(ids in prop::collection::vec(0usize..3, 2..16), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        prop_assume!(ids.contains(&0));
        let q = MetaRecord { image_id: "q".into(), vehicle_id: "v0".into(), camera_id: "cq".into(), timestamp: 0.0 };
        let gallery: Vec<MetaRecord> = ids
            .iter()
            .enumerate()
            .map(|(i, v)| MetaRecord { image_id: format!("g{i}"), vehicle_id: format!("v{v}"), camera_id: "cg".into(), timestamp: 0.0 })
            .collect();
        let gr: Vec<&MetaRecord> = gallery.iter().collect();
        // distance = position; items after the last relevant one get shuffled slots
        let last_rel = ids.iter().rposition(|&v| v == 0).unwrap();
        let tail: Vec<usize> = (last_rel + 1..ids.len()).collect();
        let mut slots = tail.clone();
        slots.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let base: Vec<f64> = (0..ids.len()).map(|i| i as f64).collect();
        let mut permuted = base.clone();
        for (&item, &slot) in tail.iter().zip(&slots) {
            permuted[item] = slot as f64;
        }
        let report = |d: &[f64]| {
            let dm = DistanceMatrix::new(Matrix::from_rows(&[d]).unwrap(), vec!["q".into()], gr.iter().map(|g| g.image_id.clone()).collect()).unwrap();
            evaluate(&rank(&dm), &[&q], &gr, Protocol::CrossCamera, ids.len()).unwrap()
        };
        prop_assert_eq!(report(&base).map, report(&permuted).map);
    }

    #[test]
    fn cmc_monotone_bounded(lists in prop::collection::vec(prop::collection::vec(any::<bool>(), 0..15), 1..8), max_rank in 1usize..20) {
        let c = cmc(&lists, max_rank);
        prop_assert_eq!(c.len(), max_rank);
        prop_assert!(c.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!(c.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn junk_distances_do_not_matter(junk_moves in subsequence((0..8usize).collect::<Vec<_>>(), 0..8), shift in 0.0f64..50.0) {
        let q = MetaRecord { image_id: "q".into(), vehicle_id: "v0".into(), camera_id: "c0".into(), timestamp: 0.0 };
        let gallery: Vec<MetaRecord> = (0..8)
            .map(|i| MetaRecord {
                image_id: format!("g{i}"),
                vehicle_id: format!("v{}", i % 2),
                camera_id: format!("c{}", (i / 2) % 2),
                timestamp: 0.0,
            })
            .collect();
        let gr: Vec<&MetaRecord> = gallery.iter().collect();
        let base: Vec<f64> = (0..8).map(|i| i as f64 * 0.7 % 3.0).collect();
        let mut moved = base.clone();
        for &j in &junk_moves {
            if gallery[j].vehicle_id == "v0" && gallery[j].camera_id == "c0" {
                moved[j] += shift;
            }
        }
        let report = |d: &[f64]| {
            let dm = DistanceMatrix::new(Matrix::from_rows(&[d]).unwrap(), vec!["q".into()], gr.iter().map(|g| g.image_id.clone()).collect()).unwrap();
            evaluate(&rank(&dm), &[&q], &gr, Protocol::CrossCamera, 8).unwrap()
        };
        prop_assert_eq!(report(&base), report(&moved));
    }

    #[test]
    fn fuse_strictly_monotone(da in 0.0f64..5.0, bump in 0.01f64..2.0, omega in 0.01f64..1.0, d1 in 0.2f64..4.0, d2 in 0.2f64..4.0, t1 in 0.2f64..4.0, t2 in 0.2f64..4.0) {
        let p = LogNormalParams::new(0.0, 0.5).unwrap();
        let model = StModel { omega, ..StModel::with_defaults(p, p) };
        let q = MetaRecord { image_id: "q".into(), vehicle_id: "a".into(), camera_id: "c1".into(), timestamp: 0.0 };
        let fused = |d_a: f64, delta: f64, tau: f64| {
            let mut g = CameraGraph::new();
            g.insert("c1", "c2", delta).unwrap();
            let gal = MetaRecord { image_id: "g".into(), vehicle_id: "b".into(), camera_id: "c2".into(), timestamp: tau };
            let dm = DistanceMatrix::new(Matrix::from_rows(&[[d_a]]).unwrap(), vec!["q".into()], vec!["g".into()]).unwrap();
            fuse(&dm, &[&q], &[&gal], &g, &model, FuseOptions::default()).unwrap().values.get(0, 0)
        };
        prop_assert!(fused(da + bump, d1, t1) > fused(da, d1, t1));
        let ds = |d: f64| affinity_from_density(density(d, &model.dist), model.alpha1, model.alpha2);
        let dt = |t: f64| affinity_from_density(density(t, &model.time), model.beta1, model.beta2);
        if ds(d2) > ds(d1) {
            prop_assert!(fused(da, d2, t1) > fused(da, d1, t1));
        }
        if dt(t2) > dt(t1) {
            prop_assert!(fused(da, d1, t2) > fused(da, d1, t1));
        }
    }

    #[test]
    fn zero_omega_fuse_is_identity(vals in prop::collection::vec(0.0f64..5.0, 1..8), policy in prop_oneof![Just(SameCameraPolicy::ZeroDensity), Just(SameCameraPolicy::AppearanceOnly)]) {
        let p = LogNormalParams::new(0.0, 0.5).unwrap();
        let model = StModel { omega: 0.0, ..StModel::with_defaults(p, p) };
        let mut g = CameraGraph::new();
        g.insert("c1", "c2", 1.0).unwrap();
        let q = MetaRecord { image_id: "q".into(), vehicle_id: "a".into(), camera_id: "c1".into(), timestamp: 0.0 };
        let gallery: Vec<MetaRecord> = (0..vals.len())
            .map(|i| MetaRecord { image_id: format!("g{i}"), vehicle_id: "b".into(), camera_id: format!("c{}", 1 + i % 2), timestamp: i as f64 })
            .collect();
        let gr: Vec<&MetaRecord> = gallery.iter().collect();
        let dm = DistanceMatrix::new(Matrix::from_rows(&[&vals[..]]).unwrap(), vec!["q".into()], gallery.iter().map(|m| m.image_id.clone()).collect()).unwrap();
        let opts = FuseOptions { same_camera: policy, ..FuseOptions::default() };
        prop_assert_eq!(fuse(&dm, &[&q], &gr, &g, &model, opts).unwrap().values, dm.values);
    }
}
