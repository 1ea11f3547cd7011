use hdpipe::affinity::{compute_binding, Topology};
use hdpipe::compare::compare_predictions;
use hdpipe::hdc::{
    bind, bundle, hardsign, permute, random_bipolar, random_features, reference_forward,
    synthetic_model,
};
use hdpipe::model_io::{decode_dataset, decode_model, encode_dataset, encode_model};
use hdpipe::pipeline::row_range;
use hdpipe::tiling::{block_multiply_accumulate, tile_matrix, untile, BlockSpec, KernelShape, Order};
use hdpipe::{Batch, Engine, Matrix, PipelineConfig, TileSizes, Variant};
use proptest::prelude::*;
use std::path::Path;

fn order() -> impl Strategy<Value = Order> {
    prop_oneof![Just(Order::RowMajor), Just(Order::ColMajor)]
}

proptest! {
    #[test]
    fn hardsign_is_bipolar_with_ties_up(v in prop::collection::vec(-3.0f32..3.0, 1..200)) {
        let h = hardsign(&v).unwrap();
        for (x, s) in v.iter().zip(h.iter()) {
            prop_assert_eq!(*s, if *x >= 0.0 { 1.0 } else { -1.0 });
        }
    }

    #[test]
    fn bind_is_self_inverse(d in 1usize..3000, s1 in any::<u64>(), s2 in any::<u64>()) {
        let a = random_bipolar(d, s1);
        let b = random_bipolar(d, s2);
        prop_assert_eq!(bind(&bind(&a, &b).unwrap(), &b).unwrap(), a.clone());
        prop_assert!(bind(&a, &a).unwrap().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn bundle_commutes(d in 1usize..500, s1 in any::<u64>(), s2 in any::<u64>()) {
        let a = random_bipolar(d, s1);
        let b = random_bipolar(d, s2);
        prop_assert_eq!(bundle(&a, &b).unwrap(), bundle(&b, &a).unwrap());
    }

    #[test]
    fn permute_composes(d in 1usize..500, i in 0usize..2000, j in 0usize..2000, s in any::<u64>()) {
        let h = random_bipolar(d, s);
        prop_assert_eq!(permute(&permute(&h, i), j), permute(&h, (i + j) % d));
        prop_assert_eq!(permute(&h, d), h.clone());
        // Right rotation: element 0 lands at index i mod d.
        prop_assert_eq!(permute(&h, i)[i % d], h[0]);
    }

    #[test]
    fn tiling_round_trip(
        rows in 1usize..100, cols in 1usize..100,
        br in 1usize..40, bc in 1usize..40,
        inter in order(), intra in order(),
    ) {
        let m = Matrix::from_fn(rows, cols, |r, c| (r * 131 + c) as f32);
        let t = tile_matrix(&m, BlockSpec::new(br, bc, inter, intra).unwrap());
        prop_assert_eq!(untile(&t), m.clone());
        for r in 0..rows {
            for c in 0..cols {
                prop_assert_eq!(t.storage()[t.index_of(r, c)], m.get(r, c));
            }
        }
    }

    #[test]
    fn kernel_matches_dense_product(m in 1usize..40, inner in 1usize..70, n in 1usize..40, seed in any::<u64>()) {
        let a = random_features(m, inner, seed);
        let bt = random_features(n, inner, seed ^ 1); // column-major b == row-major bᵀ
        let mut acc = vec![0.5f32; m * n];
        block_multiply_accumulate(a.as_slice(), bt.as_slice(), &mut acc, KernelShape::packed(m, inner, n));
        for i in 0..m {
            for j in 0..n {
                let exact: f64 = 0.5 + (0..inner).map(|p| a.get(i, p) as f64 * bt.get(j, p) as f64).sum::<f64>();
                let scale: f64 = (0..inner).map(|p| (a.get(i, p) as f64 * bt.get(j, p) as f64).abs()).sum::<f64>() + 1.0;
                prop_assert!((acc[i * n + j] as f64 - exact).abs() <= 1e-5 * scale);
            }
        }
    }

    #[test]
    fn row_ranges_partition(rows in 1usize..10_000, workers in 1usize..64) {
        prop_assume!(rows >= workers);
        let mut next = 0;
        for t in 0..workers {
            let r = row_range(t, workers, rows);
            prop_assert_eq!(r.start, next);
            prop_assert!(r.len() >= rows / workers);
            next = r.end;
        }
        prop_assert_eq!(next, rows);
    }

    #[test]
    fn binding_plan_structure(cores_per_node in 1usize..17, nodes in 1usize..9, smt in 1usize..3, frac in 0.0f64..1.0) {
        let gamma = cores_per_node * nodes;
        let topo = Topology::synthetic(gamma, nodes, smt).unwrap();
        let max_workers = gamma * smt / 2;
        prop_assume!(max_workers >= 1);
        let workers = 1 + ((max_workers - 1) as f64 * frac) as usize;
        let plan = compute_binding(&topo, workers).unwrap();
        let mut ids: Vec<usize> = plan.stage1.iter().chain(&plan.stage2).copied().collect();
        ids.sort_unstable();
        prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(ids.iter().all(|&c| c < gamma * smt));
        if ids.iter().any(|&c| c >= gamma) {
            prop_assert!(ids[..gamma].iter().enumerate().all(|(i, &c)| i == c));
        }
        if cores_per_node % 2 == 0 {
            for t in 0..workers {
                prop_assert_eq!(topo.node_of(plan.stage1[t]), topo.node_of(plan.stage2[t]));
            }
        }
        // The OS translation is a permutation of the canonical ids.
        let mut os = plan.stage1_os(&topo);
        os.extend(plan.stage2_os(&topo));
        os.sort_unstable();
        prop_assert_eq!(os, ids);
    }

    #[test]
    fn model_bytes_round_trip(f in 1usize..20, d in 1usize..80, k in 2usize..6, seed in any::<u64>()) {
        let model = synthetic_model(f, d, k, seed).unwrap();
        let bytes = encode_model(&model).unwrap();
        prop_assert_eq!(bytes.len(), 20 + 4 * (f * d + d * k));
        let back = decode_model(Path::new("p"), &bytes).unwrap();
        prop_assert_eq!(encode_model(&back).unwrap(), bytes);
    }

    #[test]
    fn dataset_bytes_round_trip(n in 1usize..30, f in 1usize..20, labeled in any::<bool>(), seed in any::<u64>()) {
        let labels = labeled.then(|| (0..n).map(|i| (i * 7) % 5).collect());
        let batch = Batch::new(random_features(n, f, seed), labels).unwrap();
        let back = decode_dataset(Path::new("p"), &encode_dataset(&batch).unwrap()).unwrap();
        prop_assert_eq!(back, batch);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pipeline_matches_reference(
        n in 1usize..90, f in 1usize..50, d in 1usize..400, k in 2usize..12,
        workers in 1usize..5, tile in prop_oneof![Just(16usize), Just(32)],
        r in prop_oneof![Just(1usize), Just(8), Just(16)],
        large in any::<bool>(), tiling in any::<bool>(), seed in any::<u64>(),
    ) {
        let variant = if large { Variant::Large } else { Variant::Small };
        prop_assume!(variant == Variant::Small || n >= workers);
        let model = synthetic_model(f, d, k, seed).unwrap();
        let x = random_features(n, f, seed.wrapping_add(1));
        let reference = reference_forward(&x, &model).unwrap();
        let cfg = PipelineConfig::new(workers, variant)
            .with_tiles(TileSizes::uniform(tile))
            .with_chunk_r(r)
            .with_tiling(tiling);
        let out = Engine::new(&model, cfg).unwrap().infer(&x).unwrap();
        let agreement = compare_predictions(&reference.scores, &reference.predictions, &out.predictions, d);
        prop_assert!(agreement.ok(), "{:?}", agreement);
        prop_assert_eq!(out.stats.elements, n * d);
    }
}

#[test]
fn exhaustive_binding_up_to_128_cores() {
    for gamma in 1..=128 {
        for eta in (1..=gamma).filter(|e| gamma % e == 0) {
            let topo = Topology::synthetic(gamma, eta, 2).unwrap();
            for workers in 1..=gamma {
                let plan = compute_binding(&topo, workers).unwrap();
                let mut ids: Vec<usize> = plan.stage1.iter().chain(&plan.stage2).copied().collect();
                ids.sort_unstable();
                assert!(ids.windows(2).all(|w| w[0] < w[1]), "{gamma} {eta} {workers}");
                assert!(*ids.last().unwrap() < 2 * gamma);
                if (gamma / eta) % 2 == 0 {
                    assert!((0..workers).all(|t| topo.node_of(plan.stage1[t]) == topo.node_of(plan.stage2[t])));
                }
            }
        }
    }
}

#[test]
fn near_orthogonality_of_random_hypervectors() {
    let d = 10_000;
    for p in 0..100u64 {
        let a = random_bipolar(d, 3 * p);
        let b = random_bipolar(d, 3 * p + 1);
        let dot: f32 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
        assert!((dot / d as f32).abs() < 0.05, "pair {p}: {}", dot / d as f32);
    }
}
