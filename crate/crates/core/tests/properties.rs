use std::rc::Rc;

use chrono::{TimeZone, Utc};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surge_core::geo_graph::{
    haversine, pair_stats, pearson, sweep_from_stats, Edge, Station, StationGraph,
};
use surge_core::ingest::{make_windows, ScalerParams, SeriesStorm};
use surge_core::layers::{GatLayer, GatMerge, GcnLayer, GcnNorm, GraphContext, ParamStore};
use surge_core::model::{ModelConfig, SurgeModel, Variant};
use surge_core::numerics::{Activation, Tape, Tensor};

fn station(id: usize, lat: f64, lon: f64) -> Station {
    Station {
        node_id: id,
        name: format!("s{id}"),
        agency: "test".into(),
        lat,
        lon,
    }
}

fn random_graph(n: usize, seed: u64) -> StationGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stations = (0..n)
        .map(|i| {
            station(
                i,
                25.0 + rng.random_range(0.0..5.0),
                -90.0 + rng.random_range(0.0..5.0),
            )
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(0.4) {
                edges.push(Edge {
                    i,
                    j,
                    weight: rng.random_range(0.81..1.0),
                });
            }
        }
    }
    StationGraph::from_edges(stations, edges, 0.8, 500.0).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn series_strategy(len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-10.0f64..10.0, len),
        prop::collection::vec(-10.0f64..10.0, len),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_softmax_rows_are_distributions(
        rows in 1usize..6,
        cols in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mask: Vec<bool> = (0..rows * cols).map(|_| rng.random_bool(0.6)).collect();
        for r in 0..rows {
            mask[r * cols + rng.random_range(0..cols)] = true;
        }
        let mut tape = Tape::new();
        let x = tape.constant(random_tensor(&mut rng, &[rows, cols]).map(|v| v * 50.0));
        let y = tape.softmax_masked(x, Rc::from(mask.as_slice())).unwrap();
        let y = tape.value(y);
        for r in 0..rows {
            let row = &y.data()[r * cols..(r + 1) * cols];
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for (c, &v) in row.iter().enumerate() {
                if mask[r * cols + c] {
                    prop_assert!(v >= 0.0);
                } else {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn pearson_is_symmetric_and_bounded((x, y) in series_strategy(40)) {
        match (pearson(&x, &y), pearson(&y, &x)) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a, b);
                prop_assert!((-1.0..=1.0).contains(&a));
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "asymmetric failure"),
        }
    }

    #[test]
    fn pearson_is_affine_invariant(
        (x, y) in series_strategy(30),
        a in 0.1f64..5.0,
        b in -3.0f64..3.0,
    ) {
        let scaled: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let r1 = pearson(&x, &y).unwrap();
        let r2 = pearson(&scaled, &y).unwrap();
        prop_assert!((r1 - r2).abs() < 1e-9);
    }

    #[test]
    fn haversine_is_a_symmetric_distance(
        lat1 in -80.0f64..80.0, lon1 in -179.0f64..179.0,
        lat2 in -80.0f64..80.0, lon2 in -179.0f64..179.0,
    ) {
        let d = haversine((lat1, lon1), (lat2, lon2));
        prop_assert!(d >= 0.0);
        prop_assert!(d <= std::f64::consts::PI * 6371.0 + 1e-6);
        prop_assert_eq!(d, haversine((lat2, lon2), (lat1, lon1)));
    }

    #[test]
    fn built_adjacency_is_symmetric_with_zero_diagonal(n in 2usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stations: Vec<Station> = (0..n)
            .map(|i| station(i, 28.0 + rng.random_range(0.0..6.0), -90.0 + rng.random_range(0.0..6.0)))
            .collect();
        let base: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let series: Vec<Vec<Option<f64>>> = (0..n)
            .map(|_| {
                let w = rng.random_range(0.0..1.0);
                base.iter().map(|b| Some(w * b + (1.0 - w) * rng.random_range(-1.0..1.0))).collect()
            })
            .collect();
        let stats = pair_stats(&stations, &series).unwrap();
        let graph = StationGraph::from_edges(stations, stats.edges(0.5, 400.0), 0.5, 400.0).unwrap();
        let a = graph.adjacency();
        for i in 0..n {
            prop_assert_eq!(a[i * n + i], 0.0);
            for j in 0..n {
                prop_assert_eq!(a[i * n + j], a[j * n + i]);
            }
        }
        for e in graph.edges() {
            prop_assert!(e.i < e.j);
            prop_assert!(e.weight > 0.5);
        }
    }

    #[test]
    fn threshold_sweep_is_monotone(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 6;
        let stations: Vec<Station> = (0..n)
            .map(|i| station(i, 28.0 + rng.random_range(0.0..8.0), -90.0 + rng.random_range(0.0..8.0)))
            .collect();
        let base: Vec<f64> = (0..100).map(|_| rng.random_range(-1.0..1.0)).collect();
        let series: Vec<Vec<Option<f64>>> = (0..n)
            .map(|_| base.iter().map(|b| Some(b + rng.random_range(-0.8..0.8))).collect())
            .collect();
        let stats = pair_stats(&stations, &series).unwrap();
        let rho = [0.0, 0.3, 0.5, 0.7, 0.9];
        let dist = [100.0, 250.0, 500.0, 750.0, 1000.0];
        let rows = sweep_from_stats(&stats, &rho, &dist);
        let at = |r: usize, d: usize| rows[r * dist.len() + d].edges;
        for r in 0..rho.len() {
            for d in 0..dist.len() {
                if r + 1 < rho.len() {
                    prop_assert!(at(r + 1, d) <= at(r, d));
                }
                if d + 1 < dist.len() {
                    prop_assert!(at(r, d + 1) >= at(r, d));
                }
            }
        }
    }

    #[test]
    fn scaler_round_trip(values in prop::collection::vec(-5.0f64..5.0, 2..50), probe in -20.0f64..20.0) {
        prop_assume!(values.iter().any(|&v| v != values[0]));
        let storm = vec![values.clone()];
        let scaler = ScalerParams::fit(&[storm.as_slice()]).unwrap();
        let y = scaler.apply(0, probe);
        prop_assert!((scaler.invert(0, y) - probe).abs() < 1e-9);
        for &v in &values {
            let s = scaler.apply(0, v);
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&s));
        }
    }

    #[test]
    fn windows_are_exact_slices(
        len in 10usize..40,
        n in 1usize..4,
        w_in in 1usize..6,
        w_out in 1usize..6,
        stride in 1usize..3,
    ) {
        let start = Utc.with_ymd_and_hms(2022, 9, 1, 0, 0, 0).unwrap();
        let values: Vec<Vec<f64>> = (0..n).map(|k| (0..len).map(|t| (k * 1000 + t) as f64).collect()).collect();
        let storm = SeriesStorm { storm_id: "s".into(), start, values: values.clone() };
        let ds = make_windows(&[storm], w_in, w_out, stride);
        let expected = if len >= w_in + w_out { (len - w_in - w_out) / stride + 1 } else { 0 };
        prop_assert_eq!(ds.len(), expected);
        for w in 0..ds.len() {
            let s0 = w * stride;
            prop_assert_eq!(ds.provenance[w].start, start + chrono::Duration::hours(s0 as i64));
            for k in 0..n {
                for t in 0..w_in {
                    prop_assert_eq!(ds.input(w, t, k), values[k][s0 + t]);
                }
                for l in 0..w_out {
                    prop_assert_eq!(ds.target(w, l, k), values[k][s0 + w_in + l]);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn model_is_permutation_equivariant(seed in any::<u64>(), variant_idx in 0usize..6) {
        let n = 5;
        let variant = Variant::ABLATION[variant_idx];
        let graph = random_graph(n, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let config = ModelConfig {
            n_stations: n,
            w_in: 6,
            w_out: 3,
            variant,
            gat_edge_bias: true,
            seed,
            ..Default::default()
        };
        let model = SurgeModel::new(config).unwrap();
        let x = random_tensor(&mut rng, &[2, 6, n]);
        // station perm[k] of the original sits at position k after permuting
        let permute = |t: &Tensor, steps: usize| {
            let mut out = t.clone();
            for b in 0..2 {
                for s in 0..steps {
                    for k in 0..n {
                        out.set(&[b, s, k], t.at(&[b, s, perm[k]]));
                    }
                }
            }
            out
        };
        let y = model.predict(&model.graph_context(&graph).unwrap(), &x).unwrap();
        let permuted_graph = graph.permuted(&perm);
        let y_perm = model.predict(&model.graph_context(&permuted_graph).unwrap(), &permute(&x, 6)).unwrap();
        prop_assert!(y_perm.max_abs_diff(&permute(&y, 3)) < 1e-12);
    }

    #[test]
    fn spatial_layers_are_one_hop_local(seed in any::<u64>()) {
        // Path 0–1–2–3: node 0 must ignore node 2 and 3 after one layer.
        let stations = (0..4).map(|i| station(i, 29.0 + 0.1 * i as f64, -90.0)).collect();
        let edges = (0..3).map(|i| Edge { i, j: i + 1, weight: 0.9 }).collect();
        let graph = StationGraph::from_edges(stations, edges, 0.8, 500.0).unwrap();
        let ctx = GraphContext::new(&graph, GcnNorm::Symmetric, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gcn = GcnLayer::init(&mut store, "gcn", 3, 4, Activation::Tanh, &mut rng);
        let gat = GatLayer::init(&mut store, "gat", 3, 2, 2, GatMerge::Concat, Activation::Tanh, false, &mut rng);
        let x = random_tensor(&mut rng, &[4, 3]);
        let mut far = x.clone();
        for f in 0..3 {
            far.set(&[2, f], rng.random_range(-5.0..5.0));
            far.set(&[3, f], rng.random_range(-5.0..5.0));
        }
        let run = |input: &Tensor| {
            let mut tape = Tape::new();
            let p = store.bind_frozen(&mut tape);
            let gb = ctx.bind(&mut tape);
            let xv = tape.constant(input.clone());
            let a = gcn.forward(&mut tape, &p, &gb, xv).unwrap();
            let b = gat.forward(&mut tape, &p, &gb, xv).unwrap();
            (tape.value(a).clone(), tape.value(b).clone())
        };
        let (g0, a0) = run(&x);
        let (g1, a1) = run(&far);
        for f in 0..4 {
            prop_assert_eq!(g0.at(&[0, f]), g1.at(&[0, f]));
            prop_assert_eq!(a0.at(&[0, f]), a1.at(&[0, f]));
        }
    }

    #[test]
    fn attention_is_normalized_over_the_neighbourhood(seed in any::<u64>(), edge_bias in any::<bool>()) {
        let n = 6;
        let graph = random_graph(n, seed);
        let ctx = GraphContext::new(&graph, GcnNorm::Symmetric, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gat = GatLayer::init(&mut store, "gat", 2, 3, 3, GatMerge::Average, Activation::Relu, edge_bias, &mut rng);
        let groups = 3;
        let x = random_tensor(&mut rng, &[groups * n, 2]);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let gb = ctx.bind(&mut tape);
        let xv = tape.constant(x);
        for k in 0..gat.num_heads() {
            let out = gat.head_forward(&mut tape, &p, &gb, xv, k).unwrap();
            let alpha = tape.value(out.alpha).clone();
            for row in 0..groups * n {
                let i = row % n;
                let total: f64 = (0..n).map(|j| alpha.at(&[row, j])).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                for j in 0..n {
                    let allowed = i == j || graph.weight(i, j) > 0.0;
                    if !allowed {
                        prop_assert_eq!(alpha.at(&[row, j]), 0.0);
                    }
                }
            }
        }
    }
}
