mod common;

use approx::assert_relative_eq;
use evgraph::diffengine::{DiffArray, Tape};
use evgraph::event_io::{read_stream, write_stream, Event, EventStream, Polarity, StreamFormat};
use evgraph::gnn::{spline_basis, SplineKernel};
use evgraph::graph_build::{
    build_graph, compute_pseudo, radius_edges, Extent, GraphBatch, GraphParams,
};
use evgraph::graph_pool::{max_pool_graph, PoolParams};
use evgraph::params::{Checkpoint, ParamStore};
use evgraph::sampling::{sample_events, SamplingParams};
use evgraph::seed;
use evgraph::train::{augment_graph, AugmentParams};
use proptest::prelude::*;

fn event() -> impl Strategy<Value = Event> {
    (0u16..32, 0u16..24, 0u64..50_000, any::<bool>()).prop_map(|(x, y, t, on)| {
        Event::new(x, y, t, if on { Polarity::On } else { Polarity::Off })
    })
}

fn events(max: usize) -> impl Strategy<Value = Vec<Event>> {
    prop::collection::vec(event(), 1..max)
}

fn graph_params() -> impl Strategy<Value = GraphParams> {
    (
        1.0f64..4.0,
        prop::sample::select(vec![0.0, 0.5e-5, 1e-3]),
        1usize..40,
    )
        .prop_map(|(radius, beta, d_max)| GraphParams {
            radius,
            beta,
            d_max,
            ..GraphParams::default()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampling_keeps_a_subset_in_order(evs in events(400), k_max in 1usize..20, s in any::<u64>()) {
        let stream = EventStream::new(32, 24, evs, None).unwrap();
        let params = SamplingParams { k_max, rng_seed: s };
        let out = sample_events(stream.events(), &params);
        prop_assert!(!out.is_empty() && out.len() <= stream.len());
        let mut cursor = 0;
        for e in &out {
            let found = stream.events()[cursor..].iter().position(|x| x == e);
            prop_assert!(found.is_some());
            cursor += found.unwrap() + 1;
        }
        prop_assert_eq!(out, sample_events(stream.events(), &params));
        if stream.len() <= k_max {
            prop_assert_eq!(sample_events(stream.events(), &params).len(), 1);
        }
    }

    #[test]
    fn radius_edges_respect_radius_and_degree(evs in events(300), p in graph_params()) {
        let g = build_graph(&evs, &p, Extent::new(24, 32)).unwrap();
        let mut degree = vec![0; evs.len()];
        for &(i, j) in &g.edges {
            prop_assert!(i != j);
            degree[i] += 1;
            let (a, b) = (g.coords[i], g.coords[j]);
            let d = (p.alpha * ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)) + p.beta * (a[2] - b[2]).powi(2)).sqrt();
            prop_assert!(d <= p.radius);
        }
        prop_assert!(degree.iter().all(|&d| d <= p.d_max));
        prop_assert!(g.pseudo.iter().all(|u| (0.0..=1.0).contains(&u[0]) && (0.0..=1.0).contains(&u[1])));
    }

    #[test]
    fn uncapped_radius_graph_is_symmetric(evs in events(200), radius in 1.0f64..4.0) {
        let coords: Vec<[f64; 3]> = evs.iter().map(|e| [f64::from(e.x), f64::from(e.y), e.t as f64]).collect();
        let p = GraphParams { radius, d_max: usize::MAX, ..GraphParams::default() };
        let edges = radius_edges(&coords, &p);
        let set: std::collections::HashSet<_> = edges.iter().copied().collect();
        prop_assert!(edges.iter().all(|&(i, j)| set.contains(&(j, i))));
    }

    #[test]
    fn spline_basis_is_a_partition_of_unity(
        m in 1usize..4,
        extra in (0usize..5, 0usize..5),
        u in (0.0f64..=1.0, 0.0f64..=1.0),
    ) {
        let kernel = SplineKernel::new(m, vec![m + 1 + extra.0, m + 1 + extra.1], 1, 1).unwrap();
        let basis = spline_basis(&[u.0, u.1], &kernel).unwrap();
        prop_assert!(basis.len() <= kernel.max_entries());
        prop_assert!(basis.iter().all(|(z, v)| *v >= 0.0 && z[0] < kernel.kernel_size[0] && z[1] < kernel.kernel_size[1]));
        let sum: f64 = basis.iter().map(|(_, v)| v).sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn pooling_shrinks_graphs_and_keeps_maxima(seed in any::<u64>(), s_h in 1usize..5, s_w in 1usize..5) {
        let mut r = common::rng(seed);
        let extent = Extent::new(12, 16);
        let g = common::random_graph(&mut r, 1..60, extent, 2, 2.5);
        let (batch, x) = common::batch_of(&[g]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let (coarse, y) = max_pool_graph(&mut tape, &batch, xv, PoolParams::new(s_h, s_w).unwrap()).unwrap();
        prop_assert!(coarse.num_nodes() <= batch.num_nodes());
        prop_assert!(coarse.num_nodes() <= extent.pooled(s_h, s_w).cells());
        prop_assert!(coarse.edges.iter().all(|(a, b)| a != b));
        let global = |v: &[f64], c: usize| v.iter().skip(c).step_by(2).copied().fold(f64::NEG_INFINITY, f64::max);
        for c in 0..2 {
            prop_assert_eq!(global(tape.data(y), c), global(x.data(), c));
        }
    }

    #[test]
    fn augmentation_preserves_structure(seed in any::<u64>(), rotate in 0.0f64..30.0) {
        let mut r = common::rng(seed);
        let g = common::random_graph(&mut r, 2..50, Extent::new(20, 30), 1, 3.0);
        let params = AugmentParams { scale: [0.8, 1.0], flip_x: 0.5, flip_y: 0.5, rotate_deg: rotate };
        let a = augment_graph(&g, &params, &mut seed::rng(seed, &[1]));
        prop_assert_eq!(&a.edges, &g.edges);
        prop_assert_eq!(&a.features, &g.features);
        prop_assert_eq!(a.coords.len(), g.coords.len());
        prop_assert!(a.validate().is_ok());
        prop_assert!(a.coords.iter().zip(&g.coords).all(|(p, q)| p[2] == q[2]));
        prop_assert_eq!(a.pseudo, compute_pseudo(&a.coords, &a.edges));
    }

    #[test]
    fn stream_files_round_trip(evs in events(200)) {
        let stream = EventStream::new(32, 24, evs, Some(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (name, format) in [("s.csv", StreamFormat::Csv), ("s.bin", StreamFormat::Bin)] {
            let path = dir.path().join(name);
            write_stream(&stream, &path, format).unwrap();
            let back = read_stream(&path, format).unwrap();
            prop_assert_eq!(back.events(), stream.events());
            prop_assert_eq!((back.width(), back.height()), (32, 24));
        }
    }

    #[test]
    fn checkpoints_round_trip(values in prop::collection::vec(-1e6f64..1e6, 1..50), trainable in any::<bool>()) {
        let mut params = ParamStore::new();
        params.add("layer.weight", DiffArray::vector(values.clone()), trainable).unwrap();
        params.add("layer.bn.running_var", DiffArray::full(&[2, 3], 0.5), false).unwrap();
        let ckpt = Checkpoint { config: "num_classes = 2".into(), params };
        let mut bytes = Vec::new();
        ckpt.encode(&mut bytes).unwrap();
        let back = Checkpoint::decode(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(back.config, ckpt.config);
        prop_assert_eq!(back.params, ckpt.params);
        prop_assert!(Checkpoint::decode(&mut &bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn cross_entropy_is_non_negative(logits in prop::collection::vec(-20.0f64..20.0, 2..8), pick in any::<prop::sample::Index>()) {
        let q = logits.len();
        let label = pick.index(q);
        let mut tape = Tape::new();
        let l = tape.constant(&[1, q], logits.clone()).unwrap();
        let loss = tape.cross_entropy(l, &[label]).unwrap();
        let v = tape.data(loss)[0];
        prop_assert!(v >= 0.0);
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        assert_relative_eq!(v, lse - logits[label], epsilon = 1e-12);
    }
}

#[test]
fn cross_entropy_vanishes_at_the_one_hot_limit() {
    let mut tape = Tape::new();
    let l = tape.constant(&[1, 3], vec![60.0, 0.0, 0.0]).unwrap();
    let loss = tape.cross_entropy(l, &[0]).unwrap();
    assert!(tape.data(loss)[0] < 1e-20);
}

#[test]
fn batching_round_trips_graphs() {
    let mut r = common::rng(4);
    let graphs: Vec<_> = (0..3)
        .map(|_| common::random_graph(&mut r, 1..30, Extent::new(10, 10), 2, 2.0))
        .collect();
    let refs: Vec<_> = graphs.iter().collect();
    let (batch, features, channels) = GraphBatch::from_graphs(&refs).unwrap();
    assert_eq!(batch.to_graphs(&features, channels), graphs);
}

#[test]
fn one_small_step_lowers_the_sample_loss() {
    use evgraph::params::Ctx;
    use evgraph::train::{adam_step, build_sequences, AdamConfig, AdamState, Model, ModelConfig};
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut config = ModelConfig::load(&root.join("desk_object.toml")).unwrap();
    config.train.dropout_p = 0.0;
    let mut spec = evgraph::event_io::SynthSpec::load(&root.join("synth/two_class.toml")).unwrap();
    spec.streams_per_class = 5;
    let streams = evgraph::event_io::synth_dataset(&spec, 11).unwrap();
    let samples = build_sequences(&streams, &config, 11).unwrap();
    for (k, sample) in samples.iter().enumerate() {
        let (model, mut store) = Model::build(&config, k as u64).unwrap();
        let refs: Vec<_> = sample.graphs.iter().collect();
        let (batch, features, channels) = GraphBatch::from_graphs(&refs).unwrap();
        let x = DiffArray::new(vec![batch.num_nodes(), channels], features).unwrap();
        let label = sample.label.unwrap();
        let loss_of = |store: &mut ParamStore, backward: bool| {
            let mut ctx = Ctx::new(store, true, 0);
            let xv = ctx.tape.leaf(x.clone());
            let logits = model.forward(&mut ctx, &batch, xv).unwrap();
            let loss = ctx.tape.cross_entropy(logits, &[label]).unwrap();
            let value = ctx.tape.data(loss)[0];
            let grads = if backward {
                ctx.tape.backward(loss).unwrap();
                ctx.take_grads()
            } else {
                Vec::new()
            };
            (value, grads)
        };
        let (before, grads) = loss_of(&mut store, true);
        for (p, g) in store.params_mut().iter_mut().zip(grads) {
            if let Some(g) = g {
                let mut state = AdamState::new(g.len());
                adam_step(
                    p.value.data_mut(),
                    &g,
                    &mut state,
                    1e-4,
                    &AdamConfig::default(),
                )
                .unwrap();
            }
        }
        let (after, _) = loss_of(&mut store, false);
        assert!(after < before, "sample {k}: {before} -> {after}");
    }
}
