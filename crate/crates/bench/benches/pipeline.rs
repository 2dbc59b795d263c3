use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use evgraph::diffengine::{DiffArray, Tape};
use evgraph::event_io::{Event, EventStream, Polarity};
use evgraph::gnn::{Activation, GConvLayer};
use evgraph::graph_build::{build_graph, GraphBatch, GraphParams};
use evgraph::graph_pool::{max_pool_graph, PoolParams};
use evgraph::params::{Ctx, ParamStore};
use evgraph::sampling::{sample_events, SamplingParams};
use evgraph::seed;
use rand::Rng;

/// Moving-edge stream on a 240x180 sensor over 100 ms.
fn stream(n: usize) -> EventStream {
    let mut rng = seed::rng(1, &[]);
    let events = (0..n)
        .map(|i| {
            let t = (i as u64 * 100_000) / n as u64;
            let x = ((t / 500) as u16 + rng.gen_range(0..20)) % 240;
            let p = if rng.gen_bool(0.5) {
                Polarity::On
            } else {
                Polarity::Off
            };
            Event::new(x, rng.gen_range(0..180), t, p)
        })
        .collect();
    EventStream::new(240, 180, events, None).unwrap()
}

fn bench(c: &mut Criterion) {
    let s = stream(50_000);
    let window = s.window(0.0, 33_333.0);
    let sampling = SamplingParams::default();
    c.bench_function("sample_events 16k", |b| {
        b.iter(|| sample_events(black_box(window), &sampling))
    });

    let sampled = sample_events(window, &sampling);
    let params = GraphParams::default();
    let extent = evgraph::graph_build::Extent::new(180, 240);
    c.bench_function("build_graph", |b| {
        b.iter(|| build_graph(black_box(&sampled), &params, extent).unwrap())
    });

    let graph = build_graph(&sampled, &params, extent).unwrap();
    let (batch, _, _) = GraphBatch::single(&graph);
    let mut store = ParamStore::new();
    let mut rng = seed::rng(2, &[]);
    let layer = GConvLayer::new(
        &mut store,
        &mut rng,
        "g",
        32,
        32,
        [5, 5],
        1,
        true,
        Activation::Relu,
    )
    .unwrap();
    let x = DiffArray::full(&[batch.num_nodes(), 32], 0.5);
    c.bench_function("gconv 32->32 forward+backward", |b| {
        b.iter_batched(
            || store.clone(),
            |mut store| {
                let mut ctx = Ctx::new(&mut store, true, 0);
                let xv = ctx.tape.leaf(x.clone().requires_grad());
                let y = layer.forward(&mut ctx, &batch, xv).unwrap();
                let loss = ctx.tape.sum(y).unwrap();
                ctx.tape.backward(loss).unwrap();
            },
            BatchSize::SmallInput,
        )
    });

    c.bench_function("max_pool_graph 4x4", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            max_pool_graph(&mut tape, &batch, xv, PoolParams { s_h: 4, s_w: 4 }).unwrap()
        })
    });

    let clip = DiffArray::full(&[2, 16, 16, 16, 8], 0.1);
    let w = DiffArray::full(&[32, 16, 3, 3, 3], 0.01);
    c.bench_function("conv3d 16->32 on 16x16x8", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let (xv, wv) = (tape.leaf(clip.clone()), tape.leaf(w.clone()));
            tape.conv3d(xv, wv).unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench
}
criterion_main!(benches);
