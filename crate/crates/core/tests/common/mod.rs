//! Helpers shared by the integration tests.
#![allow(dead_code)]

use evgraph::diffengine::{DiffArray, Var};
use evgraph::graph_build::{
    compute_pseudo, radius_edges, EventGraph, Extent, GraphBatch, GraphParams,
};
use evgraph::params::{Ctx, ParamStore};
use evgraph::seed::{self, Rng};
use evgraph::Result;
use rand::Rng as _;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> Rng {
    seed::rng(seed, &[0x7E57])
}

pub fn random_array(rng: &mut Rng, shape: &[usize]) -> DiffArray {
    let n = shape.iter().product();
    DiffArray::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Graph of a random node count in `nodes` on `extent` with radius edges and random
/// `channels`-dimensional features.
pub fn random_graph(
    rng: &mut Rng,
    nodes: std::ops::Range<usize>,
    extent: Extent,
    channels: usize,
    radius: f64,
) -> EventGraph {
    let n = rng.gen_range(nodes);
    let coords: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                rng.gen_range(0.0..extent.width as f64),
                rng.gen_range(0.0..extent.height as f64),
                rng.gen_range(0.0..100.0),
            ]
        })
        .collect();
    let params = GraphParams {
        radius,
        beta: 1e-4,
        ..GraphParams::default()
    };
    let edges = radius_edges(&coords, &params);
    EventGraph {
        pseudo: compute_pseudo(&coords, &edges),
        features: (0..n * channels)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
        channels,
        coords,
        edges,
        extent,
    }
}

pub fn batch_of(graphs: &[EventGraph]) -> (GraphBatch, DiffArray) {
    let refs: Vec<_> = graphs.iter().collect();
    let (batch, features, channels) = GraphBatch::from_graphs(&refs).unwrap();
    let n = batch.num_nodes();
    (batch, DiffArray::new(vec![n, channels], features).unwrap())
}

/// `||a - b|| / max(||a||, ||b||)`, with the denominator floored at `1e-6`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / norm(a).max(norm(b)).max(1e-6)
}

/// Analytic versus central-difference gradient of `sum(r * f(inputs))` for a
/// fixed random `r`, over every input element and every trainable parameter.
/// Returns the relative error of the concatenated gradients.
pub fn gradcheck<F>(store: &mut ParamStore, inputs: &[DiffArray], seed: u64, f: F) -> f64
where
    F: Fn(&mut Ctx, &[Var]) -> Result<Var>,
{
    let loss_value = |store: &mut ParamStore, inputs: &[DiffArray]| -> f64 {
        let mut ctx = Ctx::new(store, true, 0);
        let vars: Vec<Var> = inputs.iter().map(|a| ctx.tape.leaf(a.clone())).collect();
        let out = f(&mut ctx, &vars).unwrap();
        let r = projection(ctx.tape.data(out).len(), seed);
        ctx.tape.data(out).iter().zip(&r).map(|(o, w)| o * w).sum()
    };

    let mut ctx = Ctx::new(store, true, 0);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|a| ctx.tape.leaf(a.clone().requires_grad()))
        .collect();
    let out = f(&mut ctx, &vars).unwrap();
    let shape = ctx.tape.shape(out).to_vec();
    let r = ctx
        .tape
        .constant(&shape, projection(shape.iter().product(), seed))
        .unwrap();
    let weighted = ctx.tape.mul(out, r).unwrap();
    let loss = ctx.tape.sum(weighted).unwrap();
    ctx.tape.backward(loss).unwrap();
    let mut analytic: Vec<f64> = Vec::new();
    for (v, a) in vars.iter().zip(inputs) {
        match ctx.tape.grad(*v) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat(0.0).take(a.len())),
        }
    }
    let param_grads = ctx.take_grads();
    drop(ctx);

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut owned = inputs.to_vec();
    for k in 0..owned.len() {
        for i in 0..owned[k].len() {
            let x0 = owned[k].data()[i];
            owned[k].data_mut()[i] = x0 + STEP;
            let up = loss_value(store, &owned);
            owned[k].data_mut()[i] = x0 - STEP;
            let down = loss_value(store, &owned);
            owned[k].data_mut()[i] = x0;
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    for (p, g) in param_grads.into_iter().enumerate() {
        if !store.params()[p].trainable {
            continue;
        }
        let len = store.params()[p].value.len();
        analytic.extend(g.unwrap_or_else(|| vec![0.0; len]));
        for i in 0..len {
            let x0 = store.params()[p].value.data()[i];
            store.params_mut()[p].value.data_mut()[i] = x0 + STEP;
            let up = loss_value(store, inputs);
            store.params_mut()[p].value.data_mut()[i] = x0 - STEP;
            let down = loss_value(store, inputs);
            store.params_mut()[p].value.data_mut()[i] = x0;
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    relative_error(&analytic, &numeric)
}

fn projection(n: usize, seed: u64) -> Vec<f64> {
    let mut r = seed::rng(seed, &[0x9B0]);
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

/// Shuffled, evenly spaced values in `(-1, 1)`. Max-type layers are only
/// differentiable away from ties, so their inputs keep every pair of values
/// far apart relative to the finite-difference step.
pub fn separated_array(rng: &mut Rng, shape: &[usize]) -> DiffArray {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n)
        .map(|i| -1.0 + (2 * i + 1) as f64 / n as f64)
        .collect();
    values.shuffle(rng);
    DiffArray::new(shape.to_vec(), values).unwrap()
}
