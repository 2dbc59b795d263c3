//! Graph layers: B-spline kernels, spline graph convolution, batch norm,
//! residual graph blocks and the slot-layout fully-connected head.
//!
//! Node features are `nodes x channels` arrays on a [`Ctx`] tape; topology
//! comes from a [`GraphBatch`]. Edge `(i, j)` means node `i` aggregates from
//! its out-neighbour `j`.

use std::rc::Rc;

use crate::diffengine::{KernelEntry, Var};
use crate::error::{invalid, Error, Result};
use crate::graph_build::Extent;
use crate::graph_build::GraphBatch;
use crate::params::{Ctx, ParamStore};
use crate::seed::Rng;

mod norm;
mod spline;

pub use norm::{BatchNorm, GraphBatchNorm};
pub use spline::{spline_basis, SplineKernel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

impl Activation {
    pub fn apply(self, ctx: &mut Ctx, x: Var) -> Var {
        match self {
            Activation::Relu => ctx.tape.relu(x),
            Activation::None => x,
        }
    }
}

/// Adds a per-channel bias to the last axis of `x`.
pub(crate) fn add_channel_bias(
    ctx: &mut Ctx,
    x: Var,
    bias: Var,
    channel_axis: usize,
) -> Result<Var> {
    let shape = ctx.tape.shape(x).to_vec();
    let b = ctx.tape.broadcast(bias, &shape, &[channel_axis])?;
    ctx.tape.add(x, b)
}

/// Spline graph convolution with bias, optional batch norm and activation.
#[derive(Debug, Clone, PartialEq)]
pub struct GConvLayer {
    pub name: String,
    pub kernel: SplineKernel,
    pub activation: Activation,
    pub batch_norm: Option<GraphBatchNorm>,
}

impl GConvLayer {
    /// Registers `{name}.weight` (kernels x c_in x c_out, uniform with fan-in
    /// scaling), `{name}.bias` (zeros) and the batch-norm entries.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel_size: [usize; 2],
        degree: usize,
        batch_norm: bool,
        activation: Activation,
    ) -> Result<Self> {
        let kernel = SplineKernel::new(degree, kernel_size.to_vec(), c_in, c_out)?;
        let fan_in = (c_in * kernel.num_kernels()) as f64;
        store.add_uniform(
            &format!("{name}.weight"),
            &kernel.weight_shape(),
            1.0 / fan_in.sqrt(),
            rng,
        )?;
        store.add_uniform(&format!("{name}.bias"), &[c_out], 0.0, rng)?;
        let batch_norm = if batch_norm {
            Some(GraphBatchNorm::new(store, &format!("{name}.bn"), c_out)?)
        } else {
            None
        };
        Ok(GConvLayer {
            name: name.to_string(),
            kernel,
            activation,
            batch_norm,
        })
    }

    pub fn c_in(&self) -> usize {
        self.kernel.c_in
    }

    pub fn c_out(&self) -> usize {
        self.kernel.c_out
    }

    /// Mean kernel-weighted aggregation over out-neighbours plus bias, then
    /// batch norm and activation. Nodes without neighbours output the bias.
    pub fn forward(&self, ctx: &mut Ctx, graph: &GraphBatch, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != graph.num_nodes() || shape[1] != self.c_in() {
            return Err(Error::Shape(format!(
                "{}: expected features [{}, {}], got {shape:?}",
                self.name,
                graph.num_nodes(),
                self.c_in()
            )));
        }
        let entries = self.kernel.entries(graph)?;
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let agg = ctx
            .tape
            .kernel_aggregate(x, w, entries, graph.num_nodes())?;
        let bias = ctx.param(&format!("{}.bias", self.name))?;
        let mut y = add_channel_bias(ctx, agg, bias, 1)?;
        if let Some(bn) = &self.batch_norm {
            y = bn.forward(ctx, y, 1)?;
        }
        Ok(self.activation.apply(ctx, y))
    }
}

/// `relu(main(x) + shortcut(x))` where the main path is two 5x5 spline
/// convolutions and the shortcut a 1x1 convolution, all batch-normalised.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualGraphBlock {
    pub name: String,
    pub main1: GConvLayer,
    pub main2: GConvLayer,
    pub shortcut: GConvLayer,
}

impl ResidualGraphBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel_size: [usize; 2],
        degree: usize,
    ) -> Result<Self> {
        let main1 = GConvLayer::new(
            store,
            rng,
            &format!("{name}.main1"),
            c_in,
            c_out,
            kernel_size,
            degree,
            true,
            Activation::Relu,
        )?;
        let main2 = GConvLayer::new(
            store,
            rng,
            &format!("{name}.main2"),
            c_out,
            c_out,
            kernel_size,
            degree,
            true,
            Activation::None,
        )?;
        let shortcut = GConvLayer::new(
            store,
            rng,
            &format!("{name}.shortcut"),
            c_in,
            c_out,
            [1, 1],
            degree,
            true,
            Activation::None,
        )?;
        Ok(ResidualGraphBlock {
            name: name.to_string(),
            main1,
            main2,
            shortcut,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, graph: &GraphBatch, x: Var) -> Result<Var> {
        let h = self.main1.forward(ctx, graph, x)?;
        let main = self.main2.forward(ctx, graph, h)?;
        let short = self.shortcut.forward(ctx, graph, x)?;
        let sum = ctx.tape.add(main, short)?;
        Ok(ctx.tape.relu(sum))
    }

    pub fn layers(&self) -> [&GConvLayer; 3] {
        [&self.main1, &self.main2, &self.shortcut]
    }
}

/// Row index of every node in a per-graph `height x width` slot layout
/// (row = floor(y), column = floor(x)).
pub fn slot_index(graph: &GraphBatch, extent: Extent) -> Result<Vec<usize>> {
    graph
        .coords
        .iter()
        .zip(&graph.graph_of)
        .map(|(c, &g)| {
            let (row, col) = extent.cell_of(c[0], c[1]).ok_or_else(|| {
                Error::Index(format!(
                    "node at ({}, {}) lies outside extent {extent:?}",
                    c[0], c[1]
                ))
            })?;
            Ok(g * extent.cells() + row * extent.width + col)
        })
        .collect()
}

/// Fully-connected layer over a fixed slot layout: node features are
/// scattered (max per channel, zeros elsewhere) onto `height x width` slots
/// per graph, then mapped densely to `c_out` outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFc {
    pub name: String,
    pub slots: Extent,
    pub c_in: usize,
    pub c_out: usize,
    pub activation: Activation,
}

impl GraphFc {
    /// Registers `{name}.weight` (slots*c_in x c_out) and `{name}.bias`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        slots: Extent,
        c_in: usize,
        c_out: usize,
        activation: Activation,
    ) -> Result<Self> {
        let fan_in = slots.cells() * c_in;
        store.add_uniform(
            &format!("{name}.weight"),
            &[fan_in, c_out],
            1.0 / (fan_in as f64).sqrt(),
            rng,
        )?;
        store.add_uniform(&format!("{name}.bias"), &[c_out], 0.0, rng)?;
        Ok(GraphFc {
            name: name.to_string(),
            slots,
            c_in,
            c_out,
            activation,
        })
    }

    /// Returns `[graphs, c_out]`.
    pub fn forward(&self, ctx: &mut Ctx, graph: &GraphBatch, x: Var) -> Result<Var> {
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let b = ctx.param(&format!("{}.bias", self.name))?;
        graph_fc(ctx, x, graph, self.slots, w, Some(b), self.activation)
    }
}

/// `xi(sum_i sum_l F[i, l, q] f_l(i) + b_q)` over the scattered slot layout.
/// `weights` is `(slots * c_in) x q`; the result is `[graphs, q]`.
pub fn graph_fc(
    ctx: &mut Ctx,
    x: Var,
    graph: &GraphBatch,
    slots: Extent,
    weights: Var,
    bias: Option<Var>,
    activation: Activation,
) -> Result<Var> {
    let c_in = *ctx
        .tape
        .shape(x)
        .get(1)
        .ok_or_else(|| invalid!("graph_fc expects nodes x channels features"))?;
    let idx = slot_index(graph, slots)?;
    let n_slots = graph.num_graphs * slots.cells();
    let grid = ctx.tape.scatter_max(x, &idx, n_slots)?;
    let flat = ctx
        .tape
        .reshape(grid, &[graph.num_graphs, slots.cells() * c_in])?;
    let mut y = ctx.tape.matmul(flat, weights)?;
    if let Some(b) = bias {
        y = add_channel_bias(ctx, y, b, 1)?;
    }
    Ok(activation.apply(ctx, y))
}

/// Dense layer `x W + b` on `[rows, c_in]` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        store.add_uniform(
            &format!("{name}.weight"),
            &[c_in, c_out],
            1.0 / (c_in as f64).sqrt(),
            rng,
        )?;
        store.add_uniform(&format!("{name}.bias"), &[c_out], 0.0, rng)?;
        Ok(Dense {
            name: name.to_string(),
            c_in,
            c_out,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let b = ctx.param(&format!("{}.bias", self.name))?;
        let y = ctx.tape.matmul(x, w)?;
        add_channel_bias(ctx, y, b, 1)
    }
}

/// Inverted dropout: in training mode each element is zeroed with
/// probability `p` and the survivors scaled by `1 / (1 - p)`.
pub fn dropout(ctx: &mut Ctx, x: Var, p: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(invalid!("dropout probability {p} outside [0, 1)"));
    }
    if !ctx.is_train() || p == 0.0 {
        return Ok(x);
    }
    use rand::Rng as _;
    let shape = ctx.tape.shape(x).to_vec();
    let n = ctx.tape.data(x).len();
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..n)
        .map(|_| if ctx.rng().gen_bool(p) { 0.0 } else { keep })
        .collect();
    let m = ctx.tape.constant(&shape, mask)?;
    ctx.tape.mul(x, m)
}

/// Kernel entries of a spline convolution over `graph`, grouped by edge.
pub(crate) fn spline_entries(
    kernel: &SplineKernel,
    graph: &GraphBatch,
) -> Result<Rc<[KernelEntry]>> {
    let mut degree = vec![0usize; graph.num_nodes()];
    for &(i, _) in &graph.edges {
        degree[i] += 1;
    }
    let mut entries = Vec::with_capacity(graph.num_edges() * kernel.max_entries());
    for (&(i, j), u) in graph.edges.iter().zip(&graph.pseudo) {
        let scale = 1.0 / degree[i] as f64;
        for (z, b) in kernel.basis(u)? {
            entries.push(KernelEntry {
                dst: i,
                src: j,
                kernel: z,
                coef: b * scale,
            });
        }
    }
    Ok(entries.into())
}
