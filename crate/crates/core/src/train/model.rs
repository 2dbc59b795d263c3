use crate::cnn3d::{build_temporal_net, scale_width, TemporalNet};
use crate::diffengine::Var;
use crate::error::{Error, Result};
use crate::gnn::{dropout, Activation, Dense, GConvLayer, GraphFc, ResidualGraphBlock};
use crate::graph2grid::{frames_to_clips, graph_to_grid};
use crate::graph_build::GraphBatch;
use crate::graph_pool::{max_pool_graph, PoolParams};
use crate::params::{Ctx, ParamStore};
use crate::seed;

use super::config::{HeadSpec, ModelConfig, SpatialSpec};

/// Seed-derivation tag for parameter initialisation.
const INIT_TAG: u64 = 0x1A17;

#[derive(Debug, Clone, PartialEq)]
pub enum SpatialLayer {
    Conv(GConvLayer),
    Res(ResidualGraphBlock),
    Pool(PoolParams),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    /// Graph FC layers (relu, dropout after the first) then a dense classifier.
    Fc {
        layers: Vec<GraphFcOrDense>,
        dropout_p: f64,
    },
    Temporal(TemporalNet),
}

#[derive(Debug, Clone, PartialEq)]
pub enum GraphFcOrDense {
    Graph(GraphFc),
    Dense(Dense),
}

/// The full network described by a [`ModelConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub spatial: Vec<SpatialLayer>,
    pub head: Head,
}

impl Model {
    /// Builds the layers and a freshly initialised parameter store.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<(Model, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seed::rng(seed, &[INIT_TAG]);
        let w = |c: usize| scale_width(c, config.width_multiplier);
        let mut spatial = Vec::new();
        let mut c = 1;
        for (i, spec) in config.spatial.iter().enumerate() {
            let name = format!("spatial.{i}");
            spatial.push(match *spec {
                SpatialSpec::Conv { out } => {
                    let l = GConvLayer::new(
                        &mut store,
                        &mut rng,
                        &name,
                        c,
                        w(out),
                        config.kernel_size,
                        config.degree,
                        true,
                        Activation::Relu,
                    )?;
                    c = w(out);
                    SpatialLayer::Conv(l)
                }
                SpatialSpec::Res { out } => {
                    let b = ResidualGraphBlock::new(
                        &mut store,
                        &mut rng,
                        &name,
                        c,
                        w(out),
                        config.kernel_size,
                        config.degree,
                    )?;
                    c = w(out);
                    SpatialLayer::Res(b)
                }
                SpatialSpec::Pool { size } => {
                    SpatialLayer::Pool(PoolParams::new(size[0], size[1])?)
                }
            });
        }
        let head = match &config.head {
            HeadSpec::Fc { hidden } => {
                let mut layers = Vec::new();
                let mut width = c;
                for (i, &h) in hidden.iter().enumerate() {
                    let h = w(h);
                    let name = format!("head.fc{i}");
                    layers.push(if i == 0 {
                        GraphFcOrDense::Graph(GraphFc::new(
                            &mut store,
                            &mut rng,
                            &name,
                            config.final_extent(),
                            width,
                            h,
                            Activation::Relu,
                        )?)
                    } else {
                        GraphFcOrDense::Dense(Dense::new(&mut store, &mut rng, &name, width, h)?)
                    });
                    width = h;
                }
                let name = format!("head.fc{}", hidden.len());
                let out = if hidden.is_empty() {
                    GraphFcOrDense::Graph(GraphFc::new(
                        &mut store,
                        &mut rng,
                        &name,
                        config.final_extent(),
                        width,
                        config.num_classes,
                        Activation::None,
                    )?)
                } else {
                    GraphFcOrDense::Dense(Dense::new(
                        &mut store,
                        &mut rng,
                        &name,
                        width,
                        config.num_classes,
                    )?)
                };
                layers.push(out);
                Head::Fc {
                    layers,
                    dropout_p: config.train.dropout_p,
                }
            }
            HeadSpec::Temporal { arch } => Head::Temporal(build_temporal_net(
                &mut store,
                &mut rng,
                "head",
                *arch,
                c,
                config.num_classes,
                config.width_multiplier,
            )?),
        };
        Ok((
            Model {
                config: config.clone(),
                spatial,
                head,
            },
            store,
        ))
    }

    /// Logits `[samples, Q]` for a batch holding `s_count` graphs per sample,
    /// sample-major, with `nodes x 1` input features.
    pub fn forward(&self, ctx: &mut Ctx, batch: &GraphBatch, features: Var) -> Result<Var> {
        self.check_batch(batch)?;
        let s = self.config.s_count;
        let (graph, x) = self.spatial_features(ctx, batch, features)?;
        match &self.head {
            Head::Fc { layers, dropout_p } => {
                let mut h = x;
                for (i, l) in layers.iter().enumerate() {
                    h = match l {
                        GraphFcOrDense::Graph(g) => g.forward(ctx, &graph, h)?,
                        GraphFcOrDense::Dense(d) => d.forward(ctx, h)?,
                    };
                    let last = i + 1 == layers.len();
                    if !last {
                        if matches!(l, GraphFcOrDense::Dense(_)) {
                            h = ctx.tape.relu(h);
                        }
                        if i == 0 {
                            h = dropout(ctx, h, *dropout_p)?;
                        }
                    }
                }
                Ok(h)
            }
            Head::Temporal(net) => {
                let frames = graph_to_grid(&mut ctx.tape, &graph, x, graph.extent)?;
                let clips = frames_to_clips(&mut ctx.tape, frames, s)?;
                net.forward(ctx, clips)
            }
        }
    }

    /// Output of the spatial graph chain: the final pooled graph and its
    /// node features.
    pub fn spatial_features(
        &self,
        ctx: &mut Ctx,
        batch: &GraphBatch,
        features: Var,
    ) -> Result<(GraphBatch, Var)> {
        let mut graph = batch.clone();
        let mut x = features;
        for layer in &self.spatial {
            match layer {
                SpatialLayer::Conv(l) => x = l.forward(ctx, &graph, x)?,
                SpatialLayer::Res(b) => x = b.forward(ctx, &graph, x)?,
                SpatialLayer::Pool(p) => {
                    let (coarse, y) = max_pool_graph(&mut ctx.tape, &graph, x, *p)?;
                    graph = coarse;
                    x = y;
                }
            }
        }
        Ok((graph, x))
    }

    /// Grid clips `[samples, H, W, C, S]` built from the spatial features.
    pub fn grid_clips(&self, ctx: &mut Ctx, batch: &GraphBatch, features: Var) -> Result<Var> {
        self.check_batch(batch)?;
        let (graph, x) = self.spatial_features(ctx, batch, features)?;
        let frames = graph_to_grid(&mut ctx.tape, &graph, x, graph.extent)?;
        frames_to_clips(&mut ctx.tape, frames, self.config.s_count)
    }

    fn check_batch(&self, batch: &GraphBatch) -> Result<()> {
        let s = self.config.s_count;
        if batch.num_graphs % s != 0 {
            return Err(Error::Shape(format!(
                "{} graphs do not form samples of {s}",
                batch.num_graphs
            )));
        }
        if batch.extent != self.config.sensor.extent() {
            return Err(Error::Shape(format!(
                "graph extent {:?} differs from the sensor {:?}",
                batch.extent, self.config.sensor
            )));
        }
        Ok(())
    }
}
