use crate::diffengine::DiffArray;
use crate::diffengine::Var;
use crate::error::{invalid, Result};
use crate::params::{Ctx, ParamStore};

/// Per-channel batch normalisation. Training mode normalises with the
/// population statistics of the current batch (all nodes of all graphs, or
/// all positions of a clip) and updates the running estimates; evaluation
/// mode uses the running estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

/// Batch normalisation over node features.
pub type GraphBatchNorm = BatchNorm;

impl BatchNorm {
    /// Registers `{name}.gamma` (ones), `{name}.beta` (zeros) and the
    /// running buffers `{name}.running_mean` (zeros) and `{name}.running_var` (ones).
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        store.add(
            &format!("{name}.gamma"),
            DiffArray::full(&[channels], 1.0),
            true,
        )?;
        store.add(&format!("{name}.beta"), DiffArray::zeros(&[channels]), true)?;
        store.add(
            &format!("{name}.running_mean"),
            DiffArray::zeros(&[channels]),
            false,
        )?;
        store.add(
            &format!("{name}.running_var"),
            DiffArray::full(&[channels], 1.0),
            false,
        )?;
        Ok(BatchNorm {
            name: name.to_string(),
            channels,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, channel_axis: usize) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.get(channel_axis) != Some(&self.channels) {
            return Err(invalid!(
                "{}: expected {} channels on axis {channel_axis}, got shape {shape:?}",
                self.name,
                self.channels
            ));
        }
        if ctx.tape.data(x).is_empty() {
            return Err(invalid!("{}: batch norm over zero nodes", self.name));
        }
        let (mean, var) = if ctx.is_train() {
            let mean = ctx.tape.reduce_mean(x, &[channel_axis])?;
            let var = ctx.tape.reduce_var(x, &[channel_axis])?;
            let (m, v) = (ctx.tape.data(mean).to_vec(), ctx.tape.data(var).to_vec());
            let mom = self.momentum;
            for (r, s) in ctx
                .buffer_mut(&format!("{}.running_mean", self.name))?
                .iter_mut()
                .zip(&m)
            {
                *r = (1.0 - mom) * *r + mom * s;
            }
            for (r, s) in ctx
                .buffer_mut(&format!("{}.running_var", self.name))?
                .iter_mut()
                .zip(&v)
            {
                *r = (1.0 - mom) * *r + mom * s;
            }
            (mean, var)
        } else {
            let m = ctx.buffer(&format!("{}.running_mean", self.name))?.to_vec();
            let v = ctx.buffer(&format!("{}.running_var", self.name))?.to_vec();
            (
                ctx.tape.constant(&[self.channels], m)?,
                ctx.tape.constant(&[self.channels], v)?,
            )
        };
        let shifted = ctx.tape.add_scalar(var, self.eps);
        let inv_std = ctx.tape.powf(shifted, -0.5);
        let mean_b = ctx.tape.broadcast(mean, &shape, &[channel_axis])?;
        let centered = ctx.tape.sub(x, mean_b)?;
        let scale_b = ctx.tape.broadcast(inv_std, &shape, &[channel_axis])?;
        let xhat = ctx.tape.mul(centered, scale_b)?;
        let gamma = ctx.param(&format!("{}.gamma", self.name))?;
        let beta = ctx.param(&format!("{}.beta", self.name))?;
        let gamma_b = ctx.tape.broadcast(gamma, &shape, &[channel_axis])?;
        let scaled = ctx.tape.mul(xhat, gamma_b)?;
        super::add_channel_bias(ctx, scaled, beta, channel_axis)
    }
}
