//! 3-d convolutional temporal heads over `[batch, H, W, C, S]` clips.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffengine::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::gnn::{add_channel_bias, BatchNorm, Dense};
use crate::params::{Ctx, ParamStore};
use crate::seed::Rng;

/// Stride-1 "same" 3-d convolution with bias, optional batch norm and relu.
/// Weights are `[c_out, c_in, kh, kw, kt]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3DLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: [usize; 3],
    pub batch_norm: Option<BatchNorm>,
    pub relu: bool,
}

impl Conv3DLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        batch_norm: bool,
        relu: bool,
    ) -> Result<Self> {
        if kernel.iter().any(|&k| k % 2 == 0) {
            return Err(invalid!("3-d kernel {kernel:?} must have odd sizes"));
        }
        let fan_in = (c_in * kernel.iter().product::<usize>()) as f64;
        store.add_uniform(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel[0], kernel[1], kernel[2]],
            1.0 / fan_in.sqrt(),
            rng,
        )?;
        store.add_uniform(&format!("{name}.bias"), &[c_out], 0.0, rng)?;
        let batch_norm = if batch_norm {
            Some(BatchNorm::new(store, &format!("{name}.bn"), c_out)?)
        } else {
            None
        };
        Ok(Conv3DLayer {
            name: name.to_string(),
            c_in,
            c_out,
            kernel,
            batch_norm,
            relu,
        })
    }

    pub fn kernel_elems(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        conv3d_forward(ctx, x, self)
    }
}

/// Convolution, bias, batch norm (when configured) and relu (when configured).
pub fn conv3d_forward(ctx: &mut Ctx, clip: Var, layer: &Conv3DLayer) -> Result<Var> {
    let w = ctx.param(&format!("{}.weight", layer.name))?;
    let b = ctx.param(&format!("{}.bias", layer.name))?;
    let conv = ctx.tape.conv3d(clip, w)?;
    let mut y = add_channel_bias(ctx, conv, b, 3)?;
    if let Some(bn) = &layer.batch_norm {
        y = bn.forward(ctx, y, 3)?;
    }
    Ok(if layer.relu { ctx.tape.relu(y) } else { y })
}

/// Max pooling with `(h, w, t)` window and stride; errors when an input
/// dimension is smaller than the window.
pub fn pool3d(tape: &mut Tape, clip: Var, window: [usize; 3], stride: [usize; 3]) -> Result<Var> {
    tape.max_pool3d(clip, window, stride)
}

/// Two 3x3x3 convolutions (`c_in -> c_inter -> c_out`) plus a 1x1x1
/// convolution shortcut, all batch-normalised, summed and rectified.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual3DBlock {
    pub name: String,
    pub conv1: Conv3DLayer,
    pub conv2: Conv3DLayer,
    pub shortcut: Conv3DLayer,
}

impl Residual3DBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        c_inter: usize,
        c_out: usize,
    ) -> Result<Self> {
        let conv1 = Conv3DLayer::new(
            store,
            rng,
            &format!("{name}.conv1"),
            c_in,
            c_inter,
            [3, 3, 3],
            true,
            true,
        )?;
        let conv2 = Conv3DLayer::new(
            store,
            rng,
            &format!("{name}.conv2"),
            c_inter,
            c_out,
            [3, 3, 3],
            true,
            false,
        )?;
        let shortcut = Conv3DLayer::new(
            store,
            rng,
            &format!("{name}.shortcut"),
            c_in,
            c_out,
            [1, 1, 1],
            true,
            false,
        )?;
        Ok(Residual3DBlock {
            name: name.to_string(),
            conv1,
            conv2,
            shortcut,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.conv1.forward(ctx, x)?;
        let main = self.conv2.forward(ctx, h)?;
        let short = self.shortcut.forward(ctx, x)?;
        let sum = ctx.tape.add(main, short)?;
        Ok(ctx.tape.relu(sum))
    }

    pub fn layers(&self) -> [&Conv3DLayer; 3] {
        [&self.conv1, &self.conv2, &self.shortcut]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalArch {
    Plain3d,
    Res3d,
}

impl FromStr for TemporalArch {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain3d" => Ok(TemporalArch::Plain3d),
            "res3d" => Ok(TemporalArch::Res3d),
            other => Err(invalid!(
                "unknown temporal architecture {other:?} (expected plain3d or res3d)"
            )),
        }
    }
}

impl fmt::Display for TemporalArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemporalArch::Plain3d => "plain3d",
            TemporalArch::Res3d => "res3d",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TemporalLayer {
    Conv(Conv3DLayer),
    Res(Residual3DBlock),
    Pool {
        window: [usize; 3],
        stride: [usize; 3],
    },
}

/// Layer chain, global average pooling and a dense classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalNet {
    pub arch: TemporalArch,
    pub c_in: usize,
    pub layers: Vec<TemporalLayer>,
    pub fc: Dense,
}

/// Pool window and stride for each layer of the chains: `(2, 2, 2)` windows,
/// stride `(2, 2, 1)` for the first pool and `(2, 2, 2)` afterwards.
fn pool(first: bool) -> TemporalLayer {
    TemporalLayer::Pool {
        window: [2, 2, 2],
        stride: if first { [2, 2, 1] } else { [2, 2, 2] },
    }
}

/// Channel count `c` scaled by `width`, at least 1.
pub fn scale_width(c: usize, width: f64) -> usize {
    ((c as f64 * width).round() as usize).max(1)
}

/// Plain chain `Conv(c_in,128)-Pool-Conv(128,256)-Pool-Conv(256,512)-Pool-Conv(512,512)-Pool`
/// or residual chain `Res(c_in,256,512)-Pool-Res(512,512,1024)-Pool`, with
/// widths scaled by `width`, followed by global average pooling and `FC(Q)`.
pub fn build_temporal_net(
    store: &mut ParamStore,
    rng: &mut Rng,
    name: &str,
    arch: TemporalArch,
    c_in: usize,
    num_classes: usize,
    width: f64,
) -> Result<TemporalNet> {
    if num_classes == 0 || c_in == 0 || !(width > 0.0) {
        return Err(invalid!(
            "temporal net needs positive channels, classes and width multiplier"
        ));
    }
    let s = |c| scale_width(c, width);
    let mut layers = Vec::new();
    let mut c = c_in;
    match arch {
        TemporalArch::Plain3d => {
            for (i, out) in [128, 256, 512, 512].into_iter().enumerate() {
                let out = s(out);
                layers.push(TemporalLayer::Conv(Conv3DLayer::new(
                    store,
                    rng,
                    &format!("{name}.conv{i}"),
                    c,
                    out,
                    [3, 3, 3],
                    true,
                    true,
                )?));
                layers.push(pool(i == 0));
                c = out;
            }
        }
        TemporalArch::Res3d => {
            for (i, (inter, out)) in [(256, 512), (512, 1024)].into_iter().enumerate() {
                let (inter, out) = (s(inter), s(out));
                layers.push(TemporalLayer::Res(Residual3DBlock::new(
                    store,
                    rng,
                    &format!("{name}.res{i}"),
                    c,
                    inter,
                    out,
                )?));
                layers.push(pool(i == 0));
                c = out;
            }
        }
    }
    let fc = Dense::new(store, rng, &format!("{name}.fc"), c, num_classes)?;
    Ok(TemporalNet {
        arch,
        c_in,
        layers,
        fc,
    })
}

impl TemporalNet {
    pub fn num_classes(&self) -> usize {
        self.fc.c_out
    }

    pub fn conv_widths(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                TemporalLayer::Conv(c) => Some(c.c_out),
                TemporalLayer::Res(r) => Some(r.conv2.c_out),
                TemporalLayer::Pool { .. } => None,
            })
            .collect()
    }

    /// Logits `[batch, Q]` for clips `[batch, H, W, C, S]`. Pool windows are
    /// clamped to the incoming dimensions so short or small clips still pass.
    pub fn forward(&self, ctx: &mut Ctx, clip: Var) -> Result<Var> {
        let shape = ctx.tape.shape(clip).to_vec();
        if shape.len() != 5 || shape[3] != self.c_in {
            return Err(shape_err!(
                "temporal net expects [B, H, W, {}, S], got {shape:?}",
                self.c_in
            ));
        }
        let mut x = clip;
        for layer in &self.layers {
            x = match layer {
                TemporalLayer::Conv(c) => c.forward(ctx, x)?,
                TemporalLayer::Res(r) => r.forward(ctx, x)?,
                TemporalLayer::Pool { window, stride } => {
                    let (w, st) = clamp_pool(ctx.tape.shape(x), *window, *stride);
                    pool3d(&mut ctx.tape, x, w, st)?
                }
            };
        }
        let gap = ctx.tape.reduce_mean(x, &[0, 3])?;
        self.fc.forward(ctx, gap)
    }

    /// `(H, W, C, S)` after every layer, for an input of the given dims.
    pub fn trace_shapes(&self, input: [usize; 4]) -> Vec<[usize; 4]> {
        let mut cur = input;
        let mut out = Vec::new();
        for layer in &self.layers {
            cur = match layer {
                TemporalLayer::Conv(c) => [cur[0], cur[1], c.c_out, cur[3]],
                TemporalLayer::Res(r) => [cur[0], cur[1], r.conv2.c_out, cur[3]],
                TemporalLayer::Pool { window, stride } => {
                    let (w, s) = clamp_pool(&[1, cur[0], cur[1], cur[2], cur[3]], *window, *stride);
                    [
                        (cur[0] - w[0]) / s[0] + 1,
                        (cur[1] - w[1]) / s[1] + 1,
                        cur[2],
                        (cur[3] - w[2]) / s[2] + 1,
                    ]
                }
            };
            out.push(cur);
        }
        out
    }
}

fn clamp_pool(shape: &[usize], window: [usize; 3], stride: [usize; 3]) -> ([usize; 3], [usize; 3]) {
    let dims = [shape[1], shape[2], shape[4]];
    let w = [0, 1, 2].map(|a| window[a].min(dims[a]).max(1));
    (w, stride)
}
