//! Upsampling squeeze-and-excitation block.
//!
//! The input is squeezed to per-channel means, passed through a `C → C/2 → C`
//! pair of 1×1 convolutions (ReLU, then sigmoid) to get channel weights in
//! (0, 1), reweighted channel-wise, and finally upsampled ×2 with a
//! transposed convolution.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Deconv2d};
use crate::ops::ConvParams;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-channel spatial means, `[N, C, 1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelDescriptor(pub Tensor);

/// Channel weights in (0, 1), `[N, C, 1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttention(pub Tensor);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UseConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl UseConfig {
    /// Doubling upsampler (k=4, s=2, p=1). `in_channels` must be even.
    pub fn new(in_channels: usize, out_channels: usize) -> Result<Self> {
        if in_channels == 0 || !in_channels.is_multiple_of(2) {
            return Err(Error::config(format!(
                "USE block needs an even, positive channel count for its C/2 bottleneck, got {in_channels}"
            )));
        }
        if out_channels == 0 {
            return Err(Error::config("USE block output channels must be positive"));
        }
        Ok(Self { in_channels, out_channels, kernel: 4, stride: 2, padding: 1 })
    }

    pub fn bottleneck(&self) -> usize {
        self.in_channels / 2
    }
}

/// Weights of the excitation path: `reduce` is `C → C/2`, `expand` is
/// `C/2 → C`, both 1×1 with bias.
#[derive(Clone, Debug)]
pub struct ExcitationWeights {
    pub reduce: ConvParams,
    pub expand: ConvParams,
}

#[derive(Clone, Debug)]
pub struct UseWeights {
    pub excitation: ExcitationWeights,
    pub upsample: ConvParams,
}

pub fn squeeze(x: &Tensor) -> Result<ChannelDescriptor> {
    crate::ops::global_avg_pool(x).map(ChannelDescriptor)
}

pub fn excite(z: &ChannelDescriptor, w: &ExcitationWeights) -> Result<ChannelAttention> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.0.clone());
    let a = excite_on_tape(&mut tape, zv, w)?;
    Ok(ChannelAttention(tape.value(a).clone()))
}

fn excite_on_tape(tape: &mut Tape, z: Var, w: &ExcitationWeights) -> Result<Var> {
    let r = constant_conv(tape, z, &w.reduce, false)?;
    let r = tape.relu(r)?;
    let e = constant_conv(tape, r, &w.expand, false)?;
    tape.sigmoid(e)
}

fn constant_conv(tape: &mut Tape, x: Var, p: &ConvParams, transposed: bool) -> Result<Var> {
    let w = tape.constant(p.weight.clone());
    let b = p.bias.clone().map(|b| tape.constant(b));
    if transposed {
        tape.deconv2d(x, w, b, p.stride, p.padding)
    } else {
        tape.conv2d(x, w, b, p.stride, p.padding)
    }
}

/// `Y[c, i, j] = X[c, i, j] · A[c]`.
pub fn channel_weight(x: &Tensor, a: &ChannelAttention) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let av = tape.constant(a.0.clone());
    let y = tape.channel_mul(xv, av)?;
    Ok(tape.value(y).clone())
}

/// Squeeze, excite, reweight, upsample.
pub fn use_forward(x: &Tensor, w: &UseWeights) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let z = tape.global_avg_pool(xv)?;
    let a = excite_on_tape(&mut tape, z, &w.excitation)?;
    let y = tape.channel_mul(xv, a)?;
    let out = constant_conv(&mut tape, y, &w.upsample, true)?;
    Ok(tape.value(out).clone())
}

/// Intermediate values of one USE forward pass.
#[derive(Clone, Copy, Debug)]
pub struct UseTrace {
    pub descriptor: Var,
    pub attention: Var,
    pub weighted: Var,
    pub output: Var,
}

/// Trainable USE block.
#[derive(Clone, Debug)]
pub struct UseBlock {
    pub config: UseConfig,
    pub reduce: Conv2d,
    pub expand: Conv2d,
    pub upsample: Deconv2d,
}

impl UseBlock {
    pub fn new(store: &mut ParamStore, name: &str, config: UseConfig, rng: &mut Rng) -> Self {
        let c = config.in_channels;
        let reduce = Conv2d::new(store, &format!("{name}.excite_reduce"), c, config.bottleneck(), 1, 1, 0, true, rng);
        let expand = Conv2d::new(store, &format!("{name}.excite_expand"), config.bottleneck(), c, 1, 1, 0, true, rng);
        let upsample = Deconv2d::new(
            store,
            &format!("{name}.upsample"),
            c,
            config.out_channels,
            config.kernel,
            config.stride,
            config.padding,
            false,
            rng,
        );
        Self { config, reduce, expand, upsample }
    }

    pub fn weights(&self, store: &ParamStore) -> UseWeights {
        UseWeights {
            excitation: ExcitationWeights {
                reduce: self.reduce.conv_params(store),
                expand: self.expand.conv_params(store),
            },
            upsample: self.upsample.conv_params(store),
        }
    }

    pub fn trace(&self, tape: &mut Tape, store: &ParamStore, x: Var, ctx: &Ctx) -> Result<UseTrace> {
        let (_, c, _, _) = tape.value(x).dims4()?;
        if c != self.config.in_channels {
            return Err(Error::shape("use_block", format!("expected {} channels, got {c}", self.config.in_channels)));
        }
        let descriptor = tape.global_avg_pool(x)?;
        let r = self.reduce.forward(tape, store, descriptor, ctx)?;
        let r = tape.relu(r)?;
        let e = self.expand.forward(tape, store, r, ctx)?;
        let attention = tape.sigmoid(e)?;
        let weighted = tape.channel_mul(x, attention)?;
        let output = self.upsample.forward(tape, store, weighted, ctx)?;
        Ok(UseTrace { descriptor, attention, weighted, output })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, ctx: &Ctx) -> Result<Var> {
        Ok(self.trace(tape, store, x, ctx)?.output)
    }
}
