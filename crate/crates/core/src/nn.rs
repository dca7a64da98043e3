//! Parameterized layers. Each layer holds [`ParamId`]s into a
//! [`ParamStore`] owned by the enclosing network.

use crate::error::Result;
use crate::ops::{ConvParams, Mode};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Standard deviation of the normal initializer for conv/deconv weights.
pub const INIT_STD: f64 = 0.02;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-forward context: mode, randomness for dropout, and whether parameter
/// leaves should record gradients.
pub struct Ctx<'a> {
    pub mode: Mode,
    pub rng: &'a mut Rng,
    pub trainable: bool,
}

impl<'a> Ctx<'a> {
    pub fn train(rng: &'a mut Rng) -> Self {
        Self { mode: Mode::Train, rng, trainable: true }
    }

    pub fn eval(rng: &'a mut Rng) -> Self {
        Self { mode: Mode::Eval, rng, trainable: false }
    }

    pub fn param(&self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Var {
        if self.trainable {
            tape.param(store, id)
        } else {
            tape.constant(store.value(id).clone())
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let w = Tensor::randn(vec![out_channels, in_channels, kernel, kernel], INIT_STD, rng);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![out_channels])));
        Self { weight, bias, in_channels, out_channels, kernel, stride, padding }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, ctx: &Ctx) -> Result<Var> {
        let w = ctx.param(tape, store, self.weight);
        let b = self.bias.map(|b| ctx.param(tape, store, b));
        tape.conv2d(x, w, b, self.stride, self.padding)
    }

    pub fn conv_params(&self, store: &ParamStore) -> ConvParams {
        ConvParams::new(
            store.value(self.weight).clone(),
            self.bias.map(|b| store.value(b).clone()),
            self.stride,
            self.padding,
        )
    }
}

/// Transposed convolution; weight layout `[C_in, C_out, k, k]`.
#[derive(Clone, Debug)]
pub struct Deconv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Deconv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let w = Tensor::randn(vec![in_channels, out_channels, kernel, kernel], INIT_STD, rng);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![out_channels])));
        Self { weight, bias, in_channels, out_channels, kernel, stride, padding }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, ctx: &Ctx) -> Result<Var> {
        let w = ctx.param(tape, store, self.weight);
        let b = self.bias.map(|b| ctx.param(tape, store, b));
        tape.deconv2d(x, w, b, self.stride, self.padding)
    }

    /// Output side for an input of side `side`.
    pub fn output_side(&self, side: usize) -> usize {
        (side - 1) * self.stride + self.kernel - 2 * self.padding
    }

    pub fn conv_params(&self, store: &ParamStore) -> ConvParams {
        ConvParams::new(
            store.value(self.weight).clone(),
            self.bias.map(|b| store.value(b).clone()),
            self.stride,
            self.padding,
        )
    }
}

/// Batch normalization over `[N, C, H, W]` with running statistics kept as
/// non-trainable buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(vec![channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(vec![channels])),
        }
    }

    /// Training mode normalizes by batch statistics and updates the running
    /// averages; evaluation mode uses the running averages.
    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, ctx: &Ctx) -> Result<Var> {
        let gamma = ctx.param(tape, store, self.gamma);
        let beta = ctx.param(tape, store, self.beta);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
                let blend = |running: &mut Tensor, batch: &[f64]| {
                    for (r, b) in running.data_mut().iter_mut().zip(batch) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                    }
                };
                blend(store.value_mut(self.running_mean), &stats.mean);
                blend(store.value_mut(self.running_var), &stats.var_unbiased);
                Ok(y)
            }
            Mode::Eval => {
                let mean = store.value(self.running_mean).data().to_vec();
                let var = store.value(self.running_var).data().to_vec();
                tape.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)
            }
        }
    }
}
