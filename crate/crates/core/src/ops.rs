//! Value-level entry points for the differentiable primitives. Each call
//! records onto a scratch tape; use [`Tape`] directly when gradients are
//! needed.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Weights of a convolution or transposed convolution.
///
/// `weight` is `[C_out, C_in, k, k]` for [`conv2d`] and `[C_in, C_out, k, k]`
/// for [`deconv2d`].
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        Self { weight, bias, stride, padding }
    }
}

/// Forward or evaluation behaviour of stochastic and batch-statistic layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn unary(x: &Tensor, f: impl FnOnce(&mut Tape, crate::tape::Var) -> Result<crate::tape::Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).clone())
}

pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(p.weight.clone());
    let b = p.bias.clone().map(|b| tape.constant(b));
    let out = tape.conv2d(xv, w, b, p.stride, p.padding)?;
    Ok(tape.value(out).clone())
}

pub fn deconv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(p.weight.clone());
    let b = p.bias.clone().map(|b| tape.constant(b));
    let out = tape.deconv2d(xv, w, b, p.stride, p.padding)?;
    Ok(tape.value(out).clone())
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    unary(x, |t, v| t.global_avg_pool(v))
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    unary(x, |t, v| t.relu(v))
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    unary(x, |t, v| t.sigmoid(v))
}

pub fn tanh(x: &Tensor) -> Result<Tensor> {
    unary(x, |t, v| t.tanh(v))
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    unary(x, |t, v| t.leaky_relu(v, slope))
}

/// Softmax along the trailing axis.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    unary(x, |t, v| t.softmax(v))
}

/// Draws an inverted-dropout mask: each element is 1 with probability `1 - p`.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut Rng) -> Result<Tensor> {
    check_rate(p)?;
    if p == 0.0 {
        return Ok(Tensor::ones(shape.to_vec()));
    }
    Ok(Tensor::from_fn(shape.to_vec(), |_| if rng.bernoulli(1.0 - p) { 1.0 } else { 0.0 }))
}

pub(crate) fn check_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout rate must lie in [0, 1), got {p}")));
    }
    Ok(())
}

/// `x ⊙ mask / (1 - p)` in training mode; identity (all-ones mask) in
/// evaluation mode.
pub fn dropout(x: &Tensor, p: f64, rng: &mut Rng, mode: Mode) -> Result<(Tensor, Tensor)> {
    check_rate(p)?;
    let mask = match mode {
        Mode::Train => dropout_mask(x.shape(), p, rng)?,
        Mode::Eval => return Ok((x.clone(), Tensor::ones(x.shape().to_vec()))),
    };
    let out = apply_mask(x, &mask, p)?;
    Ok((out, mask))
}

pub fn apply_mask(x: &Tensor, mask: &Tensor, p: f64) -> Result<Tensor> {
    check_rate(p)?;
    let keep = 1.0 - p;
    x.zip_map(mask, |v, m| v * m / keep)
}
