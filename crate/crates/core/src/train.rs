//! Alternating adversarial updates: one discriminator step on
//! (real, detached fake), then one generator step.

use serde::{Deserialize, Serialize};

use crate::data::{step_batch, ImageSet};
use crate::error::{Error, Result};
use crate::loss::{d_loss_tape, g_loss_tape, LossValue};
use crate::model::{build_model, Discriminator, Generator, ModelConfig};
use crate::nn::Ctx;
use crate::ops::Mode;
use crate::optim::{AdamConfig, OptState};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Generator, discriminator and both optimizer states.
#[derive(Clone, Debug)]
pub struct GanState {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub opt_g: OptState,
    pub opt_d: OptState,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: u64,
    pub d: LossValue,
    pub g: LossValue,
}

impl GanState {
    pub fn new(model: &ModelConfig, adam_g: AdamConfig, adam_d: AdamConfig) -> Result<Self> {
        let (generator, discriminator) = build_model(model)?;
        let opt_g = OptState::new(generator.params(), adam_g);
        let opt_d = OptState::new(discriminator.params(), adam_d);
        Ok(Self { generator, discriminator, opt_g, opt_d })
    }

    pub fn config(&self) -> &ModelConfig {
        self.generator.config()
    }

    /// Number of completed training steps.
    pub fn step(&self) -> u64 {
        self.opt_g.step
    }
}

fn diverged(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged { step, detail: format!("non-finite value in {op}") },
        other => other,
    }
}

fn check_finite(step: u64, what: &str, l: &LossValue) -> Result<()> {
    if l.total.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            detail: format!("{what} = {} (real term {}, fake term {})", l.total, l.real_term, l.fake_term),
        })
    }
}

/// One D update followed by one G update on `real` (`[N, C, S, S]`).
pub fn train_step(state: &mut GanState, real: &Tensor, rng: &mut Rng) -> Result<StepLosses> {
    let step = state.step();
    let cfg = state.config();
    let (n, c, h, w) = real.dims4()?;
    if c != cfg.image_channels || h != cfg.image_side || w != cfg.image_side {
        return Err(Error::shape(
            "train_step",
            format!(
                "real batch must be [N, {}, {s}, {s}], got {:?}",
                cfg.image_channels,
                real.shape(),
                s = cfg.image_side
            ),
        ));
    }
    let z = state.generator.sample_latents(n, rng);

    // Generator forward; its tape is reused for the G step below.
    let mut tape_g = Tape::new();
    let zv = tape_g.constant(z);
    let fake = state.generator.forward(&mut tape_g, zv, &mut Ctx::train(rng)).map_err(|e| diverged(step, e))?;

    // Discriminator step on (real, detached fake).
    let mut tape_d = Tape::new();
    let real_v = tape_d.constant(real.clone());
    let fake_v = tape_d.constant(tape_g.value(fake).clone());
    let d_losses = {
        let d = &mut state.discriminator;
        let mut ctx = Ctx::train(rng);
        let p_real = d.forward(&mut tape_d, real_v, &mut ctx).map_err(|e| diverged(step, e))?;
        let p_fake = d.forward(&mut tape_d, fake_v, &mut ctx).map_err(|e| diverged(step, e))?;
        let (loss, value) = d_loss_tape(&mut tape_d, p_real, p_fake)?;
        check_finite(step, "L_D", &value)?;
        let grads = tape_d.backward(loss)?;
        d.params_mut().zero_grad();
        d.params_mut().accumulate(&tape_d, &grads);
        state.opt_d.step(d.params_mut())?;
        value
    };

    // Generator step through the freshly updated, frozen discriminator.
    let g_losses = {
        let mut ctx = Ctx { mode: Mode::Train, rng, trainable: false };
        let p_fake = state.discriminator.forward(&mut tape_g, fake, &mut ctx).map_err(|e| diverged(step, e))?;
        let (loss, value) = g_loss_tape(&mut tape_g, p_fake)?;
        check_finite(step, "L_G", &value)?;
        let grads = tape_g.backward(loss)?;
        let g = state.generator.params_mut();
        g.zero_grad();
        g.accumulate(&tape_g, &grads);
        state.opt_g.step(g)?;
        value
    };

    Ok(StepLosses { step: step + 1, d: d_losses, g: g_losses })
}

/// Randomness for global step `step` of a run seeded with `seed`.
pub fn step_rng(seed: u64, step: u64) -> Rng {
    Rng::derive(seed, "train-step", step)
}

/// Advances `state` until `until` completed steps, calling `on_step` after
/// each. Batches and noise depend only on `(seed, step)`, so stopping and
/// resuming from a checkpoint reproduces the uninterrupted run.
pub fn fit(
    state: &mut GanState,
    data: &ImageSet,
    batch_size: usize,
    seed: u64,
    until: u64,
    mut on_step: impl FnMut(&mut GanState, &StepLosses) -> Result<()>,
) -> Result<()> {
    while state.step() < until {
        let step = state.step();
        let idx = step_batch(data.len(), batch_size, seed, step)?;
        let batch = data.batch(&idx)?;
        let mut rng = step_rng(seed, step);
        let losses = train_step(state, &batch.images, &mut rng)?;
        on_step(state, &losses)?;
    }
    Ok(())
}
