//! Central finite differences against reverse-mode gradients.
//!
//! Each case builds a scalar `mean(R ⊙ f(inputs))` with fixed random `R`, takes
//! the tape's gradient once, then re-evaluates only the forward pass at
//! `θ ± h` for a random subset of coordinates of every tensor.

use usegan_core::attention::{AttentionConfig, CmhsaBlock};
use usegan_core::loss::{d_loss_tape, g_loss_tape};
use usegan_core::model::{build_model, Discriminator, Generator, ModelConfig, Variant};
use usegan_core::nn::Ctx;
use usegan_core::use_block::{UseBlock, UseConfig};
use usegan_core::{Mode, ParamStore, Result, Rng, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
/// Denominator floor so that near-zero gradients are compared absolutely.
pub const FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
/// Coordinates probed per tensor (all of them when the tensor is smaller).
pub const PROBES: usize = 10;
pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub seed: u64,
    pub max_rel: f64,
    pub checked: usize,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel < TOLERANCE && self.checked > 0
    }
}

fn probe_indices(len: usize, rng: &mut Rng) -> Vec<usize> {
    if len <= PROBES {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut idx);
    idx.truncate(PROBES);
    idx
}

/// Weighted mean with fixed random weights, so no gradient cancels by
/// symmetry. A mean keeps the loss O(1), which keeps round-off in the
/// difference quotient (≈ ε·|L|/h) below [`FLOOR`].
pub fn scalarize(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let r = Tensor::uniform(shape, -1.0, 1.0, &mut Rng::derive(seed, "gradcheck-weights", 0));
    let prod = tape.mul_const(y, &r)?;
    tape.mean(prod)
}

fn loss_value(tape: &Tape, loss: Var) -> f64 {
    tape.value(loss).data()[0]
}

/// Gradients of `build(leaves)` with respect to every input tensor.
pub fn check_inputs(
    name: &'static str,
    seed: u64,
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<CaseResult> {
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;
    let mut rng = Rng::derive(seed, "gradcheck-probes", 0);
    let (mut max_rel, mut checked) = (0.0f64, 0);
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let l = build(&mut t, &vars)?;
        Ok(loss_value(&t, l))
    };
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(*leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for i in probe_indices(inputs[k].numel(), &mut rng) {
            let mut shifted = inputs.to_vec();
            shifted[k].data_mut()[i] += STEP;
            let up = eval(&shifted)?;
            shifted[k].data_mut()[i] -= 2.0 * STEP;
            let down = eval(&shifted)?;
            max_rel = max_rel.max(rel_err(analytic[i], (up - down) / (2.0 * STEP)));
            checked += 1;
        }
    }
    Ok(CaseResult { name, seed, max_rel, checked })
}

/// Gradients of `forward(model)` with respect to every trainable tensor of
/// the store selected by `store`.
pub fn check_store<M>(
    name: &'static str,
    seed: u64,
    model: &mut M,
    store: impl Fn(&mut M) -> &mut ParamStore,
    forward: impl Fn(&mut M, &mut Tape) -> Result<Var>,
) -> Result<CaseResult> {
    let mut tape = Tape::new();
    let loss = forward(model, &mut tape)?;
    let grads = tape.backward(loss)?;
    let s = store(model);
    s.zero_grad();
    s.accumulate(&tape, &grads);
    let ids: Vec<_> = s.ids().filter(|&id| s.get(id).trainable).collect();
    let mut rng = Rng::derive(seed, "gradcheck-probes", 1);
    let (mut max_rel, mut checked) = (0.0f64, 0);
    for id in ids {
        let analytic = store(model).grad(id).clone();
        for i in probe_indices(analytic.numel(), &mut rng) {
            let mut at = |delta: f64| -> Result<f64> {
                store(model).value_mut(id).data_mut()[i] += delta;
                let mut t = Tape::new();
                let l = forward(model, &mut t);
                store(model).value_mut(id).data_mut()[i] -= delta;
                Ok(loss_value(&t, l?))
            };
            let numeric = (at(STEP)? - at(-STEP)?) / (2.0 * STEP);
            max_rel = max_rel.max(rel_err(analytic.data()[i], numeric));
            checked += 1;
        }
    }
    Ok(CaseResult { name, seed, max_rel, checked })
}

fn randn(shape: &[usize], std: f64, seed: u64, label: &str) -> Tensor {
    Tensor::randn(shape.to_vec(), std, &mut Rng::derive(seed, label, 0))
}

pub fn conv2d_case(seed: u64) -> Result<CaseResult> {
    let stride = 1 + (seed % 2) as usize;
    let inputs =
        [randn(&[2, 3, 7, 5], 1.0, seed, "x"), randn(&[4, 3, 3, 3], 0.5, seed, "w"), randn(&[4], 0.5, seed, "b")];
    check_inputs("conv2d", seed, &inputs, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), stride, 1)?;
        scalarize(t, y, seed)
    })
}

pub fn deconv2d_case(seed: u64) -> Result<CaseResult> {
    let (k, stride, pad) = if seed.is_multiple_of(2) { (4, 2, 1) } else { (3, 1, 0) };
    let inputs =
        [randn(&[2, 3, 4, 5], 1.0, seed, "x"), randn(&[3, 4, k, k], 0.5, seed, "w"), randn(&[4], 0.5, seed, "b")];
    check_inputs("deconv2d", seed, &inputs, |t, v| {
        let y = t.deconv2d(v[0], v[1], Some(v[2]), stride, pad)?;
        scalarize(t, y, seed)
    })
}

pub fn batchnorm_case(seed: u64) -> Result<CaseResult> {
    let inputs =
        [randn(&[3, 4, 3, 3], 2.0, seed, "x"), randn(&[4], 1.0, seed, "gamma"), randn(&[4], 1.0, seed, "beta")];
    let mean: Vec<f64> = randn(&[4], 0.5, seed, "mean").into_data();
    let var: Vec<f64> = randn(&[4], 0.5, seed, "var").data().iter().map(|v| 0.5 + v.abs()).collect();
    check_inputs("batchnorm", seed, &inputs, |t, v| {
        let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
        let a = scalarize(t, y, seed)?;
        let e = t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
        let b = scalarize(t, e, seed + 1000)?;
        t.add(a, b)
    })
}

pub fn activations_case(seed: u64) -> Result<CaseResult> {
    // Kept away from the ReLU kinks.
    let x = randn(&[2, 3, 4, 4], 1.5, seed, "x").map(|v| v.signum() * (0.05 + v.abs()));
    check_inputs("activations", seed, &[x], |t, v| {
        let x = v[0];
        let mut total = None;
        for (i, y) in [t.relu(x)?, t.leaky_relu(x, 0.2)?, t.sigmoid(x)?, t.tanh(x)?, t.global_avg_pool(x)?]
            .into_iter()
            .enumerate()
        {
            let s = scalarize(t, y, seed * 10 + i as u64)?;
            total = Some(match total {
                None => s,
                Some(acc) => t.add(acc, s)?,
            });
        }
        let rows = t.reshape(x, vec![6, 16])?;
        let sm = t.softmax(rows)?;
        let s = scalarize(t, sm, seed * 10 + 9)?;
        t.add(total.expect("non-empty"), s)
    })
}

struct Block<B> {
    store: ParamStore,
    block: B,
}

/// The input joins the store as an extra tensor so its gradient is checked too.
fn with_input<B>(mut store: ParamStore, block: B, x: Tensor) -> (Block<B>, usegan_core::ParamId) {
    let id = store.add("input", x);
    (Block { store, block }, id)
}

pub fn use_case(seed: u64) -> Result<CaseResult> {
    let mut store = ParamStore::new();
    let mut rng = Rng::derive(seed, "use-init", 0);
    let block = UseBlock::new(&mut store, "use", UseConfig::new(8, 4)?, &mut rng);
    // Larger excitation weights than the default init so the sigmoid is exercised.
    for p in store.params_mut() {
        p.value = p.value.map(|v| v * 25.0);
    }
    let (mut m, x) = with_input(store, block, randn(&[2, 8, 4, 4], 1.0, seed, "x"));
    check_store(
        "USE",
        seed,
        &mut m,
        |m| &mut m.store,
        |m, tape| {
            let mut rng = Rng::seed(0);
            let ctx = Ctx::train(&mut rng);
            let xv = ctx.param(tape, &m.store, x);
            let y = m.block.forward(tape, &m.store, xv, &ctx)?;
            scalarize(tape, y, seed)
        },
    )
}

pub fn cmhsa_case(seed: u64) -> Result<CaseResult> {
    let mut store = ParamStore::new();
    let mut rng = Rng::derive(seed, "attn-init", 0);
    let block = CmhsaBlock::new(&mut store, "attn", AttentionConfig::new(8, 2, 0.1)?, &mut rng);
    for p in store.params_mut() {
        p.value = p.value.map(|v| v * 25.0);
    }
    let (mut m, x) = with_input(store, block, randn(&[2, 8, 3, 4], 1.0, seed, "x"));
    check_store(
        "CMHSA (eval)",
        seed,
        &mut m,
        |m| &mut m.store,
        |m, tape| {
            let mut rng = Rng::seed(0);
            let mut ctx = Ctx { mode: Mode::Eval, rng: &mut rng, trainable: true };
            let xv = ctx.param(tape, &m.store, x);
            let y = m.block.forward(tape, &m.store, xv, &mut ctx)?;
            scalarize(tape, y, seed)
        },
    )
}

pub fn tiny_config(variant: Variant, seed: u64) -> ModelConfig {
    ModelConfig { variant, latent_dim: 6, width: 4, image_side: 16, num_heads: 2, seed, ..ModelConfig::default() }
}

struct Gan {
    g: Generator,
    d: Discriminator,
    z: Tensor,
    real: Tensor,
}

fn tiny_gan(seed: u64) -> Result<Gan> {
    let (g, d) = build_model(&tiny_config(Variant::UseCmhsaGan, seed))?;
    Ok(Gan {
        z: randn(&[3, 6], 1.0, seed, "z"),
        real: Tensor::uniform(vec![3, 3, 16, 16], -1.0, 1.0, &mut Rng::derive(seed, "real", 0)),
        g,
        d,
    })
}

/// `L_G(D(G(z)))` in training mode, dropout mask fixed by a re-seeded rng.
fn generator_loss(m: &mut Gan, tape: &mut Tape) -> Result<Var> {
    let mut rng = Rng::seed(7);
    let mut ctx = Ctx::train(&mut rng);
    let z = tape.constant(m.z.clone());
    let fake = m.g.forward(tape, z, &mut ctx)?;
    let p = m.d.forward(tape, fake, &mut ctx)?;
    Ok(g_loss_tape(tape, p)?.0)
}

fn discriminator_loss(m: &mut Gan, tape: &mut Tape) -> Result<Var> {
    let mut rng = Rng::seed(7);
    let z = tape.constant(m.z.clone());
    let fake = m.g.forward(tape, z, &mut Ctx::eval(&mut rng))?;
    let fake = tape.constant(tape.value(fake).clone());
    let real = tape.constant(m.real.clone());
    let mut ctx = Ctx::train(&mut rng);
    let pr = m.d.forward(tape, real, &mut ctx)?;
    let pf = m.d.forward(tape, fake, &mut ctx)?;
    Ok(d_loss_tape(tape, pr, pf)?.0)
}

pub fn generator_case(seed: u64) -> Result<CaseResult> {
    let mut m = tiny_gan(seed)?;
    check_store("generator + L_G", seed, &mut m, |m| m.g.params_mut(), generator_loss)
}

pub fn discriminator_case(seed: u64) -> Result<CaseResult> {
    let mut m = tiny_gan(seed)?;
    let through_g = check_store("discriminator + L_G", seed, &mut m, |m| m.d.params_mut(), generator_loss)?;
    let direct = check_store("discriminator + L_D", seed, &mut m, |m| m.d.params_mut(), discriminator_loss)?;
    Ok(CaseResult {
        name: "discriminator + L_G, L_D",
        seed,
        max_rel: through_g.max_rel.max(direct.max_rel),
        checked: through_g.checked + direct.checked,
    })
}

pub type Case = fn(u64) -> Result<CaseResult>;

pub const CASES: [(&str, Case); 8] = [
    ("conv2d", conv2d_case),
    ("deconv2d", deconv2d_case),
    ("batchnorm", batchnorm_case),
    ("activations", activations_case),
    ("USE", use_case),
    ("CMHSA (eval)", cmhsa_case),
    ("generator + L_G", generator_case),
    ("discriminator + L_G, L_D", discriminator_case),
];

/// Every case under every seed.
pub fn full_suite() -> Result<Vec<CaseResult>> {
    CASES.iter().flat_map(|&(_, case)| SEEDS.iter().map(move |&s| case(s))).collect()
}
