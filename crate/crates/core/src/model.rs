//! The DCGAN-style generator/discriminator pair and its ablation variants.
//!
//! Generator ladder for side `S`: the latent is projected to a 4×4 map by a
//! stride-1 transposed convolution, then doubled by stride-2 DeConv blocks
//! (deconv + batch norm + ReLU) until `S/2`, and a final deconv + tanh emits
//! the image. Channel width halves at every doubling and is `width` at
//! `S/2`. The USE variants replace the DeConv block whose input side is
//! `use_stage` with a USE block (followed by the same batch norm + ReLU);
//! the CMHSA variants insert an attention block on the map of side
//! `attention_stage`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionConfig, CmhsaBlock, DEFAULT_DROPOUT, DEFAULT_HEADS, MAX_POSITIONS};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Ctx, Deconv2d};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::use_block::{UseBlock, UseConfig};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "dcgan")]
    Dcgan,
    #[serde(rename = "use-gan")]
    UseGan,
    #[serde(rename = "cmhsa-gan")]
    CmhsaGan,
    #[serde(rename = "use-cmhsa-gan")]
    UseCmhsaGan,
}

impl Variant {
    /// The four ablation rows in reporting order.
    pub const ALL: [Variant; 4] = [Variant::Dcgan, Variant::UseGan, Variant::CmhsaGan, Variant::UseCmhsaGan];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dcgan => "DCGAN",
            Variant::UseGan => "USE-GAN",
            Variant::CmhsaGan => "CMHSA-GAN",
            Variant::UseCmhsaGan => "USE-CMHSA-GAN",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Variant::Dcgan => "dcgan",
            Variant::UseGan => "use-gan",
            Variant::CmhsaGan => "cmhsa-gan",
            Variant::UseCmhsaGan => "use-cmhsa-gan",
        }
    }

    pub fn has_use(self) -> bool {
        matches!(self, Variant::UseGan | Variant::UseCmhsaGan)
    }

    pub fn has_attention(self) -> bool {
        matches!(self, Variant::CmhsaGan | Variant::UseCmhsaGan)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.slug().eq_ignore_ascii_case(s) || v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown variant {s:?}; expected one of {}",
                    Variant::ALL.map(|v| v.slug()).join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub latent_dim: usize,
    /// Channel count at the `S/2` stage; doubles toward the 4×4 stage.
    pub width: usize,
    pub image_channels: usize,
    pub image_side: usize,
    pub num_heads: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Input side of the DeConv block replaced by USE (default `S/4`).
    pub use_stage: Option<usize>,
    /// Side of the feature map that CMHSA attends over (default `S/4`).
    pub attention_stage: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::UseCmhsaGan,
            latent_dim: 100,
            width: 64,
            image_channels: 3,
            image_side: 64,
            num_heads: DEFAULT_HEADS,
            dropout: DEFAULT_DROPOUT,
            seed: 0,
            use_stage: None,
            attention_stage: None,
        }
    }
}

impl ModelConfig {
    pub fn use_stage(&self) -> usize {
        self.use_stage.unwrap_or(self.image_side / 4)
    }

    pub fn attention_stage(&self) -> usize {
        self.attention_stage.unwrap_or(self.image_side / 4)
    }

    /// Number of stride-2 doublings from 4×4 to the image.
    fn doublings(&self) -> u32 {
        (self.image_side / 4).trailing_zeros()
    }

    /// Generator channel count of the feature map with the given side.
    pub fn channels_at(&self, side: usize) -> usize {
        // side = S/2 has `width`; every halving of side doubles channels.
        let steps = (self.image_side / 2 / side).trailing_zeros();
        self.width << steps
    }

    /// Every problem with this configuration, or `Ok` if none.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        let s = self.image_side;
        if s < 16 || !s.is_power_of_two() {
            p.push(format!("image_side must be a power of two >= 16, got {s}"));
        }
        if self.latent_dim == 0 {
            p.push("latent_dim must be positive".into());
        }
        if self.width == 0 {
            p.push("width must be positive".into());
        }
        if self.image_channels == 0 {
            p.push("image_channels must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            p.push(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if p.is_empty() {
            let stages: Vec<usize> = (0..self.doublings()).map(|i| 4usize << i).collect();
            if self.variant.has_use() {
                let u = self.use_stage();
                // valid USE positions: inputs of the mid-stack blocks, 4 ..= S/4
                if !stages[..stages.len() - 1].contains(&u) {
                    p.push(format!(
                        "use_stage {u} must be the input side of a mid-stack DeConv block ({:?})",
                        &stages[..stages.len() - 1]
                    ));
                } else if !self.channels_at(u).is_multiple_of(2) {
                    p.push(format!("USE block input channels {} must be even", self.channels_at(u)));
                }
            }
            if self.variant.has_attention() {
                let a = self.attention_stage();
                if !stages.contains(&a) {
                    p.push(format!("attention_stage {a} must lie between two DeConv blocks ({stages:?})"));
                } else {
                    let c = self.channels_at(a);
                    if self.num_heads == 0 || !c.is_multiple_of(self.num_heads) {
                        p.push(format!(
                            "attention channels {c} at stage {a} are not divisible by num_heads {}",
                            self.num_heads
                        ));
                    }
                    if a * a > MAX_POSITIONS {
                        p.push(format!("attention over {a}x{a} exceeds {MAX_POSITIONS} positions"));
                    }
                }
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

/// Structural role of a generator layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Deconv,
    Use,
    Attention,
    Output,
}

impl BlockKind {
    fn tag(self) -> &'static str {
        match self {
            BlockKind::Deconv => "deconv",
            BlockKind::Use => "use",
            BlockKind::Attention => "attention",
            BlockKind::Output => "output",
        }
    }

    /// Recovers the kind from a parameter name such as `g.3.use.upsample.weight`.
    pub fn of_param(name: &str) -> Option<BlockKind> {
        let kind = name.split('.').nth(2)?;
        [BlockKind::Deconv, BlockKind::Use, BlockKind::Attention, BlockKind::Output]
            .into_iter()
            .find(|k| k.tag() == kind)
    }
}

#[derive(Clone, Debug)]
enum GenLayer {
    Deconv { deconv: Deconv2d, bn: BatchNorm2d },
    Use { block: UseBlock, bn: BatchNorm2d },
    Attention(CmhsaBlock),
    Output(Deconv2d),
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: ModelConfig,
    layers: Vec<GenLayer>,
    store: ParamStore,
}

impl Generator {
    fn build(cfg: &ModelConfig) -> Result<Self> {
        let mut rng = Rng::derive(cfg.seed, "generator-init", 0);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let name = |i: usize, kind: BlockKind| format!("g.{i}.{}", kind.tag());

        let c4 = cfg.channels_at(4);
        let n = name(0, BlockKind::Deconv);
        layers.push(GenLayer::Deconv {
            deconv: Deconv2d::new(&mut store, &n, cfg.latent_dim, c4, 4, 1, 0, false, &mut rng),
            bn: BatchNorm2d::new(&mut store, &format!("{n}.bn"), c4),
        });

        let mut side = 4;
        while side < cfg.image_side / 2 {
            if cfg.variant.has_attention() && cfg.attention_stage() == side {
                let acfg = AttentionConfig::new(cfg.channels_at(side), cfg.num_heads, cfg.dropout)?;
                let n = name(layers.len(), BlockKind::Attention);
                layers.push(GenLayer::Attention(CmhsaBlock::new(&mut store, &n, acfg, &mut rng)));
            }
            let (c_in, c_out) = (cfg.channels_at(side), cfg.channels_at(side * 2));
            if cfg.variant.has_use() && cfg.use_stage() == side {
                let n = name(layers.len(), BlockKind::Use);
                let block = UseBlock::new(&mut store, &n, UseConfig::new(c_in, c_out)?, &mut rng);
                layers.push(GenLayer::Use { block, bn: BatchNorm2d::new(&mut store, &format!("{n}.bn"), c_out) });
            } else {
                let n = name(layers.len(), BlockKind::Deconv);
                layers.push(GenLayer::Deconv {
                    deconv: Deconv2d::new(&mut store, &n, c_in, c_out, 4, 2, 1, false, &mut rng),
                    bn: BatchNorm2d::new(&mut store, &format!("{n}.bn"), c_out),
                });
            }
            side *= 2;
        }
        if cfg.variant.has_attention() && cfg.attention_stage() == side {
            let acfg = AttentionConfig::new(cfg.channels_at(side), cfg.num_heads, cfg.dropout)?;
            let n = name(layers.len(), BlockKind::Attention);
            layers.push(GenLayer::Attention(CmhsaBlock::new(&mut store, &n, acfg, &mut rng)));
        }
        let n = name(layers.len(), BlockKind::Output);
        layers.push(GenLayer::Output(Deconv2d::new(
            &mut store,
            &n,
            cfg.channels_at(side),
            cfg.image_channels,
            4,
            2,
            1,
            false,
            &mut rng,
        )));
        Ok(Self { config: cfg.clone(), layers, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn block_kinds(&self) -> Vec<BlockKind> {
        self.layers
            .iter()
            .map(|l| match l {
                GenLayer::Deconv { .. } => BlockKind::Deconv,
                GenLayer::Use { .. } => BlockKind::Use,
                GenLayer::Attention(_) => BlockKind::Attention,
                GenLayer::Output(_) => BlockKind::Output,
            })
            .collect()
    }

    /// Maps latents `[N, latent_dim]` to images `[N, C, S, S]` in (−1, 1).
    pub fn forward(&mut self, tape: &mut Tape, z: Var, ctx: &mut Ctx) -> Result<Var> {
        let zs = tape.value(z).shape().to_vec();
        if zs.len() != 2 || zs[1] != self.config.latent_dim {
            return Err(Error::shape(
                "generator",
                format!("latent batch must be [N, {}], got {zs:?}", self.config.latent_dim),
            ));
        }
        let mut h = tape.reshape(z, vec![zs[0], zs[1], 1, 1])?;
        for layer in &self.layers {
            h = match layer {
                GenLayer::Deconv { deconv, bn } => {
                    let y = deconv.forward(tape, &self.store, h, ctx)?;
                    let y = bn.forward(tape, &mut self.store, y, ctx)?;
                    tape.relu(y)?
                }
                GenLayer::Use { block, bn } => {
                    let y = block.forward(tape, &self.store, h, ctx)?;
                    let y = bn.forward(tape, &mut self.store, y, ctx)?;
                    tape.relu(y)?
                }
                GenLayer::Attention(block) => block.forward(tape, &self.store, h, ctx)?,
                GenLayer::Output(deconv) => {
                    let y = deconv.forward(tape, &self.store, h, ctx)?;
                    tape.tanh(y)?
                }
            };
        }
        Ok(h)
    }

    /// Evaluation-mode images for a batch of latents.
    pub fn generate(&mut self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        // dropout is off in eval mode, so this stream is never drawn from
        let mut rng = Rng::seed(0);
        let out = self.forward(&mut tape, zv, &mut Ctx::eval(&mut rng))?;
        Ok(tape.value(out).clone())
    }

    pub fn sample_latents(&self, n: usize, rng: &mut Rng) -> Tensor {
        Tensor::randn(vec![n, self.config.latent_dim], 1.0, rng)
    }
}

#[derive(Clone, Debug)]
struct DiscBlock {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
}

/// DCGAN discriminator, identical for every variant.
#[derive(Clone, Debug)]
pub struct Discriminator {
    config: ModelConfig,
    blocks: Vec<DiscBlock>,
    head: Conv2d,
    store: ParamStore,
}

impl Discriminator {
    fn build(cfg: &ModelConfig) -> Self {
        let mut rng = Rng::derive(cfg.seed, "discriminator-init", 0);
        let mut store = ParamStore::new();
        let mut blocks = Vec::new();
        let mut side = cfg.image_side;
        let mut c_in = cfg.image_channels;
        while side > 4 {
            let c_out = cfg.channels_at(side / 2);
            let i = blocks.len();
            let conv = Conv2d::new(&mut store, &format!("d.{i}.conv"), c_in, c_out, 4, 2, 1, false, &mut rng);
            let bn = (i > 0).then(|| BatchNorm2d::new(&mut store, &format!("d.{i}.bn"), c_out));
            blocks.push(DiscBlock { conv, bn });
            c_in = c_out;
            side /= 2;
        }
        let head = Conv2d::new(&mut store, "d.head", c_in, 1, 4, 1, 0, false, &mut rng);
        Self { config: cfg.clone(), blocks, head, store }
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Maps images `[N, C, S, S]` to probabilities `[N]`.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let (n, c, h, w) = tape.value(x).dims4()?;
        let s = self.config.image_side;
        if c != self.config.image_channels || h != s || w != s {
            return Err(Error::shape(
                "discriminator",
                format!("expected [N, {}, {s}, {s}], got [{n}, {c}, {h}, {w}]", self.config.image_channels),
            ));
        }
        let mut h = x;
        for block in &self.blocks {
            h = block.conv.forward(tape, &self.store, h, ctx)?;
            if let Some(bn) = &block.bn {
                h = bn.forward(tape, &mut self.store, h, ctx)?;
            }
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        }
        let logit = self.head.forward(tape, &self.store, h, ctx)?;
        let p = tape.sigmoid(logit)?;
        tape.reshape(p, vec![n])
    }

    pub fn classify(&mut self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let mut rng = Rng::seed(0);
        let p = self.forward(&mut tape, x, &mut Ctx::eval(&mut rng))?;
        Ok(tape.value(p).clone())
    }
}

/// Builds the generator/discriminator pair, deterministically from `cfg.seed`.
pub fn build_model(cfg: &ModelConfig) -> Result<(Generator, Discriminator)> {
    cfg.validate()?;
    Ok((Generator::build(cfg)?, Discriminator::build(cfg)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            latent_dim: 8,
            width: 8,
            image_side: 16,
            num_heads: 2,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(v.slug().parse::<Variant>().unwrap(), v);
        }
        assert!("wgan".parse::<Variant>().is_err());
    }

    #[test]
    fn default_ladder_matches_dcgan_64() {
        let cfg = ModelConfig::default();
        assert_eq!([4, 8, 16, 32].map(|s| cfg.channels_at(s)), [512, 256, 128, 64]);
        assert_eq!(cfg.use_stage(), 16);
        assert_eq!(cfg.attention_stage(), 16);
    }

    #[test]
    fn block_layout_per_variant() {
        use BlockKind::*;
        let layout = |v| build_model(&ModelConfig { variant: v, ..ModelConfig::default() }).unwrap().0.block_kinds();
        assert_eq!(layout(Variant::Dcgan), vec![Deconv, Deconv, Deconv, Deconv, Output]);
        assert_eq!(layout(Variant::UseGan), vec![Deconv, Deconv, Deconv, Use, Output]);
        assert_eq!(layout(Variant::CmhsaGan), vec![Deconv, Deconv, Deconv, Attention, Deconv, Output]);
        assert_eq!(layout(Variant::UseCmhsaGan), vec![Deconv, Deconv, Deconv, Attention, Use, Output]);
    }

    #[test]
    fn validation_lists_every_problem() {
        let cfg = ModelConfig { image_side: 48, latent_dim: 0, dropout: 1.0, ..ModelConfig::default() };
        match cfg.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 3, "{p:?}"),
            other => panic!("{other:?}"),
        }
        let heads = ModelConfig { num_heads: 3, ..ModelConfig::default() };
        assert!(heads.validate().is_err());
        let odd = ModelConfig { width: 3, image_side: 16, num_heads: 1, ..ModelConfig::default() };
        // USE input at side 4 has 6 channels, fine; attention over 6 with 1 head, fine
        assert!(odd.validate().is_ok());
        let misplaced = ModelConfig { use_stage: Some(32), ..ModelConfig::default() };
        assert!(misplaced.validate().is_err());
    }

    #[test]
    fn generator_and_discriminator_shapes() {
        for v in Variant::ALL {
            let (mut g, mut d) = build_model(&tiny(v)).unwrap();
            let z = g.sample_latents(3, &mut Rng::seed(1));
            let x = g.generate(&z).unwrap();
            assert_eq!(x.shape(), &[3, 3, 16, 16]);
            assert!(x.data().iter().all(|&v| v > -1.0 && v < 1.0));
            let p = d.classify(&x).unwrap();
            assert_eq!(p.shape(), &[3]);
            assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn construction_is_deterministic() {
        let cfg = tiny(Variant::UseCmhsaGan);
        let (g1, d1) = build_model(&cfg).unwrap();
        let (g2, d2) = build_model(&cfg).unwrap();
        for (a, b) in g1.params().params().iter().zip(g2.params().params()) {
            assert_eq!(a.value, b.value);
        }
        for (a, b) in d1.params().params().iter().zip(d2.params().params()) {
            assert_eq!(a.value, b.value);
        }
        let other = ModelConfig { seed: 4, ..cfg };
        let (g3, _) = build_model(&other).unwrap();
        assert_ne!(g1.params().params()[0].value, g3.params().params()[0].value);
    }

    #[test]
    fn discriminator_ignores_variant() {
        let (_, d1) = build_model(&tiny(Variant::Dcgan)).unwrap();
        let (_, d2) = build_model(&tiny(Variant::UseCmhsaGan)).unwrap();
        let names = |d: &Discriminator| d.params().params().iter().map(|p| p.name.clone()).collect::<Vec<_>>();
        assert_eq!(names(&d1), names(&d2));
        for (a, b) in d1.params().params().iter().zip(d2.params().params()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn rejects_wrong_latent_and_image_shapes() {
        let (mut g, mut d) = build_model(&tiny(Variant::Dcgan)).unwrap();
        assert!(g.generate(&Tensor::zeros(vec![2, 9])).is_err());
        assert!(d.classify(&Tensor::zeros(vec![2, 3, 32, 32])).is_err());
    }
}
