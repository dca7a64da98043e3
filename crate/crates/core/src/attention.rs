//! Convolution-based multi-head self-attention over spatial positions.
//!
//! Q, K and V come from 1×1 convolutions of the input feature map, split
//! into heads and flattened to `L = H·W` positions. Scores are scaled dot
//! products, softmax-normalized per query row, passed through inverted
//! dropout, and used to mix V. A 1×1 output projection plus the input forms
//! the residual output.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx};
use crate::ops::{self, Mode};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Upper bound on `H·W`; score matrices are `L×L` per head.
pub const MAX_POSITIONS: usize = 4096;
pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub in_channels: usize,
    pub num_heads: usize,
    pub dropout: f64,
}

impl AttentionConfig {
    pub fn new(in_channels: usize, num_heads: usize, dropout: f64) -> Result<Self> {
        let mut problems = Vec::new();
        if num_heads == 0 || in_channels == 0 || !in_channels.is_multiple_of(num_heads) {
            problems.push(format!(
                "attention channels ({in_channels}) must be a positive multiple of num_heads ({num_heads})"
            ));
        }
        if !(0.0..1.0).contains(&dropout) {
            problems.push(format!("attention dropout must lie in [0, 1), got {dropout}"));
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Ok(Self { in_channels, num_heads, dropout })
    }

    pub fn head_dim(&self) -> usize {
        self.in_channels / self.num_heads
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }
}

/// Score matrices for every sample and head, each `[N, heads, L, L]`.
#[derive(Clone, Debug)]
pub struct AttentionScores {
    /// Scaled dot products `Q_i·K_j / sqrt(head_dim)`.
    pub attn: Tensor,
    /// Row-wise softmax of `attn`.
    pub alpha: Tensor,
    pub mask: Tensor,
    /// `alpha ⊙ mask / (1 - p)`.
    pub alpha_prime: Tensor,
    pub dropout: f64,
}

/// Flat gather indices taking `[N, C, L]` to `[N, heads, L, head_dim]`.
fn split_heads_index(n: usize, c: usize, l: usize, heads: usize) -> Vec<usize> {
    let d = c / heads;
    let mut index = Vec::with_capacity(n * c * l);
    for s in 0..n {
        for h in 0..heads {
            for pos in 0..l {
                for dd in 0..d {
                    index.push((s * c + h * d + dd) * l + pos);
                }
            }
        }
    }
    index
}

/// Inverse of [`split_heads_index`].
fn merge_heads_index(n: usize, c: usize, l: usize, heads: usize) -> Vec<usize> {
    let d = c / heads;
    let mut index = Vec::with_capacity(n * c * l);
    for s in 0..n {
        for ch in 0..c {
            let (h, dd) = (ch / d, ch % d);
            for pos in 0..l {
                index.push(((s * heads + h) * l + pos) * d + dd);
            }
        }
    }
    index
}

/// Splits a projected `[N, C, H, W]` map into `[N, heads, L, head_dim]`.
pub fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let (n, c, h, w) = tape.value(x).dims4()?;
    if c % heads != 0 {
        return Err(Error::shape("split_heads", format!("{c} channels not divisible by {heads} heads")));
    }
    let l = h * w;
    tape.gather(x, vec![n, heads, l, c / heads], split_heads_index(n, c, l, heads))
}

/// Reassembles `[N, heads, L, head_dim]` into `[N, C, h, w]`.
pub fn merge_heads(tape: &mut Tape, x: Var, h: usize, w: usize) -> Result<Var> {
    let [n, heads, l, d] = tape.value(x).shape()[..] else {
        return Err(Error::shape("merge_heads", "expected [N, heads, L, head_dim]"));
    };
    if l != h * w {
        return Err(Error::shape("merge_heads", format!("{l} positions cannot form {h}x{w}")));
    }
    let c = heads * d;
    tape.gather(x, vec![n, c, h, w], merge_heads_index(n, c, l, heads))
}

/// Scores, softmax and dropout. Returns `(attn, alpha, alpha_prime, mask)`.
pub fn attention_weights(
    tape: &mut Tape,
    q: Var,
    k: Var,
    cfg: &AttentionConfig,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Var, Var, Var, Tensor)> {
    let (qs, ks) = (tape.value(q).shape(), tape.value(k).shape());
    if qs.len() != 4 || qs != ks || qs[1] != cfg.num_heads || qs[3] != cfg.head_dim() {
        return Err(Error::shape(
            "attention_weights",
            format!("Q {qs:?} and K {ks:?} must both be [N, {}, L, {}]", cfg.num_heads, cfg.head_dim()),
        ));
    }
    let dots = tape.matmul(q, k, true)?;
    let attn = tape.scale(dots, cfg.scale())?;
    let alpha = tape.softmax(attn)?;
    let shape = tape.value(alpha).shape().to_vec();
    if mode == Mode::Eval || cfg.dropout == 0.0 {
        return Ok((attn, alpha, alpha, Tensor::ones(shape)));
    }
    let mask = ops::dropout_mask(&shape, cfg.dropout, rng)?;
    let keep = 1.0 - cfg.dropout;
    let factor = mask.map(|m| m / keep);
    let alpha_prime = tape.mul_const(alpha, &factor)?;
    Ok((attn, alpha, alpha_prime, mask))
}

/// `Output_i = Σ_j α′_ij V_j` per sample and head.
pub fn attention_apply(tape: &mut Tape, alpha_prime: Var, v: Var) -> Result<Var> {
    tape.matmul(alpha_prime, v, false)
}

/// Value-level form of [`attention_weights`].
pub fn compute_scores(
    q: &Tensor,
    k: &Tensor,
    cfg: &AttentionConfig,
    mode: Mode,
    rng: &mut Rng,
) -> Result<AttentionScores> {
    let mut tape = Tape::new();
    let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
    let (attn, alpha, alpha_prime, mask) = attention_weights(&mut tape, qv, kv, cfg, mode, rng)?;
    Ok(AttentionScores {
        attn: tape.value(attn).clone(),
        alpha: tape.value(alpha).clone(),
        mask,
        alpha_prime: tape.value(alpha_prime).clone(),
        dropout: cfg.dropout,
    })
}

/// Value-level form of [`attention_apply`].
pub fn apply_scores(scores: &AttentionScores, v: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (a, vv) = (tape.constant(scores.alpha_prime.clone()), tape.constant(v.clone()));
    let out = attention_apply(&mut tape, a, vv)?;
    Ok(tape.value(out).clone())
}

/// The four 1×1 projections of the block, each `C → C`.
#[derive(Clone, Debug)]
pub struct QkvProjection {
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub out_proj: Conv2d,
}

impl QkvProjection {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut Rng) -> Self {
        let mut conv = |suffix: &str, rng: &mut Rng| {
            Conv2d::new(store, &format!("{name}.{suffix}"), channels, channels, 1, 1, 0, true, rng)
        };
        Self {
            query: conv("query", rng),
            key: conv("key", rng),
            value: conv("value", rng),
            out_proj: conv("out_proj", rng),
        }
    }
}

/// Intermediate values of one attention forward pass.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub attn: Var,
    pub alpha: Var,
    pub alpha_prime: Var,
    pub mask: Tensor,
    pub heads_out: Var,
    /// `out_proj(Output)` before the residual add.
    pub pre_residual: Var,
    pub output: Var,
}

impl AttentionTrace {
    pub fn scores(&self, tape: &Tape, dropout: f64) -> AttentionScores {
        AttentionScores {
            attn: tape.value(self.attn).clone(),
            alpha: tape.value(self.alpha).clone(),
            mask: self.mask.clone(),
            alpha_prime: tape.value(self.alpha_prime).clone(),
            dropout,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CmhsaBlock {
    pub config: AttentionConfig,
    pub projection: QkvProjection,
}

impl CmhsaBlock {
    pub fn new(store: &mut ParamStore, name: &str, config: AttentionConfig, rng: &mut Rng) -> Self {
        let projection = QkvProjection::new(store, name, config.in_channels, rng);
        Self { config, projection }
    }

    /// Q, K, V as `[N, heads, L, head_dim]`.
    pub fn project_qkv(&self, tape: &mut Tape, store: &ParamStore, x: Var, ctx: &Ctx) -> Result<(Var, Var, Var)> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        if c != self.config.in_channels {
            return Err(Error::shape("cmhsa", format!("expected {} channels, got {c}", self.config.in_channels)));
        }
        if h * w > MAX_POSITIONS {
            return Err(Error::shape(
                "cmhsa",
                format!("{h}x{w} = {} positions exceeds the limit of {MAX_POSITIONS}", h * w),
            ));
        }
        let p = &self.projection;
        let heads = self.config.num_heads;
        let q = p.query.forward(tape, store, x, ctx)?;
        let q = split_heads(tape, q, heads)?;
        let k = p.key.forward(tape, store, x, ctx)?;
        let k = split_heads(tape, k, heads)?;
        let v = p.value.forward(tape, store, x, ctx)?;
        let v = split_heads(tape, v, heads)?;
        Ok((q, k, v))
    }

    pub fn trace(&self, tape: &mut Tape, store: &ParamStore, x: Var, ctx: &mut Ctx) -> Result<AttentionTrace> {
        let (_, _, h, w) = tape.value(x).dims4()?;
        let (q, k, v) = self.project_qkv(tape, store, x, ctx)?;
        let (attn, alpha, alpha_prime, mask) = attention_weights(tape, q, k, &self.config, ctx.mode, ctx.rng)?;
        let heads_out = attention_apply(tape, alpha_prime, v)?;
        let merged = merge_heads(tape, heads_out, h, w)?;
        let pre_residual = self.projection.out_proj.forward(tape, store, merged, ctx)?;
        let output = tape.add(pre_residual, x)?;
        Ok(AttentionTrace { q, k, v, attn, alpha, alpha_prime, mask, heads_out, pre_residual, output })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, ctx: &mut Ctx) -> Result<Var> {
        Ok(self.trace(tape, store, x, ctx)?.output)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(c: usize, heads: usize, p: f64, seed: u64) -> (ParamStore, CmhsaBlock) {
        let mut store = ParamStore::new();
        let cfg = AttentionConfig::new(c, heads, p).unwrap();
        let b = CmhsaBlock::new(&mut store, "attn", cfg, &mut Rng::seed(seed));
        (store, b)
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn config_derives_head_dim_and_scale() {
        let cfg = AttentionConfig::new(4, 2, 0.1).unwrap();
        assert_eq!(cfg.head_dim(), 2);
        assert!((cfg.scale() - 0.70711).abs() < 1e-5);
        assert_eq!(cfg.scale(), 1.0 / 2f64.sqrt());
        assert!(AttentionConfig::new(6, 4, 0.1).is_err());
        assert!(AttentionConfig::new(8, 4, 1.0).is_err());
        match AttentionConfig::new(6, 4, 1.5) {
            Err(Error::Config(p)) => assert_eq!(p.len(), 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn head_split_and_merge_are_inverse() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(vec![2, 6, 2, 3], |i| i as f64));
        let s = split_heads(&mut tape, x, 3).unwrap();
        assert_eq!(tape.value(s).shape(), &[2, 3, 6, 2]);
        // sample 1, head 2, position 4, dim 1 = channel 5 at position 4
        assert_eq!(tape.value(s).at(&[1, 2, 4, 1]), tape.value(x).data()[(6 + 5) * 6 + 4]);
        let m = merge_heads(&mut tape, s, 2, 3).unwrap();
        assert_eq!(tape.value(m), tape.value(x));
    }

    #[test]
    fn identity_query_projection_is_a_reshape() {
        let (mut store, b) = block(4, 2, 0.0, 1);
        let eye = Tensor::from_fn(vec![4, 4, 1, 1], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        *store.value_mut(b.projection.query.weight) = eye;
        let mut rng = Rng::seed(2);
        let x = Tensor::randn(vec![1, 4, 2, 2], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (q, _, _) = b.project_qkv(&mut tape, &store, xv, &Ctx::eval(&mut rng)).unwrap();
        let q = tape.value(q);
        for h in 0..2 {
            for l in 0..4 {
                for d in 0..2 {
                    assert_eq!(q.at(&[0, h, l, d]), x.data()[(h * 2 + d) * 4 + l]);
                }
            }
        }
    }

    #[test]
    fn zero_projections_give_zero_qkv() {
        let (mut store, b) = block(4, 2, 0.0, 1);
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let mut rng = Rng::seed(3);
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::randn(vec![2, 4, 3, 3], 1.0, &mut rng));
        let (q, k, v) = b.project_qkv(&mut tape, &store, xv, &Ctx::eval(&mut rng)).unwrap();
        for t in [q, k, v] {
            assert!(tape.value(t).data().iter().all(|&e| e == 0.0));
        }
    }

    #[test]
    fn projection_matches_per_pixel_matmul() {
        let (store, b) = block(4, 2, 0.0, 11);
        let mut rng = Rng::seed(4);
        let x = Tensor::randn(vec![1, 4, 2, 2], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (_, k, _) = b.project_qkv(&mut tape, &store, xv, &Ctx::eval(&mut rng)).unwrap();
        let w = store.value(b.projection.key.weight);
        let bias = store.value(b.projection.key.bias.unwrap());
        for pos in 0..4 {
            for co in 0..4 {
                let mut want = bias.data()[co];
                for ci in 0..4 {
                    want += w.data()[co * 4 + ci] * x.data()[ci * 4 + pos];
                }
                let got = tape.value(k).at(&[0, co / 2, pos, co % 2]);
                assert!((got - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn identical_queries_give_uniform_rows() {
        let cfg = AttentionConfig::new(2, 1, 0.0).unwrap();
        let mut rng = Rng::seed(5);
        let q = Tensor::from_fn(vec![1, 1, 5, 2], |i| if i % 2 == 0 { 0.3 } else { -1.0 });
        let k = Tensor::randn(vec![1, 1, 5, 2], 1.0, &mut rng);
        // Q rows identical ⇒ every row of attn is the same; uniform needs K rows identical too.
        let k_same = Tensor::from_fn(vec![1, 1, 5, 2], |i| if i % 2 == 0 { 0.7 } else { 0.1 });
        let s = compute_scores(&q, &k_same, &cfg, Mode::Eval, &mut rng).unwrap();
        assert!(s.alpha.data().iter().all(|&a| (a - 0.2).abs() < 1e-15));
        let s = compute_scores(&q, &k, &cfg, Mode::Eval, &mut rng).unwrap();
        for row in s.alpha.data().chunks(5) {
            assert_eq!(row, &s.alpha.data()[..5]);
        }
    }

    #[test]
    fn singleton_softmax_is_one() {
        let cfg = AttentionConfig::new(3, 1, 0.0).unwrap();
        let mut rng = Rng::seed(6);
        let q = Tensor::randn(vec![2, 1, 1, 3], 1.0, &mut rng);
        let k = Tensor::randn(vec![2, 1, 1, 3], 1.0, &mut rng);
        let s = compute_scores(&q, &k, &cfg, Mode::Eval, &mut rng).unwrap();
        assert!(s.alpha.data().iter().all(|&a| a == 1.0));
    }

    #[test]
    fn hand_computed_two_position_scores() {
        let cfg = AttentionConfig::new(1, 1, 0.0).unwrap();
        let q = Tensor::new(vec![1, 1, 2, 1], vec![1.0, 0.0]).unwrap();
        let k = Tensor::new(vec![1, 1, 2, 1], vec![1.0, 0.0]).unwrap();
        let s = compute_scores(&q, &k, &cfg, Mode::Eval, &mut Rng::seed(0)).unwrap();
        assert_eq!(s.attn.data(), &[1.0, 0.0, 0.0, 0.0]);
        let e = std::f64::consts::E;
        let want = [e / (e + 1.0), 1.0 / (e + 1.0), 0.5, 0.5];
        for (a, b) in s.alpha.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((s.alpha.data()[0] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn dropout_scores_follow_inverted_scaling() {
        let cfg = AttentionConfig::new(4, 2, 0.25).unwrap();
        let mut rng = Rng::seed(7);
        let q = Tensor::randn(vec![2, 2, 6, 2], 1.0, &mut rng);
        let k = Tensor::randn(vec![2, 2, 6, 2], 1.0, &mut rng);
        let s = compute_scores(&q, &k, &cfg, Mode::Train, &mut rng).unwrap();
        assert!(s.mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
        assert!(s.mask.data().contains(&0.0));
        for ((a, m), ap) in s.alpha.data().iter().zip(s.mask.data()).zip(s.alpha_prime.data()) {
            assert_eq!(*ap, a * (m / 0.75));
        }
        let eval = compute_scores(&q, &k, &cfg, Mode::Eval, &mut rng).unwrap();
        assert_eq!(eval.alpha_prime, eval.alpha);
    }

    #[test]
    fn apply_examples() {
        let mut rng = Rng::seed(8);
        let v = Tensor::randn(vec![1, 1, 3, 2], 1.0, &mut rng);
        // one-hot rows selecting position 2
        let one_hot = Tensor::from_fn(vec![1, 1, 3, 3], |i| if i % 3 == 2 { 1.0 } else { 0.0 });
        let scores = AttentionScores {
            attn: one_hot.clone(),
            alpha: one_hot.clone(),
            mask: Tensor::ones(vec![1, 1, 3, 3]),
            alpha_prime: one_hot,
            dropout: 0.0,
        };
        let out = apply_scores(&scores, &v).unwrap();
        for i in 0..3 {
            assert_eq!(out.at(&[0, 0, i, 0]), v.at(&[0, 0, 2, 0]));
            assert_eq!(out.at(&[0, 0, i, 1]), v.at(&[0, 0, 2, 1]));
        }
        let zero = apply_scores(&scores, &Tensor::zeros(vec![1, 1, 3, 2])).unwrap();
        assert!(zero.data().iter().all(|&e| e == 0.0));

        let ap = Tensor::uniform(vec![2, 3, 4, 4], 0.0, 1.5, &mut rng);
        let v = Tensor::randn(vec![2, 3, 4, 5], 1.0, &mut rng);
        let scores = AttentionScores {
            attn: ap.clone(),
            alpha: ap.clone(),
            mask: Tensor::ones(vec![2, 3, 4, 4]),
            alpha_prime: ap.clone(),
            dropout: 0.0,
        };
        let out = apply_scores(&scores, &v).unwrap();
        for n in 0..2 {
            for h in 0..3 {
                for i in 0..4 {
                    for d in 0..5 {
                        let want: f64 = (0..4).map(|j| ap.at(&[n, h, i, j]) * v.at(&[n, h, j, d])).sum();
                        assert!((out.at(&[n, h, i, d]) - want).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let (mut store, b) = block(8, 4, 0.1, 9);
        store.value_mut(b.projection.out_proj.weight).data_mut().fill(0.0);
        store.value_mut(b.projection.out_proj.bias.unwrap()).data_mut().fill(0.0);
        let mut rng = Rng::seed(10);
        let x = Tensor::randn(vec![2, 8, 4, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = b.forward(&mut tape, &store, xv, &mut Ctx::train(&mut rng)).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn rejects_oversized_maps_and_wrong_channels() {
        let (store, b) = block(4, 2, 0.0, 1);
        let mut rng = Rng::seed(1);
        let mut tape = Tape::new();
        let big = tape.constant(Tensor::zeros(vec![1, 4, 65, 64]));
        assert!(b.forward(&mut tape, &store, big, &mut Ctx::eval(&mut rng)).is_err());
        let wrong = tape.constant(Tensor::zeros(vec![1, 6, 2, 2]));
        assert!(b.forward(&mut tape, &store, wrong, &mut Ctx::eval(&mut rng)).is_err());
    }
}
