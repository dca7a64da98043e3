use proptest::prelude::*;
use usegan_core::attention::{
    apply_scores, compute_scores, AttentionConfig, AttentionScores, AttentionTrace, CmhsaBlock,
};
use usegan_core::nn::Ctx;
use usegan_core::ops::Mode;
use usegan_core::{ParamStore, Rng, Tape, Tensor};

struct Fixture {
    store: ParamStore,
    block: CmhsaBlock,
}

fn fixture(c: usize, heads: usize, dropout: f64, seed: u64, gain: f64) -> Fixture {
    let mut store = ParamStore::new();
    let cfg = AttentionConfig::new(c, heads, dropout).unwrap();
    let block = CmhsaBlock::new(&mut store, "attn", cfg, &mut Rng::seed(seed));
    for p in store.params_mut() {
        p.value = p.value.map(|v| v * gain);
    }
    Fixture { store, block }
}

fn run(f: &Fixture, x: &Tensor, mode: Mode, seed: u64) -> (Tape, AttentionTrace) {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut rng = Rng::seed(seed);
    let mut ctx = Ctx { mode, rng: &mut rng, trainable: false };
    let trace = f.block.trace(&mut tape, &f.store, xv, &mut ctx).unwrap();
    (tape, trace)
}

/// Moves spatial position `p` of every channel to `perm[p]`.
fn permute_positions(x: &Tensor, perm: &[usize]) -> Tensor {
    let (n, c, h, w) = x.dims4().unwrap();
    let l = h * w;
    let mut out = Tensor::zeros(x.shape().to_vec());
    for s in 0..n * c {
        for (p, &to) in perm.iter().enumerate() {
            out.data_mut()[s * l + to] = x.data()[s * l + p];
        }
    }
    out
}

fn max_row_sum_error(alpha: &Tensor) -> f64 {
    let l = *alpha.shape().last().unwrap();
    alpha.data().chunks(l).map(|row| (row.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn alpha_rows_sum_to_one(
        heads in 1usize..4, d in 1usize..4, h in 1usize..5, w in 1usize..5,
        seed in any::<u64>(), gain in 1.0f64..200.0, train in any::<bool>(),
    ) {
        let f = fixture(heads * d, heads, 0.3, seed, gain);
        let x = Tensor::randn(vec![2, heads * d, h, w], 2.0, &mut Rng::seed(seed ^ 1));
        let mode = if train { Mode::Train } else { Mode::Eval };
        let (tape, trace) = run(&f, &x, mode, seed);
        prop_assert!(max_row_sum_error(tape.value(trace.alpha)) <= 1e-9);
    }

    #[test]
    fn pre_residual_output_is_spatially_equivariant(
        heads in 1usize..3, d in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>(),
    ) {
        let f = fixture(heads * d, heads, 0.1, seed, 30.0);
        let x = Tensor::randn(vec![2, heads * d, h, w], 1.0, &mut Rng::seed(seed ^ 2));
        let mut perm: Vec<usize> = (0..h * w).collect();
        Rng::seed(seed ^ 3).shuffle(&mut perm);
        let (t0, base) = run(&f, &x, Mode::Eval, 0);
        let (t1, moved) = run(&f, &permute_positions(&x, &perm), Mode::Eval, 0);
        let expected = permute_positions(t0.value(base.pre_residual), &perm);
        prop_assert!(t1.value(moved.pre_residual).max_abs_diff(&expected) <= 1e-9);
    }

    #[test]
    fn zero_output_projection_is_exact_identity(
        heads in 1usize..3, d in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>(), train in any::<bool>(),
    ) {
        let mut f = fixture(heads * d, heads, 0.2, seed, 10.0);
        let out = &f.block.projection.out_proj;
        for id in std::iter::once(out.weight).chain(out.bias) {
            f.store.value_mut(id).data_mut().fill(0.0);
        }
        let x = Tensor::randn(vec![2, heads * d, h, w], 3.0, &mut Rng::seed(seed));
        let mode = if train { Mode::Train } else { Mode::Eval };
        let (tape, trace) = run(&f, &x, mode, seed);
        prop_assert_eq!(tape.value(trace.output).max_abs_diff(&x), 0.0);
    }

    #[test]
    fn apply_matches_weighted_sum_loop(n in 1usize..3, heads in 1usize..3, l in 1usize..6, d in 1usize..4, seed in any::<u64>()) {
        let mut rng = Rng::seed(seed);
        let alpha_prime = Tensor::uniform(vec![n, heads, l, l], 0.0, 2.0, &mut rng);
        let v = Tensor::randn(vec![n, heads, l, d], 1.0, &mut rng);
        let scores = AttentionScores {
            attn: alpha_prime.clone(),
            alpha: alpha_prime.clone(),
            mask: Tensor::ones(alpha_prime.shape().to_vec()),
            alpha_prime: alpha_prime.clone(),
            dropout: 0.0,
        };
        let out = apply_scores(&scores, &v).unwrap();
        for b in 0..n {
            for hh in 0..heads {
                for i in 0..l {
                    for k in 0..d {
                        let mut acc = 0.0;
                        for j in 0..l {
                            acc += alpha_prime.at(&[b, hh, i, j]) * v.at(&[b, hh, j, k]);
                        }
                        prop_assert!((out.at(&[b, hh, i, k]) - acc).abs() <= 1e-12);
                    }
                }
            }
        }
    }
}

/// Inverted dropout keeps the attention weights unbiased: the Monte-Carlo
/// mean of alpha' lies within three standard errors of alpha.
#[test]
fn dropout_preserves_attention_weights_in_expectation() {
    let p = 0.3;
    let cfg = AttentionConfig::new(4, 2, p).unwrap();
    let mut rng = Rng::seed(11);
    let q = Tensor::randn(vec![1, 2, 3, 2], 1.0, &mut rng);
    let k = Tensor::randn(vec![1, 2, 3, 2], 1.0, &mut rng);
    let draws = 10_000;
    let mut sum = [0.0; 18];
    let mut alpha = None;
    for _ in 0..draws {
        let s = compute_scores(&q, &k, &cfg, Mode::Train, &mut rng).unwrap();
        for (acc, v) in sum.iter_mut().zip(s.alpha_prime.data()) {
            *acc += v;
        }
        alpha = Some(s.alpha);
    }
    let alpha = alpha.unwrap();
    for (i, &a) in alpha.data().iter().enumerate() {
        let mean = sum[i] / draws as f64;
        // Var(a·m/(1−p)) = a²·p/(1−p).
        let se = a * (p / (1.0 - p)).sqrt() / (draws as f64).sqrt();
        assert!((mean - a).abs() <= 3.0 * se, "entry {i}: mean {mean} vs {a} (se {se})");
    }
    let eval = compute_scores(&q, &k, &cfg, Mode::Eval, &mut rng).unwrap();
    assert_eq!(eval.alpha_prime, eval.alpha);
}
