use proptest::prelude::*;
use usegan_core::ops::{conv2d, deconv2d, ConvParams};
use usegan_core::{Rng, Tensor};
use usegan_testkit::conv::{self, Geometry};

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

fn rand(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

#[test]
fn conv_matches_loop_oracle_on_the_reference_shape() {
    let mut rng = Rng::seed(5);
    let x = rand(vec![1, 2, 4, 4], &mut rng);
    let w = rand(vec![3, 2, 3, 3], &mut rng);
    let y = conv2d(&x, &ConvParams::new(w.clone(), None, 1, 0)).unwrap();
    let g = Geometry { n: 1, c_in: 2, h: 4, w: 4, c_out: 3, k: 3, stride: 1, pad: 0 };
    assert_eq!(y.shape(), [1, 3, 2, 2]);
    assert!(close(y.data(), &conv::conv2d(&g, x.data(), w.data(), None), 1e-12));
}

fn geometry() -> impl Strategy<Value = (Geometry, u64)> {
    (1usize..3, 1usize..4, 1usize..4, 1usize..5, 1usize..3, 0usize..2, 0usize..4, any::<u64>()).prop_map(
        |(n, c_in, c_out, k, stride, pad, extra, seed)| {
            let pad = if 2 * pad >= k { 0 } else { pad };
            // The strided window tiles the padded input exactly.
            let side = k - 2 * pad + stride * extra;
            (Geometry { n, c_in, h: side, w: side, c_out, k, stride, pad }, seed)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_loop_oracle((g, seed) in geometry(), bias in any::<bool>()) {
        let mut rng = Rng::seed(seed);
        let x = rand(vec![g.n, g.c_in, g.h, g.w], &mut rng);
        let w = rand(vec![g.c_out, g.c_in, g.k, g.k], &mut rng);
        let b = bias.then(|| rand(vec![g.c_out], &mut rng));
        let y = conv2d(&x, &ConvParams::new(w.clone(), b.clone(), g.stride, g.pad)).unwrap();
        let oracle = conv::conv2d(&g, x.data(), w.data(), b.as_ref().map(Tensor::data));
        let (ho, wo) = g.conv_out();
        prop_assert_eq!(y.shape(), &[g.n, g.c_out, ho, wo][..]);
        prop_assert!(close(y.data(), &oracle, 1e-12));
    }

    #[test]
    fn deconv_matches_scatter_oracle(
        n in 1usize..3, c_in in 1usize..4, c_out in 1usize..4, h in 1usize..5, w in 1usize..5,
        k in 2usize..5, stride in 1usize..3, seed in any::<u64>(), bias in any::<bool>(),
    ) {
        let pad = if (h - 1) * stride + k > 2 && k > 2 { 1 } else { 0 };
        let g = Geometry { n, c_in, h, w, c_out, k, stride, pad };
        let mut rng = Rng::seed(seed);
        let x = rand(vec![n, c_in, h, w], &mut rng);
        let wt = rand(vec![c_in, c_out, k, k], &mut rng);
        let b = bias.then(|| rand(vec![c_out], &mut rng));
        let y = deconv2d(&x, &ConvParams::new(wt.clone(), b.clone(), stride, pad)).unwrap();
        let oracle = conv::deconv2d(&g, x.data(), wt.data(), b.as_ref().map(Tensor::data));
        let (ho, wo) = g.deconv_out();
        prop_assert_eq!(y.shape(), &[n, c_out, ho, wo][..]);
        prop_assert!(close(y.data(), &oracle, 1e-12));
    }

    /// ⟨conv(x), y⟩ = ⟨x, deconv(y)⟩ with the same kernel: the transposed
    /// convolution is the adjoint of the strided one.
    #[test]
    fn deconv_is_the_adjoint_of_conv((g, seed) in geometry()) {
        let mut rng = Rng::seed(seed);
        let x = rand(vec![g.n, g.c_in, g.h, g.w], &mut rng);
        let w = rand(vec![g.c_out, g.c_in, g.k, g.k], &mut rng);
        let cx = conv2d(&x, &ConvParams::new(w.clone(), None, g.stride, g.pad)).unwrap();
        let y = rand(cx.shape().to_vec(), &mut rng);
        let dy = deconv2d(&y, &ConvParams::new(w, None, g.stride, g.pad)).unwrap();
        prop_assert_eq!(dy.shape(), x.shape());
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }
}
