mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reenact::adaconv::{ada_conv, AdaConvSpec, GeneratedParams};
use reenact::tensor::{conv1d, conv2d};
use reenact::{Real, Tensor};

fn t<T: Real>(shape: &[usize], v: &[f64]) -> Tensor<T> {
    Tensor::from_vec(shape, v.iter().map(|&x| T::of(x)).collect()).unwrap()
}

fn out<T: Real>(y: &Tensor<T>) -> Vec<f64> {
    y.to_vec().iter().map(|v| v.as_f64()).collect()
}

fn conv2d_err<T: Real>(c: &Conv2dCase) -> f64 {
    let y = conv2d(&t::<T>(&c.xs, &c.x), &t(&c.ws, &c.w), &t(&[c.ws[0]], &c.b), c.stride, c.pad, c.groups).unwrap();
    let (r, rs) = conv2d_ref(&c.x, c.xs, &c.w, c.ws, &c.b, c.stride, c.pad, c.groups);
    assert_eq!(y.shape(), &rs);
    scaled_err(&out(&y), &r)
}

fn conv1d_err<T: Real>(c: &Conv1dCase) -> f64 {
    let y = conv1d(&t::<T>(&c.xs, &c.x), &t(&c.ws, &c.w), &t(&[c.ws[0]], &c.b), c.stride, c.pad).unwrap();
    scaled_err(&out(&y), &conv1d_ref(&c.x, c.xs, &c.w, c.ws, &c.b, c.stride, c.pad))
}

fn ada_conv_err<T: Real>(c: &AdaConvCase) -> f64 {
    let [n, ch, _, _] = c.xs;
    let spec = AdaConvSpec::new(c.k, ch, c.cg, 1, 1).unwrap();
    let params = GeneratedParams {
        weight: t::<T>(&[n, ch, c.cg, c.k, c.k], &c.w),
        bias: t(&[n, ch], &c.b),
    };
    let y = ada_conv(&t(&c.xs, &c.x), &params, &spec).unwrap();
    assert_eq!(y.shape(), &c.xs);
    scaled_err(&out(&y), &ada_conv_ref(&c.x, c.xs, &c.w, &c.b, c.k, c.cg))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv2d_matches_nested_loops(seed in any::<u64>()) {
        let c = conv2d_case(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(conv2d_err::<f64>(&c) < 1e-12);
        prop_assert!(conv2d_err::<f32>(&c) <= 1e-6);
    }

    #[test]
    fn conv1d_matches_nested_loops(seed in any::<u64>()) {
        let c = conv1d_case(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(conv1d_err::<f64>(&c) < 1e-12);
        prop_assert!(conv1d_err::<f32>(&c) <= 1e-6);
    }

    #[test]
    fn ada_conv_matches_nested_loops(seed in any::<u64>()) {
        let c = ada_conv_case(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(ada_conv_err::<f64>(&c) < 1e-12);
        prop_assert!(ada_conv_err::<f32>(&c) <= 1e-6);
    }
}

#[test]
fn oracles_agree_on_a_hand_computed_case() {
    // 3×3 input, 2×2 kernel, no padding: each output is a 4-term sum.
    let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
    let w = [1.0, 0.0, 0.0, -1.0];
    let (y, s) = conv2d_ref(&x, [1, 1, 3, 3], &w, [1, 1, 2, 2], &[0.5], 1, 0, 1);
    assert_eq!(s, [1, 1, 2, 2]);
    assert_eq!(y, vec![-3.5; 4]);
    assert_eq!(conv1d_ref(&[1.0, 2.0, 3.0], [1, 1, 3], &[1.0, 1.0], [1, 1, 2], &[0.0], 1, 1), vec![1.0, 3.0, 5.0, 3.0]);
}
