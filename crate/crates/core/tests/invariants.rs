mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reenact::adaconv::{generate_params, AdaConvGenerator, AdaConvSpec};
use reenact::image::FaceImage;
use reenact::metrics::{gaussian_window, ssim, SSIM_K1, SSIM_K2, SSIM_RANGE, SSIM_SIGMA, SSIM_WINDOW};
use reenact::nn::Module;
use reenact::signal::{BlinkSignal, DriveSignal, PoseSignal};
use reenact::synth::{eye_boxes, landmarks, neutral_drive, render_face, skin_mask, IdentityParams};
use reenact::Tensor;

/// Direct SSIM: explicit 2-D Gaussian weights at every valid window position.
fn ssim_ref(a: &FaceImage, b: &FaceImage) -> f64 {
    let n = a.size;
    let half = SSIM_WINDOW / 2;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half as f64;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = raw.iter().flat_map(|u| raw.iter().map(move |v| u * v)).sum();
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let (mut sum, mut count) = (0.0, 0usize);
    for ch in 0..3 {
        for y0 in 0..=n - SSIM_WINDOW {
            for x0 in 0..=n - SSIM_WINDOW {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let wt = raw[i] * raw[j] / total;
                        let (p, q) = (a.at(ch, y0 + i, x0 + j) as f64, b.at(ch, y0 + i, x0 + j) as f64);
                        ma += wt * p;
                        mb += wt * q;
                        saa += wt * p * p;
                        sbb += wt * q * q;
                        sab += wt * p * q;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    sum / count as f64
}

fn random_image(rng: &mut impl Rng, size: usize) -> FaceImage {
    FaceImage::new(size, uniform(rng, 3 * size * size, 1.0).iter().map(|&v| v as f32).collect()).unwrap()
}

fn drive(rng: &mut impl Rng, roll: Option<f32>) -> DriveSignal {
    let mut d = neutral_drive(8, 32).unwrap();
    d.pose = PoseSignal::new(
        rng.gen_range(-0.3..0.3),
        rng.gen_range(-0.2..0.2),
        roll.unwrap_or_else(|| rng.gen_range(-0.2..0.2)),
    )
    .unwrap();
    d.blink = BlinkSignal::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)).unwrap();
    d.mouth_open = rng.gen_range(0.0..1.0);
    d
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn pointwise_depthwise_adaconv_is_adain(seed in any::<u64>()) {
        let (err, spread) = adain_case(seed);
        prop_assert!(err <= 1e-6 * spread.max(1.0), "err {err} spread {spread}");
    }

    #[test]
    fn generated_vector_length_follows_the_count_formula(
        k in prop::sample::select(vec![1usize, 3, 5, 7]),
        groups in 1usize..5,
        cg in 1usize..5,
        d in 1usize..10,
        hidden in 1usize..10,
        n in 1usize..3,
    ) {
        let c = groups * cg;
        let spec = AdaConvSpec::new(k, c, cg, d, hidden).unwrap();
        prop_assert_eq!(spec.param_count(), k * k * cg * c + c);
        let g = AdaConvGenerator::<f64>::new(&mut ChaCha8Rng::seed_from_u64(0), spec).unwrap();
        let p = generate_params(&Tensor::zeros(&[n, d]), &spec, &g).unwrap();
        prop_assert_eq!((p.weight.numel() + p.bias.numel()) / n, k * k * cg * c + c);
        prop_assert_eq!(g.param_count(), d * hidden + hidden + hidden * (k * k * cg * c + c) + k * k * cg * c + c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ssim_matches_direct_windows_and_is_symmetric(seed in any::<u64>(), size in 11usize..18) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_image(&mut rng, size);
        let mut b = a.clone();
        for v in b.data.iter_mut() {
            *v = (*v + rng.gen_range(-0.4f32..0.4)).clamp(-1.0, 1.0);
        }
        let s = ssim(&a, &b).unwrap();
        prop_assert!((s - ssim_ref(&a, &b)).abs() < 1e-9);
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(s < 1.0);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn roll_rotates_landmarks_about_the_origin(seed in any::<u64>(), roll in -0.5f32..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let id = IdentityParams::from_seed(rng.gen_range(0..50));
        let rolled = drive(&mut rng, Some(roll));
        let mut flat = rolled.clone();
        flat.pose = PoseSignal::new(rolled.pose.yaw, rolled.pose.pitch, 0.0).unwrap();
        let (s, c) = (roll as f64).sin_cos();
        for (p, q) in landmarks(&id, &rolled).points().zip(landmarks(&id, &flat).points()) {
            let (x, y) = (q[0] as f64, q[1] as f64);
            prop_assert!((p[0] as f64 - (c * x - s * y)).abs() < 1e-6);
            prop_assert!((p[1] as f64 - (s * x + c * y)).abs() < 1e-6);
        }
    }

    #[test]
    fn landmarks_stay_in_the_unit_square(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let id = IdentityParams::from_seed(rng.gen_range(0..50));
        let lm = landmarks(&id, &drive(&mut rng, None));
        prop_assert_eq!(lm.len(), 68);
        prop_assert!(lm.in_unit_square());
    }

    #[test]
    fn blink_only_changes_pixels_inside_the_eye_boxes(seed in any::<u64>(), res in prop::sample::select(vec![32usize, 48, 64])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let id = IdentityParams::from_seed(rng.gen_range(0..50));
        let base = drive(&mut rng, None);
        let open = DriveSignal { blink: BlinkSignal::new(1.0, 1.0).unwrap(), ..base.clone() };
        let closed = DriveSignal { blink: BlinkSignal::new(0.0, 0.0).unwrap(), ..base.clone() };
        let (a, _) = render_face(&id, &open, res).unwrap();
        let (b, _) = render_face(&id, &closed, res).unwrap();
        let (inside, outside) = reenact::metrics::region_l1(&a, &b, &eye_boxes(&id, base.pose, res)).unwrap();
        prop_assert!(inside > 0.01, "inside {inside}");
        prop_assert_eq!(outside, 0.0);
    }

    #[test]
    fn skin_mask_pixels_have_the_identity_skin_color(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let id = IdentityParams::from_seed(rng.gen_range(0..50));
        let d = drive(&mut rng, None);
        let (img, _) = render_face(&id, &d, 32).unwrap();
        let mask = skin_mask(&id, &d, 32);
        prop_assert!(mask.iter().filter(|&&m| m).count() > 100);
        for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for ch in 0..3 {
                prop_assert!((img.data[ch * 1024 + p] - id.skin[ch]).abs() <= 1.0 / 255.0);
            }
        }
    }
}

#[test]
fn gaussian_window_is_normalized_and_symmetric() {
    let w = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for i in 0..SSIM_WINDOW {
        assert_eq!(w[i], w[SSIM_WINDOW - 1 - i]);
    }
}
