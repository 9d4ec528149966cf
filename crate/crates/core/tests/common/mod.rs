//! Direct nested-loop references and random case generators shared by the
//! integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reenact::adaconv::{ada_conv, generate_params, AdaConvGenerator, AdaConvSpec};
use reenact::nn::{randomize, InstanceNorm, NORM_EPS};
use reenact::Tensor;

/// Grouped 2-D cross-correlation, `x: [n, cin, h, w]`, `w: [cout, cin/groups, kh, kw]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_ref(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    b: &[f64],
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, cin, h, wd] = xs;
    let [cout, cig, kh, kw] = ws;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let cog = cout / groups;
    let mut y = vec![0.0; n * cout * ho * wo];
    for ni in 0..n {
        for co in 0..cout {
            let g = co / cog;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..cig {
                        let c = g * cig + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((ni * cin + c) * h + iy as usize) * wd + ix as usize]
                                    * w[((co * cig + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    y[((ni * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (y, [n, cout, ho, wo])
}

/// 1-D cross-correlation, `x: [n, cin, l]`, `w: [cout, cin, k]`.
pub fn conv1d_ref(x: &[f64], xs: [usize; 3], w: &[f64], ws: [usize; 3], b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let [n, cin, l] = xs;
    let [cout, _, k] = ws;
    let lo = (l + 2 * pad - k) / stride + 1;
    let mut y = vec![0.0; n * cout * lo];
    for ni in 0..n {
        for co in 0..cout {
            for o in 0..lo {
                let mut acc = b[co];
                for ci in 0..cin {
                    for t in 0..k {
                        let i = (o * stride + t) as isize - pad as isize;
                        if i >= 0 && (i as usize) < l {
                            acc += x[(ni * cin + ci) * l + i as usize] * w[(co * cin + ci) * k + t];
                        }
                    }
                }
                y[(ni * cout + co) * lo + o] = acc;
            }
        }
    }
    y
}

/// Shape-preserving grouped convolution with per-sample kernels
/// `w: [n, c, cg, k, k]` and biases `b: [n, c]`.
pub fn ada_conv_ref(x: &[f64], xs: [usize; 4], w: &[f64], b: &[f64], k: usize, cg: usize) -> Vec<f64> {
    let [n, c, h, wd] = xs;
    let per_x = c * h * wd;
    let per_w = c * cg * k * k;
    let mut out = Vec::with_capacity(n * per_x);
    for ni in 0..n {
        let (y, _) = conv2d_ref(
            &x[ni * per_x..(ni + 1) * per_x],
            [1, c, h, wd],
            &w[ni * per_w..(ni + 1) * per_w],
            [c, cg, k, k],
            &b[ni * c..(ni + 1) * c],
            1,
            (k - 1) / 2,
            c / cg,
        );
        out.extend(y);
    }
    out
}

/// `scale[n,c] · (x − μ) / sqrt(σ² + eps) + shift[n,c]` with per-instance,
/// per-channel biased moments.
pub fn adain_ref(x: &[f64], xs: [usize; 4], scale: &[f64], shift: &[f64], eps: f64) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let m = h * w;
    let mut y = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * m;
            let s = &x[base..base + m];
            let mean = s.iter().sum::<f64>() / m as f64;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            for (i, v) in s.iter().enumerate() {
                y[base + i] = scale[ni * c + ci] * (v - mean) / (var + eps).sqrt() + shift[ni * c + ci];
            }
        }
    }
    y
}

/// Uniform samples that are exactly representable in f32, so f32 and f64
/// runs see identical inputs.
pub fn uniform(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale) as f32 as f64).collect()
}

/// `max|a − b| / max(1, max|b|)`: absolute error for unit-scale outputs,
/// relative error beyond.
pub fn scaled_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    max_abs_diff(a, b) / scale
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

#[derive(Clone, Debug)]
pub struct Conv2dCase {
    pub xs: [usize; 4],
    pub ws: [usize; 4],
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

pub fn conv2d_case(rng: &mut impl Rng) -> Conv2dCase {
    let groups = [1, 1, 2, 3][rng.gen_range(0..4)];
    let cig = rng.gen_range(1..=3);
    let cog = rng.gen_range(1..=3);
    let k = [1, 3, 5][rng.gen_range(0..3)];
    let pad = rng.gen_range(0..=k / 2 + 1);
    let stride = rng.gen_range(1..=2);
    let h = rng.gen_range(k.max(2)..k + 7);
    let w = rng.gen_range(k.max(2)..k + 7);
    let n = rng.gen_range(1..=2);
    let xs = [n, groups * cig, h, w];
    let ws = [groups * cog, cig, k, k];
    Conv2dCase {
        xs,
        ws,
        stride,
        pad,
        groups,
        x: uniform(rng, xs.iter().product(), 1.0),
        w: uniform(rng, ws.iter().product(), 1.0),
        b: uniform(rng, ws[0], 1.0),
    }
}

#[derive(Clone, Debug)]
pub struct Conv1dCase {
    pub xs: [usize; 3],
    pub ws: [usize; 3],
    pub stride: usize,
    pub pad: usize,
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

pub fn conv1d_case(rng: &mut impl Rng) -> Conv1dCase {
    let k = rng.gen_range(1..=5);
    let xs = [rng.gen_range(1..=3), rng.gen_range(1..=6), rng.gen_range(k..k + 12)];
    let ws = [rng.gen_range(1..=6), xs[1], k];
    Conv1dCase {
        xs,
        ws,
        stride: rng.gen_range(1..=2),
        pad: rng.gen_range(0..=k / 2 + 1),
        x: uniform(rng, xs.iter().product(), 1.0),
        w: uniform(rng, ws.iter().product(), 1.0),
        b: uniform(rng, ws[0], 1.0),
    }
}

#[derive(Clone, Debug)]
pub struct AdaConvCase {
    pub xs: [usize; 4],
    pub k: usize,
    pub cg: usize,
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

pub fn ada_conv_case(rng: &mut impl Rng) -> AdaConvCase {
    let cg = rng.gen_range(1..=3);
    let c = cg * rng.gen_range(1..=3);
    let k = [1, 3, 5][rng.gen_range(0..3)];
    let n = rng.gen_range(1..=3);
    let xs = [n, c, rng.gen_range(2..9), rng.gen_range(2..9)];
    AdaConvCase {
        xs,
        k,
        cg,
        x: uniform(rng, xs.iter().product(), 1.0),
        w: uniform(rng, n * c * cg * k * k, 1.0),
        b: uniform(rng, n * c, 1.0),
    }
}

/// With `k = 1, C_g = 1` the normalized adaptive convolution equals AdaIN
/// whose per-channel scale and shift are the generated kernel and bias.
pub fn adain_case(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, h, w, d) = (rng.gen_range(1..=3), rng.gen_range(1..=6), rng.gen_range(2..7), rng.gen_range(2..7), rng.gen_range(1..=8));
    let spec = AdaConvSpec::new(1, c, 1, d, rng.gen_range(1..=8)).unwrap();
    let generator = AdaConvGenerator::<f64>::new(&mut rng, spec).unwrap();
    randomize(&generator, &mut rng, 0.8);
    let f_geo = uniform(&mut rng, n * d, 1.0);
    let x = uniform(&mut rng, n * c * h * w, 2.0);

    let params = generate_params(&Tensor::from_vec(&[n, d], f_geo).unwrap(), &spec, &generator).unwrap();
    let feats = Tensor::from_vec(&[n, c, h, w], x.clone()).unwrap();
    let y = ada_conv(&InstanceNorm::new(c).forward(&feats).unwrap(), &params, &spec).unwrap().to_vec();

    let scale = params.weight.to_vec();
    let shift = params.bias.to_vec();
    let r = adain_ref(&x, [n, c, h, w], &scale, &shift, NORM_EPS);
    let spread = scale.iter().chain(&shift).fold(0.0f64, |m, v| m.max(v.abs()));
    (max_abs_diff(&y, &r), spread)
}
