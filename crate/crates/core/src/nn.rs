//! Parameterized layers shared by the fuser, reenactor and critic.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{self, Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;

/// Anything that owns learnable tensors.
pub trait Module<T: Real> {
    /// Calls `f` once per learnable tensor with a stable dotted name.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>));

    fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    fn params(&self) -> Vec<Tensor<T>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    fn zero_grad(&self) {
        self.visit("", &mut |_, t| t.zero_grad());
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform in `±1/sqrt(fan_in)`.
pub(crate) fn fan_in_uniform<T: Real>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = tensor::numel(shape);
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::parameter(shape, data).expect("init shape")
}

pub(crate) fn constant_param<T: Real>(shape: &[usize], value: f64) -> Tensor<T> {
    Tensor::parameter(shape, vec![T::of(value); tensor::numel(shape)]).expect("init shape")
}

/// Fully connected layer `y = x Wᵀ + b`.
pub struct Linear<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(rng: &mut impl Rng, din: usize, dout: usize) -> Self {
        Linear {
            weight: fan_in_uniform(rng, &[dout, din], din),
            bias: fan_in_uniform(rng, &[dout], din),
        }
    }

    pub fn zeros(din: usize, dout: usize) -> Self {
        Linear {
            weight: constant_param(&[dout, din], 0.0),
            bias: constant_param(&[dout], 0.0),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::linear(x, &self.weight, &self.bias)
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
}

/// Square-kernel 2-D convolution layer.
pub struct Conv2d<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new(rng: &mut impl Rng, cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        let fan_in = cin * kernel * kernel;
        Conv2d {
            weight: fan_in_uniform(rng, &[cout, cin, kernel, kernel], fan_in),
            bias: fan_in_uniform(rng, &[cout], fan_in),
            stride,
            padding,
        }
    }

    pub fn zeros(cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Conv2d {
            weight: constant_param(&[cout, cin, kernel, kernel], 0.0),
            bias: constant_param(&[cout], 0.0),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::conv2d(x, &self.weight, &self.bias, self.stride, self.padding, 1)
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
}

pub struct Conv1d<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv1d<T> {
    pub fn new(rng: &mut impl Rng, cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        let fan_in = cin * kernel;
        Conv1d {
            weight: fan_in_uniform(rng, &[cout, cin, kernel], fan_in),
            bias: fan_in_uniform(rng, &[cout], fan_in),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::conv1d(x, &self.weight, &self.bias, self.stride, self.padding)
    }
}

impl<T: Real> Module<T> for Conv1d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
}

/// Instance normalization with an optional learnable per-channel affine map.
pub struct InstanceNorm<T: Real = f32> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub affine: bool,
}

impl<T: Real> InstanceNorm<T> {
    pub fn new(channels: usize) -> Self {
        InstanceNorm {
            scale: constant_param(&[channels], 1.0),
            shift: constant_param(&[channels], 0.0),
            affine: true,
        }
    }

    /// Plain standardization; scale and shift are fixed constants.
    pub fn non_affine(channels: usize) -> Self {
        InstanceNorm {
            scale: Tensor::full(&[channels], T::one()),
            shift: Tensor::zeros(&[channels]),
            affine: false,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::instance_norm(x, &self.scale, &self.shift, T::of(NORM_EPS))
    }
}

impl<T: Real> Module<T> for InstanceNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        if self.affine {
            f(join(prefix, "scale"), &self.scale);
            f(join(prefix, "shift"), &self.shift);
        }
    }
}

/// Overwrites every parameter with uniform noise in `±scale`. Used to move
/// models away from structured initializations in tests and gradient checks.
pub fn randomize<T: Real>(module: &dyn Module<T>, rng: &mut impl Rng, scale: f64) {
    module.visit("", &mut |_, t| {
        let data = (0..t.numel()).map(|_| T::of(rng.gen_range(-scale..scale))).collect();
        t.set_data(data).expect("same length");
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_10_to_5_has_55_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::<f32>::new(&mut rng, 10, 5);
        assert_eq!(l.param_count(), 55);
        let names: Vec<String> = l.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["weight", "bias"]);
    }

    #[test]
    fn non_affine_norm_has_no_parameters() {
        assert_eq!(InstanceNorm::<f32>::non_affine(8).param_count(), 0);
        assert_eq!(InstanceNorm::<f32>::new(8).param_count(), 16);
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let a = Conv2d::<f32>::new(&mut ChaCha8Rng::seed_from_u64(3), 4, 2, 3, 1, 1);
        let b = Conv2d::<f32>::new(&mut ChaCha8Rng::seed_from_u64(3), 4, 2, 3, 1, 1);
        assert_eq!(a.weight.to_vec(), b.weight.to_vec());
        let bound = 1.0 / 36f32.sqrt();
        assert!(a.weight.to_vec().iter().all(|w| w.abs() <= bound));
    }
}
