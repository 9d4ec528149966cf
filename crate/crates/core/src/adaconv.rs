//! Adaptive convolution: kernels and biases generated from a conditioning
//! vector by a two-layer network, then applied as a grouped convolution.
//!
//! With `group_channels = 1` the generated convolution is depthwise; with
//! `kernel = 1` as well it collapses to a per-channel affine map, i.e. AdaIN
//! without the normalization.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{join, Linear, Module, LEAKY_SLOPE};
use crate::tensor::{conv2d_per_sample, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdaConvSpec {
    /// Odd kernel size `k`.
    pub kernel: usize,
    /// Channels `C` of the conditioned feature map.
    pub channels: usize,
    /// Channels per group `C_g`; the convolution uses `C / C_g` groups.
    pub group_channels: usize,
    /// Length of the conditioning vector.
    pub geo_dim: usize,
    /// Width of the generator's hidden layer.
    pub hidden_dim: usize,
}

impl AdaConvSpec {
    pub fn new(kernel: usize, channels: usize, group_channels: usize, geo_dim: usize, hidden_dim: usize) -> Result<Self> {
        let spec = AdaConvSpec {
            kernel,
            channels,
            group_channels,
            geo_dim,
            hidden_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!("adaconv kernel must be odd and >= 1, got {}", self.kernel)));
        }
        if self.channels == 0 || self.group_channels == 0 || self.channels % self.group_channels != 0 {
            return Err(Error::Config(format!(
                "adaconv group_channels {} must divide channels {}",
                self.group_channels, self.channels
            )));
        }
        if self.geo_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("adaconv geo_dim and hidden_dim must be >= 1".into()));
        }
        Ok(())
    }

    pub fn groups(&self) -> usize {
        self.channels / self.group_channels
    }

    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    /// `k·k·C_g·C` generated kernel weights.
    pub fn weight_len(&self) -> usize {
        self.kernel * self.kernel * self.group_channels * self.channels
    }

    /// Length of the flat generated vector: `k·k·C_g·C + C`.
    pub fn param_count(&self) -> usize {
        self.weight_len() + self.channels
    }

    /// Learnable parameters of one generator (both linear layers).
    pub fn generator_param_count(&self) -> usize {
        let (d, h, p) = (self.geo_dim, self.hidden_dim, self.param_count());
        d * h + h + h * p + p
    }

    /// Flat generated vector that reproduces the input unchanged: each output
    /// channel's kernel has a single 1 at its centre tap on its own channel.
    pub fn identity_params(&self) -> Vec<f64> {
        let (k, cg) = (self.kernel, self.group_channels);
        let mut flat = vec![0.0; self.param_count()];
        let centre = (k / 2) * k + k / 2;
        for c in 0..self.channels {
            let j = c % cg;
            flat[(c * cg + j) * k * k + centre] = 1.0;
        }
        flat
    }
}

/// Free function form of [`AdaConvSpec::param_count`].
pub fn param_count(spec: &AdaConvSpec) -> usize {
    spec.param_count()
}

/// Per-sample kernels `[N, C, C_g, k, k]` and biases `[N, C]`, still connected
/// to the conditioning vector in the autodiff graph.
#[derive(Clone, Debug)]
pub struct GeneratedParams<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Two linear layers mapping the conditioning vector to one flat parameter
/// vector per sample.
pub struct AdaConvGenerator<T: Real = f32> {
    pub spec: AdaConvSpec,
    pub hidden: Linear<T>,
    pub out: Linear<T>,
}

impl<T: Real> AdaConvGenerator<T> {
    /// Random first layer; zero second-layer weights with a bias that yields
    /// the identity kernel, so the conditioned convolution starts as a no-op.
    pub fn new(rng: &mut impl Rng, spec: AdaConvSpec) -> Result<Self> {
        spec.validate()?;
        let hidden = Linear::new(rng, spec.geo_dim, spec.hidden_dim);
        let out = Linear::zeros(spec.hidden_dim, spec.param_count());
        let bias = spec.identity_params().into_iter().map(T::of).collect();
        out.bias.set_data(bias)?;
        Ok(AdaConvGenerator { spec, hidden, out })
    }
}

impl<T: Real> Module<T> for AdaConvGenerator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
}

/// `flat = out(leaky_relu(hidden(f_geo)))`, split into kernel and bias.
pub fn generate_params<T: Real>(
    f_geo: &Tensor<T>,
    spec: &AdaConvSpec,
    generator: &AdaConvGenerator<T>,
) -> Result<GeneratedParams<T>> {
    if generator.spec != *spec {
        return Err(Error::Config(format!(
            "generator built for {:?}, asked for {:?}",
            generator.spec, spec
        )));
    }
    let &[n, d] = f_geo.shape() else {
        return shape_err("generate_params", format!("f_geo must be [N, d_geo], got {:?}", f_geo.shape()));
    };
    if d != spec.geo_dim {
        return shape_err("generate_params", format!("f_geo length {d} != d_geo {}", spec.geo_dim));
    }
    let hidden = generator.hidden.forward(f_geo)?.leaky_relu(T::of(LEAKY_SLOPE));
    let flat = generator.out.forward(&hidden)?;
    let (k, c, cg) = (spec.kernel, spec.channels, spec.group_channels);
    let weight = flat.narrow(1, 0, spec.weight_len())?.reshape(&[n, c, cg, k, k])?;
    let bias = flat.narrow(1, spec.weight_len(), c)?;
    Ok(GeneratedParams { weight, bias })
}

/// Shape-preserving grouped convolution of `features: [N, C, H, W]` with the
/// generated per-sample parameters.
pub fn ada_conv<T: Real>(features: &Tensor<T>, params: &GeneratedParams<T>, spec: &AdaConvSpec) -> Result<Tensor<T>> {
    if features.rank() != 4 {
        return shape_err("ada_conv", format!("features must be [N, C, H, W], got {:?}", features.shape()));
    }
    if features.shape()[1] != spec.channels {
        return shape_err(
            "ada_conv",
            format!("feature channels {} != spec channels {}", features.shape()[1], spec.channels),
        );
    }
    let (k, c, cg) = (spec.kernel, spec.channels, spec.group_channels);
    if params.weight.shape()[1..] != [c, cg, k, k] {
        return shape_err(
            "ada_conv",
            format!("generated weight {:?} does not match spec", params.weight.shape()),
        );
    }
    conv2d_per_sample(features, &params.weight, &params.bias, 1, spec.padding(), spec.groups())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(k: usize, c: usize, cg: usize) -> AdaConvSpec {
        AdaConvSpec::new(k, c, cg, 6, 5).unwrap()
    }

    #[test]
    fn flat_lengths_follow_the_count_formula() {
        assert_eq!(AdaConvSpec::new(3, 64, 1, 136, 128).unwrap().param_count(), 640);
        assert_eq!(param_count(&spec(1, 8, 1)), 16);
        assert_eq!(param_count(&spec(1, 1, 1)), 2);
        assert_eq!(param_count(&AdaConvSpec::new(3, 64, 64, 136, 128).unwrap()), 36928);
    }

    #[test]
    fn generator_parameter_count() {
        let s = AdaConvSpec::new(3, 64, 1, 136, 128).unwrap();
        assert_eq!(s.generator_param_count(), 100_096);
        let g = AdaConvGenerator::<f32>::new(&mut ChaCha8Rng::seed_from_u64(0), s).unwrap();
        assert_eq!(g.param_count(), 100_096);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(AdaConvSpec::new(2, 8, 1, 4, 4).is_err());
        assert!(AdaConvSpec::new(3, 8, 3, 4, 4).is_err());
        assert!(AdaConvSpec::new(3, 8, 0, 4, 4).is_err());
    }

    #[test]
    fn zero_generator_is_constant_in_f_geo() {
        let s = spec(3, 4, 2);
        let g = AdaConvGenerator::<f64>::new(&mut ChaCha8Rng::seed_from_u64(1), s).unwrap();
        let a = Tensor::from_vec(&[1, 6], vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1]).unwrap();
        let b = Tensor::from_vec(&[1, 6], vec![-4.0, 1.0, 0.2, 9.0, -0.5, 3.0]).unwrap();
        let pa = generate_params(&a, &s, &g).unwrap();
        let pb = generate_params(&b, &s, &g).unwrap();
        assert_eq!(pa.weight.to_vec(), pb.weight.to_vec());
        assert_eq!(pa.bias.to_vec(), pb.bias.to_vec());
        assert_eq!(pa.weight.shape(), &[1, 4, 2, 3, 3]);
        assert_eq!(pa.bias.shape(), &[1, 4]);
    }

    #[test]
    fn identity_init_reproduces_input() {
        for (k, c, cg) in [(1, 3, 1), (3, 4, 1), (3, 4, 2), (5, 6, 3)] {
            let s = spec(k, c, cg);
            let g = AdaConvGenerator::<f64>::new(&mut ChaCha8Rng::seed_from_u64(2), s).unwrap();
            let f_geo = Tensor::from_vec(&[2, 6], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
            let x: Vec<f64> = (0..2 * c * 25).map(|i| (i as f64 * 0.77).sin()).collect();
            let feats = Tensor::from_vec(&[2, c, 5, 5], x.clone()).unwrap();
            let p = generate_params(&f_geo, &s, &g).unwrap();
            assert_eq!(ada_conv(&feats, &p, &s).unwrap().to_vec(), x, "k={k} c={c} cg={cg}");
        }
    }

    #[test]
    fn affine_reduction_example() {
        let s = spec(1, 2, 1);
        let feats = Tensor::<f32>::from_vec(&[1, 2, 2, 2], vec![3.0; 8]).unwrap();
        let params = GeneratedParams {
            weight: Tensor::from_vec(&[1, 2, 1, 1, 1], vec![2.0, 2.0]).unwrap(),
            bias: Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap(),
        };
        assert_eq!(ada_conv(&feats, &params, &s).unwrap().to_vec(), vec![7.0; 8]);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let s = spec(3, 4, 1);
        let g = AdaConvGenerator::<f32>::new(&mut ChaCha8Rng::seed_from_u64(0), s).unwrap();
        let p = generate_params(&Tensor::zeros(&[1, 6]), &s, &g).unwrap();
        let err = ada_conv(&Tensor::zeros(&[1, 3, 4, 4]), &p, &s).unwrap_err().to_string();
        assert!(err.contains("channels 3"), "{err}");
        assert!(generate_params(&Tensor::zeros(&[1, 5]), &s, &g).is_err());
    }
}
