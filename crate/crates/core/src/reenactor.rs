//! Multi-face reenactor: image encoder, a chain of residual blocks whose
//! adaptive convolutions inject the geometry feature, and an image decoder.

use rand::Rng;

use crate::adaconv::{ada_conv, generate_params, AdaConvGenerator, AdaConvSpec};
use crate::error::{shape_err, Error, Result};
use crate::nn::{join, Conv2d, InstanceNorm, Module, LEAKY_SLOPE};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReenactorConfig {
    /// Square image side; must be divisible by 4.
    pub resolution: usize,
    pub base_channels: usize,
    pub channels: usize,
    pub blocks: usize,
    pub ada_kernel: usize,
    pub ada_group_channels: usize,
    pub ada_hidden: usize,
    /// Length of the geometry feature (`2 · landmarks`).
    pub geo_dim: usize,
}

impl Default for ReenactorConfig {
    fn default() -> Self {
        ReenactorConfig {
            resolution: 64,
            base_channels: 16,
            channels: 64,
            blocks: 9,
            ada_kernel: 3,
            ada_group_channels: 1,
            ada_hidden: 128,
            geo_dim: 136,
        }
    }
}

impl ReenactorConfig {
    /// Default widths at 256×256.
    pub fn full_scale() -> Self {
        ReenactorConfig {
            resolution: 256,
            ..Self::default()
        }
    }

    pub fn micro() -> Self {
        ReenactorConfig {
            resolution: 8,
            base_channels: 2,
            channels: 4,
            blocks: 2,
            ada_kernel: 3,
            ada_group_channels: 1,
            ada_hidden: 5,
            geo_dim: 6,
        }
    }

    pub fn ada_spec(&self) -> Result<AdaConvSpec> {
        AdaConvSpec::new(
            self.ada_kernel,
            self.channels,
            self.ada_group_channels,
            self.geo_dim,
            self.ada_hidden,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.resolution % 4 != 0 {
            return Err(Error::Config(format!(
                "resolution must be a positive multiple of 4, got {}",
                self.resolution
            )));
        }
        if self.blocks == 0 {
            return Err(Error::Config("reenactor needs at least one block".into()));
        }
        if self.base_channels == 0 || self.channels == 0 {
            return Err(Error::Config("reenactor widths must be >= 1".into()));
        }
        self.ada_spec().map(|_| ())
    }

    pub fn feature_side(&self) -> usize {
        self.resolution / 4
    }
}

/// ψ_E: 7×7 stem, then two stride-2 3×3 stages, each followed by instance
/// norm and leaky ReLU.
pub struct Encoder<T: Real = f32> {
    pub stem: Conv2d<T>,
    pub stem_norm: InstanceNorm<T>,
    pub down1: Conv2d<T>,
    pub down1_norm: InstanceNorm<T>,
    pub down2: Conv2d<T>,
    pub down2_norm: InstanceNorm<T>,
}

impl<T: Real> Encoder<T> {
    pub fn new(rng: &mut impl Rng, cfg: &ReenactorConfig) -> Self {
        let (c0, c) = (cfg.base_channels, cfg.channels);
        Encoder {
            stem: Conv2d::new(rng, 3, c0, 7, 1, 3),
            stem_norm: InstanceNorm::new(c0),
            down1: Conv2d::new(rng, c0, 2 * c0, 3, 2, 1),
            down1_norm: InstanceNorm::new(2 * c0),
            down2: Conv2d::new(rng, 2 * c0, c, 3, 2, 1),
            down2_norm: InstanceNorm::new(c),
        }
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let slope = T::of(LEAKY_SLOPE);
        let x = self.stem_norm.forward(&self.stem.forward(image)?)?.leaky_relu(slope);
        let x = self.down1_norm.forward(&self.down1.forward(&x)?)?.leaky_relu(slope);
        Ok(self.down2_norm.forward(&self.down2.forward(&x)?)?.leaky_relu(slope))
    }
}

impl<T: Real> Module<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        self.stem_norm.visit(&join(prefix, "stem_norm"), f);
        self.down1.visit(&join(prefix, "down1"), f);
        self.down1_norm.visit(&join(prefix, "down1_norm"), f);
        self.down2.visit(&join(prefix, "down2"), f);
        self.down2_norm.visit(&join(prefix, "down2_norm"), f);
    }
}

/// Residual block `y = x + out(leaky(ada_conv(norm(conv(x)), W(f_geo))))`.
///
/// The static convolution carries appearance, the adaptive one injects
/// geometry. The output convolution starts at zero so a fresh block is the
/// identity map.
pub struct TransformBlock<T: Real = f32> {
    pub spec: AdaConvSpec,
    pub conv: Conv2d<T>,
    pub norm: InstanceNorm<T>,
    pub generator: AdaConvGenerator<T>,
    pub out: Conv2d<T>,
}

impl<T: Real> TransformBlock<T> {
    pub fn new(rng: &mut impl Rng, spec: AdaConvSpec) -> Result<Self> {
        let c = spec.channels;
        Ok(TransformBlock {
            spec,
            conv: Conv2d::new(rng, c, c, 3, 1, 1),
            norm: InstanceNorm::new(c),
            generator: AdaConvGenerator::new(rng, spec)?,
            out: Conv2d::zeros(c, c, 3, 1, 1),
        })
    }

    pub fn forward(&self, features: &Tensor<T>, f_geo: &Tensor<T>) -> Result<Tensor<T>> {
        if features.rank() != 4 || features.shape()[1] != self.spec.channels {
            return shape_err(
                "transform_block",
                format!("expected [N, {}, H, W], got {:?}", self.spec.channels, features.shape()),
            );
        }
        let h = self.norm.forward(&self.conv.forward(features)?)?;
        let params = generate_params(f_geo, &self.spec, &self.generator)?;
        let h = ada_conv(&h, &params, &self.spec)?.leaky_relu(T::of(LEAKY_SLOPE));
        features.add(&self.out.forward(&h)?)
    }
}

impl<T: Real> Module<T> for TransformBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.norm.visit(&join(prefix, "norm"), f);
        self.generator.visit(&join(prefix, "generator"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
}

/// ψ_D: two (upsample, 3×3 conv, norm, leaky ReLU) stages, then a 7×7
/// convolution to RGB and tanh.
pub struct Decoder<T: Real = f32> {
    pub up1: Conv2d<T>,
    pub up1_norm: InstanceNorm<T>,
    pub up2: Conv2d<T>,
    pub up2_norm: InstanceNorm<T>,
    pub to_rgb: Conv2d<T>,
}

impl<T: Real> Decoder<T> {
    pub fn new(rng: &mut impl Rng, cfg: &ReenactorConfig) -> Self {
        let (c0, c) = (cfg.base_channels, cfg.channels);
        Decoder {
            up1: Conv2d::new(rng, c, 2 * c0, 3, 1, 1),
            up1_norm: InstanceNorm::new(2 * c0),
            up2: Conv2d::new(rng, 2 * c0, c0, 3, 1, 1),
            up2_norm: InstanceNorm::new(c0),
            to_rgb: Conv2d::new(rng, c0, 3, 7, 1, 3),
        }
    }

    pub fn forward(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let slope = T::of(LEAKY_SLOPE);
        let x = self.up1.forward(&features.upsample_nearest2x()?)?;
        let x = self.up1_norm.forward(&x)?.leaky_relu(slope);
        let x = self.up2.forward(&x.upsample_nearest2x()?)?;
        let x = self.up2_norm.forward(&x)?.leaky_relu(slope);
        Ok(self.to_rgb.forward(&x)?.tanh())
    }
}

impl<T: Real> Module<T> for Decoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.up1.visit(&join(prefix, "up1"), f);
        self.up1_norm.visit(&join(prefix, "up1_norm"), f);
        self.up2.visit(&join(prefix, "up2"), f);
        self.up2_norm.visit(&join(prefix, "up2_norm"), f);
        self.to_rgb.visit(&join(prefix, "to_rgb"), f);
    }
}

pub struct Reenactor<T: Real = f32> {
    pub config: ReenactorConfig,
    pub encoder: Encoder<T>,
    pub blocks: Vec<TransformBlock<T>>,
    pub decoder: Decoder<T>,
}

impl<T: Real> Reenactor<T> {
    pub fn new(rng: &mut impl Rng, config: ReenactorConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.ada_spec()?;
        let encoder = Encoder::new(rng, &config);
        let blocks = (0..config.blocks)
            .map(|_| TransformBlock::new(rng, spec))
            .collect::<Result<Vec<_>>>()?;
        let decoder = Decoder::new(rng, &config);
        Ok(Reenactor {
            config,
            encoder,
            blocks,
            decoder,
        })
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let r = self.config.resolution;
        match image.shape() {
            [_, 3, h, w] if *h == r && *w == r => Ok(()),
            s => shape_err("reenact", format!("reference must be [N, 3, {r}, {r}], got {s:?}")),
        }
    }

    /// `[N, 3, R, R]` → `[N, C, R/4, R/4]`.
    pub fn encode(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(image)?;
        self.encoder.forward(image)
    }

    pub fn transform(&self, features: &Tensor<T>, f_geo: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = features.clone();
        for block in &self.blocks {
            x = block.forward(&x, f_geo)?;
        }
        Ok(x)
    }

    pub fn decode(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        self.decoder.forward(features)
    }

    /// Reenacts `reference: [N, 3, R, R]` under `f_geo: [N, geo_dim]`.
    pub fn forward(&self, reference: &Tensor<T>, f_geo: &Tensor<T>) -> Result<Tensor<T>> {
        if f_geo.rank() != 2 || f_geo.shape()[0] != reference.shape().first().copied().unwrap_or(0) {
            return shape_err(
                "reenact",
                format!("f_geo {:?} does not match batch of {:?}", f_geo.shape(), reference.shape()),
            );
        }
        let features = self.encode(reference)?;
        self.decode(&self.transform(&features, f_geo)?)
    }
}

impl<T: Real> Module<T> for Reenactor<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.decoder.visit(&join(prefix, "decoder"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect()).unwrap()
    }

    fn small() -> ReenactorConfig {
        ReenactorConfig {
            resolution: 16,
            base_channels: 4,
            channels: 8,
            blocks: 3,
            ada_hidden: 8,
            geo_dim: 6,
            ..ReenactorConfig::default()
        }
    }

    #[test]
    fn default_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = Reenactor::<f32>::new(&mut rng, ReenactorConfig::default()).unwrap();
        let img = rand_tensor::<f32>(&mut rng, &[1, 3, 64, 64]);
        let feats = r.encode(&img).unwrap();
        assert_eq!(feats.shape(), &[1, 64, 16, 16]);
        let out = r.decode(&feats).unwrap();
        assert_eq!(out.shape(), &[1, 3, 64, 64]);
        assert!(out.to_vec().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small();
        cfg.resolution = 18;
        assert!(cfg.validate().is_err());
        cfg = small();
        cfg.blocks = 0;
        assert!(cfg.validate().is_err());
        cfg = small();
        cfg.ada_group_channels = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fresh_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = small().ada_spec().unwrap();
        let block = TransformBlock::<f32>::new(&mut rng, spec).unwrap();
        let x = rand_tensor::<f32>(&mut rng, &[2, 8, 4, 4]);
        let g = rand_tensor::<f32>(&mut rng, &[2, 6]);
        assert_eq!(block.forward(&x, &g).unwrap().to_vec(), x.to_vec());
        assert!(block.forward(&rand_tensor::<f32>(&mut rng, &[2, 7, 4, 4]), &g).is_err());
    }

    #[test]
    fn forward_is_the_manual_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = Reenactor::<f32>::new(&mut rng, small()).unwrap();
        crate::nn::randomize(&r, &mut rng, 0.3);
        let img = rand_tensor::<f32>(&mut rng, &[2, 3, 16, 16]);
        let g = rand_tensor::<f32>(&mut rng, &[2, 6]);
        let mut x = r.encode(&img).unwrap();
        for b in &r.blocks {
            x = b.forward(&x, &g).unwrap();
        }
        let manual = r.decode(&x).unwrap().to_vec();
        assert_eq!(r.forward(&img, &g).unwrap().to_vec(), manual);
        assert_eq!(r.forward(&img, &g).unwrap().to_vec(), manual);
    }

    #[test]
    fn geometry_is_inert_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = Reenactor::<f32>::new(&mut rng, small()).unwrap();
        let img = rand_tensor::<f32>(&mut rng, &[1, 3, 16, 16]);
        let a = r.forward(&img, &rand_tensor(&mut rng, &[1, 6])).unwrap().to_vec();
        let b = r.forward(&img, &rand_tensor(&mut rng, &[1, 6])).unwrap().to_vec();
        assert_eq!(a, b);
        let plain = r.decode(&r.encode(&img).unwrap()).unwrap().to_vec();
        assert_eq!(a, plain);
    }

    #[test]
    fn appearance_path_is_live() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = Reenactor::<f32>::new(&mut rng, small()).unwrap();
        crate::nn::randomize(&r, &mut rng, 0.3);
        let g = rand_tensor::<f32>(&mut rng, &[1, 6]);
        let a = r.forward(&rand_tensor(&mut rng, &[1, 3, 16, 16]), &g).unwrap().to_vec();
        let b = r.forward(&rand_tensor(&mut rng, &[1, 3, 16, 16]), &g).unwrap().to_vec();
        assert_ne!(a, b);
    }

    #[test]
    fn output_shape_follows_resolution() {
        for res in [8, 12, 20] {
            let cfg = ReenactorConfig { resolution: res, ..small() };
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let r = Reenactor::<f32>::new(&mut rng, cfg).unwrap();
            let img = rand_tensor::<f32>(&mut rng, &[1, 3, res, res]);
            let out = r.forward(&img, &rand_tensor(&mut rng, &[1, 6])).unwrap();
            assert_eq!(out.shape(), img.shape());
        }
    }
}
