//! Patch critic and the training objective.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{join, Conv2d, InstanceNorm, Module, LEAKY_SLOPE};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CriticConfig {
    /// Convolution count: `layers - 1` stride-2 4×4 stages plus the scoring conv.
    pub layers: usize,
    pub base_channels: usize,
    /// Weights are clipped to `[-clip, clip]` after every critic update.
    pub clip: f64,
    pub steps_per_generator_step: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            layers: 4,
            base_channels: 16,
            clip: 0.01,
            steps_per_generator_step: 1,
        }
    }
}

impl CriticConfig {
    pub fn micro() -> Self {
        CriticConfig {
            layers: 3,
            base_channels: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::Config(format!("critic needs >= 2 layers, got {}", self.layers)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!("critic clip bound must be > 0, got {}", self.clip)));
        }
        if self.base_channels == 0 || self.steps_per_generator_step == 0 {
            return Err(Error::Config("critic widths and step count must be >= 1".into()));
        }
        Ok(())
    }

    /// Side of the score map for a square input.
    pub fn output_side(&self, resolution: usize) -> usize {
        (0..self.layers - 1).fold(resolution, |s, _| (s + 2 - 4) / 2 + 1)
    }
}

/// Unconditional PatchGAN-style critic emitting an unbounded score per patch.
pub struct Critic<T: Real = f32> {
    pub config: CriticConfig,
    pub convs: Vec<Conv2d<T>>,
    pub norms: Vec<InstanceNorm<T>>,
    pub score: Conv2d<T>,
}

impl<T: Real> Critic<T> {
    pub fn new(rng: &mut impl Rng, config: CriticConfig) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut cin = 3;
        for i in 0..config.layers - 1 {
            let cout = config.base_channels << i;
            convs.push(Conv2d::new(rng, cin, cout, 4, 2, 1));
            norms.push(InstanceNorm::non_affine(cout));
            cin = cout;
        }
        let score = Conv2d::new(rng, cin, 1, 3, 1, 1);
        Ok(Critic {
            config,
            convs,
            norms,
            score,
        })
    }

    /// `[N, 3, R, R]` → score map `[N, 1, h, w]`.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        match image.shape() {
            [_, 3, h, w] if self.config.output_side(*h.min(w)) >= 1 && *h >= 4 && *w >= 4 => {}
            s => return shape_err("critic", format!("image {s:?} too small or not RGB")),
        }
        let slope = T::of(LEAKY_SLOPE);
        let mut x = image.clone();
        for (i, (conv, norm)) in self.convs.iter().zip(&self.norms).enumerate() {
            x = conv.forward(&x)?;
            if i > 0 {
                x = norm.forward(&x)?;
            }
            x = x.leaky_relu(slope);
        }
        self.score.forward(&x)
    }

    /// Mean patch score, `E[D(x)]` over batch and patches.
    pub fn mean_score(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(image)?.mean())
    }

    /// Clamps every critic weight into `[-clip, clip]`.
    pub fn clip_weights(&self) {
        let c = T::of(self.config.clip);
        self.visit("", &mut |_, t| {
            t.update_data(|w| w.iter_mut().for_each(|v| *v = v.max(-c).min(c)));
        });
    }

    pub fn max_abs_weight(&self) -> f64 {
        let mut m = 0.0f64;
        self.visit("", &mut |_, t| {
            for v in t.data().iter() {
                m = m.max(v.as_f64().abs());
            }
        });
        m
    }
}

impl<T: Real> Module<T> for Critic<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("conv{i}")), f);
        }
        self.score.visit(&join(prefix, "score"), f);
    }
}

/// `λ_G`, `λ_C`, `λ_Adv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub geometry: f64,
    pub content: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            geometry: 1.0,
            content: 100.0,
            adversarial: 1.0,
        }
    }
}

fn check_scalar<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.numel() != 1 {
        return shape_err(op, format!("expected a scalar, got {:?}", t.shape()));
    }
    Ok(())
}

/// Critic objective `E[D(fake)] − E[D(real)]`; the critic minimizes it.
pub fn critic_loss<T: Real>(d_fake_mean: &Tensor<T>, d_real_mean: &Tensor<T>) -> Result<Tensor<T>> {
    check_scalar("critic_loss", d_fake_mean)?;
    check_scalar("critic_loss", d_real_mean)?;
    d_fake_mean.sub(d_real_mean)
}

/// Generator side of the adversarial game: `−E[D(fake)]`.
pub fn generator_adv_loss<T: Real>(d_fake_mean: &Tensor<T>) -> Result<Tensor<T>> {
    check_scalar("generator_adv_loss", d_fake_mean)?;
    Ok(d_fake_mean.neg())
}

/// The individual objective terms and their weighted sum.
#[derive(Clone, Debug)]
pub struct LossTerms<T: Real = f32> {
    pub geometry: Tensor<T>,
    pub content: Tensor<T>,
    pub adversarial: Tensor<T>,
    pub total: Tensor<T>,
}

/// `λ_G·mean|f_geo − l| + λ_C·mean|Î − I| + λ_Adv·(−E[D(Î)])`.
pub fn total_loss<T: Real>(
    f_geo: &Tensor<T>,
    landmarks: &Tensor<T>,
    reenacted: &Tensor<T>,
    target: &Tensor<T>,
    d_fake_mean: &Tensor<T>,
    weights: &LossWeights,
) -> Result<LossTerms<T>> {
    let geometry = f_geo.l1(landmarks)?;
    let content = reenacted.l1(target)?;
    let adversarial = generator_adv_loss(d_fake_mean)?;
    let total = geometry
        .scale(T::of(weights.geometry))
        .add(&content.scale(T::of(weights.content)))?
        .add(&adversarial.scale(T::of(weights.adversarial)))?;
    Ok(LossTerms {
        geometry,
        content,
        adversarial,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn critic_loss_arithmetic() {
        assert!((critic_loss(&s(0.3), &s(0.8)).unwrap().item() + 0.5).abs() < 1e-15);
        assert_eq!(critic_loss(&s(0.42), &s(0.42)).unwrap().item(), 0.0);
        let a = critic_loss(&s(1.25), &s(-0.5)).unwrap().item();
        let b = critic_loss(&s(-0.5), &s(1.25)).unwrap().item();
        assert_eq!(a, -b);
        assert!(critic_loss(&Tensor::<f64>::zeros(&[2]), &s(0.0)).is_err());
    }

    #[test]
    fn generator_adv_loss_arithmetic() {
        assert_eq!(generator_adv_loss(&s(0.3)).unwrap().item(), -0.3);
        assert_eq!(generator_adv_loss(&Tensor::<f64>::zeros(&[4]).mean()).unwrap().item(), 0.0);
    }

    #[test]
    fn total_loss_weighting() {
        // L_G = 0.5, L_C = 0.01, L_Adv = 0.2 (D(fake) mean = -0.2).
        let f_geo = Tensor::from_vec(&[1, 4], vec![0.5, -0.5, 0.5, -0.5]).unwrap();
        let l = Tensor::<f64>::zeros(&[1, 4]);
        let fake = Tensor::full(&[1, 3, 2, 2], 0.01);
        let real = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let terms = total_loss(&f_geo, &l, &fake, &real, &s(-0.2), &LossWeights::default()).unwrap();
        assert!((terms.geometry.item() - 0.5).abs() < 1e-15);
        assert!((terms.content.item() - 0.01).abs() < 1e-15);
        assert!((terms.adversarial.item() - 0.2).abs() < 1e-15);
        assert!((terms.total.item() - 1.7).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let f_geo = Tensor::<f64>::full(&[2, 6], 0.25);
        let img = Tensor::<f64>::full(&[2, 3, 4, 4], -0.5);
        let terms = total_loss(&f_geo, &f_geo, &img, &img, &s(0.0), &LossWeights::default()).unwrap();
        assert_eq!(terms.total.item(), 0.0);
    }

    #[test]
    fn default_score_map_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let critic = Critic::<f32>::new(&mut rng, CriticConfig::default()).unwrap();
        let img = Tensor::full(&[2, 3, 64, 64], 0.1);
        let out = critic.forward(&img).unwrap();
        assert_eq!(out.shape(), &[2, 1, 8, 8]);
        assert_eq!(CriticConfig::default().output_side(64), 8);
        assert_eq!(critic.forward(&img).unwrap().to_vec(), out.to_vec());
    }

    #[test]
    fn clipping_bounds_every_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let critic = Critic::<f32>::new(&mut rng, CriticConfig::default()).unwrap();
        assert!(critic.max_abs_weight() > 0.01);
        critic.clip_weights();
        assert!(critic.max_abs_weight() <= 0.01 + 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(CriticConfig { clip: 0.0, ..CriticConfig::default() }.validate().is_err());
        assert!(CriticConfig { layers: 1, ..CriticConfig::default() }.validate().is_err());
    }
}
