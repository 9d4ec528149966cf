//! Model bundle, batching, the alternating critic/generator update and
//! checkpoint persistence.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::critic::{critic_loss, total_loss, Critic};
use crate::dataset::{mix, Dataset};
use crate::error::{Error, Result};
use crate::fuser::Fuser;
use crate::image::{batch_tensor, FaceImage};
use crate::nn::Module;
use crate::reenactor::Reenactor;
use crate::signal::{audio_batch, blink_batch, landmark_batch, pose_batch, DriveSignal};
use crate::synth::LANDMARK_COUNT;
use crate::tensor::{no_grad, AdamState, Real, Tensor};

/// Fuser φ, reenactor ψ and critic D.
pub struct Models<T: Real = f32> {
    pub fuser: Fuser<T>,
    pub reenactor: Reenactor<T>,
    pub critic: Critic<T>,
}

/// Learnable-parameter counts per submodule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub fuser: usize,
    pub reenactor: usize,
    pub critic: usize,
}

impl ParamCounts {
    /// Parameters used at inference time (fuser and reenactor).
    pub fn generator(&self) -> usize {
        self.fuser + self.reenactor
    }
}

impl<T: Real> Models<T> {
    /// Initializes all three networks from `config.seed`.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Models {
            fuser: Fuser::new(&mut rng, config.fuser())?,
            reenactor: Reenactor::new(&mut rng, config.reenactor())?,
            critic: Critic::new(&mut rng, config.critic())?,
        })
    }

    pub fn generator_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.fuser.visit("fuser", &mut |n, t| out.push((n, t.clone())));
        self.reenactor.visit("reenactor", &mut |n, t| out.push((n, t.clone())));
        out
    }

    pub fn critic_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.critic.visit("critic", &mut |n, t| out.push((n, t.clone())));
        out
    }

    pub fn param_counts(&self) -> ParamCounts {
        ParamCounts {
            fuser: self.fuser.param_count(),
            reenactor: self.reenactor.param_count(),
            critic: self.critic.param_count(),
        }
    }

    /// Full inference path: drive signals → f_geo → reenacted image.
    /// Returns `(f_geo, image)`.
    pub fn reenact(
        &self,
        reference: &Tensor<T>,
        audio: &Tensor<T>,
        pose: &Tensor<T>,
        blink: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let f_geo = self.fuser.forward(audio, pose, blink)?;
        let image = self.reenactor.forward(reference, &f_geo)?;
        Ok((f_geo, image))
    }
}

impl Models<f32> {
    /// Reenacts one reference image per drive signal without recording a graph.
    pub fn reenact_images(&self, references: &[&FaceImage], drives: &[&DriveSignal]) -> Result<Vec<FaceImage>> {
        let (_, img) = no_grad(|| {
            let audio: Vec<_> = drives.iter().map(|d| &d.audio).collect();
            let pose: Vec<_> = drives.iter().map(|d| d.pose).collect();
            let blink: Vec<_> = drives.iter().map(|d| d.blink).collect();
            self.reenact(
                &batch_tensor(references)?,
                &audio_batch(&audio)?,
                &pose_batch(&pose)?,
                &blink_batch(&blink)?,
            )
        })?;
        FaceImage::from_batch(&img)
    }

    /// Predicted landmark coordinates for each drive signal.
    pub fn predict_geometry(&self, drives: &[&DriveSignal]) -> Result<Vec<Vec<f32>>> {
        let f_geo = no_grad(|| {
            let audio: Vec<_> = drives.iter().map(|d| &d.audio).collect();
            let pose: Vec<_> = drives.iter().map(|d| d.pose).collect();
            let blink: Vec<_> = drives.iter().map(|d| d.blink).collect();
            self.fuser.forward(&audio_batch(&audio)?, &pose_batch(&pose)?, &blink_batch(&blink)?)
        })?;
        let d = f_geo.shape()[1];
        Ok(f_geo.to_vec().chunks(d).map(|c| c.to_vec()).collect())
    }
}

/// One training batch as tensors.
pub struct Batch {
    pub reference: Tensor<f32>,
    pub target: Tensor<f32>,
    pub audio: Tensor<f32>,
    pub pose: Tensor<f32>,
    pub blink: Tensor<f32>,
    pub landmarks: Tensor<f32>,
}

impl Batch {
    pub fn from_samples(ds: &Dataset, indices: &[usize]) -> Result<Batch> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= ds.len()) {
            return Err(Error::Dataset(format!("sample index {bad} out of range ({} samples)", ds.len())));
        }
        let s: Vec<_> = indices.iter().map(|&i| &ds.samples[i]).collect();
        let refs: Vec<_> = s.iter().map(|x| ds.reference(x.identity)).collect();
        let targets: Vec<_> = s.iter().map(|x| &x.target).collect();
        let audio: Vec<_> = s.iter().map(|x| &x.drive.audio).collect();
        let pose: Vec<_> = s.iter().map(|x| x.drive.pose).collect();
        let blink: Vec<_> = s.iter().map(|x| x.drive.blink).collect();
        let lms: Vec<_> = s.iter().map(|x| &x.landmarks).collect();
        Ok(Batch {
            reference: batch_tensor(&refs)?,
            target: batch_tensor(&targets)?,
            audio: audio_batch(&audio)?,
            pose: pose_batch(&pose)?,
            blink: blink_batch(&blink)?,
            landmarks: landmark_batch(&lms)?,
        })
    }
}

/// Sample indices for `step`: `batch` distinct indices drawn from a stream
/// keyed by `(seed, step)`, so any step can be replayed in isolation.
pub fn batch_indices(seed: u64, step: u64, samples: usize, batch: usize) -> Result<Vec<usize>> {
    if batch == 0 || batch > samples {
        return Err(Error::Config(format!("batch size {batch} does not fit a dataset of {samples} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 0x5eed_ba7c, step));
    Ok(rand::seq::index::sample(&mut rng, samples, batch).into_vec())
}

/// Loss values and gradient norms of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    /// Critic objective `E[D(fake)] − E[D(real)]` before its update.
    pub critic: f64,
    pub geometry: f64,
    pub content: f64,
    /// `−E[D(fake)]` under the updated critic.
    pub adversarial: f64,
    pub total: f64,
    pub generator_grad_norm: f64,
    pub critic_grad_norm: f64,
}

impl StepReport {
    pub const CSV_HEADER: &'static str =
        "step,critic,geometry,content,adversarial,total,generator_grad_norm,critic_grad_norm";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.critic,
            self.geometry,
            self.content,
            self.adversarial,
            self.total,
            self.generator_grad_norm,
            self.critic_grad_norm
        )
    }
}

fn grad_norm(params: &[Tensor<f32>]) -> f64 {
    params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.into_iter())
        .map(|g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt()
}

fn finite(name: &str, step: u64, t: &Tensor<f32>) -> Result<f64> {
    let v = t.item() as f64;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("{name} loss is {v} at step {step}")));
    }
    Ok(v)
}

/// Training state: models, both Adam states and the step counter.
pub struct Trainer {
    pub config: RunConfig,
    pub models: Models<f32>,
    gen_names: Vec<String>,
    gen_params: Vec<Tensor<f32>>,
    critic_names: Vec<String>,
    critic_params: Vec<Tensor<f32>>,
    pub gen_opt: AdamState<f32>,
    pub critic_opt: AdamState<f32>,
    /// Number of completed steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        let models = Models::new(&config)?;
        let (gen_names, gen_params): (Vec<_>, Vec<_>) = models.generator_params().into_iter().unzip();
        let (critic_names, critic_params): (Vec<_>, Vec<_>) = models.critic_params().into_iter().unzip();
        let gen_opt = AdamState::new(&gen_params, config.adam());
        let critic_opt = AdamState::new(&critic_params, config.adam());
        Ok(Trainer {
            config,
            models,
            gen_names,
            gen_params,
            critic_names,
            critic_params,
            gen_opt,
            critic_opt,
            step: 0,
        })
    }

    /// Checks that a dataset matches the configured resolution and signals
    /// and can fill a batch.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        self.check_dataset_signals(ds)?;
        if ds.len() < self.config.batch_size {
            return Err(Error::Dataset(format!("{} samples cannot fill a batch of {}", ds.len(), self.config.batch_size)));
        }
        Ok(())
    }

    /// Checks resolution, audio shape and landmark count only.
    pub fn check_dataset_signals(&self, ds: &Dataset) -> Result<()> {
        let c = &self.config;
        let s = &ds.spec;
        if s.resolution != c.resolution || s.time_nodes != c.time_nodes || s.audio_channels != c.audio_channels {
            return Err(Error::Dataset(format!(
                "dataset is {}px with {}x{} audio, config expects {}px with {}x{}",
                s.resolution, s.time_nodes, s.audio_channels, c.resolution, c.time_nodes, c.audio_channels
            )));
        }
        if c.landmarks != LANDMARK_COUNT {
            return Err(Error::Dataset(format!(
                "synthetic data has {LANDMARK_COUNT} landmarks, config expects {}",
                c.landmarks
            )));
        }
        Ok(())
    }

    /// One critic update (or several) followed by one joint fuser+reenactor
    /// update on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepReport> {
        let step = self.step;
        let weights = self.config.weights();
        let critic = &self.models.critic;

        let f_geo = self.models.fuser.forward(&batch.audio, &batch.pose, &batch.blink)?;
        let fake = self.models.reenactor.forward(&batch.reference, &f_geo)?;

        let fake_detached = fake.detach();
        let mut critic_value = 0.0;
        let mut critic_grad_norm = 0.0;
        for k in 0..self.config.critic_steps {
            critic.zero_grad();
            let loss = critic_loss(&critic.mean_score(&fake_detached)?, &critic.mean_score(&batch.target)?)?;
            let v = finite("critic", step, &loss)?;
            if k == 0 {
                critic_value = v;
            }
            loss.backward()?;
            critic_grad_norm = grad_norm(&self.critic_params);
            self.critic_opt.step(&self.critic_params)?;
            critic.clip_weights();
        }

        for p in &self.gen_params {
            p.zero_grad();
        }
        let d_fake = if weights.adversarial > 0.0 {
            critic.mean_score(&fake)?
        } else {
            no_grad(|| critic.mean_score(&fake_detached))?
        };
        let terms = total_loss(&f_geo, &batch.landmarks, &fake, &batch.target, &d_fake, &weights)?;
        let geometry = finite("geometry", step, &terms.geometry)?;
        let content = finite("content", step, &terms.content)?;
        let adversarial = finite("adversarial", step, &terms.adversarial)?;
        let total = finite("total", step, &terms.total)?;
        terms.total.backward()?;
        let generator_grad_norm = grad_norm(&self.gen_params);
        self.gen_opt.step(&self.gen_params)?;
        critic.zero_grad();

        self.step += 1;
        Ok(StepReport {
            step,
            critic: critic_value,
            geometry,
            content,
            adversarial,
            total,
            generator_grad_norm,
            critic_grad_norm,
        })
    }

    /// Trains one step on the batch that `(seed, step)` selects from `ds`.
    pub fn step_on(&mut self, ds: &Dataset) -> Result<StepReport> {
        let idx = batch_indices(self.config.seed, self.step, ds.len(), self.config.batch_size)?;
        let batch = Batch::from_samples(ds, &idx)?;
        self.train_step(&batch)
    }

    /// Runs `step_on` until `self.step == until`, calling `on_step` after
    /// every step.
    pub fn train(
        &mut self,
        ds: &Dataset,
        until: u64,
        mut on_step: impl FnMut(&Trainer, &StepReport) -> Result<()>,
    ) -> Result<()> {
        self.check_dataset(ds)?;
        while self.step < until {
            let report = self.step_on(ds)?;
            on_step(self, &report)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        c.push_bytes("meta.config", self.config.to_text().into_bytes());
        c.push_bytes("meta.step", self.step.to_le_bytes().to_vec());
        c.push_bytes("meta.adam.gen.step", self.gen_opt.step.to_le_bytes().to_vec());
        c.push_bytes("meta.adam.critic.step", self.critic_opt.step.to_le_bytes().to_vec());
        for (names, params) in [(&self.gen_names, &self.gen_params), (&self.critic_names, &self.critic_params)] {
            for (n, p) in names.iter().zip(params.iter()) {
                c.push_f32(format!("param.{n}"), p.shape(), p.to_vec());
            }
        }
        for (tag, names, params, opt) in [
            ("gen", &self.gen_names, &self.gen_params, &self.gen_opt),
            ("critic", &self.critic_names, &self.critic_params, &self.critic_opt),
        ] {
            for (i, (n, p)) in names.iter().zip(params.iter()).enumerate() {
                c.push_f32(format!("adam.{tag}.m.{n}"), p.shape(), opt.m[i].clone());
                c.push_f32(format!("adam.{tag}.v.{n}"), p.shape(), opt.v[i].clone());
            }
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let text = std::str::from_utf8(c.bytes("meta.config")?)
            .map_err(|_| Error::Checkpoint("config echo is not UTF-8".into()))?;
        let mut t = Trainer::new(RunConfig::parse(text)?)?;
        t.step = c.u64("meta.step")?;
        t.gen_opt.step = c.u64("meta.adam.gen.step")?;
        t.critic_opt.step = c.u64("meta.adam.critic.step")?;
        let load = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let (dims, data) = c.f32(name)?;
            if dims != shape {
                return Err(Error::Checkpoint(format!("{name}: stored {dims:?}, model expects {shape:?}")));
            }
            Ok(data.to_vec())
        };
        for (names, params) in [(&t.gen_names, &t.gen_params), (&t.critic_names, &t.critic_params)] {
            for (n, p) in names.iter().zip(params.iter()) {
                p.set_data(load(&format!("param.{n}"), p.shape())?)?;
            }
        }
        for (tag, names, params, opt) in [
            ("gen", &t.gen_names, &t.gen_params, &mut t.gen_opt),
            ("critic", &t.critic_names, &t.critic_params, &mut t.critic_opt),
        ] {
            for (i, (n, p)) in names.iter().zip(params.iter()).enumerate() {
                opt.m[i] = load(&format!("adam.{tag}.m.{n}"), p.shape())?;
                opt.v[i] = load(&format!("adam.{tag}.v.{n}"), p.shape())?;
            }
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
