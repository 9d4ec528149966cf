//! Run configuration: a flat `key = value` file covering model widths,
//! objective weights, optimizer settings, seeds and paths.

use std::fmt::Write as _;
use std::path::Path;

use crate::critic::{CriticConfig, LossWeights};
use crate::error::{Error, Result};
use crate::fuser::FuserConfig;
use crate::reenactor::ReenactorConfig;
use crate::tensor::AdamConfig;

pub const CONFIG_FILE: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub resolution: usize,
    pub base_channels: usize,
    pub channels: usize,
    pub blocks: usize,
    pub ada_kernel: usize,
    pub ada_group_channels: usize,
    pub ada_hidden: usize,
    pub landmarks: usize,
    pub time_nodes: usize,
    pub audio_channels: usize,
    pub critic_layers: usize,
    pub critic_channels: usize,
    pub clip: f64,
    pub critic_steps: usize,
    pub lambda_geometry: f64,
    pub lambda_content: f64,
    pub lambda_adv: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Dataset directory; empty when unset.
    pub data: String,
    /// Output directory; empty when unset.
    pub out: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let w = LossWeights::default();
        let c = CriticConfig::default();
        let r = ReenactorConfig::default();
        RunConfig {
            resolution: r.resolution,
            base_channels: r.base_channels,
            channels: r.channels,
            blocks: r.blocks,
            ada_kernel: r.ada_kernel,
            ada_group_channels: r.ada_group_channels,
            ada_hidden: r.ada_hidden,
            landmarks: 68,
            time_nodes: 8,
            audio_channels: 32,
            critic_layers: c.layers,
            critic_channels: c.base_channels,
            clip: c.clip,
            critic_steps: c.steps_per_generator_step,
            lambda_geometry: w.geometry,
            lambda_content: w.content,
            lambda_adv: w.adversarial,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            batch_size: 8,
            steps: 2000,
            seed: 0,
            log_every: 50,
            checkpoint_every: 500,
            data: String::new(),
            out: String::new(),
        }
    }
}

/// Every key, in file order.
pub const KEYS: &[&str] = &[
    "resolution",
    "base_channels",
    "channels",
    "blocks",
    "ada_kernel",
    "ada_group_channels",
    "ada_hidden",
    "landmarks",
    "time_nodes",
    "audio_channels",
    "critic_layers",
    "critic_channels",
    "clip",
    "critic_steps",
    "lambda_geometry",
    "lambda_content",
    "lambda_adv",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "batch_size",
    "steps",
    "seed",
    "log_every",
    "checkpoint_every",
    "data",
    "out",
];

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key:?}")))
}

impl RunConfig {
    /// 256×256 with the batch size and schedule of the full-size recipe
    /// (110 epochs over 23790 frames at batch 16).
    pub fn full_scale() -> Self {
        RunConfig {
            resolution: 256,
            batch_size: 16,
            steps: 110 * 23790u64.div_ceil(16),
            ..Self::default()
        }
    }

    /// Tiny widths for fast tests.
    pub fn micro() -> Self {
        RunConfig {
            resolution: 16,
            base_channels: 4,
            channels: 8,
            blocks: 2,
            ada_hidden: 16,
            critic_layers: 3,
            critic_channels: 4,
            batch_size: 2,
            steps: 10,
            log_every: 5,
            checkpoint_every: 0,
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "resolution" => self.resolution = parse(key, v)?,
            "base_channels" => self.base_channels = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "blocks" => self.blocks = parse(key, v)?,
            "ada_kernel" => self.ada_kernel = parse(key, v)?,
            "ada_group_channels" => self.ada_group_channels = parse(key, v)?,
            "ada_hidden" => self.ada_hidden = parse(key, v)?,
            "landmarks" => self.landmarks = parse(key, v)?,
            "time_nodes" => self.time_nodes = parse(key, v)?,
            "audio_channels" => self.audio_channels = parse(key, v)?,
            "critic_layers" => self.critic_layers = parse(key, v)?,
            "critic_channels" => self.critic_channels = parse(key, v)?,
            "clip" => self.clip = parse(key, v)?,
            "critic_steps" => self.critic_steps = parse(key, v)?,
            "lambda_geometry" => self.lambda_geometry = parse(key, v)?,
            "lambda_content" => self.lambda_content = parse(key, v)?,
            "lambda_adv" => self.lambda_adv = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "data" => self.data = v.to_string(),
            "out" => self.out = v.to_string(),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "resolution" => self.resolution.to_string(),
            "base_channels" => self.base_channels.to_string(),
            "channels" => self.channels.to_string(),
            "blocks" => self.blocks.to_string(),
            "ada_kernel" => self.ada_kernel.to_string(),
            "ada_group_channels" => self.ada_group_channels.to_string(),
            "ada_hidden" => self.ada_hidden.to_string(),
            "landmarks" => self.landmarks.to_string(),
            "time_nodes" => self.time_nodes.to_string(),
            "audio_channels" => self.audio_channels.to_string(),
            "critic_layers" => self.critic_layers.to_string(),
            "critic_channels" => self.critic_channels.to_string(),
            "clip" => self.clip.to_string(),
            "critic_steps" => self.critic_steps.to_string(),
            "lambda_geometry" => self.lambda_geometry.to_string(),
            "lambda_content" => self.lambda_content.to_string(),
            "lambda_adv" => self.lambda_adv.to_string(),
            "lr" => self.lr.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "steps" => self.steps.to_string(),
            "seed" => self.seed.to_string(),
            "log_every" => self.log_every.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "data" => self.data.clone(),
            "out" => self.out.clone(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored; unknown and repeated keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: key {k:?} given twice", n + 1)));
            }
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every key with its resolved value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            writeln!(out, "{k} = {}", self.get(k).unwrap()).unwrap();
        }
        out
    }

    pub fn fuser(&self) -> FuserConfig {
        FuserConfig {
            time_nodes: self.time_nodes,
            audio_channels: self.audio_channels,
            landmarks: self.landmarks,
            ..FuserConfig::default()
        }
    }

    pub fn reenactor(&self) -> ReenactorConfig {
        ReenactorConfig {
            resolution: self.resolution,
            base_channels: self.base_channels,
            channels: self.channels,
            blocks: self.blocks,
            ada_kernel: self.ada_kernel,
            ada_group_channels: self.ada_group_channels,
            ada_hidden: self.ada_hidden,
            geo_dim: 2 * self.landmarks,
        }
    }

    pub fn critic(&self) -> CriticConfig {
        CriticConfig {
            layers: self.critic_layers,
            base_channels: self.critic_channels,
            clip: self.clip,
            steps_per_generator_step: self.critic_steps,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            geometry: self.lambda_geometry,
            content: self.lambda_content,
            adversarial: self.lambda_adv,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fuser().validate()?;
        self.reenactor().validate()?;
        let critic = self.critic();
        critic.validate()?;
        if critic.output_side(self.resolution) == 0 || self.resolution < 1 << (self.critic_layers - 1) {
            return Err(Error::Config(format!(
                "resolution {} too small for a {}-layer critic",
                self.resolution, self.critic_layers
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        for (k, v) in [
            ("lambda_geometry", self.lambda_geometry),
            ("lambda_content", self.lambda_content),
            ("lambda_adv", self.lambda_adv),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("invalid Adam settings".into()));
        }
        Ok(())
    }
}
