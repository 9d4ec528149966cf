//! Audio-aware fuser: encodes audio, head pose and eye blink into one vector
//! each, concatenates them and regresses the facial geometry feature.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{join, Conv1d, Linear, Module, LEAKY_SLOPE};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FuserConfig {
    pub time_nodes: usize,
    pub audio_channels: usize,
    pub landmarks: usize,
    /// Per-node stage widths (pointwise convolutions).
    pub node_channels: [usize; 5],
    /// Temporal stage widths; the last one is the audio embedding size.
    pub time_channels: [usize; 5],
    /// Widths of the three pose/blink linear layers; the last is the embedding size.
    pub signal_widths: [usize; 3],
    pub decoder_hidden: usize,
}

impl Default for FuserConfig {
    fn default() -> Self {
        FuserConfig {
            time_nodes: 8,
            audio_channels: 32,
            landmarks: 68,
            node_channels: [32, 64, 64, 128, 128],
            time_channels: [128, 128, 256, 256, 256],
            signal_widths: [32, 64, 64],
            decoder_hidden: 256,
        }
    }
}

/// Temporal stride-2 layers halve the node count; five of them must reach one node.
const MAX_TIME_NODES: usize = 32;

impl FuserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.time_nodes == 0 || self.time_nodes > MAX_TIME_NODES {
            return Err(Error::Config(format!(
                "time_nodes must be in 1..={MAX_TIME_NODES}, got {}",
                self.time_nodes
            )));
        }
        if self.audio_channels == 0 || self.landmarks == 0 || self.decoder_hidden == 0 {
            return Err(Error::Config("fuser dimensions must be >= 1".into()));
        }
        if self.node_channels.contains(&0) || self.time_channels.contains(&0) || self.signal_widths.contains(&0) {
            return Err(Error::Config("fuser layer widths must be >= 1".into()));
        }
        Ok(())
    }

    pub fn geo_dim(&self) -> usize {
        2 * self.landmarks
    }

    pub fn audio_dim(&self) -> usize {
        self.time_channels[4]
    }

    pub fn signal_dim(&self) -> usize {
        self.signal_widths[2]
    }

    pub fn fused_dim(&self) -> usize {
        self.audio_dim() + 2 * self.signal_dim()
    }

    /// Small configuration used by gradient checks.
    pub fn micro() -> Self {
        FuserConfig {
            time_nodes: 2,
            audio_channels: 4,
            landmarks: 3,
            node_channels: [3, 3, 2, 3, 3],
            time_channels: [3, 2, 3, 3, 4],
            signal_widths: [3, 2, 3],
            decoder_hidden: 5,
        }
    }
}

/// φ_A: five pointwise 1-D convolutions shared across time nodes, then five
/// stride-2 temporal convolutions collapsing the time axis to one node.
pub struct AudioEncoder<T: Real = f32> {
    pub node_layers: Vec<Conv1d<T>>,
    pub time_layers: Vec<Conv1d<T>>,
}

impl<T: Real> AudioEncoder<T> {
    pub fn new(rng: &mut impl Rng, cfg: &FuserConfig) -> Self {
        let mut cin = cfg.audio_channels;
        let mut node_layers = Vec::new();
        for &c in &cfg.node_channels {
            node_layers.push(Conv1d::new(rng, cin, c, 1, 1, 0));
            cin = c;
        }
        let mut time_layers = Vec::new();
        for &c in &cfg.time_channels {
            time_layers.push(Conv1d::new(rng, cin, c, 3, 2, 1));
            cin = c;
        }
        AudioEncoder {
            node_layers,
            time_layers,
        }
    }

    /// Per-node features `[N, C, T]` after the first stage.
    pub fn node_features(&self, audio: &Tensor<T>) -> Result<Tensor<T>> {
        let slope = T::of(LEAKY_SLOPE);
        let mut x = audio.clone();
        for layer in &self.node_layers {
            x = layer.forward(&x)?.leaky_relu(slope);
        }
        Ok(x)
    }

    /// `audio: [N, F, T]` → `f_A: [N, audio_dim]`.
    pub fn forward(&self, audio: &Tensor<T>) -> Result<Tensor<T>> {
        let slope = T::of(LEAKY_SLOPE);
        let mut x = self.node_features(audio)?;
        let last = self.time_layers.len() - 1;
        for (i, layer) in self.time_layers.iter().enumerate() {
            x = layer.forward(&x)?;
            if i != last {
                x = x.leaky_relu(slope);
            }
        }
        let &[n, c, len] = x.shape() else { unreachable!() };
        if len != 1 {
            return shape_err("phi_a", format!("time axis collapsed to {len} nodes, expected 1"));
        }
        x.reshape(&[n, c])
    }
}

impl<T: Real> Module<T> for AudioEncoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, l) in self.node_layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("node{i}")), f);
        }
        for (i, l) in self.time_layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("time{i}")), f);
        }
    }
}

/// φ_H / φ_E: three linear layers with leaky ReLU between them.
pub struct SignalEncoder<T: Real = f32> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Real> SignalEncoder<T> {
    pub fn new(rng: &mut impl Rng, input: usize, widths: [usize; 3]) -> Self {
        let mut din = input;
        let layers = widths
            .iter()
            .map(|&w| {
                let l = Linear::new(rng, din, w);
                din = w;
                l
            })
            .collect();
        SignalEncoder { layers }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let expect = self.layers[0].in_dim();
        if x.rank() != 2 || x.shape()[1] != expect {
            return shape_err("signal_encoder", format!("expected [N, {expect}], got {:?}", x.shape()));
        }
        let mut h = self.layers[0].forward(x)?;
        for l in &self.layers[1..] {
            h = l.forward(&h.leaky_relu(T::of(LEAKY_SLOPE)))?;
        }
        Ok(h)
    }
}

impl<T: Real> Module<T> for SignalEncoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("fc{i}")), f);
        }
    }
}

/// φ_D: two linear layers from the fused vector to the geometry feature.
pub struct GeometryDecoder<T: Real = f32> {
    pub hidden: Linear<T>,
    pub out: Linear<T>,
}

impl<T: Real> Module<T> for GeometryDecoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
}

pub struct Fuser<T: Real = f32> {
    pub config: FuserConfig,
    pub audio: AudioEncoder<T>,
    pub pose: SignalEncoder<T>,
    pub blink: SignalEncoder<T>,
    pub decoder: GeometryDecoder<T>,
}

impl<T: Real> Fuser<T> {
    pub fn new(rng: &mut impl Rng, config: FuserConfig) -> Result<Self> {
        config.validate()?;
        let audio = AudioEncoder::new(rng, &config);
        let pose = SignalEncoder::new(rng, 3, config.signal_widths);
        let blink = SignalEncoder::new(rng, 2, config.signal_widths);
        let decoder = GeometryDecoder {
            hidden: Linear::new(rng, config.fused_dim(), config.decoder_hidden),
            out: Linear::new(rng, config.decoder_hidden, config.geo_dim()),
        };
        Ok(Fuser {
            config,
            audio,
            pose,
            blink,
            decoder,
        })
    }

    /// `audio: [N, F, T]` (see [`crate::signal::audio_batch`]).
    pub fn phi_a(&self, audio: &Tensor<T>) -> Result<Tensor<T>> {
        let want = [self.config.audio_channels, self.config.time_nodes];
        if audio.rank() != 3 || audio.shape()[1..] != want {
            return shape_err(
                "phi_a",
                format!(
                    "audio must be [N, F={}, T={}], got {:?}",
                    want[0],
                    want[1],
                    audio.shape()
                ),
            );
        }
        self.audio.forward(audio)
    }

    /// `pose: [N, 3]` → `[N, signal_dim]`.
    pub fn phi_h(&self, pose: &Tensor<T>) -> Result<Tensor<T>> {
        self.pose.forward(pose)
    }

    /// `blink: [N, 2]` → `[N, signal_dim]`.
    pub fn phi_e(&self, blink: &Tensor<T>) -> Result<Tensor<T>> {
        self.blink.forward(blink)
    }

    /// Concatenates `[f_A, f_H, f_E]` in that order.
    pub fn fused(&self, f_a: &Tensor<T>, f_h: &Tensor<T>, f_e: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = [self.config.audio_dim(), self.config.signal_dim(), self.config.signal_dim()];
        for ((name, t), d) in [("f_A", f_a), ("f_H", f_h), ("f_E", f_e)].into_iter().zip(dims) {
            if t.rank() != 2 || t.shape()[1] != d {
                return shape_err("fuse", format!("{name} must be [N, {d}], got {:?}", t.shape()));
            }
        }
        Tensor::concat(&[f_a, f_h, f_e], 1)
    }

    /// φ_D applied to the concatenation; returns `f_Geo: [N, 2·landmarks]`.
    pub fn fuse(&self, f_a: &Tensor<T>, f_h: &Tensor<T>, f_e: &Tensor<T>) -> Result<Tensor<T>> {
        let fused = self.fused(f_a, f_h, f_e)?;
        let h = self.decoder.hidden.forward(&fused)?.leaky_relu(T::of(LEAKY_SLOPE));
        self.decoder.out.forward(&h)
    }

    pub fn forward(&self, audio: &Tensor<T>, pose: &Tensor<T>, blink: &Tensor<T>) -> Result<Tensor<T>> {
        self.fuse(&self.phi_a(audio)?, &self.phi_h(pose)?, &self.phi_e(blink)?)
    }
}

impl<T: Real> Module<T> for Fuser<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.audio.visit(&join(prefix, "audio"), f);
        self.pose.visit(&join(prefix, "pose"), f);
        self.blink.visit(&join(prefix, "blink"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }
}
