//! Drive signals and facial geometry shared by the fuser, the renderer and
//! the trainer.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Audio features of one frame: `time_nodes × channels`, row-major by node.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeature {
    pub time_nodes: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl AudioFeature {
    pub fn new(time_nodes: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != time_nodes * channels || time_nodes == 0 || channels == 0 {
            return shape_err(
                "audio_feature",
                format!("{time_nodes}x{channels} matrix needs {} values, got {}", time_nodes * channels, data.len()),
            );
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("audio feature".into()));
        }
        Ok(AudioFeature {
            time_nodes,
            channels,
            data,
        })
    }

    pub fn at(&self, node: usize, channel: usize) -> f32 {
        self.data[node * self.channels + channel]
    }
}

/// Head pose in radians, each angle within `[-π/2, π/2]`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PoseSignal {
    pub yaw: f32,
    pub pitch: f32,
    pub roll: f32,
}

impl PoseSignal {
    pub fn new(yaw: f32, pitch: f32, roll: f32) -> Result<Self> {
        let lim = std::f32::consts::FRAC_PI_2;
        for (name, v) in [("yaw", yaw), ("pitch", pitch), ("roll", roll)] {
            if !(-lim..=lim).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [-pi/2, pi/2]")));
            }
        }
        Ok(PoseSignal { yaw, pitch, roll })
    }

    pub fn to_array(self) -> [f32; 3] {
        [self.yaw, self.pitch, self.roll]
    }
}

/// Eye openness, 1 = fully open, 0 = closed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlinkSignal {
    pub left: f32,
    pub right: f32,
}

impl Default for BlinkSignal {
    fn default() -> Self {
        BlinkSignal { left: 1.0, right: 1.0 }
    }
}

impl BlinkSignal {
    pub fn new(left: f32, right: f32) -> Result<Self> {
        for (name, v) in [("left", left), ("right", right)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("blink {name} {v} outside [0, 1]")));
            }
        }
        Ok(BlinkSignal { left, right })
    }

    pub fn to_array(self) -> [f32; 2] {
        [self.left, self.right]
    }
}

/// Everything that drives one reenacted frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DriveSignal {
    pub audio: AudioFeature,
    pub pose: PoseSignal,
    pub blink: BlinkSignal,
    /// Ground-truth mouth opening in `[0, 1]` that the audio encodes.
    pub mouth_open: f32,
}

/// 2-D facial keypoints in normalized image coordinates, `[-1, 1]²`.
/// Interleaved as `x0, y0, x1, y1, ...`, the same layout as the geometry
/// feature regressed by the fuser.
#[derive(Clone, Debug, PartialEq)]
pub struct Landmarks {
    pub coords: Vec<f32>,
}

impl Landmarks {
    pub fn from_points(points: &[[f32; 2]]) -> Self {
        Landmarks {
            coords: points.iter().flat_map(|p| [p[0], p[1]]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> [f32; 2] {
        [self.coords[2 * i], self.coords[2 * i + 1]]
    }

    pub fn points(&self) -> impl Iterator<Item = [f32; 2]> + '_ {
        self.coords.chunks_exact(2).map(|c| [c[0], c[1]])
    }

    pub fn in_unit_square(&self) -> bool {
        self.coords.iter().all(|v| (-1.0..=1.0).contains(v))
    }
}

/// Audio batch in channels-first layout `[N, channels, time_nodes]`.
pub fn audio_batch<T: Real>(items: &[&AudioFeature]) -> Result<Tensor<T>> {
    let Some(first) = items.first() else {
        return shape_err("audio_batch", "empty batch");
    };
    let (t, f) = (first.time_nodes, first.channels);
    let mut data = Vec::with_capacity(items.len() * t * f);
    for a in items {
        if (a.time_nodes, a.channels) != (t, f) {
            return shape_err("audio_batch", format!("mixed shapes {t}x{f} and {}x{}", a.time_nodes, a.channels));
        }
        for c in 0..f {
            data.extend((0..t).map(|n| T::of(a.at(n, c) as f64)));
        }
    }
    Tensor::from_vec(&[items.len(), f, t], data)
}

pub fn pose_batch<T: Real>(items: &[PoseSignal]) -> Result<Tensor<T>> {
    let data = items.iter().flat_map(|p| p.to_array()).map(|v| T::of(v as f64)).collect();
    Tensor::from_vec(&[items.len(), 3], data)
}

pub fn blink_batch<T: Real>(items: &[BlinkSignal]) -> Result<Tensor<T>> {
    let data = items.iter().flat_map(|b| b.to_array()).map(|v| T::of(v as f64)).collect();
    Tensor::from_vec(&[items.len(), 2], data)
}

pub fn landmark_batch<T: Real>(items: &[&Landmarks]) -> Result<Tensor<T>> {
    let Some(first) = items.first() else {
        return shape_err("landmark_batch", "empty batch");
    };
    let d = first.coords.len();
    if items.iter().any(|l| l.coords.len() != d) {
        return shape_err("landmark_batch", "landmark sets of different sizes");
    }
    let data = items.iter().flat_map(|l| l.coords.iter()).map(|v| T::of(*v as f64)).collect();
    Tensor::from_vec(&[items.len(), d], data)
}
