//! Procedural faces: identities, an analytic renderer with exact landmarks,
//! and the audio proxy feature.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::FaceImage;
use crate::metrics::PixelBox;
use crate::signal::{AudioFeature, BlinkSignal, DriveSignal, Landmarks, PoseSignal};

pub const LANDMARK_COUNT: usize = 68;
/// Audio channels that carry the mouth trajectory; the rest are noise.
pub const AUDIO_SIGNAL_CHANNELS: usize = 8;

const FACE_CENTER: [f64; 2] = [0.0, 0.04];
// Feature placement relative to the face center.
const EYE_Y: f64 = -0.12;
const EYE_HALF_W: f64 = 0.075;
const EYE_HALF_H: f64 = 0.045;
const MOUTH_Y: f64 = 0.26;
const MOUTH_MIN_HALF_H: f64 = 0.015;
const MOUTH_OPEN_HALF_H: f64 = 0.09;
/// Hair covers the part of the face ellipse above `-HAIR_CAP * ay`.
const HAIR_CAP: f64 = 0.62;

const BACKGROUND: [f32; 3] = [-0.3, -0.25, -0.2];
const EYE_COLOR: [f32; 3] = [-0.85, -0.85, -0.75];
const MOUTH_COLOR: [f32; 3] = [0.3, -0.6, -0.5];

const SKIN_PALETTE: [[f32; 3]; 6] = [
    [0.92, 0.60, 0.38],
    [0.76, 0.32, 0.04],
    [0.52, 0.14, -0.16],
    [0.10, -0.24, -0.48],
    [0.96, 0.74, 0.54],
    [0.36, 0.00, -0.30],
];

const HAIR_PALETTE: [[f32; 3]; 6] = [
    [-0.70, -0.76, -0.80],
    [0.10, -0.40, -0.70],
    [-0.90, -0.90, -0.90],
    [0.50, 0.30, -0.30],
    [-0.40, -0.60, -0.70],
    [0.70, 0.60, 0.20],
];

/// Appearance and geometry of one synthetic person.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityParams {
    pub seed: u64,
    pub skin: [f32; 3],
    pub hair: [f32; 3],
    /// Half-axes of the face ellipse.
    pub face_axes: [f64; 2],
    /// Horizontal distance from the face center to each eye center.
    pub eye_spacing: f64,
    /// Half-width of the mouth.
    pub mouth_width: f64,
}

impl IdentityParams {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1d3a_f00d);
        let k = (seed % 6) as usize;
        let mut jitter = |c: [f32; 3]| c.map(|v| (v + rng.gen_range(-0.03f32..0.03)).clamp(-1.0, 1.0));
        let skin = jitter(SKIN_PALETTE[k]);
        let hair = jitter(HAIR_PALETTE[k]);
        IdentityParams {
            seed,
            skin,
            hair,
            face_axes: [rng.gen_range(0.44..0.52), rng.gen_range(0.54..0.62)],
            eye_spacing: rng.gen_range(0.17..0.22),
            mouth_width: rng.gen_range(0.12..0.18),
        }
    }
}

/// The six stock identities, seeds `0..6`.
pub fn default_identities() -> Vec<IdentityParams> {
    (0..6).map(IdentityParams::from_seed).collect()
}

/// Affine map from canonical face coordinates to normalized image
/// coordinates: `q = m·p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseTransform {
    pub m: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl PoseTransform {
    /// Yaw and pitch act as horizontal and vertical shear-scale with a small
    /// shift; roll rotates everything about the image center.
    pub fn new(pose: PoseSignal) -> Self {
        let (yaw, pitch, roll) = (pose.yaw as f64, pose.pitch as f64, pose.roll as f64);
        let s = [
            [0.8 + 0.2 * yaw.cos(), 0.2 * yaw.sin()],
            [0.2 * pitch.sin(), 0.8 + 0.2 * pitch.cos()],
        ];
        let t0 = [0.1 * yaw.sin(), 0.1 * pitch.sin()];
        let (c, sn) = (roll.cos(), roll.sin());
        let r = [[c, -sn], [sn, c]];
        let mul = |a: [[f64; 2]; 2], b: [[f64; 2]; 2]| {
            [
                [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
                [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
            ]
        };
        PoseTransform {
            m: mul(r, s),
            t: [r[0][0] * t0[0] + r[0][1] * t0[1], r[1][0] * t0[0] + r[1][1] * t0[1]],
        }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.m[0][0] * p[0] + self.m[0][1] * p[1] + self.t[0],
            self.m[1][0] * p[0] + self.m[1][1] * p[1] + self.t[1],
        ]
    }

    pub fn invert(&self, q: [f64; 2]) -> [f64; 2] {
        let [[a, b], [c, d]] = self.m;
        let det = a * d - b * c;
        let (x, y) = (q[0] - self.t[0], q[1] - self.t[1]);
        [(d * x - b * y) / det, (a * y - c * x) / det]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Region {
    Background,
    Skin,
    Hair,
    Eye,
    Mouth,
}

fn mouth_half_height(mouth_open: f32) -> f64 {
    MOUTH_MIN_HALF_H + MOUTH_OPEN_HALF_H * mouth_open.clamp(0.0, 1.0) as f64
}

fn inside_ellipse(x: f64, y: f64, ax: f64, ay: f64) -> bool {
    ax > 0.0 && ay > 0.0 && (x / ax).powi(2) + (y / ay).powi(2) <= 1.0
}

fn classify(id: &IdentityParams, drive: &DriveSignal, p: [f64; 2]) -> Region {
    let (x, y) = (p[0] - FACE_CENTER[0], p[1] - FACE_CENTER[1]);
    for (sign, open) in [(-1.0, drive.blink.left), (1.0, drive.blink.right)] {
        let half_h = EYE_HALF_H * open.clamp(0.0, 1.0) as f64;
        if inside_ellipse(x - sign * id.eye_spacing, y - EYE_Y, EYE_HALF_W, half_h) {
            return Region::Eye;
        }
    }
    if inside_ellipse(x, y - MOUTH_Y, id.mouth_width, mouth_half_height(drive.mouth_open)) {
        return Region::Mouth;
    }
    let [ax, ay] = id.face_axes;
    if inside_ellipse(x, y, ax, ay) {
        return if y < -HAIR_CAP * ay { Region::Hair } else { Region::Skin };
    }
    Region::Background
}

const SUBSAMPLES: [f64; 2] = [0.25, 0.75];

fn pixel_regions(id: &IdentityParams, drive: &DriveSignal, xf: &PoseTransform, res: usize, y: usize, x: usize) -> [Region; 4] {
    let mut out = [Region::Background; 4];
    for (k, (oy, ox)) in SUBSAMPLES.iter().flat_map(|&oy| SUBSAMPLES.iter().map(move |&ox| (oy, ox))).enumerate() {
        let q = [
            2.0 * (x as f64 + ox) / res as f64 - 1.0,
            2.0 * (y as f64 + oy) / res as f64 - 1.0,
        ];
        out[k] = classify(id, drive, xf.invert(q));
    }
    out
}

/// Renders the face with 2×2 supersampling; returns the image and its
/// analytic landmarks. The image is quantized to the 8-bit grid.
pub fn render_face(id: &IdentityParams, drive: &DriveSignal, resolution: usize) -> Result<(FaceImage, Landmarks)> {
    if resolution == 0 {
        return Err(Error::Config("resolution must be >= 1".into()));
    }
    let xf = PoseTransform::new(drive.pose);
    let plane = resolution * resolution;
    let mut data = vec![0.0f32; 3 * plane];
    for y in 0..resolution {
        for x in 0..resolution {
            let mut acc = [0.0f32; 3];
            for r in pixel_regions(id, drive, &xf, resolution, y, x) {
                let c = match r {
                    Region::Background => BACKGROUND,
                    Region::Skin => id.skin,
                    Region::Hair => id.hair,
                    Region::Eye => EYE_COLOR,
                    Region::Mouth => MOUTH_COLOR,
                };
                for ch in 0..3 {
                    acc[ch] += c[ch];
                }
            }
            for ch in 0..3 {
                data[ch * plane + y * resolution + x] = acc[ch] / 4.0;
            }
        }
    }
    Ok((FaceImage::new(resolution, data)?.quantized(), landmarks(id, drive)))
}

/// Pixels fully covered by skin.
pub fn skin_mask(id: &IdentityParams, drive: &DriveSignal, resolution: usize) -> Vec<bool> {
    let xf = PoseTransform::new(drive.pose);
    (0..resolution * resolution)
        .map(|i| pixel_regions(id, drive, &xf, resolution, i / resolution, i % resolution).iter().all(|&r| r == Region::Skin))
        .collect()
}

fn canonical_landmarks(id: &IdentityParams, drive: &DriveSignal) -> Vec<[f64; 2]> {
    use std::f64::consts::TAU;
    let [cx, cy] = FACE_CENTER;
    let [ax, ay] = id.face_axes;
    let mut pts = Vec::with_capacity(LANDMARK_COUNT);
    let ring = |pts: &mut Vec<[f64; 2]>, n: usize, ox: f64, oy: f64, rx: f64, ry: f64| {
        for k in 0..n {
            let a = TAU * k as f64 / n as f64;
            pts.push([cx + ox + rx * a.cos(), cy + oy + ry * a.sin()]);
        }
    };
    ring(&mut pts, 24, 0.0, 0.0, ax, ay);
    for (sign, open) in [(-1.0, drive.blink.left), (1.0, drive.blink.right)] {
        ring(&mut pts, 8, sign * id.eye_spacing, EYE_Y, EYE_HALF_W, EYE_HALF_H * open.clamp(0.0, 1.0) as f64);
    }
    let mh = mouth_half_height(drive.mouth_open);
    ring(&mut pts, 16, 0.0, MOUTH_Y, id.mouth_width, mh);
    ring(&mut pts, 8, 0.0, MOUTH_Y, 0.6 * id.mouth_width, 0.5 * mh);
    let chord = ax * (1.0 - HAIR_CAP * HAIR_CAP).sqrt();
    for f in [-0.75, -0.35, 0.35, 0.75] {
        pts.push([cx + f * chord, cy - HAIR_CAP * ay]);
    }
    debug_assert_eq!(pts.len(), LANDMARK_COUNT);
    pts
}

/// The 68 keypoints: 24 contour, 8 per eye, 16 outer lip, 8 inner lip and
/// 4 on the hairline.
pub fn landmarks(id: &IdentityParams, drive: &DriveSignal) -> Landmarks {
    let xf = PoseTransform::new(drive.pose);
    let pts: Vec<[f32; 2]> = canonical_landmarks(id, drive)
        .into_iter()
        .map(|p| xf.apply(p).map(|v| v as f32))
        .collect();
    Landmarks::from_points(&pts)
}

/// Pixel boxes that contain every pixel an eye can touch under `pose`
/// (open or closed), with a one-pixel margin.
pub fn eye_boxes(id: &IdentityParams, pose: PoseSignal, resolution: usize) -> [PixelBox; 2] {
    let xf = PoseTransform::new(pose);
    let r = resolution as f64;
    let to_px = |v: f64| (v + 1.0) * r / 2.0;
    [-1.0, 1.0].map(|sign| {
        let ex = FACE_CENTER[0] + sign * id.eye_spacing;
        let ey = FACE_CENTER[1] + EYE_Y;
        let corners = [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)]
            .map(|(dx, dy)| xf.apply([ex + dx * EYE_HALF_W, ey + dy * EYE_HALF_H]));
        let lo = |i: usize| corners.iter().map(|c| c[i]).fold(f64::INFINITY, f64::min);
        let hi = |i: usize| corners.iter().map(|c| c[i]).fold(f64::NEG_INFINITY, f64::max);
        let start = |v: f64| (to_px(v).floor() as i64 - 1).clamp(0, resolution as i64) as usize;
        let end = |v: f64| (to_px(v).floor() as i64 + 2).clamp(0, resolution as i64) as usize;
        PixelBox {
            x0: start(lo(0)),
            y0: start(lo(1)),
            x1: end(hi(0)),
            y1: end(hi(1)),
        }
    })
}

/// The smooth injective mixtures carried by the signal channels.
pub fn mouth_code(m: f32) -> [f32; AUDIO_SIGNAL_CHANNELS] {
    use std::f32::consts::PI;
    let c = 2.0 * m - 1.0;
    [
        c,
        (PI * 0.5 * c).sin(),
        (2.0 * c).tanh(),
        2.0 * m * m - 1.0,
        (PI * m).cos(),
        c * c * c,
        2.0 * (1.0 - (-2.0 * m).exp()) / (1.0 - (-2.0f32).exp()) - 1.0,
        (1.5 * c).sin() * 0.5 + 0.5 * c,
    ]
}

/// Builds the `[T, F]` audio proxy from a mouth-opening trajectory sampled at
/// the `T` time nodes. Channels `0..8` encode the trajectory, the remaining
/// channels are uniform noise from `seed`.
pub fn gen_audio_feature(trajectory: &[f32], channels: usize, seed: u64) -> Result<AudioFeature> {
    if channels < AUDIO_SIGNAL_CHANNELS {
        return Err(Error::Config(format!(
            "audio needs at least {AUDIO_SIGNAL_CHANNELS} channels, got {channels}"
        )));
    }
    if trajectory.iter().any(|m| !(0.0..=1.0).contains(m)) {
        return Err(Error::Config("mouth trajectory outside [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(trajectory.len() * channels);
    for &m in trajectory {
        data.extend(mouth_code(m));
        data.extend((AUDIO_SIGNAL_CHANNELS..channels).map(|_| rng.gen_range(-1.0f32..1.0)));
    }
    AudioFeature::new(trajectory.len(), channels, data)
}

/// Neutral drive used for reference images: frontal, eyes open, mouth closed.
pub fn neutral_drive(time_nodes: usize, channels: usize) -> Result<DriveSignal> {
    Ok(DriveSignal {
        audio: gen_audio_feature(&vec![0.0; time_nodes], channels, 0)?,
        pose: PoseSignal::default(),
        blink: BlinkSignal::default(),
        mouth_open: 0.0,
    })
}
