//! Seeded multi-identity datasets built from the procedural renderer, with a
//! line-oriented manifest and PNG frames on disk.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::FaceImage;
use crate::signal::{BlinkSignal, DriveSignal, Landmarks, PoseSignal};
use crate::synth::{gen_audio_feature, landmarks, neutral_drive, render_face, IdentityParams, LANDMARK_COUNT};

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_TAG: &str = "# reenact-synthetic";
/// Spacing of the audio time nodes, in frames.
const AUDIO_NODE_SPACING: f64 = 0.25;

pub fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a combined word
    let mut z = a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_add(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Wave {
    amp: f64,
    freq: f64,
    phase: f64,
}

impl Wave {
    fn draw(rng: &mut impl Rng, amp: f64, freq: (f64, f64)) -> Self {
        Wave {
            amp,
            freq: rng.gen_range(freq.0..freq.1),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    fn at(&self, t: f64) -> f64 {
        self.amp * (self.freq * t + self.phase).sin()
    }
}

/// Smooth per-identity signal trajectories over continuous frame time.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    yaw: [Wave; 2],
    pitch: [Wave; 2],
    roll: [Wave; 2],
    mouth: [Wave; 3],
    blink: [Wave; 2],
}

impl Trajectory {
    pub fn new(seed: u64, identity: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, identity as u64));
        let slow = (0.03, 0.12);
        Trajectory {
            yaw: [Wave::draw(&mut rng, 0.2, slow), Wave::draw(&mut rng, 0.1, slow)],
            pitch: [Wave::draw(&mut rng, 0.12, slow), Wave::draw(&mut rng, 0.06, slow)],
            roll: [Wave::draw(&mut rng, 0.12, slow), Wave::draw(&mut rng, 0.06, slow)],
            mouth: [
                Wave::draw(&mut rng, 0.3, (0.15, 0.45)),
                Wave::draw(&mut rng, 0.2, (0.3, 0.7)),
                Wave::draw(&mut rng, 0.1, (0.5, 1.0)),
            ],
            blink: [Wave::draw(&mut rng, 1.2, (0.08, 0.2)), Wave::draw(&mut rng, 1.2, (0.08, 0.2))],
        }
    }

    pub fn pose(&self, t: f64) -> PoseSignal {
        let sum = |w: &[Wave; 2]| (w[0].at(t) + w[1].at(t)) as f32;
        PoseSignal {
            yaw: sum(&self.yaw),
            pitch: sum(&self.pitch),
            roll: sum(&self.roll),
        }
    }

    pub fn mouth(&self, t: f64) -> f32 {
        (0.5 + self.mouth.iter().map(|w| w.at(t)).sum::<f64>()).clamp(0.0, 1.0) as f32
    }

    pub fn blink(&self, t: f64) -> BlinkSignal {
        let eye = |w: &Wave| (0.8 + w.at(t)).clamp(0.0, 1.0) as f32;
        BlinkSignal {
            left: eye(&self.blink[0]),
            right: eye(&self.blink[1]),
        }
    }
}

/// Everything that determines a generated dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub identities: usize,
    pub frames: usize,
    /// Index of the first frame; held-out sets continue the same trajectories.
    pub first_frame: usize,
    pub resolution: usize,
    pub time_nodes: usize,
    pub audio_channels: usize,
}

impl DatasetSpec {
    pub fn new(seed: u64, identities: usize, frames: usize, resolution: usize) -> Self {
        DatasetSpec {
            seed,
            identities,
            frames,
            first_frame: 0,
            resolution,
            time_nodes: 8,
            audio_channels: 32,
        }
    }

    /// The `frames` frames that follow this spec's range.
    pub fn held_out(&self, frames: usize) -> Self {
        DatasetSpec {
            first_frame: self.first_frame + self.frames,
            frames,
            ..*self
        }
    }

    fn validate(&self) -> Result<()> {
        if self.identities == 0 || self.frames == 0 || self.resolution < 4 || self.time_nodes == 0 {
            return Err(Error::Config(format!("degenerate dataset spec {self:?}")));
        }
        Ok(())
    }

    /// Drive signal of `identity` at `frame`; the audio window is centered on
    /// the frame.
    pub fn drive(&self, identity: usize, frame: usize) -> Result<DriveSignal> {
        let traj = Trajectory::new(self.seed, identity);
        let t = frame as f64;
        let half = (self.time_nodes as f64 - 1.0) / 2.0;
        let window: Vec<f32> = (0..self.time_nodes)
            .map(|k| traj.mouth(t + (k as f64 - half) * AUDIO_NODE_SPACING))
            .collect();
        let noise_seed = mix(mix(self.seed, identity as u64), frame as u64);
        Ok(DriveSignal {
            audio: gen_audio_feature(&window, self.audio_channels, noise_seed)?,
            pose: traj.pose(t),
            blink: traj.blink(t),
            mouth_open: traj.mouth(t),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub identity: usize,
    pub frame: usize,
    pub target: FaceImage,
    pub drive: DriveSignal,
    pub landmarks: Landmarks,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub identities: Vec<IdentityParams>,
    /// One neutral reference image per identity.
    pub references: Vec<FaceImage>,
    pub samples: Vec<Sample>,
}

/// Renders every (identity, frame) pair of `spec`. Identity `i` uses
/// identity seed `i`.
pub fn make_dataset(spec: DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let identities: Vec<_> = (0..spec.identities as u64).map(IdentityParams::from_seed).collect();
    let neutral = neutral_drive(spec.time_nodes, spec.audio_channels)?;
    let references = identities
        .iter()
        .map(|id| render_face(id, &neutral, spec.resolution).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    let mut samples = Vec::with_capacity(spec.identities * spec.frames);
    for (i, id) in identities.iter().enumerate() {
        for frame in spec.first_frame..spec.first_frame + spec.frames {
            let drive = spec.drive(i, frame)?;
            let (target, landmarks) = render_face(id, &drive, spec.resolution)?;
            samples.push(Sample {
                identity: i,
                frame,
                target,
                drive,
                landmarks,
            });
        }
    }
    Ok(Dataset {
        spec,
        identities,
        references,
        samples,
    })
}

fn reference_file(identity: usize) -> String {
    format!("ref_{identity}.png")
}

fn frame_file(identity: usize, frame: usize) -> String {
    format!("id{identity}_f{frame:05}.png")
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn reference(&self, identity: usize) -> &FaceImage {
        &self.references[identity]
    }

    pub fn manifest(&self) -> String {
        let s = &self.spec;
        let mut out = format!(
            "{MANIFEST_TAG} seed={} identities={} frames={} first_frame={} resolution={} time_nodes={} audio_channels={}\n",
            s.seed, s.identities, s.frames, s.first_frame, s.resolution, s.time_nodes, s.audio_channels
        );
        for smp in &self.samples {
            let d = &smp.drive;
            write!(
                out,
                "{} {} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
                smp.identity, smp.frame, d.pose.yaw, d.pose.pitch, d.pose.roll, d.blink.left, d.blink.right, d.mouth_open
            )
            .unwrap();
            for v in &smp.landmarks.coords {
                write!(out, " {v:.6}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Writes the manifest and all PNGs into `dir`; returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        for (i, r) in self.references.iter().enumerate() {
            r.save_png(&dir.join(reference_file(i)))?;
        }
        for s in &self.samples {
            s.target.save_png(&dir.join(frame_file(s.identity, s.frame)))?;
        }
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.manifest())?;
        Ok(path)
    }

    /// Loads a dataset written by [`Dataset::write`]. Accepts the directory or
    /// the manifest path. Images come from the PNGs; audio is regenerated from
    /// the seed recorded in the header and cross-checked against the rows.
    pub fn load(path: &Path) -> Result<Dataset> {
        let (dir, manifest) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
        };
        let text = fs::read_to_string(&manifest)
            .map_err(|e| Error::Dataset(format!("cannot read manifest {}: {e}", manifest.display())))?;
        let mut lines = text.lines();
        let spec = parse_header(lines.next().unwrap_or(""))?;
        spec.validate()?;
        let identities: Vec<_> = (0..spec.identities as u64).map(IdentityParams::from_seed).collect();
        let references = (0..spec.identities)
            .map(|i| load_image(&dir.join(reference_file(i)), spec.resolution))
            .collect::<Result<Vec<_>>>()?;
        let mut samples = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |what: &str| Error::Dataset(format!("manifest row {}: {what}", n + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 8 + 2 * LANDMARK_COUNT {
                return Err(bad(&format!("expected {} fields, got {}", 8 + 2 * LANDMARK_COUNT, fields.len())));
            }
            let identity: usize = fields[0].parse().map_err(|_| bad("bad identity"))?;
            let frame: usize = fields[1].parse().map_err(|_| bad("bad frame"))?;
            if identity >= spec.identities {
                return Err(bad("identity out of range"));
            }
            let nums = fields[2..]
                .iter()
                .map(|f| f.parse::<f32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad("non-numeric field"))?;
            let drive = spec.drive(identity, frame)?;
            let listed = [
                drive.pose.yaw,
                drive.pose.pitch,
                drive.pose.roll,
                drive.blink.left,
                drive.blink.right,
                drive.mouth_open,
            ];
            if listed.iter().zip(&nums).any(|(a, b)| (a - b).abs() > 2e-6) {
                return Err(bad("drive signals disagree with the generator for this seed"));
            }
            let lm = landmarks(&identities[identity], &drive);
            if lm.coords.iter().zip(&nums[6..]).any(|(a, b)| (a - b).abs() > 2e-6) {
                return Err(bad("landmarks disagree with the generator for this seed"));
            }
            samples.push(Sample {
                identity,
                frame,
                target: load_image(&dir.join(frame_file(identity, frame)), spec.resolution)?,
                drive,
                landmarks: lm,
            });
        }
        if samples.len() != spec.identities * spec.frames {
            return Err(Error::Dataset(format!(
                "manifest lists {} samples, header promises {}",
                samples.len(),
                spec.identities * spec.frames
            )));
        }
        Ok(Dataset {
            spec,
            identities,
            references,
            samples,
        })
    }
}

fn load_image(path: &Path, resolution: usize) -> Result<FaceImage> {
    let img = FaceImage::load_png(path).map_err(|e| Error::Dataset(e.to_string()))?;
    if img.size != resolution {
        return Err(Error::Dataset(format!("{}: {}px, expected {resolution}px", path.display(), img.size)));
    }
    Ok(img)
}

fn parse_header(line: &str) -> Result<DatasetSpec> {
    let rest = line
        .strip_prefix(MANIFEST_TAG)
        .ok_or_else(|| Error::Dataset("manifest header missing".into()))?;
    let mut spec = DatasetSpec::new(0, 0, 0, 0);
    let mut seen = 0;
    for kv in rest.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Dataset(format!("bad header field {kv:?}")))?;
        let num = || v.parse::<u64>().map_err(|_| Error::Dataset(format!("bad header value {kv:?}")));
        match k {
            "seed" => spec.seed = num()?,
            "identities" => spec.identities = num()? as usize,
            "frames" => spec.frames = num()? as usize,
            "first_frame" => spec.first_frame = num()? as usize,
            "resolution" => spec.resolution = num()? as usize,
            "time_nodes" => spec.time_nodes = num()? as usize,
            "audio_channels" => spec.audio_channels = num()? as usize,
            _ => return Err(Error::Dataset(format!("unknown header field {k:?}"))),
        }
        seen += 1;
    }
    if seen != 7 {
        return Err(Error::Dataset("incomplete manifest header".into()));
    }
    Ok(spec)
}
