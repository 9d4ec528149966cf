//! Held-out evaluation: reconstruction SSIM, landmark error, cross-identity
//! skin color and blink decoupling.

use std::fmt::Write as _;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::image::FaceImage;
use crate::metrics::{landmark_error, masked_mean_color, region_l1, ssim};
use crate::signal::{BlinkSignal, DriveSignal};
use crate::synth::{eye_boxes, neutral_drive, render_face, skin_mask};
use crate::train::Models;

/// Anything that reenacts a dataset identity under drive signals.
pub trait Predictor {
    fn reenact(&self, ds: &Dataset, identity: usize, drives: &[&DriveSignal]) -> Result<Vec<FaceImage>>;
    fn geometry(&self, ds: &Dataset, identity: usize, drives: &[&DriveSignal]) -> Result<Vec<Vec<f32>>>;
}

impl Predictor for Models<f32> {
    fn reenact(&self, ds: &Dataset, identity: usize, drives: &[&DriveSignal]) -> Result<Vec<FaceImage>> {
        let refs = vec![ds.reference(identity); drives.len()];
        let mut out = Vec::with_capacity(drives.len());
        for (r, d) in refs.chunks(8).zip(drives.chunks(8)) {
            out.extend(self.reenact_images(r, d)?);
        }
        Ok(out)
    }

    fn geometry(&self, _ds: &Dataset, _identity: usize, drives: &[&DriveSignal]) -> Result<Vec<Vec<f32>>> {
        self.predict_geometry(drives)
    }
}

/// The synthetic renderer itself: a perfect predictor.
pub struct RenderOracle;

impl Predictor for RenderOracle {
    fn reenact(&self, ds: &Dataset, identity: usize, drives: &[&DriveSignal]) -> Result<Vec<FaceImage>> {
        drives
            .iter()
            .map(|d| render_face(&ds.identities[identity], d, ds.spec.resolution).map(|r| r.0))
            .collect()
    }

    fn geometry(&self, ds: &Dataset, identity: usize, drives: &[&DriveSignal]) -> Result<Vec<Vec<f32>>> {
        drives
            .iter()
            .map(|d| render_face(&ds.identities[identity], d, ds.spec.resolution).map(|r| r.1.coords))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub ssim_mean: f64,
    pub ssim_min: f64,
    /// Mean Euclidean landmark error in normalized coordinates.
    pub landmark_error: f64,
    /// Mean ℓ1 (summed over RGB) between the skin color of identity A driven
    /// by identity B's signals and A's reference skin color.
    pub skin_color_l1: f64,
    pub skin_cases: usize,
    /// Mean |open − closed| inside the eye boxes when only blink changes.
    pub blink_inside: f64,
    /// The same difference over every other pixel.
    pub blink_outside: f64,
}

impl EvalReport {
    pub fn blink_ratio(&self) -> f64 {
        self.blink_inside / self.blink_outside
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("samples", self.samples.to_string()),
            ("ssim_mean", format!("{:.6}", self.ssim_mean)),
            ("ssim_min", format!("{:.6}", self.ssim_min)),
            ("landmark_error", format!("{:.6}", self.landmark_error)),
            ("skin_color_l1", format!("{:.6}", self.skin_color_l1)),
            ("skin_cases", self.skin_cases.to_string()),
            ("blink_inside", format!("{:.6}", self.blink_inside)),
            ("blink_outside", format!("{:.3e}", self.blink_outside)),
            ("blink_ratio", format!("{:.3}", self.blink_ratio())),
        ] {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }
}

fn with_blink(d: &DriveSignal, left: f32, right: f32) -> DriveSignal {
    DriveSignal {
        blink: BlinkSignal { left, right },
        ..d.clone()
    }
}

/// Evaluates `p` on every sample of `ds`. The skin-color check drives each
/// identity with the signals of every other identity; it is skipped (and
/// reports 0 over 0 cases) for single-identity datasets.
pub fn evaluate(p: &dyn Predictor, ds: &Dataset) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
    }
    let res = ds.spec.resolution;
    let (mut ssims, mut lm, mut inside, mut outside) = (Vec::new(), 0.0, 0.0, 0.0);
    for id in 0..ds.identities.len() {
        let samples: Vec<_> = ds.samples.iter().filter(|s| s.identity == id).collect();
        let drives: Vec<_> = samples.iter().map(|s| &s.drive).collect();
        let preds = p.reenact(ds, id, &drives)?;
        let geo = p.geometry(ds, id, &drives)?;
        for ((s, img), g) in samples.iter().zip(&preds).zip(&geo) {
            ssims.push(ssim(img, &s.target)?);
            lm += landmark_error(g, &s.landmarks.coords)?;
        }
        let open: Vec<_> = drives.iter().map(|d| with_blink(d, 1.0, 1.0)).collect();
        let closed: Vec<_> = drives.iter().map(|d| with_blink(d, 0.0, 0.0)).collect();
        let a = p.reenact(ds, id, &open.iter().collect::<Vec<_>>())?;
        let b = p.reenact(ds, id, &closed.iter().collect::<Vec<_>>())?;
        for ((x, y), d) in a.iter().zip(&b).zip(&drives) {
            let (i, o) = region_l1(x, y, &eye_boxes(&ds.identities[id], d.pose, res))?;
            inside += i;
            outside += o;
        }
    }
    let n = ds.len() as f64;

    let neutral = neutral_drive(ds.spec.time_nodes, ds.spec.audio_channels)?;
    let (mut skin, mut cases) = (0.0, 0usize);
    for a in 0..ds.identities.len() {
        let id = &ds.identities[a];
        let ref_mask = skin_mask(id, &neutral, res);
        let ref_color = masked_mean_color(ds.reference(a), &ref_mask)?;
        let foreign: Vec<_> = ds.samples.iter().filter(|s| s.identity != a).map(|s| &s.drive).collect();
        if foreign.is_empty() {
            continue;
        }
        for (img, d) in p.reenact(ds, a, &foreign)?.iter().zip(&foreign) {
            let mask: Vec<bool> = skin_mask(id, d, res).iter().zip(&ref_mask).map(|(&x, &y)| x && y).collect();
            let c = masked_mean_color(img, &mask)?;
            skin += (0..3).map(|k| (c[k] - ref_color[k]).abs()).sum::<f64>();
            cases += 1;
        }
    }

    Ok(EvalReport {
        samples: ds.len(),
        ssim_mean: ssims.iter().sum::<f64>() / n,
        ssim_min: ssims.iter().copied().fold(f64::INFINITY, f64::min),
        landmark_error: lm / n,
        skin_color_l1: if cases == 0 { 0.0 } else { skin / cases as f64 },
        skin_cases: cases,
        blink_inside: inside / n,
        blink_outside: outside / n,
    })
}
