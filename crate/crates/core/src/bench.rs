//! Parameter counts and forward-pass throughput.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::image::FaceImage;
use crate::synth::{neutral_drive, render_face, IdentityParams};
use crate::train::{Models, ParamCounts};

/// Learnable parameters of a module. Generated AdaConv kernels are
/// activations and do not count; their generators do.
pub fn count_params<T: crate::Real>(module: &dyn crate::nn::Module<T>) -> usize {
    module.param_count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub config: String,
    pub resolution: usize,
    pub workers: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub params: ParamCounts,
    pub mean_ms: f64,
    pub p95_ms: f64,
    /// Standard error of the mean latency.
    pub std_err_ms: f64,
    /// Single-stream frames per second, `1000 / mean_ms`.
    pub fps: f64,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str =
        "config,resolution,workers,iterations,warmup,params_total,params_fuser,params_reenactor,params_critic,mean_ms,p95_ms,std_err_ms,fps";

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let p = &self.params;
        for (k, v) in [
            ("config", self.config.clone()),
            ("resolution", self.resolution.to_string()),
            ("workers", self.workers.to_string()),
            ("iterations", self.iterations.to_string()),
            ("warmup", self.warmup.to_string()),
            ("params_total", p.generator().to_string()),
            ("params_fuser", p.fuser.to_string()),
            ("params_reenactor", p.reenactor.to_string()),
            ("params_critic", p.critic.to_string()),
            ("mean_ms", format!("{:.3}", self.mean_ms)),
            ("p95_ms", format!("{:.3}", self.p95_ms)),
            ("std_err_ms", format!("{:.3}", self.std_err_ms)),
            ("fps", format!("{:.2}", self.fps)),
        ] {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    pub fn to_csv_row(&self) -> String {
        let p = &self.params;
        format!(
            "{},{},{},{},{},{},{},{},{},{:.3},{:.3},{:.3},{:.2}",
            self.config,
            self.resolution,
            self.workers,
            self.iterations,
            self.warmup,
            p.generator(),
            p.fuser,
            p.reenactor,
            p.critic,
            self.mean_ms,
            self.p95_ms,
            self.std_err_ms,
            self.fps
        )
    }
}

/// Latency summary `(mean, p95, standard error)` in the input unit.
pub fn summarize(samples: &[f64]) -> (f64, f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let p95 = sorted[((0.95 * n).ceil() as usize).clamp(1, sorted.len()) - 1];
    let var = if samples.len() > 1 {
        samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, p95, (var / n).sqrt())
}

/// Times the single-frame inference path (fuser, AdaConv parameter
/// generation and reenactor) at batch size 1. Every worker runs
/// `iterations` timed passes after `warmup` untimed ones.
pub fn bench_fps(models: &Models<f32>, config: &str, iterations: usize, warmup: usize, workers: usize) -> Result<BenchReport> {
    if iterations == 0 || workers == 0 {
        return Err(Error::Config("bench needs iterations >= 1 and workers >= 1".into()));
    }
    let fc = &models.fuser.config;
    let res = models.reenactor.config.resolution;
    let drive = neutral_drive(fc.time_nodes, fc.audio_channels)?;
    let reference: FaceImage = render_face(&IdentityParams::from_seed(0), &drive, res)?.0;
    let run = || -> Result<Vec<f64>> {
        for _ in 0..warmup {
            models.reenact_images(&[&reference], &[&drive])?;
        }
        let mut times = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let t0 = Instant::now();
            models.reenact_images(&[&reference], &[&drive])?;
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        Ok(times)
    };
    let times: Vec<f64> = if workers == 1 {
        run()?
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers).map(|_| s.spawn(&run)).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("bench worker panicked"))
                .collect::<Result<Vec<_>>>()
        })?
        .concat()
    };
    let (mean_ms, p95_ms, std_err_ms) = summarize(&times);
    Ok(BenchReport {
        config: config.to_string(),
        resolution: res,
        workers,
        iterations,
        warmup,
        params: models.param_counts(),
        mean_ms,
        p95_ms,
        std_err_ms,
        fps: 1000.0 / mean_ms,
    })
}
