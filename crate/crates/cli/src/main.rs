use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use reenact::bench::{bench_fps, BenchReport};
use reenact::config::{RunConfig, CONFIG_FILE};
use reenact::dataset::{make_dataset, Dataset, DatasetSpec};
use reenact::eval::{evaluate, Predictor, RenderOracle};
use reenact::gradcheck::{GradcheckOptions, Suite};
use reenact::image::{grid, write_png, FaceImage};
use reenact::signal::{BlinkSignal, DriveSignal, PoseSignal};
use reenact::synth::gen_audio_feature;
use reenact::train::{Models, StepReport, Trainer};

#[derive(Parser)]
#[command(name = "reenact", version, about = "Audio-guided face reenactment experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic talking-face dataset.
    GenData(GenData),
    /// Train fuser, reenactor and critic on a dataset.
    Train(Train),
    /// Reenact a reference image under explicit drive signals.
    Reenact(Reenact),
    /// Compare analytic gradients with finite differences.
    Gradcheck(Gradcheck),
    /// Report parameter counts and inference throughput.
    Bench(Bench),
    /// Score a checkpoint (or the renderer oracle) on a dataset.
    Eval(Eval),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    identities: usize,
    #[arg(long, default_value_t = 64)]
    frames: usize,
    /// First frame index; use the end of a training range for held-out data.
    #[arg(long, default_value_t = 0)]
    first_frame: usize,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 8)]
    time_nodes: usize,
    #[arg(long, default_value_t = 32)]
    audio_channels: usize,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a named preset: default, full or micro.
    #[arg(long, default_value = "default")]
    preset: String,
    /// Override one key, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint; its stored config is used.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Accepted for scripts; training is always single-threaded and
    /// bitwise reproducible for a given seed.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct Reenact {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Take the drive of sample N of this dataset instead of the explicit values.
    #[arg(long, requires = "sample")]
    data: Option<PathBuf>,
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    yaw: f32,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pitch: f32,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    roll: f32,
    #[arg(long, default_value_t = 1.0)]
    blink_left: f32,
    #[arg(long, default_value_t = 1.0)]
    blink_right: f32,
    /// Mouth opening in [0, 1]; drives the audio proxy.
    #[arg(long, default_value_t = 0.0)]
    mouth: f32,
    /// Vary one component and write a strip, `name=start:end:count`, where
    /// name is yaw, pitch, roll, blink, blink_left, blink_right or mouth.
    #[arg(long, allow_hyphen_values = true)]
    sweep: Option<String>,
}

#[derive(Args)]
struct Gradcheck {
    /// Suite name or `all`.
    #[arg(long, default_value = "all")]
    module: String,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    /// Perturb one analytic gradient by this amount; the check must then fail.
    #[arg(long)]
    corrupt: Option<f64>,
}

#[derive(Args)]
struct Bench {
    #[command(flatten)]
    config: ConfigArgs,
    /// Benchmark the weights of a checkpoint instead of a fresh model.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long, default_value_t = 20)]
    iters: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Append a CSV row (with header when the file is new).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, required_unless_present = "oracle")]
    ckpt: Option<PathBuf>,
    /// Score the synthetic renderer itself.
    #[arg(long, conflicts_with = "ckpt")]
    oracle: bool,
    #[arg(long)]
    min_ssim: Option<f64>,
    #[arg(long)]
    max_skin_l1: Option<f64>,
    #[arg(long)]
    min_blink_ratio: Option<f64>,
}

/// Bad arguments or configuration; exits with status 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Reenact(a) => reenact_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Bench(a) => bench(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let is_usage = e.downcast_ref::<Usage>().is_some()
                || matches!(e.downcast_ref::<reenact::Error>(), Some(reenact::Error::Config(_)));
            ExitCode::from(if is_usage { 1 } else { 2 })
        }
    }
}

fn resolve_config(a: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match a.preset.as_str() {
        "default" => RunConfig::default(),
        "full" => RunConfig::full_scale(),
        "micro" => RunConfig::micro(),
        other => return Err(usage(format!("unknown preset {other:?} (default, full, micro)"))),
    };
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    for o in &a.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(cfg)
}

fn gen_data(a: GenData) -> Result<()> {
    let spec = DatasetSpec {
        seed: a.seed,
        identities: a.identities,
        frames: a.frames,
        first_frame: a.first_frame,
        resolution: a.resolution,
        time_nodes: a.time_nodes,
        audio_channels: a.audio_channels,
    };
    let ds = make_dataset(spec)?;
    let manifest = ds.write(&a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        bail!("data path {} does not exist", path.display());
    }
    Ok(Dataset::load(path)?)
}

/// Rows of reference | output | target for up to four evenly spaced samples.
fn write_samples(trainer: &Trainer, ds: &Dataset, path: &Path) -> reenact::Result<()> {
    let picks: Vec<_> = (0..4.min(ds.len())).map(|k| &ds.samples[k * ds.len() / 4.min(ds.len())]).collect();
    let refs: Vec<_> = picks.iter().map(|s| ds.reference(s.identity)).collect();
    let drives: Vec<_> = picks.iter().map(|s| &s.drive).collect();
    let outs = trainer.models.reenact_images(&refs, &drives)?;
    let rows: Vec<Vec<&FaceImage>> = picks
        .iter()
        .zip(&refs)
        .zip(&outs)
        .map(|((s, r), o)| vec![*r, o, &s.target])
        .collect();
    let (w, h, rgb) = grid(&rows)?;
    write_png(path, w, h, &rgb)?;
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(ckpt) => {
            if a.config.config.is_some() || !a.config.overrides.is_empty() || a.seed.is_some() {
                return Err(usage("--resume uses the checkpoint's config; drop --config, --set and --seed"));
            }
            let t = Trainer::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            eprintln!("resumed {} at step {}", ckpt.display(), t.step);
            t
        }
        None => {
            let mut cfg = resolve_config(&a.config)?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            Trainer::new(cfg)?
        }
    };
    if let Some(s) = a.steps {
        trainer.config.steps = s;
    }
    if let Some(d) = &a.data {
        trainer.config.data = d.display().to_string();
    }
    if let Some(o) = &a.out {
        trainer.config.out = o.display().to_string();
    }
    let cfg = trainer.config.clone();
    if cfg.data.is_empty() {
        return Err(usage("no dataset: pass --data or set `data` in the config"));
    }
    if cfg.out.is_empty() {
        return Err(usage("no output directory: pass --out or set `out` in the config"));
    }
    let ds = load_dataset(Path::new(&cfg.data))?;
    trainer.check_dataset(&ds)?;

    let out = PathBuf::from(&cfg.out);
    fs::create_dir_all(out.join("samples"))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    let csv_path = out.join("train.csv");
    let fresh = trainer.step == 0 || !csv_path.exists();
    let mut csv = if fresh {
        let mut f = File::create(&csv_path)?;
        writeln!(f, "{}", StepReport::CSV_HEADER)?;
        f
    } else {
        OpenOptions::new().append(true).open(&csv_path)?
    };
    let counts = trainer.models.param_counts();
    eprintln!(
        "training {} steps on {} samples; params fuser={} reenactor={} critic={}",
        cfg.steps,
        ds.len(),
        counts.fuser,
        counts.reenactor,
        counts.critic
    );

    let ckpt_path = out.join("checkpoint.bin");
    let started = Instant::now();
    let first = trainer.step;
    trainer.train(&ds, cfg.steps, |t, r| {
        writeln!(csv, "{}", r.to_csv())?;
        let done = t.step;
        if cfg.log_every > 0 && (done % cfg.log_every == 0 || done == cfg.steps) {
            let per = started.elapsed().as_secs_f64() / (done - first) as f64;
            eprintln!(
                "step {done:>6} total={:.4} geometry={:.4} content={:.4} adv={:.4} critic={:.4} ({per:.2}s/step)",
                r.total, r.geometry, r.content, r.adversarial, r.critic
            );
            write_samples(t, &ds, &out.join("samples").join(format!("step_{done:06}.png")))?;
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            t.save(&ckpt_path)?;
        }
        Ok(())
    })?;
    csv.flush()?;
    trainer.save(&ckpt_path)?;
    println!("{}", ckpt_path.display());
    Ok(())
}

fn drive_with(base: &DriveSignal, component: &str, v: f32, time_nodes: usize, channels: usize) -> Result<DriveSignal> {
    let mut d = base.clone();
    let p = d.pose;
    let b = d.blink;
    match component {
        "yaw" => d.pose = PoseSignal::new(v, p.pitch, p.roll)?,
        "pitch" => d.pose = PoseSignal::new(p.yaw, v, p.roll)?,
        "roll" => d.pose = PoseSignal::new(p.yaw, p.pitch, v)?,
        "blink" => d.blink = BlinkSignal::new(v, v)?,
        "blink_left" => d.blink = BlinkSignal::new(v, b.right)?,
        "blink_right" => d.blink = BlinkSignal::new(b.left, v)?,
        "mouth" => {
            d.audio = gen_audio_feature(&vec![v; time_nodes], channels, 0)?;
            d.mouth_open = v;
        }
        other => return Err(usage(format!("unknown sweep component {other:?}"))),
    }
    Ok(d)
}

fn parse_sweep(s: &str) -> Result<(String, Vec<f32>)> {
    let bad = || usage(format!("--sweep expects name=start:end:count, got {s:?}"));
    let (name, range) = s.split_once('=').ok_or_else(bad)?;
    let parts: Vec<&str> = range.split(':').collect();
    let [start, end, count] = parts[..] else {
        return Err(bad());
    };
    let (start, end): (f32, f32) = (start.parse().map_err(|_| bad())?, end.parse().map_err(|_| bad())?);
    let count: usize = count.parse().map_err(|_| bad())?;
    if count == 0 {
        return Err(bad());
    }
    let values = (0..count)
        .map(|k| if count == 1 { start } else { start + (end - start) * k as f32 / (count - 1) as f32 })
        .collect();
    Ok((name.trim().to_string(), values))
}

fn reenact_cmd(a: Reenact) -> Result<()> {
    let trainer = Trainer::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let cfg = &trainer.config;
    let reference = FaceImage::load_png(&a.reference)?;
    if reference.size != cfg.resolution {
        bail!("reference is {}px but the model expects {}px", reference.size, cfg.resolution);
    }
    let base = match (&a.data, a.sample) {
        (Some(d), Some(n)) => {
            let ds = load_dataset(d)?;
            ds.samples
                .get(n)
                .ok_or_else(|| usage(format!("sample {n} out of range ({} samples)", ds.len())))?
                .drive
                .clone()
        }
        _ => {
            let (t, f) = (cfg.time_nodes, cfg.audio_channels);
            let mut d = drive_with(&reenact::synth::neutral_drive(t, f)?, "mouth", a.mouth, t, f)?;
            d.pose = PoseSignal::new(a.yaw, a.pitch, a.roll)?;
            d.blink = BlinkSignal::new(a.blink_left, a.blink_right)?;
            d
        }
    };
    let drives = match &a.sweep {
        None => vec![base],
        Some(s) => {
            let (name, values) = parse_sweep(s)?;
            values
                .iter()
                .map(|&v| drive_with(&base, &name, v, cfg.time_nodes, cfg.audio_channels))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let drive_refs: Vec<_> = drives.iter().collect();
    let outs = trainer.models.reenact_images(&vec![&reference; drives.len()], &drive_refs)?;
    let (w, h, rgb) = grid(&[outs.iter().collect()])?;
    write_png(&a.out, w, h, &rgb)?;
    println!("{}", a.out.display());
    Ok(())
}

fn gradcheck(a: Gradcheck) -> Result<()> {
    let suites = Suite::select(&a.module)?;
    let opts = GradcheckOptions {
        tolerance: a.tolerance,
        corrupt: a.corrupt,
        ..Default::default()
    };
    let mut failed = 0;
    for suite in suites {
        for r in suite.run(&opts)? {
            let status = if r.passed() { "ok" } else { "FAIL" };
            println!(
                "{:<4} {}/{} max_rel={:.3e} at {} checked={} kinks={}",
                status,
                suite.name(),
                r.name,
                r.max_rel_error,
                r.worst,
                r.checked,
                r.kinks
            );
            failed += usize::from(!r.passed());
        }
    }
    if failed > 0 {
        bail!("{failed} gradient check(s) exceeded tolerance {:e}", a.tolerance);
    }
    Ok(())
}

fn bench(a: Bench) -> Result<()> {
    let (models, name) = match &a.ckpt {
        Some(c) => {
            let t = Trainer::load(c).with_context(|| format!("loading {}", c.display()))?;
            (t.models, c.display().to_string())
        }
        None => {
            let mut cfg = resolve_config(&a.config)?;
            if let Some(r) = a.resolution {
                cfg.resolution = r;
            }
            (Models::<f32>::new(&cfg)?, a.config.preset.clone())
        }
    };
    let report = bench_fps(&models, &name, a.iters, a.warmup, a.threads)?;
    print!("{}", report.to_text());
    if let Some(path) = &a.csv {
        let new = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if new {
            writeln!(f, "{}", BenchReport::CSV_HEADER)?;
        }
        writeln!(f, "{}", report.to_csv_row())?;
    }
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let trained;
    let predictor: &dyn Predictor = match &a.ckpt {
        Some(c) if !a.oracle => {
            trained = Trainer::load(c).with_context(|| format!("loading {}", c.display()))?;
            trained.check_dataset_signals(&ds)?;
            &trained.models
        }
        _ => &RenderOracle,
    };
    let report = evaluate(predictor, &ds)?;
    print!("{}", report.to_text());
    let mut violations = Vec::new();
    if let Some(m) = a.min_ssim.filter(|&m| report.ssim_mean < m) {
        violations.push(format!("ssim_mean {:.4} < {m}", report.ssim_mean));
    }
    if let Some(m) = a.max_skin_l1.filter(|&m| report.skin_color_l1 > m) {
        violations.push(format!("skin_color_l1 {:.4} > {m}", report.skin_color_l1));
    }
    if let Some(m) = a.min_blink_ratio.filter(|&m| !(report.blink_ratio() >= m)) {
        violations.push(format!("blink_ratio {:.3} < {m}", report.blink_ratio()));
    }
    if !violations.is_empty() {
        return Err(anyhow!("evaluation below threshold: {}", violations.join(", ")));
    }
    Ok(())
}
