use std::path::Path;
use std::process::{Command, Output};

fn reenact(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reenact")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = reenact(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn micro_data(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    ok(&["gen-data", "--out", p(&data), "--identities", "2", "--frames", "3", "--resolution", "16"]);
    data
}

fn value(report: &str, key: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("{key} missing from {report}"))
        .parse()
        .unwrap()
}

#[test]
fn train_writes_artifacts_and_resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = micro_data(dir.path());
    assert!(data.join("manifest.txt").exists() && data.join("ref_1.png").exists());

    let full = dir.path().join("full");
    ok(&["train", "--preset", "micro", "--data", p(&data), "--out", p(&full), "--steps", "4", "--deterministic"]);
    for f in ["config.txt", "train.csv", "checkpoint.bin", "samples/step_000004.png"] {
        assert!(full.join(f).exists(), "missing {f}");
    }
    let csv = std::fs::read_to_string(full.join("train.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let config = std::fs::read_to_string(full.join("config.txt")).unwrap();
    assert!(config.contains("steps = 4") && config.contains("resolution = 16"));

    let part = dir.path().join("part");
    ok(&["train", "--preset", "micro", "--data", p(&data), "--out", p(&part), "--steps", "2"]);
    ok(&["train", "--resume", p(&part.join("checkpoint.bin")), "--steps", "4"]);
    // The config echo records each run's own output directory.
    let entries = |dir: &Path| {
        let c = reenact::checkpoint::Checkpoint::load(&dir.join("checkpoint.bin")).unwrap();
        c.entries.into_iter().filter(|e| e.name != "meta.config").collect::<Vec<_>>()
    };
    let (a, b) = (entries(&full), entries(&part));
    assert!(a.len() > 10 && a == b, "resumed run diverged from the uninterrupted one");
    assert_eq!(std::fs::read_to_string(part.join("train.csv")).unwrap(), csv);
}

#[test]
fn reenact_sweep_eval_and_bench() {
    let dir = tempfile::tempdir().unwrap();
    let data = micro_data(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--preset", "micro", "--set", "log_every=0", "--data", p(&data), "--out", p(&run), "--steps", "1"]);
    let ckpt = run.join("checkpoint.bin");

    let strip = dir.path().join("strip.png");
    ok(&[
        "reenact", "--ckpt", p(&ckpt), "--reference", p(&data.join("ref_0.png")), "--out", p(&strip),
        "--sweep", "roll=-0.3:0.3:5",
    ]);
    let (w, h, _) = reenact::image::read_png(&strip).unwrap();
    assert_eq!((w, h), (80, 16));

    let single = dir.path().join("one.png");
    ok(&[
        "reenact", "--ckpt", p(&ckpt), "--reference", p(&data.join("ref_1.png")), "--out", p(&single),
        "--data", p(&data), "--sample", "2",
    ]);
    assert_eq!(reenact::image::read_png(&single).unwrap().0, 16);

    let oracle = ok(&["eval", "--data", p(&data), "--oracle"]);
    assert_eq!(value(&oracle, "ssim_mean"), 1.0);
    assert_eq!(value(&oracle, "skin_color_l1"), 0.0);
    let trained = ok(&["eval", "--data", p(&data), "--ckpt", p(&ckpt)]);
    assert!(value(&trained, "ssim_mean") < 1.0);
    let strict = reenact(&["eval", "--data", p(&data), "--ckpt", p(&ckpt), "--min-ssim", "0.999"]);
    assert_eq!(strict.status.code(), Some(2));

    let csv = dir.path().join("bench.csv");
    let report = ok(&["bench", "--preset", "micro", "--iters", "2", "--warmup", "0", "--csv", p(&csv)]);
    assert!(value(&report, "fps") > 0.0);
    assert_eq!(value(&report, "resolution"), 16.0);
    ok(&["bench", "--ckpt", p(&ckpt), "--iters", "1", "--warmup", "0", "--threads", "2", "--csv", p(&csv)]);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 3);
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let out = ok(&["gradcheck", "--module", "critic"]);
    assert!(out.lines().count() >= 3 && out.lines().all(|l| l.starts_with("ok")));
    let bad = reenact(&["gradcheck", "--module", "critic", "--corrupt", "1e-3"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn exit_codes_for_usage_and_failures() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(reenact(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(reenact(&["gradcheck", "--module", "nonsense"]).status.code(), Some(1));
    assert_eq!(reenact(&["train", "--preset", "micro", "--set", "colour=red"]).status.code(), Some(1));
    assert_eq!(reenact(&["--help"]).status.code(), Some(0));

    let missing = reenact(&["train", "--preset", "micro", "--data", p(&dir.path().join("nope")), "--out", p(dir.path())]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("does not exist"));

    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"XXXX0000").unwrap();
    let out = reenact(&["bench", "--ckpt", p(&junk)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}
