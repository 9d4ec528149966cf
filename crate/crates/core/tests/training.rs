use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reenact::checkpoint::Checkpoint;
use reenact::config::RunConfig;
use reenact::dataset::{make_dataset, Dataset, DatasetSpec};
use reenact::nn::randomize;
use reenact::train::{Batch, Trainer};
use reenact::Error;

fn setup(steps: u64) -> (RunConfig, Dataset) {
    let cfg = RunConfig { steps, ..RunConfig::micro() };
    let ds = make_dataset(DatasetSpec::new(5, 2, 4, cfg.resolution)).unwrap();
    (cfg, ds)
}

fn run(cfg: &RunConfig, ds: &Dataset, until: u64) -> Trainer {
    let mut t = Trainer::new(cfg.clone()).unwrap();
    t.train(ds, until, |_, _| Ok(())).unwrap();
    t
}

#[test]
fn twenty_step_runs_are_bitwise_identical() {
    let (cfg, ds) = setup(20);
    let a = run(&cfg, &ds, 20).to_checkpoint().to_bytes().unwrap();
    let b = run(&cfg, &ds, 20).to_checkpoint().to_bytes().unwrap();
    assert_eq!(a, b);
    let other = run(&RunConfig { seed: 1, ..cfg }, &ds, 20).to_checkpoint().to_bytes().unwrap();
    assert_ne!(a, other);
}

#[test]
fn resume_from_disk_replays_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ds) = setup(5);
    let full = run(&cfg, &ds, 5);

    let path = dir.path().join("ckpt.bin");
    run(&cfg, &ds, 2).save(&path).unwrap();
    let mut resumed = Trainer::load(&path).unwrap();
    assert_eq!(resumed.step, 2);
    let mut reports = Vec::new();
    resumed
        .train(&ds, 5, |_, r| {
            reports.push(r.step);
            Ok(())
        })
        .unwrap();
    assert_eq!(reports, vec![2, 3, 4]);
    assert_eq!(resumed.to_checkpoint(), full.to_checkpoint());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = setup(1);
    let bytes = Trainer::new(cfg).unwrap().to_checkpoint().to_bytes().unwrap();

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"PNG\0");
    let path = dir.path().join("bad.bin");
    std::fs::write(&path, &bad).unwrap();
    let err = Trainer::load(&path).err().expect("bad magic must fail");
    assert!(matches!(&err, Error::Checkpoint(m) if m.contains("magic")), "{err}");

    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    assert!(Trainer::load(&dir.path().join("absent.bin")).is_err());
}

#[test]
fn generator_ignores_the_critic_when_adversarial_weight_is_zero() {
    let (cfg, ds) = setup(3);
    let cfg = RunConfig { lambda_adv: 0.0, ..cfg };
    let plain = run(&cfg, &ds, 3);
    let mut shaken = Trainer::new(cfg).unwrap();
    randomize(&shaken.models.critic, &mut ChaCha8Rng::seed_from_u64(9), 0.01);
    shaken.train(&ds, 3, |_, _| Ok(())).unwrap();
    let gen = |t: &Trainer| t.models.generator_params().into_iter().map(|(_, p)| p.to_vec()).collect::<Vec<_>>();
    assert_eq!(gen(&plain), gen(&shaken));
    assert_ne!(plain.models.critic_params()[0].1.to_vec(), shaken.models.critic_params()[0].1.to_vec());
}

#[test]
fn non_finite_losses_stop_training_with_the_term_name() {
    let (cfg, ds) = setup(1);
    let mut t = Trainer::new(cfg).unwrap();
    let (_, p) = &t.models.generator_params()[0];
    p.update_data(|d| d[0] = f32::NAN);
    let err = t.train_step(&Batch::from_samples(&ds, &[0, 1]).unwrap()).unwrap_err();
    assert!(matches!(&err, Error::NonFinite(m) if m.contains("loss") && m.contains("step 0")), "{err}");
}
