//! Central finite-difference checks of the reverse-mode gradients in f64.
//!
//! Relative error per coordinate is `|a − n| / max(|a|, |n|, floor·max(1, |L|))`.
//! The floor scales with the loss value `L` because the rounding noise of a
//! finite difference is proportional to `|L| / h`. A
//! coordinate whose stencil straddles a non-differentiable point (a
//! leaky-ReLU or `|·|` kink) is detected by comparing the central differences
//! at `h` and `h/2` and the two one-sided differences; such coordinates are
//! counted and skipped.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adaconv::{ada_conv, generate_params, AdaConvGenerator, AdaConvSpec, GeneratedParams};
use crate::critic::{critic_loss, generator_adv_loss, total_loss, Critic, CriticConfig, LossWeights};
use crate::error::{Error, Result};
use crate::fuser::{Fuser, FuserConfig};
use crate::nn::{randomize, Module};
use crate::reenactor::{Reenactor, ReenactorConfig, TransformBlock};
use crate::tensor::{self, no_grad, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    /// Coordinates probed per tensor; smaller tensors are checked in full.
    pub samples_per_tensor: usize,
    pub seed: u64,
    /// Adds this much to the first analytic gradient probed, to prove the
    /// harness notices a wrong gradient.
    pub corrupt: Option<f64>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            tolerance: 1e-5,
            floor: 1e-4,
            samples_per_tensor: 4,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    /// Where the maximum occurred, `tensor[index]`.
    pub worst: String,
    pub checked: usize,
    pub kinks: usize,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= self.tolerance
    }
}

/// Compares the analytic gradient of `loss` with respect to every tensor in
/// `inputs` against central differences.
pub fn check(
    name: &str,
    inputs: &[(String, Tensor<f64>)],
    loss: &dyn Fn() -> Result<Tensor<f64>>,
    opts: &GradcheckOptions,
) -> Result<CheckResult> {
    for (_, t) in inputs {
        t.zero_grad();
    }
    loss()?.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ name.len() as u64);
    let eval = || -> Result<f64> { Ok(no_grad(loss)?.item()) };
    let floor = opts.floor * eval()?.abs().max(1.0);
    let mut out = CheckResult {
        name: name.to_string(),
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        kinks: 0,
        tolerance: opts.tolerance,
    };
    let mut corrupt = opts.corrupt;
    for (tname, t) in inputs {
        let grad = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
        let n = t.numel();
        let coords: Vec<usize> = if n <= opts.samples_per_tensor {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, opts.samples_per_tensor).into_vec()
        };
        for i in coords {
            let orig = t.data()[i];
            let at = |delta: f64| -> Result<f64> {
                t.update_data(|d| d[i] = orig + delta);
                eval()
            };
            let h = opts.step;
            let (p1, m1, p2, m2, c0) = (at(h)?, at(-h)?, at(h / 2.0)?, at(-h / 2.0)?, at(0.0)?);
            t.update_data(|d| d[i] = orig);
            let numeric = (p1 - m1) / (2.0 * h);
            let numeric_half = (p2 - m2) / h;
            let (forward, backward) = ((p1 - c0) / h, (c0 - m1) / h);
            let scale = numeric.abs().max(numeric_half.abs()).max(floor);
            let one_sided = forward.abs().max(backward.abs()).max(floor);
            if (numeric - numeric_half).abs() > opts.tolerance * scale || (forward - backward).abs() > 1e-2 * one_sided {
                out.kinks += 1;
                continue;
            }
            let mut analytic = grad[i];
            if let Some(c) = corrupt.take() {
                analytic += c * analytic.abs().max(1.0);
            }
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            out.checked += 1;
            if rel >= out.max_rel_error {
                out.max_rel_error = rel;
                out.worst = format!("{tname}[{i}]");
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Tensor,
    AdaConv,
    Fuser,
    Reenactor,
    Critic,
    Total,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Tensor,
        Suite::AdaConv,
        Suite::Fuser,
        Suite::Reenactor,
        Suite::Critic,
        Suite::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Tensor => "tensor",
            Suite::AdaConv => "adaconv",
            Suite::Fuser => "fuser",
            Suite::Reenactor => "reenactor",
            Suite::Critic => "critic",
            Suite::Total => "total",
        }
    }

    /// `all` selects every suite.
    pub fn select(module: &str) -> Result<Vec<Suite>> {
        if module == "all" {
            return Ok(Self::ALL.to_vec());
        }
        Self::ALL
            .into_iter()
            .find(|s| s.name() == module)
            .map(|s| vec![s])
            .ok_or_else(|| Error::Config(format!("unknown gradcheck module {module:?}")))
    }

    pub fn run(self, opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
        match self {
            Suite::Tensor => tensor_suite(opts),
            Suite::AdaConv => adaconv_suite(opts),
            Suite::Fuser => fuser_suite(opts),
            Suite::Reenactor => reenactor_suite(opts),
            Suite::Critic => critic_suite(opts),
            Suite::Total => total_suite(opts),
        }
    }
}

fn rand_param(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::parameter(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn rand_const(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `sum(y ⊙ r)` for a fixed random `r`, so every output coordinate matters.
fn projection(y: &Tensor<f64>, r: &Tensor<f64>) -> Result<Tensor<f64>> {
    Ok(y.mul(r)?.sum())
}

fn named(pairs: &[(&str, &Tensor<f64>)]) -> Vec<(String, Tensor<f64>)> {
    pairs.iter().map(|(n, t)| (n.to_string(), (*t).clone())).collect()
}

fn module_params(prefix: &str, m: &dyn Module<f64>) -> Vec<(String, Tensor<f64>)> {
    let mut out = Vec::new();
    m.visit(prefix, &mut |n, t| out.push((n, t.clone())));
    out
}

type Op = Box<dyn Fn(&Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>>;

fn tensor_suite(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut results = Vec::new();
    let binary: Vec<(&str, Op)> = vec![
        ("add", Box::new(|x, y| x.add(y))),
        ("sub", Box::new(|x, y| x.sub(y))),
        ("mul", Box::new(|x, y| x.mul(y))),
        ("scale", Box::new(|x, _| Ok(x.scale(1.7)))),
        ("neg", Box::new(|x, _| Ok(x.neg()))),
        ("leaky_relu", Box::new(|x, _| Ok(x.leaky_relu(0.2)))),
        ("relu", Box::new(|x, _| Ok(x.relu()))),
        ("tanh", Box::new(|x, _| Ok(x.tanh()))),
        ("reshape", Box::new(|x, _| x.reshape(&[3, 2, 2, 2]))),
        ("narrow_concat", Box::new(|x, y| Tensor::concat(&[&y.narrow(1, 1, 2)?, &x], 1))),
        ("upsample_nearest2x", Box::new(|x, _| x.upsample_nearest2x())),
    ];
    for (name, op) in binary {
        let x = rand_param(&mut rng, &[2, 3, 2, 2]);
        let y = rand_param(&mut rng, &[2, 3, 2, 2]);
        let r = rand_const(&mut rng, op(&x, &y)?.shape());
        let f = || projection(&op(&x, &y)?, &r);
        results.push(check(name, &named(&[("x", &x), ("y", &y)]), &f, opts)?);
    }
    {
        let x = rand_param(&mut rng, &[3, 4]);
        results.push(check("sum", &named(&[("x", &x)]), &|| Ok(x.sum()), opts)?);
        results.push(check("mean", &named(&[("x", &x)]), &|| Ok(x.mean()), opts)?);
        let y = rand_param(&mut rng, &[3, 4]);
        results.push(check("l1", &named(&[("x", &x), ("y", &y)]), &|| x.l1(&y), opts)?);
    }
    {
        let x = rand_param(&mut rng, &[3, 4]);
        let w = rand_param(&mut rng, &[5, 4]);
        let b = rand_param(&mut rng, &[5]);
        let r = rand_const(&mut rng, &[3, 5]);
        let f = || projection(&tensor::linear(&x, &w, &b)?, &r);
        results.push(check("linear", &named(&[("x", &x), ("weight", &w), ("bias", &b)]), &f, opts)?);
    }
    {
        let x = rand_param(&mut rng, &[2, 3, 3, 3]);
        let s = rand_param(&mut rng, &[3]);
        let b = rand_param(&mut rng, &[3]);
        let r = rand_const(&mut rng, &[2, 3, 3, 3]);
        let f = || projection(&tensor::instance_norm(&x, &s, &b, 1e-5)?, &r);
        results.push(check("instance_norm", &named(&[("x", &x), ("scale", &s), ("shift", &b)]), &f, opts)?);
    }
    {
        let x = rand_param(&mut rng, &[2, 4, 5, 5]);
        let w = rand_param(&mut rng, &[6, 2, 3, 3]);
        let b = rand_param(&mut rng, &[6]);
        let r = rand_const(&mut rng, &[2, 6, 3, 3]);
        let f = || projection(&tensor::conv2d(&x, &w, &b, 2, 1, 2)?, &r);
        results.push(check("conv2d", &named(&[("x", &x), ("weight", &w), ("bias", &b)]), &f, opts)?);
    }
    {
        let x = rand_param(&mut rng, &[2, 3, 5]);
        let w = rand_param(&mut rng, &[4, 3, 3]);
        let b = rand_param(&mut rng, &[4]);
        let r = rand_const(&mut rng, &[2, 4, 3]);
        let f = || projection(&tensor::conv1d(&x, &w, &b, 2, 1)?, &r);
        results.push(check("conv1d", &named(&[("x", &x), ("weight", &w), ("bias", &b)]), &f, opts)?);
    }
    {
        let x = rand_param(&mut rng, &[2, 4, 4, 4]);
        let w = rand_param(&mut rng, &[2, 4, 2, 3, 3]);
        let b = rand_param(&mut rng, &[2, 4]);
        let r = rand_const(&mut rng, &[2, 4, 4, 4]);
        let f = || projection(&tensor::conv2d_per_sample(&x, &w, &b, 1, 1, 2)?, &r);
        results.push(check("conv2d_per_sample", &named(&[("x", &x), ("weight", &w), ("bias", &b)]), &f, opts)?);
    }
    Ok(results)
}

fn adaconv_suite(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xada);
    let mut results = Vec::new();
    for (k, c, cg) in [(3, 4, 2), (1, 3, 1), (3, 3, 1)] {
        let spec = AdaConvSpec::new(k, c, cg, 5, 6)?;
        let gen = AdaConvGenerator::<f64>::new(&mut rng, spec.clone())?;
        randomize(&gen, &mut rng, 0.5);
        let f_geo = rand_param(&mut rng, &[2, 5]);
        let x = rand_param(&mut rng, &[2, c, 4, 4]);
        let r = rand_const(&mut rng, &[2, c, 4, 4]);
        let f = || projection(&ada_conv(&x, &generate_params(&f_geo, &spec, &gen)?, &spec)?, &r);
        let mut inputs = named(&[("f_geo", &f_geo), ("features", &x)]);
        inputs.extend(module_params("generator", &gen));
        results.push(check(&format!("ada_conv k={k} C={c} Cg={cg}"), &inputs, &f, opts)?);

        // Gradient with respect to the generated kernel and bias themselves.
        let weight = rand_param(&mut rng, &[2, c, cg, k, k]);
        let bias = rand_param(&mut rng, &[2, c]);
        let g = || {
            let p = GeneratedParams {
                weight: weight.clone(),
                bias: bias.clone(),
            };
            projection(&ada_conv(&x, &p, &spec)?, &r)
        };
        results.push(check(
            &format!("ada_conv kernels k={k} C={c} Cg={cg}"),
            &named(&[("weight", &weight), ("bias", &bias)]),
            &g,
            opts,
        )?);
    }
    Ok(results)
}

fn micro_fuser(rng: &mut ChaCha8Rng) -> Result<Fuser<f64>> {
    Fuser::new(rng, FuserConfig::micro())
}

fn fuser_inputs(rng: &mut ChaCha8Rng, cfg: &FuserConfig, n: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    (
        rand_const(rng, &[n, cfg.audio_channels, cfg.time_nodes]),
        rand_const(rng, &[n, 3]),
        rand_const(rng, &[n, 2]),
    )
}

fn fuser_suite(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xf5e);
    let fuser = micro_fuser(&mut rng)?;
    let cfg = fuser.config.clone();
    let (audio, pose, blink) = fuser_inputs(&mut rng, &cfg, 2);
    let l = rand_const(&mut rng, &[2, cfg.geo_dim()]);
    let mut results = Vec::new();

    let ra = rand_const(&mut rng, &[2, cfg.audio_dim()]);
    let fa = || projection(&fuser.phi_a(&audio)?, &ra);
    results.push(check("phi_a", &module_params("audio", &fuser.audio), &fa, opts)?);

    let rh = rand_const(&mut rng, &[2, cfg.signal_dim()]);
    let pose_leaf = Tensor::parameter(pose.shape(), pose.to_vec())?;
    let fh = || projection(&fuser.phi_h(&pose_leaf)?, &rh);
    let mut inputs = module_params("pose", &fuser.pose);
    inputs.push(("pose_signal".into(), pose_leaf.clone()));
    results.push(check("phi_h", &inputs, &fh, opts)?);

    let blink_leaf = Tensor::parameter(blink.shape(), blink.to_vec())?;
    let fe = || projection(&fuser.phi_e(&blink_leaf)?, &rh);
    let mut inputs = module_params("blink", &fuser.blink);
    inputs.push(("blink_signal".into(), blink_leaf.clone()));
    results.push(check("phi_e", &inputs, &fe, opts)?);

    let fl = || fuser.forward(&audio, &pose, &blink)?.l1(&l);
    results.push(check("fuser L_G", &module_params("fuser", &fuser), &fl, opts)?);
    Ok(results)
}

fn micro_reenactor(rng: &mut ChaCha8Rng) -> Result<Reenactor<f64>> {
    let r = Reenactor::new(rng, ReenactorConfig::micro())?;
    // Leave the identity initialization so the geometry path carries gradient.
    randomize(&r, rng, 0.5);
    Ok(r)
}

fn reenactor_suite(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x4ee);
    let re = micro_reenactor(&mut rng)?;
    let cfg = re.config.clone();
    let (res, side) = (cfg.resolution, cfg.feature_side());
    let img = rand_const(&mut rng, &[2, 3, res, res]);
    let feats = rand_param(&mut rng, &[2, cfg.channels, side, side]);
    let f_geo = rand_param(&mut rng, &[2, cfg.geo_dim]);
    let mut results = Vec::new();

    let re_enc = rand_const(&mut rng, &[2, cfg.channels, side, side]);
    let f = || projection(&re.encode(&img)?, &re_enc);
    results.push(check("encode", &module_params("encoder", &re.encoder), &f, opts)?);

    let block: &TransformBlock<f64> = &re.blocks[0];
    let f = || projection(&block.forward(&feats, &f_geo)?, &re_enc);
    let mut inputs = module_params("block0", block);
    inputs.extend(named(&[("features", &feats), ("f_geo", &f_geo)]));
    results.push(check("transform_block", &inputs, &f, opts)?);

    let r_img = rand_const(&mut rng, &[2, 3, res, res]);
    let f = || projection(&re.decode(&feats)?, &r_img);
    let mut inputs = module_params("decoder", &re.decoder);
    inputs.extend(named(&[("features", &feats)]));
    results.push(check("decode", &inputs, &f, opts)?);

    let f = || projection(&re.forward(&img, &f_geo)?, &r_img);
    let mut inputs = module_params("reenactor", &re);
    inputs.extend(named(&[("f_geo", &f_geo)]));
    results.push(check("reenact", &inputs, &f, opts)?);
    Ok(results)
}

fn critic_suite(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xc71);
    let critic = Critic::<f64>::new(&mut rng, CriticConfig::micro())?;
    let fake = rand_param(&mut rng, &[2, 3, 8, 8]);
    let real = rand_const(&mut rng, &[2, 3, 8, 8]);
    let side = critic.config.output_side(8);
    let r = rand_const(&mut rng, &[2, 1, side, side]);
    let mut results = Vec::new();

    let f = || projection(&critic.forward(&fake)?, &r);
    let mut inputs = module_params("critic", &critic);
    inputs.extend(named(&[("image", &fake)]));
    results.push(check("critic_forward", &inputs, &f, opts)?);

    let f = || critic_loss(&critic.mean_score(&fake)?, &critic.mean_score(&real)?);
    results.push(check("critic_loss", &inputs, &f, opts)?);

    let f = || generator_adv_loss(&critic.mean_score(&fake)?);
    results.push(check("generator_adv_loss", &named(&[("fake", &fake)]), &f, opts)?);
    Ok(results)
}

fn total_suite(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x707);
    let fuser = micro_fuser(&mut rng)?;
    let re = micro_reenactor(&mut rng)?;
    let critic = Critic::<f64>::new(&mut rng, CriticConfig::micro())?;
    let fc = fuser.config.clone();
    let res = re.config.resolution;
    let (audio, pose, blink) = fuser_inputs(&mut rng, &fc, 2);
    let l = rand_const(&mut rng, &[2, fc.geo_dim()]);
    let reference = rand_const(&mut rng, &[2, 3, res, res]);
    let target = rand_const(&mut rng, &[2, 3, res, res]);
    let weights = LossWeights::default();
    let mut results = Vec::new();

    let f = || {
        let f_geo = fuser.forward(&audio, &pose, &blink)?;
        let fake = re.forward(&reference, &f_geo)?;
        Ok(total_loss(&f_geo, &l, &fake, &target, &critic.mean_score(&fake)?, &weights)?.total)
    };
    let mut inputs = module_params("fuser", &fuser);
    inputs.extend(module_params("reenactor", &re));
    inputs.extend(module_params("critic", &critic));
    results.push(check("total_loss", &inputs, &f, opts)?);

    let f_geo = rand_param(&mut rng, &[2, fc.geo_dim()]);
    let g = || {
        let fake = re.forward(&reference, &f_geo)?;
        Ok(total_loss(&f_geo, &l, &fake, &target, &critic.mean_score(&fake)?, &weights)?.total)
    };
    results.push(check("total_loss f_geo", &named(&[("f_geo", &f_geo)]), &g, opts)?);
    Ok(results)
}
