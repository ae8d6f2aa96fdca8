//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Pass criterion numbers as arguments to run a subset, for example
//! `cargo test --release --test acceptance -- 2 3`.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subjectflow::conditioning::pad_and_place;
use subjectflow::dit::CrossMode;
use subjectflow::flow::{cfg_combine, forward_diffuse, sample, velocity_target, Guidance, SamplerConfig};
use subjectflow::harness::check::{run_check, tiny_setup, TOLERANCE};
use subjectflow::harness::eval::{eval_manifest, evaluate, evaluate_samples, SampleEval};
use subjectflow::harness::*;
use subjectflow::nn::{scalar_features, Linear};
use subjectflow::numerics::{Tape, Tensor};
use subjectflow::params::{Bound, ParamStore};
use subjectflow::synthdata::Mode;
use subjectflow::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn gradient_integrity() -> Result<Outcome> {
    let lines = run_check()?;
    let worst = lines.iter().map(|l| l.report.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = lines.iter().filter(|l| !l.passed()).map(|l| l.name.as_str()).collect();
    outcome(
        failed.is_empty() && worst <= TOLERANCE,
        format!("{} checks, worst relative error {worst:.2e}, failing {failed:?}", lines.len()),
    )
}

const MU: [f64; 2] = [1.0, -1.0];
const VAR: [f64; 2] = [0.5, 2.0];
const TIME_FEATURES: usize = 16;

/// Small MLP velocity net over `[z, t, sinusoidal(t)]`.
struct VelocityNet {
    store: ParamStore,
    layers: [Linear; 3],
}

impl VelocityNet {
    fn new(hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let d_in = 3 + TIME_FEATURES;
        let layers = [
            Linear::new(&mut store, "l0", d_in, hidden, true, 1.0, rng),
            Linear::new(&mut store, "l1", hidden, hidden, true, 1.0, rng),
            Linear::new(&mut store, "l2", hidden, 2, true, 1.0, rng),
        ];
        VelocityNet { store, layers }
    }

    fn inputs(z: &[f64], times: &[f64]) -> Tensor {
        let n = times.len();
        let mut data = Vec::with_capacity(n * (3 + TIME_FEATURES));
        for (row, &t) in z.chunks(2).zip(times) {
            data.extend_from_slice(row);
            data.push(t);
            data.extend_from_slice(scalar_features(t / 250.0, TIME_FEATURES).data());
        }
        Tensor::new(&[n, 3 + TIME_FEATURES], data).expect("input extents")
    }

    fn forward(&self, tape: &mut Tape, p: &mut Bound, x: Tensor) -> Result<subjectflow::numerics::Var> {
        let mut h = tape.constant(x);
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, p, h)?;
            if i + 1 < self.layers.len() {
                h = tape.gelu(h)?;
            }
        }
        Ok(h)
    }

    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        let times = vec![t; z.rows()];
        let mut tape = Tape::new();
        let mut p = Bound::frozen(&self.store);
        let v = self.forward(&mut tape, &mut p, Self::inputs(z.data(), &times))?;
        Ok(tape.value(v).clone())
    }
}

/// Closed-form `E[ε − z0 | z_t]` for `z0 ~ N(MU, diag(VAR))`.
fn gaussian_velocity(z: &Tensor, t: f64) -> Result<Tensor> {
    let mut out = Vec::with_capacity(z.numel());
    for row in z.data().chunks(2) {
        for c in 0..2 {
            let s2 = (1.0 - t).powi(2) * VAR[c] + t * t;
            out.push((t - (1.0 - t) * VAR[c]) / s2 * (row[c] - (1.0 - t) * MU[c]) - MU[c]);
        }
    }
    Tensor::new(z.shape(), out)
}

fn moments(z: &Tensor) -> ([f64; 2], f64) {
    let n = z.rows();
    let mean = [0, 1].map(|c| z.data().iter().skip(c).step_by(2).sum::<f64>() / n as f64);
    let mut cov = [[0.0; 2]; 2];
    for row in z.data().chunks(2) {
        for a in 0..2 {
            for b in 0..2 {
                cov[a][b] += (row[a] - mean[a]) * (row[b] - mean[b]) / (n - 1) as f64;
            }
        }
    }
    let frob = ((cov[0][0] - VAR[0]).powi(2) + 2.0 * cov[0][1].powi(2) + (cov[1][1] - VAR[1]).powi(2)).sqrt();
    (mean, frob)
}

fn gaussian_transport() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = VelocityNet::new(128, &mut rng);
    let iters = 4000;
    let batch = 256;
    let mut opt = OptimizerState::new(&net.store, 2e-3, 0.9, 0.999, 1e-8, 0.0);
    let mut data = ChaCha8Rng::seed_from_u64(1);
    for it in 0..iters {
        opt.lr = 2e-3 * 0.5 * (1.0 + (std::f64::consts::PI * it as f64 / iters as f64).cos());
        let z0 = Tensor::new(
            &[batch, 2],
            (0..batch).flat_map(|_| {
                let e: [f64; 2] = [data.sample(rand_distr::StandardNormal), data.sample(rand_distr::StandardNormal)];
                [MU[0] + VAR[0].sqrt() * e[0], MU[1] + VAR[1].sqrt() * e[1]]
            }).collect(),
        )?;
        let eps = Tensor::randn(&[batch, 2], &mut data);
        let times: Vec<f64> = (0..batch).map(|_| data.random::<f64>()).collect();
        let mut z_t = Vec::with_capacity(batch * 2);
        for b in 0..batch {
            let row = Tensor::new(&[2], z0.data()[2 * b..2 * b + 2].to_vec())?;
            let e = Tensor::new(&[2], eps.data()[2 * b..2 * b + 2].to_vec())?;
            z_t.extend_from_slice(forward_diffuse(&row, &e, times[b])?.data());
        }
        let target = velocity_target(&z0, &eps)?;
        let mut tape = Tape::new();
        let mut p = Bound::trainable(&net.store);
        let v = net.forward(&mut tape, &mut p, VelocityNet::inputs(&z_t, &times))?;
        let tg = tape.constant(target);
        let loss = tape.mse(v, tg)?;
        tape.backward(loss)?;
        let grads = p.gradients(&tape);
        adamw_step(&mut net.store, &grads, &mut opt)?;
    }

    let cfg = SamplerConfig { steps: 50, cfg_scale: 1.0 };
    let learned = |z: &Tensor, t: f64, _c: bool| net.velocity(z, t);
    let z = sample(&learned, &[2000, 2], &cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let (mean, frob) = moments(&z);
    let oracle = |z: &Tensor, t: f64, _c: bool| gaussian_velocity(z, t);
    let zo = sample(&oracle, &[2000, 2], &cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let (omean, ofrob) = moments(&zo);
    let pass = (0..2).all(|c| (mean[c] - MU[c]).abs() <= 0.1) && frob <= 0.15;
    outcome(
        pass,
        format!(
            "learned mean ({:.3}, {:.3}) cov err {frob:.3}; closed-form field on the same noise: mean ({:.3}, {:.3}) cov err {ofrob:.3}",
            mean[0], mean[1], omean[0], omean[1]
        ),
    )
}

fn point_mass() -> Result<Outcome> {
    let field = |z: &Tensor, t: f64, _c: bool| Ok(z.scale(1.0 / t));
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let z = sample(&field, &[64], &SamplerConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed))?;
        worst = z.data().iter().fold(worst, |m, v| m.max(v.abs()));
    }
    outcome(worst <= 1e-3, format!("worst distance to the atom over 20 seeds {worst:.1e}"))
}

fn guidance_algebra() -> Result<Outcome> {
    let one = |v| Tensor::new(&[1], vec![v]);
    let six = cfg_combine(&one(1.0)?, &one(2.0)?, 5.0)?.data()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let u = Tensor::randn(&[32], &mut rng);
    let c = Tensor::randn(&[32], &mut rng);
    let pass = six == 6.0 && cfg_combine(&u, &c, 1.0)? == c && cfg_combine(&u, &c, 0.0)? == u;
    outcome(pass, format!("(1, 2, 5) gives {six}; unit and zero scales reduce exactly"))
}

fn padding_structure() -> Result<Outcome> {
    let model = Model::new(RunConfig::desk())?;
    let manifest = eval_manifest(&model.config)?;
    let corpus = Corpus::new(manifest.clone());
    let record = manifest.records.iter().find(|r| r.mode == Mode::Multi).expect("multi-subject prompt");
    let s = corpus.sample(&model, record.index)?;
    let bundle = model.encode_condition(&s.prompt_tokens, &s.ref_images)?;
    let [t, cz, h, w] = model.latent_shape();
    let x_t = Tensor::randn(&[t, cz, h, w], &mut ChaCha8Rng::seed_from_u64(3));
    let padded = pad_and_place(&x_t, &bundle.c_vae, &bundle.m_ref)?;
    let slots = padded.slots();
    let outside = padded.channel_block(cz, 2 * cz, 0..t).data().iter().all(|&v| v == 0.0);
    let mask = padded.channel_block(2 * cz, 2 * cz + 1, 0..slots).sum();
    let recovers = padded.noisy_part() == x_t;
    let latent = model.sample_latent(&bundle, Guidance::Cfg(5.0), 0, model.config.steps)?;
    let video = model.decode(&latent)?;
    let pass = t == 4
        && bundle.k() == 2
        && slots == 6
        && outside
        && mask == (2 * h * w) as f64
        && recovers
        && latent.shape()[0] == 4
        && video.shape()[0] == 4;
    outcome(
        pass,
        format!("slots {slots}, mask sum {mask} (expected {}), sampled frames {}", 2 * h * w, video.shape()[0]),
    )
}

fn cross_attention_reduction() -> Result<Outcome> {
    let (mut dit, bundle, z, _, t) = tiny_setup(1)?;
    let mut gamma_dit = dit.clone();
    for id in dit.cross_value_projections() {
        let shape = dit.store.get(id).shape().to_vec();
        *dit.store.get_mut(id) = Tensor::zeros(&shape);
    }
    let zero_v = dit.predict_with(&z, t, &bundle, CrossMode::Conditioned)? == dit.predict_with(&z, t, &bundle, CrossMode::Backbone)?;
    gamma_dit.config.gamma = 0.0;
    let mut no_identity = bundle.clone();
    no_identity.c_clip = Tensor::zeros(&[0, bundle.c_clip.last_dim()]);
    let gamma_zero = gamma_dit.predict(&z, t, &bundle)? == gamma_dit.predict(&z, t, &no_identity)?;
    outcome(zero_v && gamma_zero, format!("zeroed values equal backbone: {zero_v}; gamma 0 drops identity term: {gamma_zero}"))
}

fn per_seed_nexus(samples: &[SampleEval]) -> BTreeMap<u64, f64> {
    let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for s in samples {
        let e = acc.entry(s.seed).or_default();
        e.0 += s.nexus_lite;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect()
}

fn conflict_rate(samples: &[SampleEval]) -> f64 {
    let wins: Vec<bool> = samples.iter().filter_map(|s| s.ref_wins).collect();
    wins.iter().filter(|&&w| w).count() as f64 / wins.len().max(1) as f64
}

fn fmt_seeds(m: &BTreeMap<u64, f64>) -> String {
    m.values().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ")
}

struct Ablation {
    full_guided: Vec<SampleEval>,
    full_null: Vec<SampleEval>,
    text_guided: Vec<SampleEval>,
}

fn trained(config: RunConfig) -> Result<Model> {
    let manifest = training_manifest(&config)?;
    let mut tr = Trainer::with_manifest(config, manifest)?;
    tr.run(|_, _| Ok(()))?;
    Ok(tr.model)
}

fn ablation() -> Result<Ablation> {
    let start = Instant::now();
    let full_cfg = RunConfig::desk();
    let text_cfg = RunConfig { joint_mode: subjectflow::conditioning::JointMode::TextOnly, ..RunConfig::desk() };
    let full = trained(full_cfg.clone())?;
    let text = trained(text_cfg)?;
    let manifest = eval_manifest(&full_cfg)?;
    let guided = EvalOptions::from_config(&full_cfg);
    let null = EvalOptions { conditioning: EvalConditioning::Null, ..guided.clone() };
    let out = Ablation {
        full_guided: evaluate_samples(&full, &manifest, &guided)?,
        full_null: evaluate_samples(&full, &manifest, &null)?,
        text_guided: evaluate_samples(&text, &manifest, &guided)?,
    };
    println!("    two desk runs trained and evaluated in {:.0?}", start.elapsed());
    Ok(out)
}

fn subject_binding(a: &Ablation) -> Result<Outcome> {
    let cond = per_seed_nexus(&a.full_guided);
    let null = per_seed_nexus(&a.full_null);
    let wins = cond.iter().filter(|(k, v)| **v > null[k]).count();
    outcome(
        wins >= 18 && cond.len() == 20,
        format!("conditioned beats null in {wins}/{} seeds\n    conditioned {}\n    null        {}", cond.len(), fmt_seeds(&cond), fmt_seeds(&null)),
    )
}

fn ablation_ordering(a: &Ablation) -> Result<Outcome> {
    let full = per_seed_nexus(&a.full_guided);
    let text = per_seed_nexus(&a.text_guided);
    let wins = full.iter().filter(|(k, v)| **v >= text[k]).count();
    outcome(
        wins >= 14 && full.len() == 20,
        format!("joint stream >= text-only in {wins}/{} seeds\n    joint     {}\n    text-only {}", full.len(), fmt_seeds(&full), fmt_seeds(&text)),
    )
}

fn conflict_behavior(a: &Ablation) -> Result<Outcome> {
    let full = conflict_rate(&a.full_guided);
    let text = conflict_rate(&a.text_guided);
    let n = a.full_guided.iter().filter(|s| s.ref_wins.is_some()).count();
    outcome(full > text, format!("reference wins: joint {full:.3}, text-only {text:.3} over {n} conflict samples"))
}

fn reproducibility() -> Result<Outcome> {
    let config = RunConfig { stage1_iters: 5, stage2_iters: 15, eval_prompts: 3, eval_seeds: 2, steps: 10, ..RunConfig::desk() };
    let manifest = training_manifest(&config)?;
    let eval_set = eval_manifest(&config)?;
    let run = || -> Result<(Vec<f64>, Vec<u8>, String)> {
        let mut tr = Trainer::with_manifest(config.clone(), manifest.clone())?;
        tr.run(|_, _| Ok(()))?;
        let report = evaluate(&tr.model, &eval_set, &EvalOptions::from_config(&config))?;
        Ok((tr.losses.clone(), tr.checkpoint().to_bytes(), report.to_text()))
    };
    let a = run()?;
    let b = run()?;
    let same = a == b;

    let mut first = Trainer::with_manifest(config.clone(), manifest.clone())?;
    first.run_until(5, |_, _| Ok(()))?;
    let ck = Checkpoint::from_bytes(&first.checkpoint().to_bytes())?;
    let mut resumed = Trainer::resume(config.clone(), manifest, &ck)?;
    let mut resumed_iters = 0;
    resumed.run(|_, _| {
        resumed_iters += 1;
        Ok(())
    })?;
    let resume_ok = resumed.losses == a.0 && resumed.checkpoint().to_bytes() == a.1 && resumed_iters >= 10;
    outcome(
        same && resume_ok,
        format!("repeat run identical: {same}; resume over {resumed_iters} iterations identical: {resume_ok}"),
    )
}

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut results: Vec<(usize, &str, Result<Outcome>)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &dyn Fn() -> Result<Outcome>| {
        if want(n) {
            let start = Instant::now();
            let r = f();
            let (tag, detail) = match &r {
                Ok(o) => (if o.pass { "PASS" } else { "FAIL" }, o.detail.clone()),
                Err(e) => ("FAIL", format!("error: {e}")),
            };
            println!("{tag} {n:>2} {name} [{:.1?}]: {detail}", start.elapsed());
            results.push((n, name, r));
        }
    };
    run(1, "gradient integrity", &gradient_integrity);
    run(2, "gaussian transport", &gaussian_transport);
    run(3, "point mass", &point_mass);
    run(4, "guidance algebra", &guidance_algebra);
    run(5, "reference slot padding", &padding_structure);
    run(6, "cross-attention reduction", &cross_attention_reduction);
    if [7, 8, 9].iter().any(|&n| want(n)) {
        match ablation() {
            Ok(a) => {
                run(7, "subject binding", &|| subject_binding(&a));
                run(8, "joint stream ablation", &|| ablation_ordering(&a));
                run(9, "conflict behavior", &|| conflict_behavior(&a));
            }
            Err(e) => {
                for (n, name) in [(7, "subject binding"), (8, "joint stream ablation"), (9, "conflict behavior")] {
                    run(n, name, &|| outcome(false, format!("training or evaluation failed: {e}")));
                }
            }
        }
    }
    run(10, "reproducibility", &reproducibility);

    let failed = results.iter().filter(|(_, _, r)| !matches!(r, Ok(o) if o.pass)).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
