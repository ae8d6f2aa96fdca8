use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use subjectflow::encoders::ReferenceImage;
use subjectflow::harness::eval::{eval_manifest, evaluate_samples, CategoryMetrics};
use subjectflow::harness::metrics::nexus_lite;
use subjectflow::harness::*;
use subjectflow::numerics::Tensor;
use subjectflow::params::{Gradients, ParamStore};
use subjectflow::synthdata::palette::rgb_distance;
use subjectflow::synthdata::{classify_pixel, render_reference, Augmentation, ColorId, Mode};
use subjectflow::Error;

fn tiny() -> RunConfig {
    RunConfig {
        n_core: 8,
        n_full: 16,
        batch: 4,
        stage1_iters: 3,
        stage2_iters: 9,
        eval_prompts: 3,
        eval_seeds: 1,
        steps: 4,
        ..RunConfig::desk()
    }
}

fn scalar_store(value: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("x", Tensor::new(&[1], vec![value]).unwrap());
    s
}

fn grads(g: f64) -> Gradients {
    Gradients(vec![Tensor::new(&[1], vec![g]).unwrap()])
}

#[test]
fn adamw_examples() {
    let mut store = scalar_store(0.7);
    let mut st = OptimizerState::new(&store, 1e-2, 0.9, 0.999, 1e-8, 0.0);
    adamw_step(&mut store, &grads(0.0), &mut st).unwrap();
    assert_eq!(store.tensors()[0].data(), &[0.7]);

    let mut store = scalar_store(0.0);
    let mut st = OptimizerState::new(&store, 1e-2, 0.9, 0.999, 1e-8, 0.0);
    adamw_step(&mut store, &grads(1.0), &mut st).unwrap();
    assert!((store.tensors()[0].data()[0] + 1e-2).abs() < 1e-9);
    assert_eq!(st.step, 1);

    let mut store = scalar_store(2.0);
    let mut st = OptimizerState::new(&store, 1e-2, 0.9, 0.999, 1e-8, 0.5);
    adamw_step(&mut store, &grads(0.0), &mut st).unwrap();
    assert!((store.tensors()[0].data()[0] - 2.0 * (1.0 - 1e-2 * 0.5)).abs() < 1e-15);
}

#[test]
fn config_text_roundtrip_and_rejection() {
    let c = tiny();
    let parsed = RunConfig::parse(&c.to_text()).unwrap();
    assert_eq!(parsed, c);
    assert_eq!(parsed.hash(), c.hash());
    let bad = format!("{}\nlearning_rat = 0.1\n", c.to_text());
    assert!(matches!(RunConfig::parse(&bad), Err(Error::Config { .. })));
    let conflict = c.to_text().replace("modes = single,multi", "modes = single,conflict");
    assert!(RunConfig::parse(&conflict).and_then(|c| c.validate()).is_err());
}

#[test]
fn zero_head_initial_loss_matches_expectation() {
    let c = RunConfig { batch: 16, ..tiny() };
    let mut tr = Trainer::new(c).unwrap();
    let mut second_moment = 0.0;
    let mut count = 0;
    for idx in 0..tr.corpus.manifest.records.len() {
        let z0 = tr.corpus.prepared(&tr.model, idx).unwrap().z0.clone();
        second_moment += z0.data().iter().map(|v| v * v).sum::<f64>();
        count += z0.numel();
    }
    let expected = 1.0 + second_moment / count as f64;
    let log = tr.step().unwrap();
    assert!((log.loss - expected).abs() / expected < 0.05, "loss {} vs {expected}", log.loss);
}

#[test]
fn training_changes_only_the_generator() {
    let mut tr = Trainer::new(tiny()).unwrap();
    let frozen = tr.model.encoders.frozen_digest();
    let before = tr.model.dit.store.clone();
    tr.run(|_, log| {
        assert!(log.loss.is_finite());
        Ok(())
    })
    .unwrap();
    assert_eq!(tr.losses.len(), 12);
    assert_eq!(tr.model.encoders.frozen_digest(), frozen);
    let connector = tr.model.dit.connector().params();
    assert!(connector.iter().any(|&id| tr.model.dit.store.get(id) != before.get(id)));
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut tr = Trainer::new(tiny()).unwrap();
        tr.run(|_, _| Ok(())).unwrap();
        tr.checkpoint().to_bytes()
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_matches_the_unbroken_run() {
    let c = tiny();
    let manifest = training_manifest(&c).unwrap();
    let mut unbroken = Trainer::with_manifest(c.clone(), manifest.clone()).unwrap();
    unbroken.run(|_, _| Ok(())).unwrap();

    let mut first = Trainer::with_manifest(c.clone(), manifest.clone()).unwrap();
    first.run_until(2, |_, _| Ok(())).unwrap();
    let bytes = first.checkpoint().to_bytes();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let mut resumed = Trainer::resume(c, manifest, &ck).unwrap();
    resumed.run(|_, _| Ok(())).unwrap();

    assert_eq!(resumed.losses, unbroken.losses);
    assert_eq!(resumed.checkpoint().to_bytes(), unbroken.checkpoint().to_bytes());
}

#[test]
fn checkpoint_roundtrip_and_config_guard() {
    let mut tr = Trainer::new(tiny()).unwrap();
    tr.run_until(2, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    tr.checkpoint().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let again = dir.path().join("b.ckpt");
    loaded.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(loaded.config().unwrap(), tiny());

    let other = RunConfig { lr: 5e-4, ..tiny() };
    assert!(loaded.check_config(&other).is_err());
    assert!(Trainer::resume(other.clone(), training_manifest(&other).unwrap(), &loaded).is_err());

    let mut bytes = loaded.to_bytes();
    bytes.push(0);
    assert!(Checkpoint::from_bytes(&bytes).is_err());
    assert!(Checkpoint::from_bytes(&loaded.to_bytes()[..20]).is_err());
}

#[test]
fn non_finite_loss_aborts_with_snapshot() {
    let c = RunConfig { lr: 1e250, ..tiny() };
    let mut tr = Trainer::new(c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    tr.snapshot_dir = Some(dir.path().to_path_buf());
    let err = tr.run(|_, _| Ok(())).unwrap_err();
    let Error::NonFiniteLoss { snapshot, .. } = err else { panic!("unexpected error {err}") };
    assert!(snapshot.contains("saved to"));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

fn sample_report() -> EvalReport {
    let mut categories = BTreeMap::new();
    let m = |n, x, p, r| CategoryMetrics { samples: n, nexus_lite: x, prompt_follow: p, ref_wins_conflict: r };
    categories.insert("all".to_string(), m(9, 0.123456789012345, 1.0 / 3.0, Some(0.5)));
    categories.insert("single".to_string(), m(3, 0.9, 0.0, None));
    categories.insert("conflict".to_string(), m(3, 0.1 + 0.2, 1.0, Some(0.5)));
    EvalReport { categories }
}

#[test]
fn report_roundtrips_in_both_formats() {
    let r = sample_report();
    assert_eq!(EvalReport::parse(&r.to_text()).unwrap(), r);
    assert_eq!(EvalReport::parse_table(&r.to_table()).unwrap(), r);
    assert_eq!(EvalReport::parse(&r.to_text()).unwrap().to_text(), r.to_text());
}

fn static_video(img: &Tensor, frames: usize) -> Tensor {
    let mut data = Vec::new();
    for _ in 0..frames {
        data.extend_from_slice(img.data());
    }
    let s = img.shape();
    Tensor::new(&[frames, 3, s[1], s[2]], data).unwrap()
}

#[test]
fn nexus_self_similarity_and_misses() {
    let model = Model::new(tiny()).unwrap();
    let corpus = Corpus::new(training_manifest(&model.config).unwrap());
    let s = corpus.sample(&model, 0).unwrap();
    let colors: Vec<ColorId> = s.subjects.iter().map(|x| x.color).collect();
    let size = model.config.image_size;
    let clean: Vec<ReferenceImage> = s
        .subjects
        .iter()
        .map(|x| ReferenceImage::new(render_reference(x, Augmentation::IDENTITY, size, size).unwrap(), None).unwrap())
        .collect();
    let video = static_video(&clean[0].pixels, 4);
    let r = nexus_lite(&model.encoders, &video, &clean[..1], &colors[..1], 3).unwrap();
    assert!(r.score >= 0.99, "{r:?}");

    let blank = Tensor::zeros(&[4, 3, size, size]);
    let r = nexus_lite(&model.encoders, &blank, &clean, &colors, 3).unwrap();
    assert_eq!((r.score, r.detections, r.misses), (0.0, 0, 4 * colors.len()));
}

/// Replaces every pixel of color `from` by the color `to`.
fn recolor(video: &Tensor, from: ColorId, to: ColorId) -> Tensor {
    let s = video.shape();
    let plane = s[2] * s[3];
    let mut out = video.clone();
    for f in 0..s[0] {
        let base = f * 3 * plane;
        for i in 0..plane {
            let px = [0, 1, 2].map(|c| video.data()[base + c * plane + i]);
            if let Some(c) = classify_pixel(px) {
                if c == from {
                    let cov = px.iter().zip(from.rgb()).map(|(a, b)| a * b).sum::<f64>()
                        / from.rgb().iter().map(|v| v * v).sum::<f64>();
                    for ch in 0..3 {
                        out.data_mut()[base + ch * plane + i] = cov * to.rgb()[ch];
                    }
                }
            }
        }
    }
    out
}

#[test]
fn recolored_subjects_score_lower() {
    let model = Model::new(RunConfig { n_core: 30, n_full: 60, ..tiny() }).unwrap();
    let corpus = Corpus::new(training_manifest(&model.config).unwrap());
    let mut margins = Vec::new();
    for idx in 0..60 {
        let s = corpus.sample(&model, idx).unwrap();
        let c = s.subjects[0].color;
        let far = ColorId::all()
            .max_by(|a, b| {
                let d = |x: &ColorId| rgb_distance(x.rgb(), c.rgb());
                d(a).partial_cmp(&d(b)).unwrap()
            })
            .unwrap();
        let refs = &s.ref_images[..1];
        let same = nexus_lite(&model.encoders, &s.video, refs, &[c], 3).unwrap().score;
        let swapped = nexus_lite(&model.encoders, &recolor(&s.video, c, far), refs, &[c], 3).unwrap().score;
        margins.push(same - swapped);
    }
    assert!(margins.len() >= 50);
    let mean = margins.iter().sum::<f64>() / margins.len() as f64;
    assert!(margins.iter().all(|&m| m > 0.0), "{margins:?}");
    assert!(mean > 0.5, "mean margin {mean}");
}

#[test]
fn untrained_model_scores_like_noise() {
    let c = RunConfig { eval_prompts: 6, ..tiny() };
    let model = Model::new(c.clone()).unwrap();
    let manifest = eval_manifest(&c).unwrap();
    let seeds: Vec<u64> = (0..6).collect();
    let opts = EvalOptions { seeds: seeds.clone(), steps: 4, conditioning: EvalConditioning::Guided(5.0) };
    let untrained: Vec<f64> = evaluate_samples(&model, &manifest, &opts).unwrap().iter().map(|s| s.nexus_lite).collect();

    let corpus = Corpus::new(manifest.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut noise = Vec::new();
    for r in &manifest.records {
        let s = corpus.sample(&model, r.index).unwrap();
        let colors: Vec<ColorId> = s.subjects.iter().map(|x| x.color).collect();
        for _ in &seeds {
            let latent = Tensor::randn(&model.latent_shape(), &mut rng);
            let video = model.decode(&latent).unwrap();
            noise.push(nexus_lite(&model.encoders, &video, &s.ref_images, &colors, c.min_area).unwrap().score);
        }
    }
    let stats = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (x.len() - 1) as f64;
        (m, v / x.len() as f64)
    };
    let (mu_a, se_a) = stats(&untrained);
    let (mu_b, se_b) = stats(&noise);
    assert!((mu_a - mu_b).abs() <= 2.0 * (se_a + se_b).sqrt(), "untrained {mu_a} vs noise {mu_b}");
}

#[test]
fn evaluation_is_deterministic_and_bounded() {
    let mut tr = Trainer::new(tiny()).unwrap();
    tr.run_until(3, |_, _| Ok(())).unwrap();
    let manifest = eval_manifest(&tr.model.config).unwrap();
    let opts = EvalOptions::from_config(&tr.model.config);
    let a = evaluate(&tr.model, &manifest, &opts).unwrap();
    let b = evaluate(&tr.model, &manifest, &opts).unwrap();
    assert_eq!(a.to_text(), b.to_text());
    for m in a.categories.values() {
        assert!((0.0..=1.0).contains(&m.nexus_lite));
        assert!((0.0..=1.0).contains(&m.prompt_follow));
        assert!(m.ref_wins_conflict.is_none_or(|r| (0.0..=1.0).contains(&r)));
    }
    assert!(a.categories.contains_key(Mode::Conflict.name()));
}
