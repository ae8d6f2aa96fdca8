use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use subjectflow::encoders::ReferenceImage;
use subjectflow::flow::Guidance;
use subjectflow::harness::check::run_check;
use subjectflow::harness::eval::eval_manifest;
use subjectflow::harness::*;
use subjectflow::synthdata::io::{dump_video, load_tensor, save_tensor};
use subjectflow::synthdata::Manifest;

#[derive(Parser)]
#[command(name = "subjectflow", version, about = "Subject-conditioned rectified-flow video generation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the training and evaluation manifests, optionally rendering samples.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "data")]
        out: PathBuf,
        /// Render the first N training samples (video frames and references).
        #[arg(long, default_value_t = 0)]
        render: usize,
    },
    /// Runs the two-stage schedule and writes a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training manifest; regenerated from the config when absent.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value = "model.ckpt")]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Generates one clip from a prompt and reference images.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Reference images stored as `.sft` tensors of shape `[3, H, W]`.
        #[arg(long, num_args = 0..)]
        refs: Vec<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "sample")]
        out: PathBuf,
    },
    /// Scores a checkpoint on an evaluation manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation manifest; derived from the checkpoint config when absent.
        #[arg(long)]
        eval_set: Option<PathBuf>,
        /// Writes the structured report here and the flat table next to it.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Sample with null conditioning instead of guidance.
        #[arg(long)]
        null: bool,
    },
    /// Runs the gradient and invariant suite; exits non-zero on any failure.
    Check,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let config = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::desk(),
    };
    config.validate()?;
    Ok(config)
}

fn gen_data(config: Option<&Path>, out: &Path, render: usize) -> Result<()> {
    let config = load_config(config)?;
    std::fs::create_dir_all(out)?;
    let train = training_manifest(&config)?;
    let eval = eval_manifest(&config)?;
    train.save(&out.join("train.manifest"))?;
    eval.save(&out.join("eval.manifest"))?;
    config.save(&out.join("run.cfg"))?;
    let model = Model::new(config)?;
    let corpus = Corpus::new(train.clone());
    for idx in 0..render.min(train.records.len()) {
        let s = corpus.sample(&model, idx)?;
        let stem = format!("sample{idx:04}");
        dump_video(out, &stem, &s.video)?;
        for (j, r) in s.ref_images.iter().enumerate() {
            save_tensor(&out.join(format!("{stem}_ref{j}.sft")), &r.pixels)?;
        }
        std::fs::write(out.join(format!("{stem}.prompt")), model.encoders.vocab().detokenize(&s.prompt_tokens)?)?;
    }
    println!(
        "wrote {} training records and {} evaluation records to {}",
        train.records.len(),
        eval.records.len(),
        out.display()
    );
    Ok(())
}

fn train_cmd(config: Option<&Path>, manifest: Option<&Path>, resume: Option<&Path>, out: &Path, log_every: usize) -> Result<()> {
    let config = load_config(config)?;
    let manifest = match manifest {
        Some(p) => Manifest::load(p)?,
        None => training_manifest(&config)?,
    };
    let mut trainer = match resume {
        Some(p) => Trainer::resume(config.clone(), manifest, &Checkpoint::load(p)?)?,
        None => Trainer::with_manifest(config.clone(), manifest)?,
    };
    trainer.snapshot_dir = out.parent().map(|p| p.join("nonfinite"));
    let every = config.checkpoint_every;
    trainer.run(|tr, log| {
        if log_every > 0 && (log.iteration + 1) % log_every == 0 {
            eprintln!("iter {:>5} stage {} loss {:.5} grad {:.4}", log.iteration + 1, log.stage, log.loss, log.grad_norm);
        }
        if every > 0 && tr.iteration % every == 0 {
            tr.checkpoint().save(out)?;
        }
        Ok(())
    })?;
    trainer.checkpoint().save(out)?;
    println!("saved {} after {} iterations", out.display(), trainer.iteration);
    Ok(())
}

fn sample_cmd(
    checkpoint: &Path,
    prompt: &str,
    refs: &[PathBuf],
    steps: Option<usize>,
    cfg_scale: Option<f64>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let model = Model::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let tokens = model.encoders.vocab().tokenize(prompt)?;
    let mut images = Vec::with_capacity(refs.len());
    for path in refs {
        let t = load_tensor(path).with_context(|| format!("reading reference {}", path.display()))?;
        let t = if t.ndim() == 4 && t.shape()[0] == 1 {
            let shape = t.shape()[1..].to_vec();
            t.reshape(&shape)?
        } else {
            t
        };
        images.push(ReferenceImage::new(t, None)?);
    }
    let bundle = model.encode_condition(&tokens, &images)?;
    let scale = cfg_scale.unwrap_or(model.config.cfg_scale);
    if scale < 0.0 {
        bail!("--cfg-scale must be non-negative");
    }
    let latent = model.sample_latent(&bundle, Guidance::Cfg(scale), seed, steps.unwrap_or(model.config.steps))?;
    let video = model.decode(&latent)?;
    let stem = out.file_name().and_then(|s| s.to_str()).unwrap_or("sample").to_string();
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    dump_video(dir, &stem, &video)?;
    println!("wrote {}.sft and {} frames to {}", stem, video.shape()[0], dir.display());
    Ok(())
}

fn eval_cmd(
    checkpoint: &Path,
    eval_set: Option<&Path>,
    report: Option<&Path>,
    seeds: Option<usize>,
    steps: Option<usize>,
    null: bool,
) -> Result<()> {
    let model = Model::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let manifest = match eval_set {
        Some(p) => Manifest::load(p)?,
        None => eval_manifest(&model.config)?,
    };
    let mut options = EvalOptions::from_config(&model.config);
    if let Some(n) = seeds {
        options.seeds = (0..n as u64).collect();
    }
    if let Some(s) = steps {
        options.steps = s;
    }
    if null {
        options.conditioning = EvalConditioning::Null;
    }
    let r = evaluate(&model, &manifest, &options)?;
    print!("{}", r.to_text());
    if let Some(path) = report {
        std::fs::write(path, r.to_text())?;
        std::fs::write(path.with_extension("tsv"), r.to_table())?;
    }
    Ok(())
}

fn check() -> Result<bool> {
    let lines = run_check()?;
    let mut ok = true;
    for l in &lines {
        let tag = if l.passed() { "ok  " } else { "FAIL" };
        println!("{tag} {:<28} max rel err {:.3e}", l.name, l.report.max_rel_err);
        ok &= l.passed();
    }
    println!("{} of {} checks passed", lines.iter().filter(|l| l.passed()).count(), lines.len());
    Ok(ok)
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { config, out, render } => gen_data(config.as_deref(), &out, render)?,
        Command::Train { config, manifest, resume, out, log_every } => {
            train_cmd(config.as_deref(), manifest.as_deref(), resume.as_deref(), &out, log_every)?
        }
        Command::Sample { checkpoint, prompt, refs, steps, cfg_scale, seed, out } => {
            sample_cmd(&checkpoint, &prompt, &refs, steps, cfg_scale, seed, &out)?
        }
        Command::Eval { checkpoint, eval_set, report, seeds, steps, null } => {
            eval_cmd(&checkpoint, eval_set.as_deref(), report.as_deref(), seeds, steps, null)?
        }
        Command::Check => {
            if !check()? {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
