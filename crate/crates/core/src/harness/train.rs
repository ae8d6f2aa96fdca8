//! Two-stage training loop.
//!
//! Stage 1 draws batches from the core tier, stage 2 from every training
//! record. All randomness of iteration `i` comes from streams keyed by
//! `(seed, i, ...)`, so a run resumed from a checkpoint continues exactly
//! as the unbroken run would have.

use std::path::PathBuf;

use rand::Rng;
use rayon::prelude::*;

use crate::conditioning::cfg_dropout;
use crate::error::{Error, Result};
use crate::flow::{forward_diffuse, velocity_target};
use crate::numerics::{Tape, Tensor};
use crate::params::{Bound, Gradients};
use crate::rng;
use crate::synthdata::{build_corpus, Manifest, Mode, Tier};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::model::{Corpus, Model, Prepared};
use super::optim::{adamw_step, OptimizerState};

const BATCH_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;

/// The training manifest a config describes.
pub fn training_manifest(config: &RunConfig) -> Result<Manifest> {
    build_corpus(config.n_core, config.n_full, &config.modes, &config.geometry(), config.corpus_seed)
}

/// Per-iteration record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterLog {
    pub iteration: usize,
    pub stage: u8,
    pub loss: f64,
    pub grad_norm: f64,
}

pub struct Trainer {
    pub model: Model,
    pub corpus: Corpus,
    pub optimizer: OptimizerState,
    /// Completed iterations.
    pub iteration: usize,
    pub losses: Vec<f64>,
    /// Where a diagnostic checkpoint is written if the loss goes non-finite.
    pub snapshot_dir: Option<PathBuf>,
    core_pool: Vec<usize>,
    full_pool: Vec<usize>,
}

/// Loss and gradients of one sample.
pub fn sample_loss(model: &Model, prepared: &Prepared, t: f64, eps: &Tensor, bundle_dropped: bool) -> Result<(f64, Gradients)> {
    let z_t = forward_diffuse(&prepared.z0, eps, t)?;
    let target = velocity_target(&prepared.z0, eps)?;
    let null;
    let bundle = if bundle_dropped {
        null = prepared.bundle.to_null();
        &null
    } else {
        &prepared.bundle
    };
    let mut tape = Tape::new();
    let mut p = Bound::trainable(&model.dit.store);
    let v = model.dit.u_theta(&mut tape, &mut p, &z_t, t, bundle)?;
    let target = tape.constant(target);
    let loss = tape.mse(v, target)?;
    tape.backward(loss)?;
    Ok((tape.value(loss).item(), p.gradients(&tape)))
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        let manifest = training_manifest(&config)?;
        Self::with_manifest(config, manifest)
    }

    pub fn with_manifest(config: RunConfig, manifest: Manifest) -> Result<Self> {
        let model = Model::new(config)?;
        let c = &model.config;
        let optimizer = OptimizerState::new(&model.dit.store, c.lr, c.beta1, c.beta2, c.adam_eps, c.weight_decay);
        let trainable = |r: &&crate::synthdata::ManifestRecord| r.mode != Mode::Conflict;
        let core_pool: Vec<usize> =
            manifest.records.iter().filter(|r| r.tier == Tier::Core).filter(trainable).map(|r| r.index).collect();
        let full_pool: Vec<usize> = manifest.records.iter().filter(trainable).map(|r| r.index).collect();
        if full_pool.is_empty() {
            return Err(Error::invalid("training corpus has no usable samples"));
        }
        if c.stage1_iters > 0 && core_pool.is_empty() {
            return Err(Error::invalid("stage 1 needs core-tier samples"));
        }
        Ok(Trainer {
            model,
            corpus: Corpus::new(manifest),
            optimizer,
            iteration: 0,
            losses: Vec::new(),
            snapshot_dir: None,
            core_pool,
            full_pool,
        })
    }

    /// Restores parameters, optimizer moments and progress from a checkpoint
    /// written under the same config.
    pub fn resume(config: RunConfig, manifest: Manifest, ck: &Checkpoint) -> Result<Self> {
        ck.check_config(&config)?;
        let mut tr = Self::with_manifest(config, manifest)?;
        tr.model.dit.store.load_from(&ck.params)?;
        if ck.optimizer.m.len() != tr.model.dit.store.len() {
            return Err(Error::format("checkpoint", "optimizer moments do not match parameters"));
        }
        tr.optimizer = ck.optimizer.clone();
        tr.iteration = ck.iteration as usize;
        tr.losses = ck.losses.clone();
        Ok(tr)
    }

    pub fn stage(&self) -> u8 {
        if self.iteration < self.model.config.stage1_iters {
            1
        } else {
            2
        }
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.model.config.total_iters()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let c = &self.model.config;
        Checkpoint {
            config_hash: c.hash(),
            config_text: c.to_text(),
            stage: self.stage(),
            iteration: self.iteration as u64,
            rng_seed: c.seed,
            params: self.model.dit.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            optimizer: self.optimizer.clone(),
            losses: self.losses.clone(),
        }
    }

    /// Runs one iteration and returns its log entry.
    pub fn step(&mut self) -> Result<IterLog> {
        let c = self.model.config.clone();
        let it = self.iteration;
        let stage = self.stage();
        let pool = if stage == 1 { &self.core_pool } else { &self.full_pool };
        let mut brng = rng::stream(&[c.seed, BATCH_STREAM, it as u64]);
        let picks: Vec<usize> = (0..c.batch).map(|_| pool[brng.random_range(0..pool.len())]).collect();

        // Per-sample noise, time and dropout decision.
        let mut plans = Vec::with_capacity(c.batch);
        for (b, &idx) in picks.iter().enumerate() {
            let prepared = self.corpus.prepared(&self.model, idx)?.clone();
            let mut srng = rng::stream(&[c.seed, SAMPLE_STREAM, it as u64, b as u64]);
            let t: f64 = srng.random();
            let eps = Tensor::randn(prepared.z0.shape(), &mut srng);
            let dropped = cfg_dropout(prepared.bundle.clone(), c.cfg_dropout, &mut srng)?.dropped;
            plans.push((prepared, t, eps, dropped));
        }
        let model = &self.model;
        let results: Vec<Result<(f64, Gradients)>> =
            plans.par_iter().map(|(p, t, eps, dropped)| sample_loss(model, p, *t, eps, *dropped)).collect();

        let mut grads = Gradients::zeros_like(&self.model.dit.store);
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            grads.add_assign(&g);
        }
        let inv = 1.0 / c.batch as f64;
        loss *= inv;
        grads.scale(inv);
        let grad_norm = grads.norm();
        if !loss.is_finite() || !grads.is_finite() {
            let times: Vec<String> = plans.iter().map(|p| format!("{:.4}", p.1)).collect();
            let mut snapshot = format!(
                "stage {stage}, batch {:?}, t {:?}, loss {loss}, grad norm {grad_norm}",
                picks, times
            );
            if let Some(dir) = &self.snapshot_dir {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("nonfinite-iter{it}.ckpt"));
                self.checkpoint().save(&path)?;
                snapshot.push_str(&format!(", state saved to {}", path.display()));
            }
            return Err(Error::NonFiniteLoss { iteration: it, snapshot });
        }
        adamw_step(&mut self.model.dit.store, &grads, &mut self.optimizer)?;
        self.iteration += 1;
        self.losses.push(loss);
        Ok(IterLog { iteration: it, stage, loss, grad_norm })
    }

    /// Steps until `total` iterations are complete (or the schedule ends).
    pub fn run_until(&mut self, total: usize, mut on_iter: impl FnMut(&Trainer, &IterLog) -> Result<()>) -> Result<()> {
        let end = total.min(self.model.config.total_iters());
        while self.iteration < end {
            let log = self.step()?;
            on_iter(self, &log)?;
        }
        Ok(())
    }

    /// Runs the whole schedule.
    pub fn run(&mut self, on_iter: impl FnMut(&Trainer, &IterLog) -> Result<()>) -> Result<()> {
        self.run_until(self.model.config.total_iters(), on_iter)
    }
}
