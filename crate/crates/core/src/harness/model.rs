//! A run's frozen encoders plus trainable generator, and per-sample
//! preparation of latents and conditioning.

use std::collections::HashMap;

use crate::conditioning::ConditioningBundle;
use crate::dit::DiTParams;
use crate::encoders::{EncoderStack, ReferenceImage, Vocab};
use crate::error::{Error, Result};
use crate::flow::{integrate, Guidance, VelocityField};
use crate::numerics::Tensor;
use crate::rng;
use crate::synthdata::{generate_sample, Manifest, TrainingSample};

use super::config::RunConfig;

pub struct Model {
    pub config: RunConfig,
    pub encoders: EncoderStack,
    pub dit: DiTParams,
}

/// What the generator sees of one sample.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub z0: Tensor,
    pub bundle: ConditioningBundle,
}

impl Model {
    /// Fresh model: encoders from `encoder_seed`, generator from `seed`.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let encoders = EncoderStack::new(config.encoder_config(), Vocab::toy())?;
        let mut init = rng::stream(&[config.seed, 0xD17]);
        let dit = DiTParams::new(config.dit_config(), &mut init)?;
        Ok(Model { config, encoders, dit })
    }

    /// Model described by a checkpoint's embedded config, with its weights.
    pub fn from_checkpoint(ck: &super::Checkpoint) -> Result<Self> {
        let mut m = Model::new(ck.config()?)?;
        m.dit.store.load_from(&ck.params)?;
        Ok(m)
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        let s = self.config.latent_side();
        [self.config.frames, self.dit.config.latent_channels, s, s]
    }

    pub fn encode_condition(&self, prompt: &[usize], refs: &[ReferenceImage]) -> Result<ConditioningBundle> {
        ConditioningBundle::encode(&self.encoders, prompt, refs, self.config.joint_mode, self.config.k_max)
    }

    pub fn prepare(&self, sample: &TrainingSample) -> Result<Prepared> {
        Ok(Prepared {
            z0: self.encoders.vae_encode(&sample.video)?,
            bundle: self.encode_condition(&sample.prompt_tokens, &sample.ref_images)?,
        })
    }

    /// Samples a latent video. `guided` uses classifier-free guidance with
    /// the configured scale; otherwise one branch is evaluated per step.
    pub fn sample_latent(&self, bundle: &ConditioningBundle, guidance: Guidance, seed: u64, steps: usize) -> Result<Tensor> {
        let field = BundleField { dit: &self.dit, cond: bundle, null: bundle.to_null() };
        let mut r = rng::stream(&[seed]);
        let eps = Tensor::randn(&self.latent_shape(), &mut r);
        integrate(&field, eps, steps, guidance, |_| {})
    }

    /// Pixels `[T, 3, H, W]` of a sampled latent.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        self.encoders.vae_decode(latent)
    }
}

/// Conditional and null branches of a trained generator for one bundle.
pub struct BundleField<'a> {
    pub dit: &'a DiTParams,
    pub cond: &'a ConditioningBundle,
    pub null: ConditioningBundle,
}

impl VelocityField for BundleField<'_> {
    fn velocity(&self, z: &Tensor, t: f64, conditional: bool) -> Result<Tensor> {
        self.dit.predict(z, t, if conditional { self.cond } else { &self.null })
    }
}

/// Lazily regenerated and encoded corpus samples.
pub struct Corpus {
    pub manifest: Manifest,
    cache: HashMap<usize, Prepared>,
}

impl Corpus {
    pub fn new(manifest: Manifest) -> Self {
        Corpus { manifest, cache: HashMap::new() }
    }

    pub fn sample(&self, model: &Model, index: usize) -> Result<TrainingSample> {
        let record = self
            .manifest
            .records
            .get(index)
            .ok_or_else(|| Error::invalid(format!("corpus has no sample {index}")))?;
        generate_sample(model.encoders.vocab(), &model.config.geometry(), record)
    }

    pub fn prepared(&mut self, model: &Model, index: usize) -> Result<&Prepared> {
        if !self.cache.contains_key(&index) {
            let p = model.prepare(&self.sample(model, index)?)?;
            self.cache.insert(index, p);
        }
        Ok(&self.cache[&index])
    }
}
