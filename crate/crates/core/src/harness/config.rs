//! Line-oriented `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::conditioning::{JointMode, DEFAULT_K_MAX};
use crate::dit::DiTConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::flow::SamplerConfig;
use crate::synthdata::{Geometry, Mode};

/// Every knob of a run. Unknown keys are rejected on parse.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // Frozen encoders and geometry.
    pub image_size: usize,
    pub frames: usize,
    pub vae_stride: usize,
    pub d_mllm: usize,
    pub mllm_heads: usize,
    pub mllm_blocks: usize,
    pub mllm_patch: usize,
    pub d_cond: usize,
    pub text_heads: usize,
    pub id_patch: usize,
    pub connector_hidden: usize,
    pub encoder_seed: u64,
    // Generator.
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub patch_t: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub gamma: f64,
    pub ffn_mult: usize,
    // Conditioning.
    pub joint_mode: JointMode,
    pub k_max: usize,
    pub cfg_dropout: f64,
    // Corpus.
    pub n_core: usize,
    pub n_full: usize,
    pub modes: Vec<Mode>,
    pub corpus_seed: u64,
    pub size_min: f64,
    pub size_max: f64,
    pub core_speed: f64,
    pub full_speed: f64,
    pub subjects_multi: usize,
    pub augment: bool,
    // Optimization.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    // Sampling and evaluation.
    pub steps: usize,
    pub cfg_scale: f64,
    pub eval_prompts: usize,
    pub eval_seeds: usize,
    pub eval_seed: u64,
    pub eval_modes: Vec<Mode>,
    pub min_area: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = EncoderConfig::default();
        let g = Geometry::default();
        RunConfig {
            image_size: e.image_size,
            frames: g.frames,
            vae_stride: e.vae_stride,
            d_mllm: e.d_mllm,
            mllm_heads: e.mllm_heads,
            mllm_blocks: e.mllm_blocks,
            mllm_patch: e.mllm_patch,
            d_cond: e.d_cond,
            text_heads: e.text_heads,
            id_patch: e.id_patch,
            connector_hidden: e.connector_hidden,
            encoder_seed: e.seed,
            depth: 2,
            d_model: 64,
            heads: 4,
            patch_t: 1,
            patch_h: 1,
            patch_w: 1,
            gamma: 1.0,
            ffn_mult: 2,
            joint_mode: JointMode::MllmAndText,
            k_max: DEFAULT_K_MAX,
            cfg_dropout: 0.1,
            n_core: 500,
            n_full: 2000,
            modes: vec![Mode::Single, Mode::Multi],
            corpus_seed: 1,
            size_min: g.size_min,
            size_max: g.size_max,
            core_speed: g.core_speed,
            full_speed: g.full_speed,
            subjects_multi: g.subjects_multi,
            augment: g.augment,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            batch: 32,
            stage1_iters: 300,
            stage2_iters: 1500,
            seed: 0,
            checkpoint_every: 0,
            steps: 50,
            cfg_scale: 5.0,
            eval_prompts: 30,
            eval_seeds: 3,
            eval_seed: 1000,
            eval_modes: vec![Mode::Single, Mode::Multi, Mode::Conflict],
            min_area: 4,
        }
    }
}

impl RunConfig {
    /// A 16x16, 4-frame setup that trains both ablation arms and evaluates
    /// them over 20 seeds in roughly ten minutes on a single core.
    pub fn desk() -> Self {
        RunConfig {
            image_size: 16,
            frames: 4,
            vae_stride: 4,
            mllm_patch: 8,
            id_patch: 4,
            size_min: 3.0,
            size_max: 3.5,
            full_speed: 1.5,
            n_core: 200,
            n_full: 800,
            batch: 16,
            stage1_iters: 300,
            stage2_iters: 1200,
            eval_prompts: 12,
            eval_seeds: 20,
            min_area: 3,
            ..RunConfig::default()
        }
    }
}

fn modes_text(m: &[Mode]) -> String {
    m.iter().map(|m| m.name()).collect::<Vec<_>>().join(",")
}

fn parse_modes(v: &str) -> Result<Vec<Mode>> {
    v.split(',').map(|s| Mode::parse(s.trim())).collect()
}

macro_rules! fields {
    ($mac:ident) => {
        $mac! {
            image_size, frames, vae_stride, d_mllm, mllm_heads, mllm_blocks, mllm_patch, d_cond,
            text_heads, id_patch, connector_hidden, encoder_seed, depth, d_model, heads, patch_t,
            patch_h, patch_w, gamma, ffn_mult, k_max, cfg_dropout, n_core, n_full, corpus_seed,
            size_min, size_max, core_speed, full_speed, subjects_multi, augment, lr, beta1, beta2,
            adam_eps, weight_decay, batch, stage1_iters, stage2_iters, seed, checkpoint_every,
            steps, cfg_scale, eval_prompts, eval_seeds, eval_seed, min_area
        }
    };
}

impl RunConfig {
    /// Canonical text: every key in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        macro_rules! emit {
            ($($f:ident),*) => {$( let _ = writeln!(s, "{} = {}", stringify!($f), self.$f); )*};
        }
        fields!(emit);
        let _ = writeln!(s, "joint_mode = {}", self.joint_mode.name());
        let _ = writeln!(s, "modes = {}", modes_text(&self.modes));
        let _ = writeln!(s, "eval_modes = {}", modes_text(&self.eval_modes));
        s
    }

    /// Starts from defaults and applies each `key = value` line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Config { line: n + 1, msg };
            let (key, value) = line.split_once('=').ok_or_else(|| bad(format!("expected key = value, got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            macro_rules! assign {
                ($($f:ident),*) => {
                    match key {
                        $( stringify!($f) => {
                            c.$f = value.parse().map_err(|_| bad(format!("bad value '{value}' for {key}")))?;
                        } )*
                        "joint_mode" => c.joint_mode = JointMode::parse(value).map_err(|e| bad(e.to_string()))?,
                        "modes" => c.modes = parse_modes(value).map_err(|e| bad(e.to_string()))?,
                        "eval_modes" => c.eval_modes = parse_modes(value).map_err(|e| bad(e.to_string()))?,
                        _ => return Err(bad(format!("unknown key '{key}'"))),
                    }
                };
            }
            fields!(assign);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    /// SHA-256 of the canonical text.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        self.dit_config().validate()?;
        self.sampler().validate()?;
        if self.image_size % self.vae_stride != 0 {
            return Err(Error::invalid("vae_stride must divide image_size"));
        }
        if !(0.0..1.0).contains(&self.cfg_dropout) {
            return Err(Error::invalid("cfg_dropout must lie in [0, 1)"));
        }
        if self.batch == 0 || self.frames == 0 {
            return Err(Error::invalid("batch and frames must be positive"));
        }
        if self.modes.contains(&Mode::Conflict) {
            return Err(Error::invalid("conflict samples are evaluation-only"));
        }
        if self.n_core > self.n_full {
            return Err(Error::invalid("n_core must not exceed n_full"));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            image_size: self.image_size,
            vae_stride: self.vae_stride,
            d_mllm: self.d_mllm,
            mllm_heads: self.mllm_heads,
            mllm_blocks: self.mllm_blocks,
            mllm_patch: self.mllm_patch,
            d_cond: self.d_cond,
            text_heads: self.text_heads,
            id_patch: self.id_patch,
            connector_hidden: self.connector_hidden,
            seed: self.encoder_seed,
        }
    }

    pub fn latent_side(&self) -> usize {
        self.image_size / self.vae_stride
    }

    pub fn dit_config(&self) -> DiTConfig {
        let side = self.latent_side();
        DiTConfig {
            depth: self.depth,
            d_model: self.d_model,
            heads: self.heads,
            patch: (self.patch_t, self.patch_h, self.patch_w),
            d_cond: self.d_cond,
            d_mllm: self.d_mllm,
            connector_hidden: self.connector_hidden,
            gamma: self.gamma,
            latent_channels: 3 * self.vae_stride * self.vae_stride,
            ffn_mult: self.ffn_mult,
            max_slots: (self.frames + self.k_max).div_ceil(self.patch_t.max(1)),
            max_side: side.div_ceil(self.patch_h.min(self.patch_w).max(1)),
        }
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            frames: self.frames,
            height: self.image_size,
            width: self.image_size,
            size_min: self.size_min,
            size_max: self.size_max,
            core_speed: self.core_speed,
            full_speed: self.full_speed,
            subjects_multi: self.subjects_multi,
            augment: self.augment,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig { steps: self.steps, cfg_scale: self.cfg_scale }
    }

    pub fn total_iters(&self) -> usize {
        self.stage1_iters + self.stage2_iters
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
