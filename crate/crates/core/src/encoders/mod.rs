//! Frozen toy encoders (multimodal, text, identity, VAE) and the trainable
//! connector that maps multimodal hidden states into the conditioning width.

pub mod image;
pub mod vae;
pub mod vocab;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use image::{patchify_image, ReferenceImage, TokenKind, TokenSequence};
pub use vae::Vae;
pub use vocab::Vocab;

use crate::error::{Error, Result};
use crate::nn::{sinusoidal_table, EncoderBlock, Linear, Mlp, LN_EPS};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Frame and reference-image side length in pixels.
    pub image_size: usize,
    pub vae_stride: usize,
    pub d_mllm: usize,
    pub mllm_heads: usize,
    pub mllm_blocks: usize,
    /// Patch side for multimodal image tokens.
    pub mllm_patch: usize,
    pub d_cond: usize,
    pub text_heads: usize,
    /// Patch side for identity tokens.
    pub id_patch: usize,
    pub connector_hidden: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 32,
            vae_stride: 4,
            d_mllm: 32,
            mllm_heads: 2,
            mllm_blocks: 2,
            mllm_patch: 8,
            d_cond: 32,
            text_heads: 2,
            id_patch: 8,
            connector_hidden: 64,
            seed: 17,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        for (name, p) in [("vae_stride", self.vae_stride), ("mllm_patch", self.mllm_patch), ("id_patch", self.id_patch)] {
            if p == 0 || s % p != 0 {
                return Err(Error::invalid(format!("{name}={p} must divide image_size={s}")));
            }
        }
        if self.d_mllm % self.mllm_heads != 0 || self.d_cond % self.text_heads != 0 {
            return Err(Error::invalid("encoder widths must be divisible by their head counts"));
        }
        Ok(())
    }

    /// Identity tokens per reference image: one per patch plus the mean token.
    pub fn identity_tokens_per_image(&self) -> usize {
        let g = self.image_size / self.id_patch;
        g * g + 1
    }

    pub fn mllm_tokens_per_image(&self) -> usize {
        let g = self.image_size / self.mllm_patch;
        g * g
    }
}

#[derive(Clone, Debug)]
struct Mllm {
    embed: ParamId,
    image_proj: Linear,
    image_type: ParamId,
    blocks: Vec<EncoderBlock>,
}

#[derive(Clone, Debug)]
struct TextEncoder {
    embed: ParamId,
    block: EncoderBlock,
}

#[derive(Clone, Debug)]
struct IdentityEncoder {
    proj: Linear,
}

/// All frozen encoders. Weights are fixed by `config.seed` and never trained.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    config: EncoderConfig,
    vocab: Vocab,
    frozen: ParamStore,
    mllm: Mllm,
    text: TextEncoder,
    identity: IdentityEncoder,
    vae: Vae,
}

const MAX_POSITIONS: usize = 512;

impl EncoderStack {
    pub fn new(config: EncoderConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let v = vocab.len();
        let dm = config.d_mllm;
        let dc = config.d_cond;
        let mp = 3 * config.mllm_patch * config.mllm_patch;
        let ip = 3 * config.id_patch * config.id_patch;
        let mllm = Mllm {
            embed: store.normal("mllm.embed", &[v, dm], 1.0, &mut rng),
            image_proj: Linear::new(&mut store, "mllm.image_proj", mp, dm, true, 2.5, &mut rng),
            image_type: store.normal("mllm.image_type", &[dm], 1.0, &mut rng),
            blocks: (0..config.mllm_blocks)
                .map(|i| EncoderBlock::new(&mut store, &format!("mllm.block{i}"), dm, config.mllm_heads, &mut rng))
                .collect(),
        };
        let text = TextEncoder {
            embed: store.normal("text.embed", &[v, dc], 1.0, &mut rng),
            block: EncoderBlock::new(&mut store, "text.block0", dc, config.text_heads, &mut rng),
        };
        let identity = IdentityEncoder {
            proj: Linear::new(&mut store, "identity.proj", ip, dc, false, 2.5, &mut rng),
        };
        let vae = Vae::new(config.vae_stride, &mut rng)?;
        store.add("vae.mix", vae.mix().clone());
        Ok(EncoderStack { config, vocab, frozen: store, mllm, text, identity, vae })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn vae(&self) -> &Vae {
        &self.vae
    }

    pub fn frozen_params(&self) -> &ParamStore {
        &self.frozen
    }

    /// Digest of every frozen weight.
    pub fn frozen_digest(&self) -> [u8; 32] {
        self.frozen.digest()
    }

    fn check_image(&self, img: &ReferenceImage) -> Result<()> {
        let s = self.config.image_size;
        if img.height() != s || img.width() != s {
            return Err(Error::shape("reference image", img.pixels.shape(), &[3, s, s]));
        }
        Ok(())
    }

    fn embed_rows(&self, tape: &mut Tape, p: &mut Bound, table: ParamId, ids: &[usize]) -> Result<Var> {
        let t = p.var(tape, table);
        let width = tape.shape(t)[1];
        let rows = tape.shape(t)[0];
        let mut index = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(Error::UnknownTokenId(id));
            }
            index.extend(id * width..(id + 1) * width);
        }
        tape.gather(t, index, &[ids.len(), width])
    }

    /// Hidden states of the multimodal model over the interleaved sequence.
    ///
    /// Each placeholder expands to its image's patch tokens, so the output
    /// length is `text_len + K * mllm_tokens_per_image`.
    pub fn mllm_encode(&self, seq: &TokenSequence, images: &[ReferenceImage]) -> Result<Tensor> {
        if seq.placeholder_count() != images.len() {
            return Err(Error::invalid(format!(
                "{} placeholders for {} reference images",
                seq.placeholder_count(),
                images.len()
            )));
        }
        let dm = self.config.d_mllm;
        if seq.is_empty() {
            return Ok(Tensor::zeros(&[0, dm]));
        }
        let mut tape = Tape::new();
        let mut p = Bound::frozen(&self.frozen);
        let mut parts = Vec::new();
        let text = seq.text_ids();
        if !text.is_empty() {
            parts.push(self.embed_rows(&mut tape, &mut p, self.mllm.embed, text)?);
        }
        let ty = p.var(&mut tape, self.mllm.image_type);
        for img in images {
            self.check_image(img)?;
            let patches = tape.constant(patchify_image(&img.pixels, self.config.mllm_patch)?);
            let tok = self.mllm.image_proj.forward(&mut tape, &mut p, patches)?;
            parts.push(tape.add_row(tok, ty)?);
        }
        let x = tape.concat(&parts)?;
        let len = tape.shape(x)[0];
        if len > MAX_POSITIONS {
            return Err(Error::invalid(format!("sequence of {len} tokens exceeds {MAX_POSITIONS}")));
        }
        let pe = tape.constant(sinusoidal_table(len, dm));
        let mut x = tape.add(x, pe)?;
        for block in &self.mllm.blocks {
            x = block.forward(&mut tape, &mut p, x)?;
        }
        let x = tape.normalize(x, LN_EPS)?;
        Ok(tape.value(x).clone())
    }

    /// Independent text embedding of the prompt (text tokens only).
    pub fn text_encode(&self, text_ids: &[usize]) -> Result<Tensor> {
        if text_ids.is_empty() {
            return Err(Error::invalid("text encoder needs at least one token"));
        }
        let mut tape = Tape::new();
        let mut p = Bound::frozen(&self.frozen);
        let x = self.embed_rows(&mut tape, &mut p, self.text.embed, text_ids)?;
        let pe = tape.constant(sinusoidal_table(text_ids.len(), self.config.d_cond));
        let x = tape.add(x, pe)?;
        let x = self.text.block.forward(&mut tape, &mut p, x)?;
        let x = tape.normalize(x, LN_EPS)?;
        Ok(tape.value(x).clone())
    }

    /// Projected patch tokens of one image (no positional term), `[P, d_cond]`.
    fn identity_patch_tokens(&self, img: &ReferenceImage) -> Result<Tensor> {
        self.check_image(img)?;
        let mut tape = Tape::new();
        let mut p = Bound::frozen(&self.frozen);
        let patches = tape.constant(patchify_image(&img.pixels, self.config.id_patch)?);
        let tok = self.identity.proj.forward(&mut tape, &mut p, patches)?;
        Ok(tape.value(tok).clone())
    }

    /// Identity tokens: per image, its patch tokens (with positions) followed
    /// by their mean. `K = 0` gives an empty `[0, d_cond]` stream.
    pub fn identity_encode(&self, images: &[ReferenceImage]) -> Result<Tensor> {
        let dc = self.config.d_cond;
        let mut blocks = Vec::with_capacity(images.len());
        for img in images {
            let tok = self.identity_patch_tokens(img)?;
            let n = tok.shape()[0];
            let pe = sinusoidal_table(n, dc).scale(0.5);
            let mut data = tok.add(&pe)?.into_data();
            data.extend(mean_rows(&tok));
            blocks.push(Tensor::new(&[n + 1, dc], data)?);
        }
        if blocks.is_empty() {
            return Ok(Tensor::zeros(&[0, dc]));
        }
        Tensor::concat_outer(&blocks.iter().collect::<Vec<_>>())
    }

    /// Pooled identity embedding of one image (its mean token).
    pub fn identity_pooled(&self, img: &ReferenceImage) -> Result<Vec<f64>> {
        Ok(mean_rows(&self.identity_patch_tokens(img)?))
    }

    pub fn vae_encode(&self, video: &Tensor) -> Result<Tensor> {
        self.vae.encode(video)
    }

    pub fn vae_decode(&self, latent: &Tensor) -> Result<Tensor> {
        self.vae.decode(latent)
    }
}

fn mean_rows(t: &Tensor) -> Vec<f64> {
    let d = t.last_dim();
    let n = t.rows().max(1);
    let mut m = vec![0.0; d];
    for row in t.data().chunks(d) {
        m.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|v| *v /= n as f64);
    m
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Trainable two-layer GELU MLP from multimodal width to conditioning width.
#[derive(Clone, Copy, Debug)]
pub struct Connector {
    mlp: Mlp,
}

impl Connector {
    pub fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        d_mllm: usize,
        hidden: usize,
        d_cond: usize,
        rng: &mut R,
    ) -> Self {
        Connector { mlp: Mlp::new(store, "connector", d_mllm, hidden, d_cond, rng) }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let m = self.mlp;
        [m.fc1.w, m.fc2.w].into_iter().chain(m.fc1.b).chain(m.fc2.b).collect()
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut Bound, h_mllm: Var) -> Result<Var> {
        self.mlp.forward(tape, p, h_mllm)
    }

    /// Value-only projection `[L, d_mllm] → [L, d_cond]`.
    pub fn project(&self, store: &ParamStore, h_mllm: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut p = Bound::frozen(store);
        let h = tape.constant(h_mllm.clone());
        let y = self.forward(&mut tape, &mut p, h)?;
        Ok(tape.value(y).clone())
    }
}
