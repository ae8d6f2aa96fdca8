//! Assembly of everything the generator consumes besides `(z_t, t)`.
//!
//! The joint stream is `[connector(H_mllm); c_text]`, built on the tape at
//! forward time because the connector is trainable. Reference latents sit on
//! extra temporal slots appended after the video frames, flagged by a
//! one-channel slot mask.

use rand::Rng;

use crate::encoders::{EncoderStack, ReferenceImage, TokenKind, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Default upper bound on reference images per sample.
pub const DEFAULT_K_MAX: usize = 4;

/// Which streams feed the joint cross-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum JointMode {
    /// `[connector(H_mllm); c_text]`.
    MllmAndText,
    /// `c_text` alone; the multimodal model is bypassed.
    TextOnly,
}

impl JointMode {
    pub fn name(self) -> &'static str {
        match self {
            JointMode::MllmAndText => "mllm+text",
            JointMode::TextOnly => "text",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mllm+text" => Ok(JointMode::MllmAndText),
            "text" => Ok(JointMode::TextOnly),
            other => Err(Error::invalid(format!("unknown joint mode '{other}'"))),
        }
    }
}

/// Text tokens followed by one placeholder per reference image.
pub fn build_sequence(
    placeholder: usize,
    prompt_tokens: &[usize],
    images: Vec<ReferenceImage>,
    k_max: usize,
) -> Result<(TokenSequence, Vec<ReferenceImage>)> {
    if images.len() > k_max {
        return Err(Error::invalid(format!("{} reference images exceed K_max={k_max}", images.len())));
    }
    let mut ids = prompt_tokens.to_vec();
    let mut kinds = vec![TokenKind::Text; ids.len()];
    ids.extend(std::iter::repeat_n(placeholder, images.len()));
    kinds.extend(std::iter::repeat_n(TokenKind::ImagePlaceholder, images.len()));
    Ok((TokenSequence::new(ids, kinds)?, images))
}

fn check_joint(mllm: &[usize], text: &[usize]) -> Result<()> {
    if text.first().copied().unwrap_or(0) == 0 {
        return Err(Error::invalid("text stream must be non-empty"));
    }
    if mllm.len() != 2 || text.len() != 2 || mllm[1] != text[1] {
        return Err(Error::shape("make_joint", mllm, text));
    }
    Ok(())
}

/// `[c_mllm; c_text]` along the sequence axis.
pub fn make_joint(c_mllm: &Tensor, c_text: &Tensor) -> Result<Tensor> {
    check_joint(c_mllm.shape(), c_text.shape())?;
    Tensor::concat_outer(&[c_mllm, c_text])
}

/// Tape version of [`make_joint`].
pub fn make_joint_var(tape: &mut Tape, c_mllm: Var, c_text: Var) -> Result<Var> {
    check_joint(&tape.shape(c_mllm).to_vec(), tape.shape(c_text))?;
    if tape.shape(c_mllm)[0] == 0 {
        return Ok(c_text);
    }
    tape.concat(&[c_mllm, c_text])
}

/// Video latent with reference slots: `[T+K, 2·Cz+1, H', W']`.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedLatent {
    pub x: Tensor,
    pub frames: usize,
    pub refs: usize,
    pub latent_channels: usize,
}

impl PaddedLatent {
    pub fn slots(&self) -> usize {
        self.frames + self.refs
    }

    /// Slots `[T, T+K)`.
    pub fn ref_slot_range(&self) -> std::ops::Range<usize> {
        self.frames..self.frames + self.refs
    }

    pub fn channels(&self) -> usize {
        2 * self.latent_channels + 1
    }

    /// The noisy-latent channels of the first `T` slots.
    pub fn noisy_part(&self) -> Tensor {
        self.channel_block(0, self.latent_channels, 0..self.frames)
    }

    /// Channels `[c0, c1)` over the given slots.
    pub fn channel_block(&self, c0: usize, c1: usize, slots: std::ops::Range<usize>) -> Tensor {
        let s = self.x.shape();
        let (ch, plane) = (s[1], s[2] * s[3]);
        let mut out = Vec::with_capacity(slots.len() * (c1 - c0) * plane);
        for slot in slots.clone() {
            let base = slot * ch * plane;
            out.extend_from_slice(&self.x.data()[base + c0 * plane..base + c1 * plane]);
        }
        Tensor::new(&[slots.len(), c1 - c0, s[2], s[3]], out).expect("block extents")
    }
}

/// Builds the padded latent from `x_t [T, Cz, H', W']`, `K` reference
/// latents `[Cz, H', W']` and a slot mask `[K, 1, H', W']`.
pub fn pad_and_place(x_t: &Tensor, c_vae: &[Tensor], m_ref: &Tensor) -> Result<PaddedLatent> {
    let [t, cz, h, w] = *x_t.shape() else {
        return Err(Error::shape("pad_and_place", x_t.shape(), &[0, 0, 0, 0]));
    };
    let k = c_vae.len();
    for r in c_vae {
        if r.shape() != [cz, h, w] {
            return Err(Error::shape("pad_and_place", x_t.shape(), r.shape()));
        }
    }
    if m_ref.shape() != [k, 1, h, w] {
        return Err(Error::shape("pad_and_place mask", m_ref.shape(), &[k, 1, h, w]));
    }
    if m_ref.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::invalid("reference mask must be binary"));
    }
    let plane = h * w;
    let ch = 2 * cz + 1;
    let mut out = vec![0.0; (t + k) * ch * plane];
    for f in 0..t {
        let src = &x_t.data()[f * cz * plane..(f + 1) * cz * plane];
        out[f * ch * plane..f * ch * plane + cz * plane].copy_from_slice(src);
    }
    for (j, r) in c_vae.iter().enumerate() {
        let base = (t + j) * ch * plane;
        out[base + cz * plane..base + 2 * cz * plane].copy_from_slice(r.data());
        out[base + 2 * cz * plane..base + ch * plane].copy_from_slice(&m_ref.data()[j * plane..(j + 1) * plane]);
    }
    Ok(PaddedLatent { x: Tensor::new(&[t + k, ch, h, w], out)?, frames: t, refs: k, latent_channels: cz })
}

/// Everything the generator consumes besides `(z_t, t)`.
///
/// The joint stream is kept as its two frozen inputs; the model applies the
/// trainable connector and concatenates.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    /// Multimodal hidden states `[L_mllm, d_mllm]`; empty in text-only mode.
    pub h_mllm: Tensor,
    pub c_text: Tensor,
    /// Identity tokens `[K·p, d_cond]`; zero rows when there are no references.
    pub c_clip: Tensor,
    /// One `[Cz, H', W']` latent per reference.
    pub c_vae: Vec<Tensor>,
    /// `[K, 1, H', W']`.
    pub m_ref: Tensor,
    pub mode: JointMode,
    /// When set, the joint and identity streams are replaced by the model's
    /// learned null tokens and the reference slots carry zeros.
    pub dropped: bool,
}

impl ConditioningBundle {
    /// Encodes a prompt and its references with the frozen encoders.
    pub fn encode(
        encoders: &EncoderStack,
        prompt_tokens: &[usize],
        images: &[ReferenceImage],
        mode: JointMode,
        k_max: usize,
    ) -> Result<Self> {
        let placeholder = encoders.vocab().placeholder();
        let (seq, images) = build_sequence(placeholder, prompt_tokens, images.to_vec(), k_max)?;
        let c_text = encoders.text_encode(seq.text_ids())?;
        let h_mllm = match mode {
            JointMode::MllmAndText => encoders.mllm_encode(&seq, &images)?,
            JointMode::TextOnly => Tensor::zeros(&[0, encoders.config().d_mllm]),
        };
        let c_clip = encoders.identity_encode(&images)?;
        let c_vae = images.iter().map(|im| encoders.vae().encode_image(&im.pixels)).collect::<Result<Vec<_>>>()?;
        let (h, w) = c_vae.first().map_or((0, 0), |r| (r.shape()[1], r.shape()[2]));
        let m_ref = Tensor::ones(&[images.len(), 1, h, w]);
        Ok(ConditioningBundle { h_mllm, c_text, c_clip, c_vae, m_ref, mode, dropped: false })
    }

    pub fn k(&self) -> usize {
        self.c_vae.len()
    }

    /// Rows the joint stream will have once the connector is applied.
    pub fn joint_len(&self) -> usize {
        if self.dropped {
            1
        } else {
            self.h_mllm.rows() + self.c_text.rows()
        }
    }

    /// The dropped form: null streams, zeroed reference slots, `K` kept.
    pub fn to_null(&self) -> Self {
        let mut out = self.clone();
        out.dropped = true;
        for r in &mut out.c_vae {
            *r = Tensor::zeros(r.shape());
        }
        out.m_ref = Tensor::zeros(self.m_ref.shape());
        out
    }

    /// Padded latent for `z_t` with this bundle's reference slots.
    pub fn pad(&self, z_t: &Tensor) -> Result<PaddedLatent> {
        if self.k() == 0 {
            let s = z_t.shape();
            let m = Tensor::zeros(&[0, 1, s.get(2).copied().unwrap_or(0), s.get(3).copied().unwrap_or(0)]);
            return pad_and_place(z_t, &[], &m);
        }
        pad_and_place(z_t, &self.c_vae, &self.m_ref)
    }
}

/// With probability `rate`, replaces every stream by its null form.
pub fn cfg_dropout<R: Rng + ?Sized>(bundle: ConditioningBundle, rate: f64, rng: &mut R) -> Result<ConditioningBundle> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    let u: f64 = rng.random();
    Ok(if u < rate { bundle.to_null() } else { bundle })
}
