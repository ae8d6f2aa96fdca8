//! The velocity network `u_θ(z_t, t, conditioning)`.
//!
//! Tokens are patches of the padded latent in slot-major raster order. Each
//! block applies modulated self-attention, the summed dual cross-attention
//!
//! ```text
//! H ← H + Attn(Q, K_joint, V_joint) + γ · Attn(Q, K_id, V_id)
//! ```
//!
//! with one shared query projection, and a modulated feed-forward layer.

use rand::Rng;

use crate::encoders::Connector;
use crate::conditioning::{make_joint_var, ConditioningBundle, JointMode, PaddedLatent};
use crate::error::{Error, Result};
use crate::nn::{scalar_features, sinusoidal_table, Linear, Mlp, LN_EPS};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct DiTConfig {
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Patch extents `(pt, ph, pw)` over slots, rows and columns.
    pub patch: (usize, usize, usize),
    pub d_cond: usize,
    pub d_mllm: usize,
    pub connector_hidden: usize,
    /// Identity-stream scale.
    pub gamma: f64,
    pub latent_channels: usize,
    pub ffn_mult: usize,
    /// Positional tables are built up to these extents (in patches).
    pub max_slots: usize,
    pub max_side: usize,
}

impl Default for DiTConfig {
    fn default() -> Self {
        DiTConfig {
            depth: 2,
            d_model: 64,
            heads: 4,
            patch: (1, 1, 1),
            d_cond: 32,
            d_mllm: 32,
            connector_hidden: 64,
            gamma: 1.0,
            latent_channels: 48,
            ffn_mult: 2,
            max_slots: 16,
            max_side: 32,
        }
    }
}

impl DiTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::invalid(format!(
                "d_model={} must be a positive multiple of heads={}",
                self.d_model, self.heads
            )));
        }
        let (pt, ph, pw) = self.patch;
        if pt == 0 || ph == 0 || pw == 0 {
            return Err(Error::invalid("patch sizes must be positive"));
        }
        if self.d_model < 6 {
            return Err(Error::invalid("d_model too small for factored positional encoding"));
        }
        Ok(())
    }

    pub fn patch_features_in(&self) -> usize {
        let (pt, ph, pw) = self.patch;
        (2 * self.latent_channels + 1) * pt * ph * pw
    }

    pub fn patch_features_out(&self) -> usize {
        let (pt, ph, pw) = self.patch;
        self.latent_channels * pt * ph * pw
    }
}

#[derive(Clone, Copy, Debug)]
struct CrossAttention {
    q: Linear,
    k_joint: Linear,
    v_joint: Linear,
    k_id: Linear,
    v_id: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct DitBlock {
    modulation: Linear,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    cross: CrossAttention,
    ffn: Mlp,
}

/// Residual stream after each stage of one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    pub after_self: Var,
    pub after_cross: Var,
    pub out: Var,
}

/// Conditioning streams as tape values for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Streams {
    pub joint: Option<Var>,
    pub clip: Option<Var>,
}

/// Per-block adaptive-norm vectors, each `[1, d_model]`.
#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    pub sa_shift: Var,
    pub sa_scale: Var,
    pub sa_gate: Var,
    pub ca_shift: Var,
    pub ca_scale: Var,
    pub ffn_shift: Var,
    pub ffn_scale: Var,
    pub ffn_gate: Var,
}

/// All trainable generator weights, including the connector and the
/// null-conditioning tokens.
#[derive(Clone, Debug)]
pub struct DiTParams {
    pub config: DiTConfig,
    pub store: ParamStore,
    patch_embed: Linear,
    time_mlp: Mlp,
    blocks: Vec<DitBlock>,
    final_modulation: Linear,
    head: Linear,
    connector: Connector,
    null_joint: ParamId,
    null_clip: ParamId,
}

fn modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = tape.normalize(x, LN_EPS)?;
    let one_plus = tape.add_scalar(scale, 1.0)?;
    let n = tape.mul_row(n, one_plus)?;
    tape.add_row(n, shift)
}

impl DitBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: &DiTConfig, rng: &mut R) -> Self {
        let d = c.d_model;
        let lin = |store: &mut ParamStore, n: &str, i: usize, o: usize, bias: bool, rng: &mut R| {
            Linear::new(store, &format!("{name}.{n}"), i, o, bias, 1.0, rng)
        };
        DitBlock {
            modulation: Linear::new(store, &format!("{name}.modulation"), d, 8 * d, true, 0.1, rng),
            q: lin(store, "self.q", d, d, false, rng),
            k: lin(store, "self.k", d, d, false, rng),
            v: lin(store, "self.v", d, d, false, rng),
            o: lin(store, "self.o", d, d, true, rng),
            cross: CrossAttention {
                q: lin(store, "cross.q", d, d, true, rng),
                k_joint: lin(store, "cross.joint.k", c.d_cond, d, true, rng),
                v_joint: lin(store, "cross.joint.v", c.d_cond, d, false, rng),
                k_id: lin(store, "cross.id.k", c.d_cond, d, true, rng),
                v_id: lin(store, "cross.id.v", c.d_cond, d, false, rng),
            },
            ffn: Mlp::new(store, &format!("{name}.ffn"), d, c.ffn_mult * d, d, rng),
        }
    }

    fn modulation(&self, tape: &mut Tape, p: &mut Bound, c: Var, d: usize) -> Result<Modulation> {
        let m = self.modulation.forward(tape, p, c)?;
        let mut part = |i: usize| tape.slice_cols(m, i * d, (i + 1) * d);
        Ok(Modulation {
            sa_shift: part(0)?,
            sa_scale: part(1)?,
            sa_gate: part(2)?,
            ca_shift: part(3)?,
            ca_scale: part(4)?,
            ffn_shift: part(5)?,
            ffn_scale: part(6)?,
            ffn_gate: part(7)?,
        })
    }

    /// One block. `gamma` scales the identity term.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &mut Bound,
        x: Var,
        streams: Streams,
        m: &Modulation,
        heads: usize,
        gamma: f64,
    ) -> Result<BlockTrace> {
        let n = modulate(tape, x, m.sa_shift, m.sa_scale)?;
        let q = self.q.forward(tape, p, n)?;
        let k = self.k.forward(tape, p, n)?;
        let v = self.v.forward(tape, p, n)?;
        let a = tape.attention(q, k, v, heads)?;
        let a = self.o.forward(tape, p, a)?;
        let a = tape.mul_row(a, m.sa_gate)?;
        let after_self = tape.add(x, a)?;

        let mut after_cross = after_self;
        if streams.joint.is_some() || streams.clip.is_some() {
            let n = modulate(tape, after_self, m.ca_shift, m.ca_scale)?;
            let q = self.cross.q.forward(tape, p, n)?;
            if let Some(cj) = streams.joint {
                let k = self.cross.k_joint.forward(tape, p, cj)?;
                let v = self.cross.v_joint.forward(tape, p, cj)?;
                let a = tape.attention(q, k, v, heads)?;
                after_cross = tape.add(after_cross, a)?;
            }
            if let Some(cc) = streams.clip {
                let k = self.cross.k_id.forward(tape, p, cc)?;
                let v = self.cross.v_id.forward(tape, p, cc)?;
                let a = tape.attention(q, k, v, heads)?;
                let a = tape.scale(a, gamma)?;
                after_cross = tape.add(after_cross, a)?;
            }
        }

        let n = modulate(tape, after_cross, m.ffn_shift, m.ffn_scale)?;
        let f = self.ffn.forward(tape, p, n)?;
        let f = tape.mul_row(f, m.ffn_gate)?;
        let out = tape.add(after_cross, f)?;
        Ok(BlockTrace { after_self, after_cross, out })
    }
}

/// How the cross-attention streams are formed for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrossMode {
    /// Streams from the bundle (or the null tokens when it is dropped).
    Conditioned,
    /// No cross-attention at all: the unconditional backbone.
    Backbone,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub tokens: Var,
    pub blocks: Vec<BlockTrace>,
    pub velocity: Var,
}

impl DiTParams {
    pub fn new<R: Rng + ?Sized>(config: DiTConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut store = ParamStore::new();
        let patch_embed = Linear::new(&mut store, "patch_embed", config.patch_features_in(), d, true, 1.0, rng);
        let time_mlp = Mlp::new(&mut store, "time", d, d, d, rng);
        let blocks = (0..config.depth)
            .map(|i| DitBlock::new(&mut store, &format!("block{i}"), &config, rng))
            .collect();
        let final_modulation = Linear::new(&mut store, "final.modulation", d, 2 * d, true, 0.1, rng);
        let head = Linear::zeros(&mut store, "head", d, config.patch_features_out());
        let connector = Connector::new(&mut store, config.d_mllm, config.connector_hidden, config.d_cond, rng);
        let null_joint = store.zeros("null.joint", &[1, config.d_cond]);
        let null_clip = store.zeros("null.clip", &[1, config.d_cond]);
        Ok(DiTParams { config, store, patch_embed, time_mlp, blocks, final_modulation, head, connector, null_joint, null_clip })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn blocks(&self) -> &[DitBlock] {
        &self.blocks
    }

    /// Ids of every cross-attention value projection.
    pub fn cross_value_projections(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| [b.cross.v_joint.w, b.cross.v_id.w]).collect()
    }

    /// Ids of the connector weights.
    pub fn connector(&self) -> Connector {
        self.connector
    }

    fn grid(&self, padded: &PaddedLatent) -> Result<(usize, usize, usize)> {
        let (pt, ph, pw) = self.config.patch;
        let s = padded.x.shape();
        if padded.latent_channels != self.config.latent_channels {
            return Err(Error::shape("patch_embed", s, &[s[0], 2 * self.config.latent_channels + 1, s[2], s[3]]));
        }
        if s[0] % pt != 0 || s[2] % ph != 0 || s[3] % pw != 0 || padded.frames % pt != 0 {
            return Err(Error::invalid(format!("padded latent {s:?} not divisible by patch {:?}", self.config.patch)));
        }
        let g = (s[0] / pt, s[2] / ph, s[3] / pw);
        if g.0 > self.config.max_slots || g.1 > self.config.max_side || g.2 > self.config.max_side {
            return Err(Error::invalid(format!("patch grid {g:?} exceeds positional table")));
        }
        Ok(g)
    }

    /// Raw patch features `[N, (2Cz+1)·pt·ph·pw]`, feature order `(c, dt, dy, dx)`.
    pub fn patchify(&self, padded: &PaddedLatent) -> Result<Tensor> {
        let (gt, gh, gw) = self.grid(padded)?;
        let (pt, ph, pw) = self.config.patch;
        let s = padded.x.shape();
        let (ch, h, w) = (s[1], s[2], s[3]);
        let feat = self.config.patch_features_in();
        let src = padded.x.data();
        let mut out = vec![0.0; gt * gh * gw * feat];
        for a in 0..gt {
            for b in 0..gh {
                for c in 0..gw {
                    let row = &mut out[((a * gh + b) * gw + c) * feat..][..feat];
                    for cc in 0..ch {
                        for dt in 0..pt {
                            for dy in 0..ph {
                                for dx in 0..pw {
                                    let v = src[(((a * pt + dt) * ch + cc) * h + b * ph + dy) * w + c * pw + dx];
                                    row[((cc * pt + dt) * ph + dy) * pw + dx] = v;
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(&[gt * gh * gw, feat], out)
    }

    /// Factored sinusoidal encoding, `[N, d_model]`: slot, row and column
    /// tables concatenated.
    pub fn positional_encoding(&self, grid: (usize, usize, usize)) -> Tensor {
        let d = self.config.d_model;
        let a = (d / 3) & !1;
        let (dt, dh, dw) = (a, a, d - 2 * a);
        let (tt, th, tw) = (sinusoidal_table(grid.0, dt), sinusoidal_table(grid.1, dh), sinusoidal_table(grid.2, dw));
        let mut out = Vec::with_capacity(grid.0 * grid.1 * grid.2 * d);
        for i in 0..grid.0 {
            for j in 0..grid.1 {
                for k in 0..grid.2 {
                    out.extend_from_slice(&tt.data()[i * dt..(i + 1) * dt]);
                    out.extend_from_slice(&th.data()[j * dh..(j + 1) * dh]);
                    out.extend_from_slice(&tw.data()[k * dw..(k + 1) * dw]);
                }
            }
        }
        Tensor::new(&[grid.0 * grid.1 * grid.2, d], out).expect("positional extents")
    }

    /// Linear patch embedding plus positions, `[N, d_model]`.
    pub fn patch_embed(&self, tape: &mut Tape, p: &mut Bound, padded: &PaddedLatent) -> Result<Var> {
        let grid = self.grid(padded)?;
        let x = tape.constant(self.patchify(padded)?);
        let x = self.patch_embed.forward(tape, p, x)?;
        let pe = tape.constant(self.positional_encoding(grid));
        tape.add(x, pe)
    }

    /// Shared time vector `[1, d_model]` feeding every modulation layer.
    pub fn time_vector(&self, tape: &mut Tape, p: &mut Bound, t: f64) -> Result<Var> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("time {t} outside [0, 1]")));
        }
        let f = tape.constant(scalar_features(t, self.config.d_model));
        let c = self.time_mlp.forward(tape, p, f)?;
        tape.gelu(c)
    }

    /// Per-block modulation vectors for time `t`.
    pub fn time_embed(&self, tape: &mut Tape, p: &mut Bound, t: f64) -> Result<Vec<Modulation>> {
        let c = self.time_vector(tape, p, t)?;
        self.blocks.iter().map(|b| b.modulation(tape, p, c, self.config.d_model)).collect()
    }

    /// Joint and identity streams for a bundle.
    pub fn streams(&self, tape: &mut Tape, p: &mut Bound, bundle: &ConditioningBundle) -> Result<Streams> {
        if bundle.dropped {
            let joint = p.var(tape, self.null_joint);
            let clip = p.var(tape, self.null_clip);
            return Ok(Streams { joint: Some(joint), clip: Some(clip) });
        }
        let c_text = tape.constant(bundle.c_text.clone());
        let joint = match bundle.mode {
            JointMode::TextOnly => {
                let empty = tape.constant(Tensor::zeros(&[0, self.config.d_cond]));
                make_joint_var(tape, empty, c_text)?
            }
            JointMode::MllmAndText => {
                if bundle.h_mllm.rows() == 0 {
                    c_text
                } else {
                    let h = tape.constant(bundle.h_mllm.clone());
                    let c_mllm = self.connector.forward(tape, p, h)?;
                    make_joint_var(tape, c_mllm, c_text)?
                }
            }
        };
        let clip = (bundle.c_clip.rows() > 0).then(|| tape.constant(bundle.c_clip.clone()));
        Ok(Streams { joint: Some(joint), clip })
    }

    /// Full forward pass with intermediate values.
    pub fn forward_trace(
        &self,
        tape: &mut Tape,
        p: &mut Bound,
        z_t: &Tensor,
        t: f64,
        bundle: &ConditioningBundle,
        cross: CrossMode,
    ) -> Result<ForwardTrace> {
        let padded = bundle.pad(z_t)?;
        let (_, gh, gw) = self.grid(&padded)?;
        let tokens = self.patch_embed(tape, p, &padded)?;
        let c = self.time_vector(tape, p, t)?;
        let streams = match cross {
            CrossMode::Conditioned => self.streams(tape, p, bundle)?,
            CrossMode::Backbone => Streams { joint: None, clip: None },
        };
        let mut x = tokens;
        let mut traces = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let m = block.modulation(tape, p, c, self.config.d_model)?;
            let tr = block.forward(tape, p, x, streams, &m, self.config.heads, self.config.gamma)?;
            x = tr.out;
            traces.push(tr);
        }
        let d = self.config.d_model;
        let fm = self.final_modulation.forward(tape, p, c)?;
        let shift = tape.slice_cols(fm, 0, d)?;
        let scale = tape.slice_cols(fm, d, 2 * d)?;
        let x = modulate(tape, x, shift, scale)?;
        let out = self.head.forward(tape, p, x)?;
        let velocity = self.unpatchify_frames(tape, out, padded.frames, gh, gw)?;
        Ok(ForwardTrace { tokens, blocks: traces, velocity })
    }

    /// Token outputs `[N, Cz·pt·ph·pw]` to `[T, Cz, H', W']`, keeping only the
    /// video slots.
    fn unpatchify_frames(&self, tape: &mut Tape, out: Var, frames: usize, gh: usize, gw: usize) -> Result<Var> {
        let (pt, ph, pw) = self.config.patch;
        let cz = self.config.latent_channels;
        let fo = self.config.patch_features_out();
        let (h, w) = (gh * ph, gw * pw);
        let mut index = Vec::with_capacity(frames * cz * h * w);
        for f in 0..frames {
            for c in 0..cz {
                for y in 0..h {
                    for x in 0..w {
                        let n = ((f / pt) * gh + y / ph) * gw + x / pw;
                        let feat = ((c * pt + f % pt) * ph + y % ph) * pw + x % pw;
                        index.push(n * fo + feat);
                    }
                }
            }
        }
        tape.gather(out, index, &[frames, cz, h, w])
    }

    /// Velocity prediction `[T, Cz, H', W']` on the tape.
    pub fn u_theta(&self, tape: &mut Tape, p: &mut Bound, z_t: &Tensor, t: f64, bundle: &ConditioningBundle) -> Result<Var> {
        Ok(self.forward_trace(tape, p, z_t, t, bundle, CrossMode::Conditioned)?.velocity)
    }

    /// Value-only velocity prediction.
    pub fn predict(&self, z_t: &Tensor, t: f64, bundle: &ConditioningBundle) -> Result<Tensor> {
        self.predict_with(z_t, t, bundle, CrossMode::Conditioned)
    }

    pub fn predict_with(&self, z_t: &Tensor, t: f64, bundle: &ConditioningBundle, cross: CrossMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut p = Bound::frozen(&self.store);
        let tr = self.forward_trace(&mut tape, &mut p, z_t, t, bundle, cross)?;
        Ok(tape.value(tr.velocity).clone())
    }
}
