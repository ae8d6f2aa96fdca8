//! Small layers shared by the encoders and the generator.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Gaussian weights with std `gain / sqrt(fan_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.normal(&format!("{name}.w"), &[fan_in, fan_out], gain / (fan_in as f64).sqrt(), rng);
        let b = bias.then(|| store.zeros(&format!("{name}.b"), &[fan_out]));
        Linear { w, b }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.zeros(&format!("{name}.w"), &[fan_in, fan_out]);
        let b = Some(store.zeros(&format!("{name}.b"), &[fan_out]));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut Bound, x: Var) -> Result<Var> {
        let w = p.var(tape, self.w);
        let b = self.b.map(|b| p.var(tape, b));
        tape.linear(x, w, b)
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, true, 1.0, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, true, 1.0, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, p, h)
    }
}

/// Pre-norm self-attention + FFN block without modulation.
#[derive(Clone, Copy, Debug)]
pub struct EncoderBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ffn: Mlp,
    heads: usize,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        EncoderBlock {
            q: Linear::new(store, &format!("{name}.q"), d, d, false, 1.0, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, false, 1.0, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, false, 1.0, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, true, 1.0, rng),
            ffn: Mlp::new(store, &format!("{name}.ffn"), d, 2 * d, d, rng),
            heads,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut Bound, x: Var) -> Result<Var> {
        let n = tape.normalize(x, LN_EPS)?;
        let q = self.q.forward(tape, p, n)?;
        let k = self.k.forward(tape, p, n)?;
        let v = self.v.forward(tape, p, n)?;
        let a = tape.attention(q, k, v, self.heads)?;
        let a = self.o.forward(tape, p, a)?;
        let x = tape.add(x, a)?;
        let n = tape.normalize(x, LN_EPS)?;
        let f = self.ffn.forward(tape, p, n)?;
        tape.add(x, f)
    }
}

/// Standard sinusoidal table `[len, d]`, frequencies `10000^(-2i/d)`.
pub fn sinusoidal_table(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let freq = (10000f64).powf(-((2 * (i / 2)) as f64) / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[len, d], data).expect("table extents")
}

/// Sinusoidal features of a continuous scalar (timestep embedding).
pub fn scalar_features(x: f64, d: usize) -> Tensor {
    let half = d / 2;
    let mut data = vec![0.0; d];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        let angle = 1000.0 * x * freq;
        data[i] = angle.cos();
        data[half + i] = angle.sin();
    }
    Tensor::new(&[1, d], data).expect("feature extents")
}
