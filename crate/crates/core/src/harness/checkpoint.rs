//! Versioned binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "SFCK" | version u32 | config hash [32]
//! config text: len u64, utf-8 bytes
//! stage u8 | iteration u64 | rng seed u64
//! optimizer: step u64, lr, beta1, beta2, eps, weight_decay (f64)
//! params: count u32, then per param: name len u32, name, rank u32, dims u64.., values f64..
//! moments: per param, first moment values then second moment values
//! losses: count u64, values f64..
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::config::{hex, RunConfig};
use super::optim::OptimizerState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub config_text: String,
    /// 1 or 2.
    pub stage: u8,
    /// Completed iterations.
    pub iteration: u64,
    /// Every random stream of the run is derived from this seed and the iteration.
    pub rng_seed: u64,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: OptimizerState,
    /// Mean batch loss of every completed iteration.
    pub losses: Vec<f64>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("checkpoint", "invalid utf-8"))
    }
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.config_text.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.push(self.stage);
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.rng_seed.to_le_bytes());
        let o = &self.optimizer;
        out.extend_from_slice(&o.step.to_le_bytes());
        put_f64s(&mut out, &[o.lr, o.beta1, o.beta2, o.eps, o.weight_decay]);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, t.data());
        }
        for (m, v) in o.m.iter().zip(&o.v) {
            put_f64s(&mut out, m.data());
            put_f64s(&mut out, v.data());
        }
        out.extend_from_slice(&(self.losses.len() as u64).to_le_bytes());
        put_f64s(&mut out, &self.losses);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let n = r.u64()? as usize;
        let config_text = r.string(n)?;
        let stage = r.u8()?;
        let iteration = r.u64()?;
        let rng_seed = r.u64()?;
        let step = r.u64()?;
        let [lr, beta1, beta2, eps, weight_decay] = r.f64s(5)?[..] else { unreachable!() };
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = r.string(n)?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            params.push((name, Tensor::new(&shape, r.f64s(numel)?)?));
        }
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for (_, p) in &params {
            m.push(Tensor::new(p.shape(), r.f64s(p.numel())?)?);
            v.push(Tensor::new(p.shape(), r.f64s(p.numel())?)?);
        }
        let n = r.u64()? as usize;
        let losses = r.f64s(n)?;
        if r.pos != buf.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        let optimizer = OptimizerState { m, v, step, lr, beta1, beta2, eps, weight_decay };
        Ok(Checkpoint { config_hash, config_text, stage, iteration, rng_seed, params, optimizer, losses })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// The embedded configuration, checked against the stored hash.
    pub fn config(&self) -> Result<RunConfig> {
        let c = RunConfig::parse(&self.config_text)?;
        if c.hash() != self.config_hash {
            return Err(Error::format("checkpoint", "embedded config does not match its hash"));
        }
        Ok(c)
    }

    /// Errors unless the checkpoint was written under `config`.
    pub fn check_config(&self, config: &RunConfig) -> Result<()> {
        let want = config.hash();
        if want != self.config_hash {
            return Err(Error::format(
                "checkpoint",
                format!("config hash {} does not match run config {}", hex(&self.config_hash), hex(&want)),
            ));
        }
        Ok(())
    }
}
