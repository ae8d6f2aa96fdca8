//! Corpus manifest and frame dumps.
//!
//! Manifest: a header line `seed <u64>` followed by one record per line,
//! `index tier seed K mode`; `#` starts a comment.
//!
//! Tensor container (little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `SFTN` |
//! | 4 | version, `u32` = 1 |
//! | 1 | dtype, 1 = `f64` |
//! | 4 | rank, `u32` |
//! | 8·rank | extents, `u64` each |
//! | 8·numel | values, `f64` each |

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::{Mode, Tier};

pub const TENSOR_MAGIC: &[u8; 4] = b"SFTN";
pub const TENSOR_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub index: usize,
    pub tier: Tier,
    pub seed: u64,
    pub k: usize,
    pub mode: Mode,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub seed: u64,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn count(&self, tier: Tier) -> usize {
        self.records.iter().filter(|r| r.tier == tier).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# index tier seed K mode\n");
        s.push_str(&format!("seed {}\n", self.seed));
        for r in &self.records {
            s.push_str(&format!("{} {} {} {} {}\n", r.index, r.tier.name(), r.seed, r.k, r.mode.name()));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Config { line, msg: msg.to_string() };
        let mut seed = None;
        let mut records = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f[0] == "seed" {
                let v = f.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| bad(n + 1, "bad seed"))?;
                seed = Some(v);
                continue;
            }
            let [index, tier, s, k, mode] = f[..] else {
                return Err(bad(n + 1, "expected `index tier seed K mode`"));
            };
            let index: usize = index.parse().map_err(|_| bad(n + 1, "bad index"))?;
            if index != records.len() {
                return Err(bad(n + 1, "records must be numbered consecutively from 0"));
            }
            records.push(ManifestRecord {
                index,
                tier: Tier::parse(tier).map_err(|e| bad(n + 1, &e.to_string()))?,
                seed: s.parse().map_err(|_| bad(n + 1, "bad sample seed"))?,
                k: k.parse().map_err(|_| bad(n + 1, "bad K"))?,
                mode: Mode::parse(mode).map_err(|e| bad(n + 1, &e.to_string()))?,
            });
        }
        Ok(Manifest { seed: seed.ok_or_else(|| bad(0, "missing `seed` line"))?, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&[DTYPE_F64])?;
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let fmt = |msg: &str| Error::format("tensor", msg);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(fmt("bad magic"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    if u32::from_le_bytes(b4) != TENSOR_VERSION {
        return Err(fmt("unsupported version"));
    }
    let mut dt = [0u8; 1];
    r.read_exact(&mut dt)?;
    if dt[0] != DTYPE_F64 {
        return Err(fmt("unsupported dtype"));
    }
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    Tensor::new(&shape, data)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t)?;
    Ok(std::fs::write(path, buf)?)
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    read_tensor(std::fs::File::open(path)?)
}

/// Binary PPM (P6) of frame `f` of a `[T, 3, H, W]` video.
pub fn frame_ppm(video: &Tensor, f: usize) -> Result<Vec<u8>> {
    let [t, 3, h, w] = *video.shape() else {
        return Err(Error::shape("frame_ppm", video.shape(), &[0, 3, 0, 0]));
    };
    if f >= t {
        return Err(Error::invalid(format!("frame {f} of {t}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = &video.data()[f * 3 * plane..(f + 1) * 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            out.push((d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Writes `<stem>.sft` plus one `<stem>_fNN.ppm` per frame.
pub fn dump_video(dir: &Path, stem: &str, video: &Tensor) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_tensor(&dir.join(format!("{stem}.sft")), video)?;
    for f in 0..video.shape()[0] {
        std::fs::write(dir.join(format!("{stem}_f{f:02}.ppm")), frame_ppm(video, f)?)?;
    }
    Ok(())
}
