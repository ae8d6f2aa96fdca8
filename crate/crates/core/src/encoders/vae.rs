//! Invertible stand-in for a spatio-temporal VAE: `s×s` space-to-depth
//! folding followed by a fixed orthogonal channel mix.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Vae {
    stride: usize,
    /// Orthogonal `[3s², 3s²]`, row-major.
    mix: Tensor,
}

/// Orthonormalizes the rows of a random Gaussian matrix (two Gram-Schmidt passes).
fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    let mut m = Tensor::randn(&[n, n], rng).into_data();
    for _pass in 0..2 {
        for i in 0..n {
            for j in 0..i {
                let dot: f64 = (0..n).map(|c| m[i * n + c] * m[j * n + c]).sum();
                for c in 0..n {
                    m[i * n + c] -= dot * m[j * n + c];
                }
            }
            let norm = (0..n).map(|c| m[i * n + c] * m[i * n + c]).sum::<f64>().sqrt();
            for c in 0..n {
                m[i * n + c] /= norm;
            }
        }
    }
    Tensor::new(&[n, n], m).expect("square")
}

impl Vae {
    pub fn new<R: Rng + ?Sized>(stride: usize, rng: &mut R) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("vae stride must be positive"));
        }
        Ok(Vae { stride, mix: random_orthogonal(3 * stride * stride, rng) })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.stride * self.stride
    }

    pub fn mix(&self) -> &Tensor {
        &self.mix
    }

    fn frame_dims(&self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        let [t, c, h, w] = shape else {
            return Err(Error::shape("vae encode", shape, &[0, 3, 0, 0]));
        };
        let s = self.stride;
        if *c != 3 {
            return Err(Error::shape("vae encode", shape, &[*t, 3, *h, *w]));
        }
        if h % s != 0 || w % s != 0 {
            return Err(Error::invalid(format!("frame {h}x{w} not divisible by vae stride {s}")));
        }
        Ok((*t, *h, *w))
    }

    /// `[T, 3, H, W]` pixels → `[T, 3s², H/s, W/s]` latents.
    pub fn encode(&self, video: &Tensor) -> Result<Tensor> {
        let (t, h, w) = self.frame_dims(video.shape())?;
        let s = self.stride;
        let (lh, lw, cz) = (h / s, w / s, self.latent_channels());
        let src = video.data();
        let q = self.mix.data();
        let mut out = vec![0.0; t * cz * lh * lw];
        let mut u = vec![0.0; cz];
        for f in 0..t {
            for y in 0..lh {
                for x in 0..lw {
                    for ch in 0..3 {
                        for dy in 0..s {
                            for dx in 0..s {
                                u[(ch * s + dy) * s + dx] = src[((f * 3 + ch) * h + y * s + dy) * w + x * s + dx];
                            }
                        }
                    }
                    for o in 0..cz {
                        let z: f64 = q[o * cz..(o + 1) * cz].iter().zip(&u).map(|(a, b)| a * b).sum();
                        out[((f * cz + o) * lh + y) * lw + x] = z;
                    }
                }
            }
        }
        Tensor::new(&[t, cz, lh, lw], out)
    }

    /// Exact inverse of [`Vae::encode`].
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let cz = self.latent_channels();
        let [t, c, lh, lw] = latent.shape() else {
            return Err(Error::shape("vae decode", latent.shape(), &[0, cz, 0, 0]));
        };
        if *c != cz {
            return Err(Error::shape("vae decode", latent.shape(), &[*t, cz, *lh, *lw]));
        }
        let (t, lh, lw, s) = (*t, *lh, *lw, self.stride);
        let (h, w) = (lh * s, lw * s);
        let src = latent.data();
        let q = self.mix.data();
        let mut out = vec![0.0; t * 3 * h * w];
        let mut z = vec![0.0; cz];
        for f in 0..t {
            for y in 0..lh {
                for x in 0..lw {
                    for (o, zo) in z.iter_mut().enumerate() {
                        *zo = src[((f * cz + o) * lh + y) * lw + x];
                    }
                    for ch in 0..3 {
                        for dy in 0..s {
                            for dx in 0..s {
                                let j = (ch * s + dy) * s + dx;
                                let v: f64 = (0..cz).map(|o| q[o * cz + j] * z[o]).sum();
                                out[((f * 3 + ch) * h + y * s + dy) * w + x * s + dx] = v;
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(&[t, 3, h, w], out)
    }

    /// A single `[3, H, W]` image as a one-frame latent `[3s², H/s, W/s]`.
    pub fn encode_image(&self, pixels: &Tensor) -> Result<Tensor> {
        let s = pixels.shape().to_vec();
        let lat = self.encode(&pixels.clone().reshape(&[1, s[0], s.get(1).copied().unwrap_or(0), s.get(2).copied().unwrap_or(0)])?)?;
        let ls = lat.shape()[1..].to_vec();
        lat.reshape(&ls)
    }
}
