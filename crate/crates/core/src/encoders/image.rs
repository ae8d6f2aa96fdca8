use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Type of an entry of a [`TokenSequence`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Text,
    ImagePlaceholder,
}

/// Text tokens followed by one placeholder per reference image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    kinds: Vec<TokenKind>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, kinds: Vec<TokenKind>) -> Result<Self> {
        if ids.len() != kinds.len() {
            return Err(Error::invalid("token ids and kinds differ in length"));
        }
        let first_img = kinds.iter().position(|k| *k == TokenKind::ImagePlaceholder).unwrap_or(kinds.len());
        if kinds[first_img..].iter().any(|k| *k == TokenKind::Text) {
            return Err(Error::invalid("text token after an image placeholder"));
        }
        Ok(TokenSequence { ids, kinds })
    }

    pub fn text(ids: Vec<usize>) -> Self {
        let kinds = vec![TokenKind::Text; ids.len()];
        TokenSequence { ids, kinds }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn kinds(&self) -> &[TokenKind] {
        &self.kinds
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn placeholder_count(&self) -> usize {
        self.kinds.iter().filter(|k| **k == TokenKind::ImagePlaceholder).count()
    }

    /// The text-only prefix.
    pub fn text_ids(&self) -> &[usize] {
        &self.ids[..self.len() - self.placeholder_count()]
    }
}

/// A subject reference: `[3, H, W]` pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceImage {
    pub pixels: Tensor,
    /// Opaque label, used only by evaluation.
    pub subject_id: Option<usize>,
}

impl ReferenceImage {
    /// Clamps values into `[0, 1]`.
    pub fn new(pixels: Tensor, subject_id: Option<usize>) -> Result<Self> {
        if pixels.ndim() != 3 || pixels.shape()[0] != 3 {
            return Err(Error::shape("reference image", pixels.shape(), &[3, 0, 0]));
        }
        Ok(ReferenceImage { pixels: pixels.map(|v| v.clamp(0.0, 1.0)), subject_id })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// Splits `[3, H, W]` into non-overlapping `p×p` patches: `[(H/p)(W/p), 3p²]`,
/// feature order `(channel, dy, dx)`, patches in raster order.
pub fn patchify_image(pixels: &Tensor, p: usize) -> Result<Tensor> {
    let [c, h, w] = pixels.shape() else {
        return Err(Error::shape("patchify", pixels.shape(), &[3, 0, 0]));
    };
    let (c, h, w) = (*c, *h, *w);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::invalid(format!("image {h}x{w} not divisible by patch {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let feat = c * p * p;
    let src = pixels.data();
    let mut out = vec![0.0; gh * gw * feat];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = &mut out[(gy * gw + gx) * feat..(gy * gw + gx + 1) * feat];
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        row[(ch * p + dy) * p + dx] = src[(ch * h + gy * p + dy) * w + gx * p + dx];
                    }
                }
            }
        }
    }
    Tensor::new(&[gh * gw, feat], out)
}
