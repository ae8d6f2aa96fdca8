//! Detect-then-compare subject consistency, motion following and
//! conflict resolution, all measured on decoded pixels by palette
//! segmentation.

use crate::encoders::{cosine_similarity, EncoderStack, ReferenceImage};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::synthdata::{classify_pixel, ColorId, Direction};

/// Pixels of `[3, H, W]` image data classified as `color`.
pub fn color_mask(image: &[f64], h: usize, w: usize, color: ColorId) -> Vec<bool> {
    let plane = h * w;
    (0..plane)
        .map(|i| classify_pixel([image[i], image[plane + i], image[2 * plane + i]]) == Some(color))
        .collect()
}

/// Inclusive pixel box `(x0, y0, x1, y1)` of a mask and its area.
pub fn bbox(mask: &[bool], w: usize) -> Option<((usize, usize, usize, usize), usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    let mut area = 0;
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let (x, y) = (i % w, i / w);
        area += 1;
        b = Some(match b {
            None => (x, y, x, y),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        });
    }
    b.map(|b| (b, area))
}

pub fn centroid(mask: &[bool], w: usize) -> Option<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        sx += (i % w) as f64 + 0.5;
        sy += (i / w) as f64 + 0.5;
        n += 1;
    }
    (n > 0).then(|| (sx / n as f64, sy / n as f64))
}

/// Nearest-neighbour resize of a box of `[3, H, W]` data to `[3, out, out]`.
pub fn crop_resize(image: &[f64], h: usize, w: usize, b: (usize, usize, usize, usize), out: usize) -> Tensor {
    let (x0, y0, x1, y1) = b;
    let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);
    let mut data = vec![0.0; 3 * out * out];
    for c in 0..3 {
        for i in 0..out {
            let sy = y0 + (i * bh) / out;
            for j in 0..out {
                let sx = x0 + (j * bw) / out;
                data[(c * out + i) * out + j] = image[(c * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(&[3, out, out], data).expect("crop extents")
}

fn frame(video: &Tensor, f: usize) -> &[f64] {
    let s = video.shape();
    let n = 3 * s[2] * s[3];
    &video.data()[f * n..(f + 1) * n]
}

fn video_dims(video: &Tensor) -> Result<(usize, usize, usize)> {
    match *video.shape() {
        [t, 3, h, w] => Ok((t, h, w)),
        _ => Err(Error::shape("metrics", video.shape(), &[0, 3, 0, 0])),
    }
}

/// Outcome of [`nexus_lite`].
#[derive(Clone, Debug, PartialEq)]
pub struct NexusResult {
    /// Mean over every (frame, subject) pair; misses contribute 0.
    pub score: f64,
    pub detections: usize,
    pub misses: usize,
}

/// Detect-then-compare score of a `[T, 3, H, W]` video against its
/// references. Each subject is found by its color; the detected box and the
/// reference's own box are cropped, resized to the encoder resolution and
/// compared by cosine similarity of pooled identity features (clamped at 0).
/// Detections smaller than `min_area` pixels count as misses.
pub fn nexus_lite(
    encoders: &EncoderStack,
    video: &Tensor,
    refs: &[ReferenceImage],
    colors: &[ColorId],
    min_area: usize,
) -> Result<NexusResult> {
    let (t, h, w) = video_dims(video)?;
    if refs.len() != colors.len() {
        return Err(Error::invalid("one color per reference required"));
    }
    let size = encoders.config().image_size;
    let mut ref_feats = Vec::with_capacity(refs.len());
    for (r, &c) in refs.iter().zip(colors) {
        let (rh, rw) = (r.height(), r.width());
        let img = r.pixels.data();
        let b = bbox(&color_mask(img, rh, rw, c), rw).map_or((0, 0, rw - 1, rh - 1), |(b, _)| b);
        let crop = ReferenceImage::new(crop_resize(img, rh, rw, b, size), None)?;
        ref_feats.push(encoders.identity_pooled(&crop)?);
    }
    let (mut total, mut detections, mut misses) = (0.0, 0, 0);
    for f in 0..t {
        let img = frame(video, f);
        for (&c, rf) in colors.iter().zip(&ref_feats) {
            match bbox(&color_mask(img, h, w, c), w) {
                Some((b, area)) if area >= min_area => {
                    let crop = ReferenceImage::new(crop_resize(img, h, w, b, size), None)?;
                    let feat = encoders.identity_pooled(&crop)?;
                    total += cosine_similarity(&feat, rf).max(0.0);
                    detections += 1;
                }
                _ => misses += 1,
            }
        }
    }
    let n = detections + misses;
    Ok(NexusResult { score: if n == 0 { 0.0 } else { total / n as f64 }, detections, misses })
}

/// Whether every subject's centroid moves in its prompted direction between
/// the first and last frames where it is detected.
pub fn follows_prompt(video: &Tensor, colors: &[ColorId], directions: &[Option<Direction>], min_area: usize) -> Result<bool> {
    let (t, h, w) = video_dims(video)?;
    for (&c, &dir) in colors.iter().zip(directions) {
        let Some(dir) = dir else { continue };
        let track: Vec<(f64, f64)> = (0..t)
            .filter_map(|f| {
                let m = color_mask(frame(video, f), h, w, c);
                let area = m.iter().filter(|&&v| v).count();
                (area >= min_area).then(|| centroid(&m, w)).flatten()
            })
            .collect();
        let (Some(a), Some(b)) = (track.first(), track.last()) else { return Ok(false) };
        if track.len() < 2 || Direction::of(b.0 - a.0, b.1 - a.1) != Some(dir) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Pixels over the whole video classified as the reference color versus
/// the prompted color.
pub fn conflict_counts(video: &Tensor, reference: ColorId, prompted: ColorId) -> Result<(usize, usize)> {
    let (t, h, w) = video_dims(video)?;
    let (mut r, mut p) = (0, 0);
    for f in 0..t {
        let img = frame(video, f);
        r += color_mask(img, h, w, reference).iter().filter(|&&v| v).count();
        p += color_mask(img, h, w, prompted).iter().filter(|&&v| v).count();
    }
    Ok((r, p))
}

/// The reference wins when its color covers strictly more pixels than the
/// prompted one.
pub fn ref_wins(video: &Tensor, reference: ColorId, prompted: ColorId) -> Result<bool> {
    let (r, p) = conflict_counts(video, reference, prompted)?;
    Ok(r > p)
}
