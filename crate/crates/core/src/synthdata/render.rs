//! Anti-aliased rasterization of moving shapes.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::palette::{ColorId, Direction, Rgb, ShapeKind};

/// Supersampling factor per axis. Odd, so one sample sits on the pixel center.
pub const SUPERSAMPLE: usize = 5;

/// One subject of a clip. Positions are continuous pixel coordinates with
/// pixel `(i, j)` covering `[j, j+1) × [i, i+1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubjectSpec {
    pub shape: ShapeKind,
    pub color: ColorId,
    /// Radius (half-extent) in pixels.
    pub size: f64,
    /// Displacement per frame.
    pub motion: (f64, f64),
    /// Center at frame 0.
    pub start: (f64, f64),
}

impl SubjectSpec {
    pub fn center(&self, frame: usize) -> (f64, f64) {
        (self.start.0 + frame as f64 * self.motion.0, self.start.1 + frame as f64 * self.motion.1)
    }

    pub fn direction(&self) -> Option<Direction> {
        Direction::of(self.motion.0, self.motion.1)
    }

    /// Axis-aligned box `(x0, y0, x1, y1)` at a frame.
    pub fn bbox(&self, frame: usize) -> (f64, f64, f64, f64) {
        let (cx, cy) = self.center(frame);
        (cx - self.size, cy - self.size, cx + self.size, cy + self.size)
    }

    /// Errors if the subject leaves a `width × height` frame within `frames`.
    pub fn validate(&self, frames: usize, height: usize, width: usize) -> Result<()> {
        if !(self.size > 0.0) {
            return Err(Error::invalid("subject size must be positive"));
        }
        for f in 0..frames {
            let (x0, y0, x1, y1) = self.bbox(f);
            if x0 < 0.0 || y0 < 0.0 || x1 > width as f64 || y1 > height as f64 {
                return Err(Error::invalid(format!(
                    "{} {} leaves the {width}x{height} frame at frame {f}",
                    self.color.name(),
                    self.shape.name()
                )));
            }
        }
        Ok(())
    }
}

/// Whether a point lies inside a shape of radius `r` centered at `c`,
/// rotated by `angle` radians.
pub fn contains(shape: ShapeKind, c: (f64, f64), r: f64, angle: f64, x: f64, y: f64) -> bool {
    let (s, co) = angle.sin_cos();
    let (dx, dy) = (x - c.0, y - c.1);
    let (u, v) = (co * dx + s * dy, -s * dx + co * dy);
    match shape {
        ShapeKind::Circle => u * u + v * v <= r * r,
        ShapeKind::Square => u.abs() <= r && v.abs() <= r,
        ShapeKind::Triangle => {
            // Equilateral, apex up (negative y), inscribed in the circle of radius r.
            v <= 0.5 * r && v >= 3f64.sqrt() * u.abs() - r
        }
    }
}

/// Fractional coverage of every pixel of an `h × w` canvas.
pub fn coverage(shape: ShapeKind, c: (f64, f64), r: f64, angle: f64, h: usize, w: usize) -> Vec<f64> {
    let n = SUPERSAMPLE;
    let inv = 1.0 / (n * n) as f64;
    let reach = r * std::f64::consts::SQRT_2 + 1.0;
    let mut out = vec![0.0; h * w];
    let y_lo = ((c.1 - reach).floor().max(0.0)) as usize;
    let y_hi = ((c.1 + reach).ceil().max(0.0) as usize).min(h);
    let x_lo = ((c.0 - reach).floor().max(0.0)) as usize;
    let x_hi = ((c.0 + reach).ceil().max(0.0) as usize).min(w);
    for i in y_lo..y_hi {
        for j in x_lo..x_hi {
            let mut hits = 0usize;
            for a in 0..n {
                for b in 0..n {
                    let y = i as f64 + (a as f64 + 0.5) / n as f64;
                    let x = j as f64 + (b as f64 + 0.5) / n as f64;
                    hits += usize::from(contains(shape, c, r, angle, x, y));
                }
            }
            out[i * w + j] = hits as f64 * inv;
        }
    }
    out
}

/// Pixels whose centers fall inside the shape.
pub fn footprint(shape: ShapeKind, c: (f64, f64), r: f64, angle: f64, h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = contains(shape, c, r, angle, j as f64 + 0.5, i as f64 + 0.5);
        }
    }
    out
}

/// Composites one shape over a `[3, h, w]` image buffer.
pub fn paint(image: &mut [f64], color: Rgb, cov: &[f64]) {
    let plane = cov.len();
    for (ch, &col) in color.iter().enumerate() {
        for (px, &a) in image[ch * plane..(ch + 1) * plane].iter_mut().zip(cov) {
            *px = *px * (1.0 - a) + col * a;
        }
    }
}

fn boxes_apart(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> bool {
    a.2 + 1.0 <= b.0 || b.2 + 1.0 <= a.0 || a.3 + 1.0 <= b.1 || b.3 + 1.0 <= a.1
}

/// Whether two subjects keep at least one pixel of separation on every frame.
pub fn trajectories_disjoint(a: &SubjectSpec, b: &SubjectSpec, frames: usize) -> bool {
    (0..frames).all(|f| boxes_apart(a.bbox(f), b.bbox(f)))
}

/// Renders `[T, 3, H, W]` pixels; later subjects are drawn over earlier ones.
pub fn render_clip(specs: &[SubjectSpec], frames: usize, height: usize, width: usize) -> Result<Tensor> {
    if specs.is_empty() || specs.len() > 4 {
        return Err(Error::invalid(format!("clips hold 1 to 4 subjects, got {}", specs.len())));
    }
    for (i, s) in specs.iter().enumerate() {
        s.validate(frames, height, width)?;
        for o in &specs[..i] {
            if !boxes_apart(s.bbox(0), o.bbox(0)) {
                return Err(Error::invalid("subjects overlap at frame 0"));
            }
        }
    }
    let plane = height * width;
    let mut data = vec![0.0; frames * 3 * plane];
    for f in 0..frames {
        let img = &mut data[f * 3 * plane..(f + 1) * 3 * plane];
        for s in specs {
            let cov = coverage(s.shape, s.center(f), s.size, 0.0, height, width);
            paint(img, s.color.rgb(), &cov);
        }
    }
    Tensor::new(&[frames, 3, height, width], data)
}
