//! Synthetic moving-shape videos with prompts and reference images.
//!
//! Each sample is regenerated on demand from `(corpus seed, index)`, so a
//! manifest fully determines its corpus.

pub mod io;
pub mod palette;
pub mod render;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::encoders::{ReferenceImage, Vocab};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

pub use io::{Manifest, ManifestRecord};
pub use palette::{classify_pixel, ColorId, Direction, Rgb, ShapeKind, BACKGROUND, PALETTE};
pub use render::{render_clip, SubjectSpec};

/// Curriculum tier of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tier {
    Core,
    Full,
}

impl Tier {
    pub fn name(self) -> &'static str {
        match self {
            Tier::Core => "core",
            Tier::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "core" => Ok(Tier::Core),
            "full" => Ok(Tier::Full),
            _ => Err(Error::invalid(format!("unknown tier '{s}'"))),
        }
    }
}

/// Sample category.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Single,
    Multi,
    /// Single subject whose prompt names a different color than its reference.
    Conflict,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Single, Mode::Multi, Mode::Conflict];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Single => "single",
            Mode::Multi => "multi",
            Mode::Conflict => "conflict",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown mode '{s}'")))
    }
}

/// Frame geometry and sampling ranges of a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub size_min: f64,
    pub size_max: f64,
    /// Pixels per frame in the core tier.
    pub core_speed: f64,
    /// Largest pixels per frame in the full tier.
    pub full_speed: f64,
    pub subjects_multi: usize,
    pub augment: bool,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            frames: 8,
            height: 32,
            width: 32,
            size_min: 4.0,
            size_max: 6.0,
            core_speed: 1.0,
            full_speed: 2.0,
            subjects_multi: 2,
            augment: true,
        }
    }
}

/// Reference augmentation drawn per subject.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    /// Radians.
    pub rotation: f64,
    pub scale: f64,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation { rotation: 0.0, scale: 1.0 };

    /// Rotation in ±30°, scale in `[0.7, 1.3]`.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let deg: f64 = rng.random_range(-30.0..=30.0);
        Augmentation { rotation: deg.to_radians(), scale: rng.random_range(0.7..=1.3) }
    }
}

/// One subject rendered alone at the canvas center.
pub fn render_reference(spec: &SubjectSpec, aug: Augmentation, height: usize, width: usize) -> Result<Tensor> {
    let c = (width as f64 / 2.0, height as f64 / 2.0);
    let cov = render::coverage(spec.shape, c, spec.size * aug.scale, aug.rotation, height, width);
    let mut img = vec![0.0; 3 * height * width];
    render::paint(&mut img, spec.color.rgb(), &cov);
    Tensor::new(&[3, height, width], img)
}

/// One reference per subject, in subject order. `augment = false` gives clean
/// centered renders.
pub fn make_references<R: Rng + ?Sized>(
    specs: &[SubjectSpec],
    height: usize,
    width: usize,
    augment: bool,
    rng: &mut R,
) -> Result<Vec<ReferenceImage>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let aug = if augment { Augmentation::draw(rng) } else { Augmentation::IDENTITY };
            ReferenceImage::new(render_reference(s, aug, height, width)?, Some(i))
        })
        .collect()
}

/// `"<color> <shape> moves <direction>"` per subject, joined by `"and"`,
/// with explicit prompt colors.
pub fn prompt_text(specs: &[SubjectSpec], colors: &[ColorId]) -> String {
    specs
        .iter()
        .zip(colors)
        .map(|(s, c)| {
            let dir = s.direction().map_or("", Direction::name);
            format!("{} {} {} {}", c.name(), s.shape.name(), palette::MOVES, dir).trim_end().to_string()
        })
        .collect::<Vec<_>>()
        .join(&format!(" {} ", palette::AND))
}

/// Tokens of the truthful prompt.
pub fn make_prompt(vocab: &Vocab, specs: &[SubjectSpec]) -> Result<Vec<usize>> {
    let colors: Vec<ColorId> = specs.iter().map(|s| s.color).collect();
    vocab.tokenize(&prompt_text(specs, &colors))
}

/// Prompt colors for a conflict sample: the first subject's color is swapped
/// for another palette color.
pub fn conflict_colors<R: Rng + ?Sized>(specs: &[SubjectSpec], rng: &mut R) -> Vec<ColorId> {
    let mut colors: Vec<ColorId> = specs.iter().map(|s| s.color).collect();
    if let Some(first) = colors.first_mut() {
        let others: Vec<ColorId> = ColorId::all().filter(|c| *c != *first).collect();
        *first = others[rng.random_range(0..others.len())];
    }
    colors
}

/// A rendered sample with its conditioning inputs and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub index: usize,
    pub seed: u64,
    pub tier: Tier,
    pub mode: Mode,
    /// `[T, 3, H, W]`.
    pub video: Tensor,
    pub prompt_tokens: Vec<usize>,
    /// Colors named by the prompt, per subject.
    pub prompt_colors: Vec<ColorId>,
    pub ref_images: Vec<ReferenceImage>,
    /// Ground truth, for evaluation only.
    pub subjects: Vec<SubjectSpec>,
}

impl TrainingSample {
    pub fn k(&self) -> usize {
        self.ref_images.len()
    }
}

fn draw_subject<R: Rng + ?Sized>(
    g: &Geometry,
    speed: f64,
    color: ColorId,
    others: &[SubjectSpec],
    rng: &mut R,
) -> Option<SubjectSpec> {
    for _ in 0..20 {
        let shape = ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())];
        let size = if g.size_max > g.size_min { rng.random_range(g.size_min..=g.size_max) } else { g.size_min };
        let dir = Direction::ALL[rng.random_range(0..Direction::ALL.len())];
        let (ux, uy) = dir.unit();
        let motion = (ux * speed, uy * speed);
        let travel = speed * (g.frames.saturating_sub(1)) as f64;
        // Feasible start interval per axis.
        let axis = |extent: usize, u: f64| -> Option<(f64, f64)> {
            let lo = size + if u < 0.0 { travel } else { 0.0 };
            let hi = extent as f64 - size - if u > 0.0 { travel } else { 0.0 };
            (hi >= lo).then_some((lo, hi))
        };
        let (Some((x0, x1)), Some((y0, y1))) = (axis(g.width, ux), axis(g.height, uy)) else {
            continue;
        };
        let start = (rng.random_range(x0..=x1), rng.random_range(y0..=y1));
        let spec = SubjectSpec { shape, color, size, motion, start };
        if spec.validate(g.frames, g.height, g.width).is_ok()
            && others.iter().all(|o| render::trajectories_disjoint(o, &spec, g.frames))
        {
            return Some(spec);
        }
    }
    None
}

/// Regenerates sample `index` of a corpus from its own seed.
pub fn generate_sample(vocab: &Vocab, g: &Geometry, record: &ManifestRecord) -> Result<TrainingSample> {
    let mut rng = rng::stream(&[record.seed]);
    let speed = match record.tier {
        Tier::Core => g.core_speed,
        Tier::Full => {
            if g.full_speed > g.core_speed {
                rng.random_range(g.core_speed..=g.full_speed)
            } else {
                g.core_speed
            }
        }
    };
    let k = record.k;
    let mut colors: Vec<ColorId> = ColorId::all().collect();
    colors.shuffle(&mut rng);
    let mut subjects = Vec::with_capacity(k);
    for _attempt in 0..50 {
        subjects.clear();
        for &color in colors.iter().take(k) {
            match draw_subject(g, speed, color, &subjects, &mut rng) {
                Some(s) => subjects.push(s),
                None => break,
            }
        }
        if subjects.len() == k {
            break;
        }
    }
    if subjects.len() != k {
        return Err(Error::invalid(format!("no room for {k} subjects in a {}x{} frame", g.width, g.height)));
    }
    let video = render_clip(&subjects, g.frames, g.height, g.width)?;
    let ref_images = make_references(&subjects, g.height, g.width, g.augment, &mut rng)?;
    let prompt_colors = match record.mode {
        Mode::Conflict => conflict_colors(&subjects, &mut rng),
        _ => subjects.iter().map(|s| s.color).collect(),
    };
    let prompt_tokens = vocab.tokenize(&prompt_text(&subjects, &prompt_colors))?;
    Ok(TrainingSample {
        index: record.index,
        seed: record.seed,
        tier: record.tier,
        mode: record.mode,
        video,
        prompt_tokens,
        prompt_colors,
        ref_images,
        subjects,
    })
}

/// Plans a corpus: `n_core` core-tier records (single subject, slow, no
/// conflict) followed by `n_full` full-tier records whose modes cycle through
/// `modes` in a seeded shuffle.
pub fn build_corpus(n_core: usize, n_full: usize, modes: &[Mode], g: &Geometry, seed: u64) -> Result<Manifest> {
    if n_core > n_full {
        return Err(Error::invalid(format!("n_core={n_core} exceeds n_full={n_full}")));
    }
    if n_full > 0 && modes.is_empty() {
        return Err(Error::invalid("full tier needs at least one mode"));
    }
    let mut records = Vec::with_capacity(n_core + n_full);
    for i in 0..n_core {
        records.push(ManifestRecord { index: i, tier: Tier::Core, seed: rng::derive_seed(&[seed, i as u64]), k: 1, mode: Mode::Single });
    }
    let mut order_rng = rng::stream(&[seed, u64::MAX]);
    let mut cycle: Vec<Mode> = Vec::new();
    for j in 0..n_full {
        if cycle.is_empty() {
            cycle = modes.to_vec();
            cycle.shuffle(&mut order_rng);
        }
        let mode = cycle.pop().expect("refilled");
        let i = n_core + j;
        let k = if mode == Mode::Multi { g.subjects_multi } else { 1 };
        records.push(ManifestRecord { index: i, tier: Tier::Full, seed: rng::derive_seed(&[seed, i as u64]), k, mode });
    }
    Ok(Manifest { seed, records })
}
