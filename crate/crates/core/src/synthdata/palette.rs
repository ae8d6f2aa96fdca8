//! Fixed color palette, shapes and motion vocabulary of the synthetic corpus.

use std::fmt;

/// RGB in `[0, 1]`.
pub type Rgb = [f64; 3];

/// Background of every rendered frame.
pub const BACKGROUND: Rgb = [0.0, 0.0, 0.0];

/// The eight subject colors. Pairwise RGB distance is at least 0.5.
pub const PALETTE: [(&str, Rgb); 8] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("cyan", [0.0, 1.0, 1.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("orange", [1.0, 0.5, 0.0]),
];

/// Index into [`PALETTE`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ColorId(pub usize);

impl ColorId {
    pub fn rgb(self) -> Rgb {
        PALETTE[self.0].1
    }

    pub fn name(self) -> &'static str {
        PALETTE[self.0].0
    }

    pub fn all() -> impl Iterator<Item = ColorId> {
        (0..PALETTE.len()).map(ColorId)
    }
}

pub fn rgb_distance(a: Rgb, b: Rgb) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Nearest palette color of `rgb` after factoring out coverage against the
/// black background: each color `X` is scored by `|p - c X|` with the best
/// `c` in `[0, 1]`. Returns `None` when the pixel is mostly background.
pub fn classify_pixel(p: Rgb) -> Option<ColorId> {
    let mut best: Option<(f64, f64, ColorId)> = None;
    for id in ColorId::all() {
        let x = id.rgb();
        let xx: f64 = x.iter().map(|v| v * v).sum();
        let c = (p.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() / xx).clamp(0.0, 1.0);
        let resid: f64 = p.iter().zip(&x).map(|(a, b)| (a - c * b) * (a - c * b)).sum();
        if best.is_none_or(|(r, _, _)| resid < r) {
            best = Some((resid, c, id));
        }
    }
    let (resid, c, id) = best?;
    // Mostly background: closer to black than to a half-covered color.
    let to_black: f64 = p.iter().map(|v| v * v).sum();
    if c < 0.5 || to_black <= resid {
        None
    } else {
        Some(id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Right,
    Left,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Right, Direction::Left, Direction::Up, Direction::Down];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Right => "right",
            Direction::Left => "left",
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }

    /// Unit step in image coordinates (y grows downward).
    pub fn unit(self) -> (f64, f64) {
        match self {
            Direction::Right => (1.0, 0.0),
            Direction::Left => (-1.0, 0.0),
            Direction::Up => (0.0, -1.0),
            Direction::Down => (0.0, 1.0),
        }
    }

    /// Dominant-axis direction of a displacement; `None` for zero motion.
    pub fn of(dx: f64, dy: f64) -> Option<Direction> {
        if dx == 0.0 && dy == 0.0 {
            return None;
        }
        Some(if dx.abs() >= dy.abs() {
            if dx > 0.0 { Direction::Right } else { Direction::Left }
        } else if dy > 0.0 {
            Direction::Down
        } else {
            Direction::Up
        })
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const PLACEHOLDER: &str = "<img>";
pub const MOVES: &str = "moves";
pub const AND: &str = "and";

/// Every word the prompt grammar can emit, plus the image placeholder.
pub fn vocabulary_words() -> Vec<String> {
    let mut words = vec![PLACEHOLDER.to_string()];
    words.extend(PALETTE.iter().map(|(n, _)| n.to_string()));
    words.extend(ShapeKind::ALL.iter().map(|s| s.name().to_string()));
    words.push(MOVES.to_string());
    words.extend(Direction::ALL.iter().map(|d| d.name().to_string()));
    words.push(AND.to_string());
    words
}
