//! Fine-grained toy data: every image shares a background gradient and a
//! coarse ellipse; classes differ only in a small 3×3 glyph stamped at a
//! jittered position inside the ellipse.

use acnet_numeric::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{BBox, Dataset, Sample, Split};
use crate::error::{AcnetError, Result};

pub const MAX_SYNTHETIC_CLASSES: usize = 16;
pub const MIN_SYNTHETIC_SIDE: usize = 16;

const NOISE_STD: f64 = 0.02;
const ELLIPSE_COLOR: [f64; 3] = [0.80, 0.62, 0.40];
const GLYPH_COLOR: [f64; 3] = [0.08, 0.10, 0.15];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub side: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// `per_class` training images and half as many (at least one) test
    /// images per class.
    pub fn new(classes: usize, per_class: usize, side: usize, seed: u64) -> Self {
        SyntheticSpec {
            classes,
            train_per_class: per_class,
            test_per_class: (per_class / 2).max(1),
            side,
            seed,
        }
    }
}

fn cells(code: u32) -> [[bool; 3]; 3] {
    // Bits 0–2: outer columns (mirrored), bits 3–5: middle column.
    let mut g = [[false; 3]; 3];
    for (row, cells) in g.iter_mut().enumerate() {
        let outer = code >> row & 1 == 1;
        let middle = code >> (3 + row) & 1 == 1;
        *cells = [outer, middle, outer];
    }
    g
}

fn distance(a: &[[bool; 3]; 3], b: &[[bool; 3]; 3]) -> usize {
    a.iter().flatten().zip(b.iter().flatten()).filter(|(x, y)| x != y).count()
}

/// Distance that also treats a glyph and its upside-down copy as close.
fn mirror_distance(a: &[[bool; 3]; 3], b: &[[bool; 3]; 3]) -> usize {
    let flipped = [b[2], b[1], b[0]];
    distance(a, b).min(distance(a, &flipped))
}

/// Ink reaches the first and last row and the outer columns, so no glyph
/// is a translate of another.
fn spans_box(g: &[[bool; 3]; 3]) -> bool {
    g[0].contains(&true) && g[2].contains(&true) && g.iter().any(|row| row[0])
}

/// The left-right symmetric 3×3 glyph of `class` (row-major, `true` = ink).
/// Symmetry keeps the class identity invariant under horizontal flips.
pub fn glyph_pattern(class: usize) -> [[bool; 3]; 3] {
    assert!(class < MAX_SYNTHETIC_CLASSES, "at most {MAX_SYNTHETIC_CLASSES} glyphs");
    let candidates: Vec<_> = (0u32..64)
        .map(cells)
        .filter(|g| spans_box(g) && (3..=7).contains(&g.iter().flatten().filter(|&&c| c).count()))
        .collect();
    // Greedy farthest-point selection keeps glyphs mutually distinct.
    let mut chosen = vec![candidates[0]];
    while chosen.len() <= class {
        let next = candidates
            .iter()
            .filter(|c| !chosen.contains(c))
            .max_by_key(|c| {
                let d = chosen.iter().map(|p| mirror_distance(p, c)).min().unwrap();
                (d, std::cmp::Reverse(candidates.iter().position(|x| x == *c)))
            })
            .copied()
            .unwrap();
        chosen.push(next);
    }
    chosen[class]
}

fn render<R: Rng>(class: usize, side: usize, rng: &mut R, noise: &Normal<f64>) -> (Tensor, BBox) {
    let s = side as f64;
    let brightness = rng.random_range(-0.04..0.04);
    let cy = s / 2.0 + rng.random_range(-1.0..1.0) * s / 32.0;
    let cx = s / 2.0 + rng.random_range(-1.0..1.0) * s / 32.0;
    let ry = 0.34 * s * (1.0 + rng.random_range(-0.04..0.04));
    let rx = 0.28 * s * (1.0 + rng.random_range(-0.04..0.04));
    let cell = side / 10;
    let extent = 3 * cell;
    let jitter = (side / 10) as i64;
    let top = (cy - extent as f64 / 2.0).round() as i64 + rng.random_range(-jitter..=jitter);
    let left = (cx - extent as f64 / 2.0).round() as i64 + rng.random_range(-jitter..=jitter);
    let pattern = glyph_pattern(class);

    let mut image = Tensor::zeros(&[3, side, side]);
    let denom = (side - 1) as f64;
    for y in 0..side {
        for x in 0..side {
            let (fy, fx) = (y as f64 / denom, x as f64 / denom);
            let mut px = [0.25 + 0.25 * fx, 0.30 + 0.20 * fy, 0.45 - 0.15 * fx];
            let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
            if dy * dy + dx * dx <= 1.0 {
                px = ELLIPSE_COLOR;
            }
            let (gy, gx) = (y as i64 - top, x as i64 - left);
            if (0..extent as i64).contains(&gy)
                && (0..extent as i64).contains(&gx)
                && pattern[gy as usize / cell][gx as usize / cell]
            {
                px = GLYPH_COLOR;
            }
            for (c, v) in px.iter().enumerate() {
                image.data_mut()[(c * side + y) * side + x] = v + brightness;
            }
        }
    }
    for v in image.data_mut() {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
    let bbox = BBox {
        top: top as f64,
        left: left as f64,
        bottom: (top + extent as i64) as f64,
        right: (left + extent as i64) as f64,
    };
    (image, bbox)
}

fn split(spec: &SyntheticSpec, split: Split, per_class: usize, stream: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let noise = Normal::new(0.0, NOISE_STD).unwrap();
    let tag = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let class_names: Vec<String> = (0..spec.classes).map(|k| format!("glyph{k:02}")).collect();
    let mut samples = Vec::with_capacity(spec.classes * per_class);
    for (label, name) in class_names.iter().enumerate() {
        for i in 0..per_class {
            let (image, bbox) = render(label, spec.side, &mut rng, &noise);
            samples.push(Sample {
                image,
                label,
                id: format!("{tag}/{name}/{i:04}"),
                glyph: Some(bbox),
            });
        }
    }
    Dataset {
        samples,
        num_classes: spec.classes,
        class_names,
        split,
    }
}

/// Deterministic `(train, test)` pair; the two splits use independent
/// random streams.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    if spec.classes == 0 || spec.classes > MAX_SYNTHETIC_CLASSES {
        return Err(AcnetError::Config(format!(
            "synthetic data supports 1..={MAX_SYNTHETIC_CLASSES} classes, got {}",
            spec.classes
        )));
    }
    if spec.side < MIN_SYNTHETIC_SIDE {
        return Err(AcnetError::Config(format!(
            "synthetic images need side >= {MIN_SYNTHETIC_SIDE}, got {}",
            spec.side
        )));
    }
    if spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(AcnetError::Config("synthetic splits need at least one image per class".into()));
    }
    Ok((
        split(spec, Split::Train, spec.train_per_class, 1),
        split(spec, Split::Test, spec.test_per_class, 2),
    ))
}
