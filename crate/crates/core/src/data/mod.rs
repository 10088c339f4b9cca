//! Samples, datasets, loading, synthetic generation, augmentation and batching.

mod augment;
mod batch;
mod synthetic;

use std::path::Path;

use acnet_numeric::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{AcnetError, Result};
use crate::io::read_image;

pub use augment::{augment, eval_transform, flip_horizontal, resize_bilinear, resized_extent, AugmentPolicy};
pub use batch::{batch_indices, batches, Batch};
pub use synthetic::{generate_synthetic, glyph_pattern, SyntheticSpec, MAX_SYNTHETIC_CLASSES, MIN_SYNTHETIC_SIDE};

/// Axis-aligned box in pixel coordinates, half-open: rows `[top, bottom)`,
/// columns `[left, right)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub top: f64,
    pub left: f64,
    pub bottom: f64,
    pub right: f64,
}

impl BBox {
    pub fn height(&self) -> f64 {
        (self.bottom - self.top).max(0.0)
    }

    pub fn width(&self) -> f64 {
        (self.right - self.left).max(0.0)
    }

    /// Whether the center of pixel `(y, x)` lies inside.
    pub fn contains_pixel(&self, y: usize, x: usize) -> bool {
        let (cy, cx) = (y as f64 + 0.5, x as f64 + 0.5);
        cy >= self.top && cy < self.bottom && cx >= self.left && cx < self.right
    }

    /// Fraction of an `h × w` image's pixels whose centers lie inside.
    pub fn area_fraction(&self, h: usize, w: usize) -> f64 {
        let inside = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| self.contains_pixel(y, x))
            .count();
        inside as f64 / (h * w) as f64
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            top: self.top.min(other.top),
            left: self.left.min(other.left),
            bottom: self.bottom.max(other.bottom),
            right: self.right.max(other.right),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`, values in `[0, 1]` until normalized.
    pub image: Tensor,
    pub label: usize,
    pub id: String,
    /// Location of the class-defining detail, when known.
    pub glyph: Option<BBox>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Statistics that leave images unchanged.
    pub fn identity(channels: usize) -> Self {
        NormStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// `(x − mean) / std` per channel.
pub fn normalize(sample: &Sample, stats: &NormStats) -> Result<Sample> {
    let c = sample.image.shape()[0];
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(AcnetError::Config(format!(
            "normalization statistics cover {} channels, image has {c}",
            stats.mean.len()
        )));
    }
    if let Some(ch) = stats.std.iter().position(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(AcnetError::Config(format!("channel {ch} has standard deviation {}", stats.std[ch])));
    }
    let plane = sample.image.numel() / c;
    let mut out = sample.clone();
    for (i, v) in out.image.data_mut().iter_mut().enumerate() {
        let ch = i / plane;
        *v = (*v - stats.mean[ch]) / stats.std[ch];
    }
    Ok(out)
}

/// Immutable ordered collection of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Per-channel mean and (population) standard deviation over every pixel.
    pub fn compute_stats(&self) -> Result<NormStats> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| AcnetError::Data("cannot compute statistics of an empty dataset".into()))?;
        let c = first.image.shape()[0];
        let mut sum = vec![0.0; c];
        let mut count = vec![0usize; c];
        for s in &self.samples {
            let plane = s.image.numel() / c;
            for (i, v) in s.image.data().iter().enumerate() {
                sum[i / plane] += v;
                count[i / plane] += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
        let mut sq = vec![0.0; c];
        for s in &self.samples {
            let plane = s.image.numel() / c;
            for (i, v) in s.image.data().iter().enumerate() {
                let d = v - mean[i / plane];
                sq[i / plane] += d * d;
            }
        }
        let std = sq.iter().zip(&count).map(|(s, &n)| (s / n as f64).sqrt()).collect();
        Ok(NormStats { mean, std })
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut entries = std::fs::read_dir(dir)
        .map_err(|e| AcnetError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| AcnetError::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Loads `<root>/<class_name>/<image files>`. Classes are indexed in
/// lexicographic order of their directory names, samples in path order.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let class_dirs: Vec<_> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(AcnetError::Data(format!("{} contains no class directories", root.display())));
    }
    let mut samples = Vec::new();
    let mut class_names = Vec::with_capacity(class_dirs.len());
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        let files: Vec<_> = sorted_entries(dir)?.into_iter().filter(|p| p.is_file()).collect();
        if files.is_empty() {
            return Err(AcnetError::Data(format!("class directory {} is empty", dir.display())));
        }
        for f in files {
            samples.push(Sample {
                image: read_image(&f)?,
                label,
                id: format!("{name}/{}", f.file_name().unwrap().to_string_lossy()),
                glyph: None,
            });
        }
        class_names.push(name);
    }
    Ok(Dataset {
        samples,
        num_classes: class_names.len(),
        class_names,
        split: Split::Train,
    })
}
