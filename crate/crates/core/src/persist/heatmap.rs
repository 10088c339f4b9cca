//! Gradient-weighted class activation maps over tree feature maps.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use acnet_numeric::{Mode, Tape, Tensor, Var};

use crate::backbone::FeatureExtractor;
use crate::data::BBox;
use crate::error::{AcnetError, Result};
use crate::io::{decode_pnm, encode_pnm, read_bytes, write_bytes};
use crate::tree::{internal_count, leaf_count, NodeId, TreeModel, TreeTrace};

/// A feature map in the forward graph: the map a routing node hands to its
/// children, or the convolution map inside a leaf head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Site {
    /// A leaf-level node resolves to that leaf's head.
    Node(NodeId),
    /// Leaf heads numbered 1.. from the left.
    Leaf(usize),
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Node(n) => write!(f, "node:{n}"),
            Site::Leaf(i) => write!(f, "leaf:{i}"),
        }
    }
}

impl FromStr for Site {
    type Err = AcnetError;

    /// `node:<level>_<index>` or `leaf:<i>`.
    fn from_str(s: &str) -> Result<Site> {
        let bad = || AcnetError::Input(format!("site {s:?} is neither node:<level>_<index> nor leaf:<i>"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "node" => {
                let (l, i) = rest.split_once('_').ok_or_else(bad)?;
                let (level, index) = (l.parse().map_err(|_| bad())?, i.parse().map_err(|_| bad())?);
                if level == 0 || index == 0 || level > 63 || index > 1usize << (level - 1) {
                    return Err(bad());
                }
                Ok(Site::Node(NodeId::new(level, index)))
            }
            "leaf" => rest.parse().map(Site::Leaf).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

impl Site {
    /// Tape handle of the site's map in `trace`.
    fn resolve(self, trace: &TreeTrace) -> Result<Var> {
        let h = trace.height;
        let unknown = || AcnetError::Input(format!("site {self} does not exist in a height-{h} tree"));
        match self {
            Site::Node(n) if n.level < h => Ok(trace.node_maps[n.flat()]),
            Site::Node(n) if n.level == h => Ok(trace.leaf_maps[n.flat() - internal_count(h)]),
            Site::Leaf(i) if (1..=leaf_count(h)).contains(&i) => Ok(trace.leaf_maps[i - 1]),
            _ => Err(unknown()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapMethod {
    GradCam,
    /// Rectified channel mean of the map itself.
    Response,
}

impl HeatmapMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            HeatmapMethod::GradCam => "gradcam",
            HeatmapMethod::Response => "response",
        }
    }
}

/// `[H, W]` values in `[0, 1]`; non-degenerate maps peak at exactly 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub values: Tensor,
    pub site: Site,
    pub target: Option<usize>,
    pub method: HeatmapMethod,
    /// The rectified map was zero everywhere.
    pub degenerate: bool,
}

impl Heatmap {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    /// Share of the total mass whose pixel centers fall inside `bbox`
    /// (0 for a degenerate map).
    pub fn mass_inside(&self, bbox: &BBox) -> f64 {
        let w = self.width();
        let total: f64 = self.values.data().iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        let inside: f64 = self
            .values
            .data()
            .iter()
            .enumerate()
            .filter(|(i, _)| bbox.contains_pixel(i / w, i % w))
            .map(|(_, v)| v)
            .sum();
        inside / total
    }
}

/// Rectifies a `[h, w]` map, scales it to peak 1 and upsamples it to
/// `out_h × out_w` by nearest neighbor.
fn finish(raw: Vec<f64>, h: usize, w: usize, out_h: usize, out_w: usize) -> (Tensor, bool) {
    let rect: Vec<f64> = raw.into_iter().map(|v| v.max(0.0)).collect();
    let peak = rect.iter().copied().fold(0.0, f64::max);
    let degenerate = peak <= 0.0;
    let norm: Vec<f64> = if degenerate {
        vec![0.0; rect.len()]
    } else {
        rect.iter().map(|v| v / peak).collect()
    };
    let up = Tensor::from_fn(&[out_h, out_w], |i| {
        let (y, x) = (i / out_w, i % out_w);
        norm[(y * h / out_h) * w + x * w / out_w]
    });
    (up, degenerate)
}

fn check_image<B: FeatureExtractor>(model: &TreeModel<B>, image: &Tensor) -> Result<usize> {
    let (c, s) = model.backbone().input_shape();
    if image.shape() != [c, s, s] {
        return Err(AcnetError::Input(format!(
            "heatmaps need a prepared [{c}, {s}, {s}] image, got {:?}",
            image.shape()
        )));
    }
    Ok(s)
}

/// Grad-CAM of `C[target]` at `site` for one prepared image `[C, S, S]`
/// (already resized, cropped and normalized), upsampled to `S × S`.
///
/// Channel weights are the spatial means of `∂C[target]/∂A`; the map is
/// `relu(Σ_c weight_c · A_c)` scaled to peak 1. Uses eval-mode statistics.
pub fn grad_cam<B: FeatureExtractor>(model: &mut TreeModel<B>, image: &Tensor, target: usize, site: Site) -> Result<Heatmap> {
    let s = check_image(model, image)?;
    let k = model.config().num_classes;
    if target >= k {
        return Err(AcnetError::Input(format!("target class {target} out of range for {k} classes")));
    }
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::stack(std::slice::from_ref(image))?);
    let trace = model.forward_tape(&mut tape, x, Mode::Eval)?;
    let a = site.resolve(&trace)?;
    let picked = tape.pick(trace.combined, &[target])?;
    let score = tape.sum(picked);
    tape.backward(score)?;

    let shape = tape.shape(a).to_vec();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let plane = h * w;
    let act = tape.value(a).data();
    let zeros = vec![0.0; act.len()];
    let grad = tape.grad(a).map_or(&zeros[..], |g| g.data());
    let mut raw = vec![0.0; plane];
    for ch in 0..c {
        let weight = grad[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64;
        for (r, &v) in raw.iter_mut().zip(&act[ch * plane..(ch + 1) * plane]) {
            *r += weight * v;
        }
    }
    let (values, degenerate) = finish(raw, h, w, s, s);
    Ok(Heatmap {
        values,
        site,
        target: Some(target),
        method: HeatmapMethod::GradCam,
        degenerate,
    })
}

/// Rectified channel-mean response of the map at `site`, upsampled like
/// [`grad_cam`].
pub fn response_map<B: FeatureExtractor>(model: &mut TreeModel<B>, image: &Tensor, site: Site) -> Result<Heatmap> {
    let s = check_image(model, image)?;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::stack(std::slice::from_ref(image))?);
    let trace = model.forward_tape(&mut tape, x, Mode::Eval)?;
    let a = site.resolve(&trace)?;
    let shape = tape.shape(a).to_vec();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let plane = h * w;
    let act = tape.value(a).data();
    let raw = (0..plane)
        .map(|p| (0..c).map(|ch| act[ch * plane + p]).sum::<f64>() / c as f64)
        .collect();
    let (values, degenerate) = finish(raw, h, w, s, s);
    Ok(Heatmap {
        values,
        site,
        target: None,
        method: HeatmapMethod::Response,
        degenerate,
    })
}

/// Binary P5 with maxval 255, pixel = round(255·v).
pub fn write_pgm(map: &Heatmap, path: &Path) -> Result<()> {
    write_bytes(path, &encode_pnm(&map.values)?)
}

/// Reads a PGM back as `[H, W]` in `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let t = decode_pnm(&read_bytes(path)?)?;
    match *t.shape() {
        [1, h, w] => Ok(t.reshape(&[h, w])?),
        ref s => Err(AcnetError::Data(format!("{}: expected a grayscale image, got shape {s:?}", path.display()))),
    }
}
