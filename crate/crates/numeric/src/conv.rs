//! Two-dimensional cross-correlation with zero padding, stride and dilation.

use crate::error::{Result, TensorError};
use crate::gemm::gemm;
use crate::tape::{Op, Tape, Var};
use crate::tensor::{dims4, Tensor};

/// Geometry of a convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    /// Square kernel with stride 1 and no dilation.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, padding: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: 1,
            padding,
            dilation: 1,
        }
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ConvSpec {
            in_channels,
            out_channels,
            kernel: (kh, kw),
            stride,
            dilation,
            ..
        } = *self;
        if [in_channels, out_channels, kh, kw, stride, dilation].contains(&0) {
            return Err(TensorError::config("conv2d", format!("non-positive field in {self:?}")));
        }
        Ok(())
    }

    /// `floor((H + 2·padding − dilation·(kh−1) − 1)/stride) + 1`; errors when
    /// the result would be below one.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let extent = |size: usize, k: usize| -> Result<usize> {
            let padded = (size + 2 * self.padding) as isize;
            let reach = (self.dilation * (k - 1) + 1) as isize;
            if padded < reach {
                return Err(TensorError::config(
                    "conv2d",
                    format!(
                        "input extent {size} with padding {} cannot hold kernel {k} at dilation {}",
                        self.padding, self.dilation
                    ),
                ));
            }
            Ok(((padded - reach) as usize) / self.stride + 1)
        };
        Ok((extent(h, self.kernel.0)?, extent(w, self.kernel.1)?))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    spec: ConvSpec,
    n: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn rows(&self) -> usize {
        self.spec.in_channels * self.spec.kernel.0 * self.spec.kernel.1
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Calls `f(row, col, input_index)` for every in-bounds im2col entry.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let ConvSpec {
            in_channels: c,
            kernel: (kh, kw),
            stride,
            padding,
            dilation,
            ..
        } = self.spec;
        let (h, w, ho, wo) = (self.h, self.w, self.ho, self.wo);
        let ncols = self.cols();
        for ch in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ch * kh + ki) * kw + kj;
                    for s in 0..self.n {
                        let in_base = (s * c + ch) * h * w;
                        let col_base = s * ho * wo;
                        for oy in 0..ho {
                            let iy = (oy * stride + ki * dilation) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..wo {
                                let ix = (ox * stride + kj * dilation) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let col = col_base + oy * wo + ox;
                                debug_assert!(col < ncols);
                                f(row, col, in_base + iy as usize * w + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    /// Cross-correlation of `x: [N, C, H, W]` with `w: [C', C, kh, kw]`,
    /// zero padding, optional bias `[C']`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let [n, c, h, wd] = dims4("conv2d", self.value(x))?;
        if c != spec.in_channels {
            return Err(TensorError::config(
                "conv2d",
                format!("input has {c} channels, spec expects {}", spec.in_channels),
            ));
        }
        if self.shape(w) != spec.weight_shape() {
            return Err(TensorError::config(
                "conv2d",
                format!("weight shape {:?}, expected {:?}", self.shape(w), spec.weight_shape()),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [spec.out_channels] {
                return Err(TensorError::config(
                    "conv2d",
                    format!("bias shape {:?}, expected [{}]", self.shape(b), spec.out_channels),
                ));
            }
        }
        let (ho, wo) = spec.output_size(h, wd)?;
        let geom = ConvGeometry {
            spec: *spec,
            n,
            h,
            w: wd,
            ho,
            wo,
        };
        let (rows, ncols) = (geom.rows(), geom.cols());
        let mut cols = vec![0.0; rows * ncols];
        let xv = self.data(x);
        geom.for_each_tap(|r, col, i| cols[r * ncols + col] = xv[i]);

        let co = spec.out_channels;
        let mut y = vec![0.0; co * ncols];
        gemm(co, rows, ncols, self.data(w), false, &cols, false, 0.0, &mut y);

        let plane = ho * wo;
        let mut out = vec![0.0; n * co * plane];
        for oc in 0..co {
            let bias = b.map_or(0.0, |b| self.data(b)[oc]);
            for s in 0..n {
                let src = &y[oc * ncols + s * plane..oc * ncols + (s + 1) * plane];
                let dst = &mut out[(s * co + oc) * plane..(s * co + oc + 1) * plane];
                dst.iter_mut().zip(src).for_each(|(d, v)| *d = v + bias);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, co, ho, wo], out),
            Op::Conv2d { x, w, b, geom, cols },
        ))
    }
}

pub(crate) fn conv2d_backward(
    tape: &Tape,
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: &ConvGeometry,
    cols: &[f64],
    g: &[f64],
) -> Vec<(Var, Vec<f64>)> {
    let co = geom.spec.out_channels;
    let (rows, ncols) = (geom.rows(), geom.cols());
    let plane = geom.ho * geom.wo;

    // Gather the upstream gradient into [C', N·H'·W'] column order.
    let mut gy = vec![0.0; co * ncols];
    for oc in 0..co {
        for s in 0..geom.n {
            let src = &g[(s * co + oc) * plane..(s * co + oc + 1) * plane];
            gy[oc * ncols + s * plane..oc * ncols + (s + 1) * plane].copy_from_slice(src);
        }
    }

    let mut grads = Vec::with_capacity(3);
    if tape.requires_grad(x) {
        let mut dcols = vec![0.0; rows * ncols];
        gemm(rows, co, ncols, tape.data(w), true, &gy, false, 0.0, &mut dcols);
        let mut dx = vec![0.0; tape.value(x).numel()];
        geom.for_each_tap(|r, col, i| dx[i] += dcols[r * ncols + col]);
        grads.push((x, dx));
    }
    if tape.requires_grad(w) {
        let mut dw = vec![0.0; co * rows];
        gemm(co, ncols, rows, &gy, false, cols, true, 0.0, &mut dw);
        grads.push((w, dw));
    }
    if let Some(b) = b {
        let db = gy.chunks(ncols).map(|r| r.iter().sum()).collect();
        grads.push((b, db));
    }
    grads
}
