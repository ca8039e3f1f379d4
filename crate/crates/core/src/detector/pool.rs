//! Bilinear box pooling, background masking and adaptive average pooling.
//!
//! Feature cell `i` covers pixels `[origin + i·stride, origin + (i+1)·stride)`
//! and its center sits at continuous index `i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::synthgen::BoxGeom;

pub const POOL_SIZE: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    /// `H' × W' × C_f`.
    pub tensor: Tensor,
    pub stride: f64,
    pub origin: f64,
}

impl FeatureMap {
    pub fn new(tensor: Tensor, stride: f64, origin: f64) -> Result<Self> {
        if tensor.shape().len() != 3 {
            return Err(Error::Dimension(format!(
                "feature map must be H×W×C, got {:?}",
                tensor.shape()
            )));
        }
        Ok(Self {
            tensor,
            stride,
            origin,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.tensor.shape();
        (s[0], s[1], s[2])
    }

    /// Pixel coordinate to continuous cell-edge coordinate.
    fn to_cells(&self, v: f64) -> f64 {
        (v - self.origin) / self.stride
    }

    pub fn cell_center(&self, i: usize) -> f64 {
        self.origin + (i as f64 + 0.5) * self.stride
    }

    pub fn scale(&self, factor: f64) -> FeatureMap {
        FeatureMap {
            tensor: self.tensor.scale(factor),
            stride: self.stride,
            origin: self.origin,
        }
    }
}

/// One bilinear tap: flat spatial index and weight.
type Tap = (usize, f64);

fn axis_taps(lo: f64, hi: f64, bins: usize, extent: usize) -> Vec<[Tap; 2]> {
    (0..bins)
        .map(|p| {
            let s = lo + (p as f64 + 0.5) * (hi - lo) / bins as f64 - 0.5;
            let s = s.clamp(0.0, (extent - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(extent - 1);
            let t = s - i0 as f64;
            [(i0, 1.0 - t), (i1, t)]
        })
        .collect()
}

type Taps = Vec<[Tap; 2]>;

fn box_taps(fmap: &FeatureMap, b: &BoxGeom, out: usize) -> Result<(Taps, Taps)> {
    let (h, w, _) = fmap.dims();
    let (x0, x1) = (fmap.to_cells(b.x0), fmap.to_cells(b.x1));
    let (y0, y1) = (fmap.to_cells(b.y0), fmap.to_cells(b.y1));
    // written so that NaN extents are rejected too
    let wide = |d: f64| d >= 1.0;
    if !wide(x1 - x0) || !wide(y1 - y0) {
        return Err(Error::Degenerate(format!(
            "box {b:?} covers less than one feature cell"
        )));
    }
    Ok((axis_taps(y0, y1, out, h), axis_taps(x0, x1, out, w)))
}

/// Bilinear resampling of the box region onto an `out × out` grid, one sample
/// at each bin center.
pub fn box_pool(fmap: &FeatureMap, b: &BoxGeom, out: usize) -> Result<Tensor> {
    let (_, w, c) = fmap.dims();
    let (ys, xs) = box_taps(fmap, b, out)?;
    let src = fmap.tensor.data();
    let mut dst = vec![0.0f64; out * out * c];
    for (py, ytaps) in ys.iter().enumerate() {
        for (px, xtaps) in xs.iter().enumerate() {
            let o = &mut dst[(py * out + px) * c..(py * out + px + 1) * c];
            for &(yi, wy) in ytaps {
                for &(xi, wx) in xtaps {
                    let wgt = wy * wx;
                    if wgt == 0.0 {
                        continue;
                    }
                    let s = &src[(yi * w + xi) * c..(yi * w + xi + 1) * c];
                    for (d, &v) in o.iter_mut().zip(s) {
                        *d += wgt * v;
                    }
                }
            }
        }
    }
    Tensor::new(vec![out, out, c], dst)
}

/// Scatters `grad` (shape `out × out × C`) back onto `grad_fmap`.
pub fn box_pool_backward(
    fmap: &FeatureMap,
    b: &BoxGeom,
    out: usize,
    grad: &[f64],
    grad_fmap: &mut [f64],
) -> Result<()> {
    let (_, w, c) = fmap.dims();
    let (ys, xs) = box_taps(fmap, b, out)?;
    for (py, ytaps) in ys.iter().enumerate() {
        for (px, xtaps) in xs.iter().enumerate() {
            let g = &grad[(py * out + px) * c..(py * out + px + 1) * c];
            for &(yi, wy) in ytaps {
                for &(xi, wx) in xtaps {
                    let wgt = wy * wx;
                    if wgt == 0.0 {
                        continue;
                    }
                    let d = &mut grad_fmap[(yi * w + xi) * c..(yi * w + xi + 1) * c];
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv += wgt * gv;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Cells whose centers fall inside any box; the union, not a sum.
pub fn background_mask(fmap: &FeatureMap, boxes: &[BoxGeom]) -> Vec<bool> {
    let (h, w, _) = fmap.dims();
    let mut mask = vec![false; h * w];
    for y in 0..h {
        let cy = fmap.cell_center(y);
        for x in 0..w {
            let cx = fmap.cell_center(x);
            mask[y * w + x] = boxes.iter().any(|b| b.contains_point(cx, cy));
        }
    }
    mask
}

/// `f × (1 − mask)` at cell-center granularity.
pub fn mask_background(fmap: &FeatureMap, boxes: &[BoxGeom]) -> FeatureMap {
    let mask = background_mask(fmap, boxes);
    let (_, _, c) = fmap.dims();
    let mut out = fmap.clone();
    for (cell, &m) in mask.iter().enumerate() {
        if m {
            out.tensor.data_mut()[cell * c..(cell + 1) * c].fill(0.0);
        }
    }
    out
}

fn bin_range(i: usize, extent: usize, out: usize) -> (usize, usize) {
    let start = (i * extent) / out;
    let end = ((i + 1) * extent).div_ceil(out);
    (start, end)
}

/// Average pooling over an even `out × out` partition of the spatial extent.
pub fn adaptive_pool(fmap: &FeatureMap, out: usize) -> Result<Tensor> {
    let (h, w, c) = fmap.dims();
    if h < out || w < out {
        return Err(Error::Dimension(format!(
            "adaptive pool to {out}×{out} needs at least that input, got {h}×{w}"
        )));
    }
    let src = fmap.tensor.data();
    let mut dst = vec![0.0f64; out * out * c];
    for oy in 0..out {
        let (y0, y1) = bin_range(oy, h, out);
        for ox in 0..out {
            let (x0, x1) = bin_range(ox, w, out);
            let mut acc = vec![0.0f64; c];
            for y in y0..y1 {
                for x in x0..x1 {
                    for (a, &v) in acc.iter_mut().zip(&src[(y * w + x) * c..(y * w + x + 1) * c]) {
                        *a += v;
                    }
                }
            }
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            for (d, a) in dst[(oy * out + ox) * c..(oy * out + ox + 1) * c]
                .iter_mut()
                .zip(acc)
            {
                *d = a / n;
            }
        }
    }
    Tensor::new(vec![out, out, c], dst)
}

pub fn adaptive_pool_backward(
    dims: (usize, usize, usize),
    out: usize,
    grad: &[f64],
    grad_fmap: &mut [f64],
) {
    let (h, w, c) = dims;
    for oy in 0..out {
        let (y0, y1) = bin_range(oy, h, out);
        for ox in 0..out {
            let (x0, x1) = bin_range(ox, w, out);
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            let g = &grad[(oy * out + ox) * c..(oy * out + ox + 1) * c];
            for y in y0..y1 {
                for x in x0..x1 {
                    for (d, &gv) in grad_fmap[(y * w + x) * c..(y * w + x + 1) * c]
                        .iter_mut()
                        .zip(g)
                    {
                        *d += gv / n;
                    }
                }
            }
        }
    }
}
