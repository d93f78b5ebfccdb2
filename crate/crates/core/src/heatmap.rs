//! Sliding-window classification of whole images, bilinear upsampling of
//! coarse maps, and red-overlay rendering.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{crop, variance_normalize};
use crate::dataset::save_raw;
use crate::error::{Error, Result};
use crate::model::{Network, SICK};
use crate::tensor::{OpContext, Tensor};

pub const DEFAULT_STRIDE: usize = 110;

/// Grid of per-window sick-class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    /// `rows×cols`, values in `[0, 1]`.
    pub grid: Tensor<f64>,
    pub window: usize,
    pub stride: usize,
    /// Source image `(height, width)`.
    pub image_extents: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatMapSidecar {
    pub window: usize,
    pub stride: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Variance-normalize one window and return the network's sick probability.
pub fn classify_window(net: &Network, window: &Tensor) -> Result<f64> {
    let input = variance_normalize(window)?;
    let pass = net.forward(&input, &OpContext::inference())?;
    Ok(pass.probs.data()[SICK] as f64)
}

/// Grid extents for a sliding window: `floor((extent − window)/stride) + 1`.
pub fn grid_extents(height: usize, width: usize, window: usize, stride: usize) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    if height < window || width < window {
        return Err(Error::shape(format!("image {height}×{width} smaller than {window} px window")));
    }
    Ok(((height - window) / stride + 1, (width - window) / stride + 1))
}

/// Classify every `window × window` crop on a `stride` lattice. Each
/// window goes through the same single-image path as [`classify_window`].
pub fn sliding_window_classify(net: &Network, image: &Tensor, window: usize, stride: usize) -> Result<HeatMap> {
    let [ih, iw, _] = net.spec().input;
    if ih != window || iw != window {
        return Err(Error::shape(format!("window {window} does not match network input {ih}×{iw}")));
    }
    let (h, w) = match *image.shape() {
        [h, w, 1] | [h, w] => (h, w),
        ref s => return Err(Error::shape(format!("expected a grayscale image, got {s:?}"))),
    };
    let image = image.clone().reshape(vec![h, w, 1])?;
    let (rows, cols) = grid_extents(h, w, window, stride)?;
    let probs = (0..rows * cols)
        .into_par_iter()
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            classify_window(net, &crop(&image, r * stride, c * stride, window, window)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(HeatMap { grid: Tensor::new(vec![rows, cols], probs)?, window, stride, image_extents: (h, w) })
}

impl HeatMap {
    pub fn sidecar(&self) -> HeatMapSidecar {
        HeatMapSidecar {
            window: self.window,
            stride: self.stride,
            image_height: self.image_extents.0,
            image_width: self.image_extents.1,
            rows: self.grid.shape()[0],
            cols: self.grid.shape()[1],
        }
    }

    /// Raw f32 grid plus a JSON sidecar at `path.json`.
    pub fn save_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let extra: BTreeMap<String, serde_json::Value> = match serde_json::to_value(self.sidecar())? {
            serde_json::Value::Object(m) => m.into_iter().collect(),
            _ => unreachable!(),
        };
        save_raw(&self.grid.cast(), path, extra)
    }
}

fn two_d(map: &Tensor<f64>) -> Result<(usize, usize)> {
    match *map.shape() {
        [h, w] | [h, w, 1] => Ok((h, w)),
        ref s => Err(Error::shape(format!("expected a 2-D map, got {s:?}"))),
    }
}

/// Align-corners bilinear resize to `height × width` (each at least the source extent).
pub fn bilinear_upsample(map: &Tensor<f64>, height: usize, width: usize) -> Result<Tensor<f64>> {
    let (h, w) = two_d(map)?;
    if height < h || width < w {
        return Err(Error::shape(format!("target {height}×{width} smaller than source {h}×{w}")));
    }
    let spacing = |out: usize, inp: usize| if inp > 1 { (out - 1) as f64 / (inp - 1) as f64 } else { 1.0 };
    resample_placed(map, height, width, (0.0, spacing(height, h)), (0.0, spacing(width, w)))
}

/// Bilinear resample where source cell `j` of each axis sits at output pixel
/// `offset + j · spacing` (given per axis as `(offset, spacing)`). Pixels
/// beyond the outermost cells take the nearest edge value.
pub fn resample_placed(
    map: &Tensor<f64>,
    height: usize,
    width: usize,
    rows: (f64, f64),
    cols: (f64, f64),
) -> Result<Tensor<f64>> {
    let (h, w) = two_d(map)?;
    if !(rows.1 > 0.0 && cols.1 > 0.0) {
        return Err(Error::invalid("cell spacing must be positive"));
    }
    let src = map.data();
    let coord = |i: usize, (offset, spacing): (f64, f64), inp: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 - offset) / spacing).clamp(0.0, (inp - 1) as f64);
        let lo = (pos.floor() as usize).min(inp - 1);
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, pos - lo as f64)
    };
    let xs: Vec<_> = (0..width).map(|x| coord(x, cols, w)).collect();
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, rows, h);
        for &(x0, x1, fx) in &xs {
            let top = lerp(src[y0 * w + x0], src[y0 * w + x1], fx);
            let bottom = lerp(src[y1 * w + x0], src[y1 * w + x1], fx);
            out.push(lerp(top, bottom, fy));
        }
    }
    Tensor::new(vec![height, width], out)
}

// Exact when both ends agree.
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Blend a grayscale image toward pure red in proportion to `opacity · map`
/// (map clamped to `[0, 1]`). Returns `H×W×3` in `[0, 1]`.
pub fn overlay_encode(base: &Tensor, map: &Tensor<f64>, opacity: f64) -> Result<Tensor> {
    let (h, w) = match *base.shape() {
        [h, w, 1] | [h, w] => (h, w),
        ref s => return Err(Error::shape(format!("expected a grayscale base image, got {s:?}"))),
    };
    let (mh, mw) = two_d(map)?;
    if (mh, mw) != (h, w) {
        return Err(Error::shape(format!("map {mh}×{mw} does not match image {h}×{w}; upsample first")));
    }
    if !(0.0..=1.0).contains(&opacity) {
        return Err(Error::invalid(format!("opacity {opacity} outside [0, 1]")));
    }
    let mut out = Vec::with_capacity(h * w * 3);
    for (&g, &m) in base.data().iter().zip(map.data()) {
        let g = g.clamp(0.0, 1.0) as f64;
        let t = opacity * m.clamp(0.0, 1.0);
        out.push((g * (1.0 - t) + t) as f32);
        out.push((g * (1.0 - t)) as f32);
        out.push((g * (1.0 - t)) as f32);
    }
    Tensor::new(vec![h, w, 3], out)
}
