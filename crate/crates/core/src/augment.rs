//! Image augmentation: thin-plate-spline warps, the eight square symmetries,
//! Gaussian blur, overlapping crops, temporal windows, variance normalization
//! and additive noise, plus the two composed pipelines.
//!
//! Images are `H×W×C` tensors (grayscale in practice). Every stochastic
//! transform takes an explicit seed so a pipeline's output for a given item
//! does not depend on which other items were processed first.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::Tensor;

/// Which crop positions [`tile_crops`] emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropGrid {
    /// The first `rows × cols` positions of the stride lattice.
    Grid { rows: usize, cols: usize },
    /// Every in-bounds lattice position.
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub tps_grid_interval: usize,
    /// Std-dev of control-point displacement, px. Zero gives the identity warp.
    pub disp_sigma: f64,
    pub warps: usize,
    /// Blur std-dev is drawn uniformly from this range; `None` disables blur.
    pub blur_sigma: Option<(f64, f64)>,
    pub blurs_a: usize,
    pub blurs_b: usize,
    pub crop_size: usize,
    pub crop_stride: usize,
    pub crop_grid: CropGrid,
    pub temporal_window: usize,
    pub noise_sigma: f64,
    pub noises: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            tps_grid_interval: 128,
            disp_sigma: 10.0,
            warps: 3,
            blur_sigma: Some((1.1, 1.5)),
            blurs_a: 2,
            blurs_b: 3,
            crop_size: 256,
            crop_stride: 128,
            crop_grid: CropGrid::Grid { rows: 6, cols: 9 },
            temporal_window: 10,
            noise_sigma: 0.5,
            noises: 3,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.crop_stride == 0 || self.crop_stride > self.crop_size {
            return bad(format!("crop stride {} must be in 1..={}", self.crop_stride, self.crop_size));
        }
        if self.tps_grid_interval == 0 {
            return bad("TPS grid interval must be positive".into());
        }
        if !(self.disp_sigma >= 0.0 && self.noise_sigma >= 0.0) {
            return bad("displacement and noise std-devs must be non-negative".into());
        }
        if let Some((lo, hi)) = self.blur_sigma {
            if !(lo > 0.0 && hi >= lo) {
                return bad(format!("blur range [{lo}, {hi}] must be positive and ordered"));
            }
        }
        if self.warps == 0 || self.blurs_a == 0 || self.blurs_b == 0 || self.noises == 0 {
            return bad("copy counts must be at least 1".into());
        }
        if self.temporal_window == 0 {
            return bad("temporal window must be at least 1".into());
        }
        Ok(())
    }

    /// Images produced per full image by [`pipeline_a`] for an image of the given extents.
    pub fn multiplicity_a(&self, height: usize, width: usize) -> Result<usize> {
        let crops = crop_positions(height, width, self.crop_size, self.crop_stride, self.crop_grid)?.len();
        Ok(self.warps * 8 * self.blurs_a * crops)
    }

    /// Images produced per sequence by [`pipeline_b`].
    pub fn multiplicity_b(&self) -> usize {
        8 * self.blurs_b * self.temporal_window * self.noises
    }
}

fn grayscale_extents(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [h, w, c] => Ok((h, w, c)),
        [h, w] => Ok((h, w, 1)),
        ref s => Err(Error::shape(format!("expected an H×W×C image, got {s:?}"))),
    }
}

/// Sub-image with top-left corner `(top, left)`.
pub fn crop(image: &Tensor, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor> {
    let (h, w, c) = grayscale_extents(image)?;
    if height == 0 || width == 0 || top + height > h || left + width > w {
        return Err(Error::shape(format!(
            "crop {height}×{width} at ({top}, {left}) exceeds image {h}×{w}"
        )));
    }
    let src = image.data();
    let mut out = Vec::with_capacity(height * width * c);
    for y in top..top + height {
        let row = (y * w + left) * c;
        out.extend_from_slice(&src[row..row + width * c]);
    }
    Tensor::new(vec![height, width, c], out)
}

/// Center crop of the given extents.
pub fn center_crop(image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (h, w, _) = grayscale_extents(image)?;
    if height > h || width > w {
        return Err(Error::shape(format!("center crop {height}×{width} exceeds image {h}×{w}")));
    }
    crop(image, (h - height) / 2, (w - width) / 2, height, width)
}

// ---------------------------------------------------------------- TPS warp

fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// A fitted thin-plate spline `R² → R²`.
#[derive(Debug, Clone)]
pub struct ThinPlateSpline {
    centers: Vec<[f64; 2]>,
    /// Per output coordinate: kernel weights followed by `[a0, ax, ay]`.
    coef: [Vec<f64>; 2],
}

impl ThinPlateSpline {
    /// Interpolating spline with `f(sources[i]) = targets[i]`.
    pub fn fit(sources: &[[f64; 2]], targets: &[[f64; 2]]) -> Result<Self> {
        let n = sources.len();
        if n < 3 || n != targets.len() {
            return Err(Error::invalid("thin-plate spline needs ≥3 matched control points"));
        }
        let m = n + 3;
        let mut a = DMatrix::<f64>::zeros(m, m);
        for i in 0..n {
            for j in 0..n {
                let dx = sources[i][0] - sources[j][0];
                let dy = sources[i][1] - sources[j][1];
                a[(i, j)] = tps_kernel(dx * dx + dy * dy);
            }
            let p = [1.0, sources[i][0], sources[i][1]];
            for (k, &v) in p.iter().enumerate() {
                a[(i, n + k)] = v;
                a[(n + k, i)] = v;
            }
        }
        let lu = a.lu();
        let solve = |axis: usize| -> Result<Vec<f64>> {
            let mut rhs = DVector::<f64>::zeros(m);
            for i in 0..n {
                rhs[i] = targets[i][axis];
            }
            lu.solve(&rhs)
                .map(|v| v.iter().copied().collect())
                .ok_or_else(|| Error::invalid("degenerate control-point layout"))
        };
        Ok(Self { centers: sources.to_vec(), coef: [solve(0)?, solve(1)?] })
    }

    pub fn eval(&self, p: [f64; 2]) -> [f64; 2] {
        let n = self.centers.len();
        let mut out = [0.0; 2];
        for (axis, c) in self.coef.iter().enumerate() {
            out[axis] = c[n] + c[n + 1] * p[0] + c[n + 2] * p[1];
        }
        for (i, s) in self.centers.iter().enumerate() {
            let dx = p[0] - s[0];
            let dy = p[1] - s[1];
            let u = tps_kernel(dx * dx + dy * dy);
            out[0] += self.coef[0][i] * u;
            out[1] += self.coef[1][i] * u;
        }
        out
    }
}

/// Lattice of control points (x, y) at `interval` px, extended past the far
/// edges so the whole image lies inside the grid.
pub fn control_grid(height: usize, width: usize, interval: usize) -> Vec<[f64; 2]> {
    let steps = |extent: usize| extent.saturating_sub(1).div_ceil(interval).max(1);
    let mut pts = Vec::new();
    for gy in 0..=steps(height) {
        for gx in 0..=steps(width) {
            pts.push([(gx * interval) as f64, (gy * interval) as f64]);
        }
    }
    pts
}

/// Bilinear sample at `(x, y)` with replicated borders.
fn sample_bilinear(data: &[f32], h: usize, w: usize, c: usize, ch: usize, x: f64, y: f64) -> f32 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let at = |yy: usize, xx: usize| data[(yy * w + xx) * c + ch] as f64;
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

/// Warp with explicit per-control-point displacements `(dx, dy)` in px.
///
/// Content under control point `c` moves to `c + d`: the output at `p` is
/// the input sampled at `f(p)`, where `f` is the spline taking each displaced
/// point back to its rest position.
pub fn tps_warp_with(image: &Tensor, grid: &[[f64; 2]], displacements: &[[f64; 2]], interval: usize) -> Result<Tensor> {
    let (h, w, c) = grayscale_extents(image)?;
    if grid.len() != displacements.len() {
        return Err(Error::invalid("one displacement per control point required"));
    }
    // Work in grid units to keep the kernel matrix well conditioned.
    let scale = interval as f64;
    let sources: Vec<[f64; 2]> =
        grid.iter().zip(displacements).map(|(g, d)| [(g[0] + d[0]) / scale, (g[1] + d[1]) / scale]).collect();
    let targets: Vec<[f64; 2]> = grid.iter().map(|g| [g[0] / scale, g[1] / scale]).collect();
    let spline = ThinPlateSpline::fit(&sources, &targets)?;
    let src = image.data();
    let mut out = vec![0f32; h * w * c];
    out.par_chunks_mut(w * c).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let [fx, fy] = spline.eval([x as f64 / scale, y as f64 / scale]);
            for ch in 0..c {
                row[x * c + ch] = sample_bilinear(src, h, w, c, ch, fx * scale, fy * scale);
            }
        }
    });
    Tensor::new(image.shape().to_vec(), out)
}

/// Random elastic warp: control points on a `tps_grid_interval` lattice,
/// each displaced by i.i.d. `Normal(0, disp_sigma²)` per axis.
pub fn tps_warp(image: &Tensor, cfg: &AugmentConfig, seed: u64) -> Result<Tensor> {
    let (h, w, _) = grayscale_extents(image)?;
    if h <= cfg.tps_grid_interval && w <= cfg.tps_grid_interval {
        return Err(Error::shape(format!(
            "image {h}×{w} is not larger than one {} px grid cell",
            cfg.tps_grid_interval
        )));
    }
    let grid = control_grid(h, w, cfg.tps_grid_interval);
    let normal = Normal::new(0.0, cfg.disp_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = rng_for(seed, &[0x795]);
    let disp: Vec<[f64; 2]> = grid.iter().map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    tps_warp_with(image, &grid, &disp, cfg.tps_grid_interval)
}

// ---------------------------------------------------------------- dihedral

fn remap_square(image: &Tensor, f: impl Fn(usize, usize, usize) -> (usize, usize)) -> Result<Tensor> {
    let (h, w, c) = grayscale_extents(image)?;
    if h != w {
        return Err(Error::shape(format!("dihedral transforms need a square image, got {h}×{w}")));
    }
    let n = h;
    let src = image.data();
    let mut out = vec![0f32; src.len()];
    for y in 0..n {
        for x in 0..n {
            let (sy, sx) = f(y, x, n);
            out[(y * n + x) * c..(y * n + x + 1) * c].copy_from_slice(&src[(sy * n + sx) * c..(sy * n + sx + 1) * c]);
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Rotate a square image 90° counter-clockwise.
pub fn rot90(image: &Tensor) -> Result<Tensor> {
    remap_square(image, |y, x, n| (x, n - 1 - y))
}

/// Mirror left-right.
pub fn flip_horizontal(image: &Tensor) -> Result<Tensor> {
    remap_square(image, |y, x, n| (y, n - 1 - x))
}

/// The eight symmetries of the square, in the order identity, rot90,
/// rot180, rot270, then the horizontal mirror of each.
pub fn dihedral8(image: &Tensor) -> Result<Vec<Tensor>> {
    let mut out = vec![image.clone()];
    for i in 0..3 {
        out.push(rot90(&out[i])?);
    }
    for i in 0..4 {
        out.push(flip_horizontal(&out[i])?);
    }
    Ok(out)
}

/// Element `k` (0..8) of [`dihedral8`] without building the others.
pub fn dihedral(image: &Tensor, k: usize) -> Result<Tensor> {
    if k >= 8 {
        return Err(Error::invalid(format!("dihedral element {k} out of range 0..8")));
    }
    let mut out = image.clone();
    for _ in 0..k % 4 {
        out = rot90(&out)?;
    }
    if k >= 4 {
        out = flip_horizontal(&out)?;
    } else {
        grayscale_extents(&out).and_then(|(h, w, _)| {
            if h == w {
                Ok(())
            } else {
                Err(Error::shape(format!("dihedral transforms need a square image, got {h}×{w}")))
            }
        })?;
    }
    Ok(out)
}

// ---------------------------------------------------------------- blur

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_taps(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("blur sigma must be positive, got {sigma}")));
    }
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// Half-sample symmetric reflection (`… 1 0 | 0 1 … n-1 | n-1 n-2 …`),
/// folded periodically so any offset is valid.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m >= n { 2 * n - 1 - m } else { m }) as usize
}

fn blur_axis(src: &[f32], h: usize, w: usize, c: usize, taps: &[f64], along_rows: bool) -> Vec<f32> {
    let r = (taps.len() / 2) as i64;
    let mut out = vec![0f32; src.len()];
    out.par_chunks_mut(w * c).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for (t, &k) in taps.iter().enumerate() {
                    let off = t as i64 - r;
                    let (yy, xx) = if along_rows {
                        (y, reflect(x as i64 + off, w))
                    } else {
                        (reflect(y as i64 + off, h), x)
                    };
                    acc += k * src[(yy * w + xx) * c + ch] as f64;
                }
                row[x * c + ch] = acc as f32;
            }
        }
    });
    out
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    let taps = gaussian_taps(sigma)?;
    let (h, w, c) = grayscale_extents(image)?;
    let tmp = blur_axis(image.data(), h, w, c, &taps, true);
    Tensor::new(image.shape().to_vec(), blur_axis(&tmp, h, w, c, &taps, false))
}

/// Draw a blur std-dev from the configured range for the given seed.
pub fn sample_blur_sigma(range: (f64, f64), seed: u64) -> f64 {
    let mut rng = rng_for(seed, &[0xb1]);
    if range.1 > range.0 {
        rng.random_range(range.0..=range.1)
    } else {
        range.0
    }
}

/// Blur with σ drawn from `cfg.blur_sigma`; identity when blur is disabled.
pub fn random_blur(image: &Tensor, cfg: &AugmentConfig, seed: u64) -> Result<(Tensor, Option<f64>)> {
    match cfg.blur_sigma {
        Some(range) => {
            let sigma = sample_blur_sigma(range, seed);
            Ok((gaussian_blur(image, sigma)?, Some(sigma)))
        }
        None => Ok((image.clone(), None)),
    }
}

// ---------------------------------------------------------------- crops

/// Top-left corners `(top, left)` of the crops [`tile_crops`] would take.
pub fn crop_positions(height: usize, width: usize, size: usize, stride: usize, grid: CropGrid) -> Result<Vec<(usize, usize)>> {
    if size == 0 || stride == 0 {
        return Err(Error::invalid("crop size and stride must be positive"));
    }
    if size > height || size > width {
        return Err(Error::shape(format!("crop {size} exceeds image {height}×{width}")));
    }
    let max_rows = (height - size) / stride + 1;
    let max_cols = (width - size) / stride + 1;
    let (rows, cols) = match grid {
        CropGrid::Exhaustive => (max_rows, max_cols),
        CropGrid::Grid { rows, cols } => {
            if rows > max_rows || cols > max_cols || rows == 0 || cols == 0 {
                return Err(Error::shape(format!(
                    "{rows}×{cols} crop grid does not fit; image {height}×{width} admits {max_rows}×{max_cols}"
                )));
            }
            (rows, cols)
        }
    };
    Ok((0..rows).flat_map(|r| (0..cols).map(move |c| (r * stride, c * stride))).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub row: usize,
    pub col: usize,
    pub image: Tensor,
}

/// Overlapping square crops on a stride lattice, in row-major grid order.
pub fn tile_crops(image: &Tensor, size: usize, stride: usize, grid: CropGrid) -> Result<Vec<Crop>> {
    let (h, w, _) = grayscale_extents(image)?;
    crop_positions(h, w, size, stride, grid)?
        .into_iter()
        .map(|(top, left)| {
            Ok(Crop { row: top / stride, col: left / stride, image: crop(image, top, left, size, size)? })
        })
        .collect()
}

// ---------------------------------------------------------------- temporal, normalization, noise

/// Attach one label to every frame of a time window.
pub fn temporal_expand(frames: &[Tensor], label: Label, window: usize) -> Result<Vec<(Tensor, Label)>> {
    if frames.len() != window {
        return Err(Error::invalid(format!("sequence has {} frames, expected {window}", frames.len())));
    }
    Ok(frames.iter().map(|f| (f.clone(), label)).collect())
}

/// Shift and scale to zero mean and unit (population) standard deviation.
pub fn variance_normalize(image: &Tensor) -> Result<Tensor> {
    let n = image.len() as f64;
    let mean = image.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = image.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        return Err(Error::invalid("cannot variance-normalize a constant image"));
    }
    Ok(image.map(|v| ((v as f64 - mean) / std) as f32))
}

/// Add i.i.d. `Normal(0, sigma²)` noise.
pub fn add_noise(image: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = rng_for(seed, &[0x401]);
    let data = image.data().iter().map(|&v| (v as f64 + normal.sample(&mut rng)) as f32).collect();
    Tensor::new(image.shape().to_vec(), data)
}

// ---------------------------------------------------------------- pipelines

/// Which transform draws produced an augmented image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub warp: Option<usize>,
    pub blur: usize,
    pub blur_sigma: Option<f64>,
    pub crop: Option<(usize, usize)>,
    pub frame: Option<usize>,
    pub dihedral: usize,
    pub noise: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub image: Tensor,
    pub label: Label,
    pub stage_position: u64,
    pub provenance: Provenance,
}

type Stream = Box<dyn Iterator<Item = Result<Augmented>> + Send>;

fn fail(e: Error) -> Stream {
    Box::new(std::iter::once(Err(e)))
}

/// Full-image pipeline: warps × blurs × crops × dihedral elements, each
/// crop variance-normalized. Lazy: one warped image is alive at a time.
pub fn pipeline_a(full_image: Tensor, label: Label, stage_position: u64, cfg: &AugmentConfig) -> Result<Stream> {
    cfg.validate()?;
    let (h, w, _) = grayscale_extents(&full_image)?;
    let positions = crop_positions(h, w, cfg.crop_size, cfg.crop_stride, cfg.crop_grid)?;
    let cfg = cfg.clone();
    let item_seed = derive_seed(cfg.seed, &[0xa, stage_position]);
    let image = std::sync::Arc::new(full_image);
    let stream = (0..cfg.warps).flat_map(move |wi| -> Stream {
        let warped = match tps_warp(&image, &cfg, derive_seed(item_seed, &[wi as u64])) {
            Ok(t) => std::sync::Arc::new(t),
            Err(e) => return fail(e),
        };
        let cfg = cfg.clone();
        let positions = positions.clone();
        Box::new((0..cfg.blurs_a).flat_map(move |bi| -> Stream {
            let (blurred, sigma) = match random_blur(&warped, &cfg, derive_seed(item_seed, &[wi as u64, bi as u64])) {
                Ok(r) => r,
                Err(e) => return fail(e),
            };
            let size = cfg.crop_size;
            let stride = cfg.crop_stride;
            Box::new(positions.clone().into_iter().flat_map(move |(top, left)| -> Stream {
                let piece = match crop(&blurred, top, left, size, size) {
                    Ok(p) => p,
                    Err(e) => return fail(e),
                };
                Box::new((0..8).map(move |k| {
                    let image = variance_normalize(&dihedral(&piece, k)?)?;
                    Ok(Augmented {
                        image,
                        label,
                        stage_position,
                        provenance: Provenance {
                            warp: Some(wi),
                            blur: bi,
                            blur_sigma: sigma,
                            crop: Some((top / stride, left / stride)),
                            frame: None,
                            dihedral: k,
                            noise: None,
                        },
                    })
                }))
            }))
        }))
    });
    Ok(Box::new(stream))
}

/// Annotated-sequence pipeline: dihedral elements × blurs × frames ×
/// noise draws. Blur σ and symmetry are shared by all frames of a copy so
/// the sequence stays temporally coherent; noise is drawn per image.
pub fn pipeline_b(frames: Vec<Tensor>, label: Label, stage_position: u64, cfg: &AugmentConfig) -> Result<Stream> {
    cfg.validate()?;
    temporal_expand(&frames, label, cfg.temporal_window)?;
    for f in &frames {
        let (h, w, _) = grayscale_extents(f)?;
        if h != w {
            return Err(Error::shape(format!("sequence frames must be square, got {h}×{w}")));
        }
    }
    let cfg = cfg.clone();
    let item_seed = derive_seed(cfg.seed, &[0xb, stage_position]);
    let frames = std::sync::Arc::new(frames);
    let stream = (0..8).flat_map(move |k| {
        let cfg = cfg.clone();
        let frames = frames.clone();
        (0..cfg.blurs_b).flat_map(move |bi| -> Stream {
            let blur_seed = derive_seed(item_seed, &[bi as u64]);
            let sigma = cfg.blur_sigma.map(|r| sample_blur_sigma(r, blur_seed));
            let frames = frames.clone();
            let cfg = cfg.clone();
            Box::new((0..frames.len()).flat_map(move |fi| -> Stream {
                let base = dihedral(&frames[fi], k)
                    .and_then(|t| match sigma {
                        Some(s) => gaussian_blur(&t, s),
                        None => Ok(t),
                    })
                    .and_then(|t| variance_normalize(&t));
                let base = match base {
                    Ok(b) => b,
                    Err(e) => return fail(e),
                };
                let noise_sigma = cfg.noise_sigma;
                Box::new((0..cfg.noises).map(move |ni| {
                    let seed = derive_seed(item_seed, &[k as u64, bi as u64, fi as u64, ni as u64]);
                    Ok(Augmented {
                        image: add_noise(&base, noise_sigma, seed)?,
                        label,
                        stage_position,
                        provenance: Provenance {
                            warp: None,
                            blur: bi,
                            blur_sigma: sigma,
                            crop: None,
                            frame: Some(fi),
                            dihedral: k,
                            noise: Some(ni),
                        },
                    })
                }))
            }))
        })
    });
    Ok(Box::new(stream))
}
