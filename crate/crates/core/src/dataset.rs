//! Image records, JSON-lines manifests, stage-position splits, image IO and
//! the synthetic proxy corpus.
//!
//! Pixel convention: grayscale `H×W×1` tensors with values in `[0, 1]`
//! (16-bit files divide by 65535, 8-bit by 255).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageReader, Luma};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Healthy,
    Sick,
    Unlabeled,
}

impl Label {
    /// Index into class scores; `None` for unlabeled images.
    pub fn class_index(self) -> Option<usize> {
        match self {
            Label::Healthy => Some(0),
            Label::Sick => Some(1),
            Label::Unlabeled => None,
        }
    }

    pub fn from_class(class: usize) -> Result<Label> {
        match class {
            0 => Ok(Label::Healthy),
            1 => Ok(Label::Sick),
            c => Err(Error::ClassOutOfRange { class: c, classes: 2 }),
        }
    }
}

pub const MAX_LIGHT_DOSE: f64 = 200.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub stage_position: u64,
    /// Seconds of 395 nm exposure.
    pub light_dose: f64,
    pub frame_index: u32,
    pub label: Label,
    /// Set on every image produced by the synthetic generator.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub synthetic: bool,
}

impl ImageRecord {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=MAX_LIGHT_DOSE).contains(&self.light_dose) {
            return Err(Error::invalid(format!(
                "light dose {} outside [0, {MAX_LIGHT_DOSE}] for {}",
                self.light_dose,
                self.path.display()
            )));
        }
        Ok(())
    }
}

/// Parse a JSON-lines manifest. Blank lines are skipped; errors carry the
/// 1-based line number.
pub fn parse_manifest(text: &str) -> Result<Vec<ImageRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ImageRecord =
            serde_json::from_str(line).map_err(|e| Error::Manifest { line: i + 1, detail: e.to_string() })?;
        rec.validate().map_err(|e| Error::Manifest { line: i + 1, detail: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    let file = fs::File::open(path)?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    parse_manifest(&text)
}

pub fn manifest_string(records: &[ImageRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ImageRecord]) -> Result<()> {
    fs::write(path, manifest_string(records)?)?;
    Ok(())
}

/// Resolve a record's image path relative to the manifest's directory.
pub fn resolve(manifest: &Path, record: &ImageRecord) -> PathBuf {
    if record.path.is_absolute() {
        record.path.clone()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(&record.path)
    }
}

/// Partition records by stage position: a seeded shuffle of the distinct
/// position ids sends `round(test_fraction · positions)` of them (at least
/// one, at most all but one) to the test side.
pub fn split_by_position<R: Clone + HasPosition>(records: &[R], test_fraction: f64, seed: u64) -> Result<(Vec<R>, Vec<R>)> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::invalid(format!("test fraction {test_fraction} outside [0, 1]")));
    }
    let mut positions: Vec<u64> = records.iter().map(|r| r.stage_position()).collect::<BTreeSet<_>>().into_iter().collect();
    if positions.len() < 2 {
        return Err(Error::Insufficient(format!(
            "splitting needs at least 2 stage positions, found {}",
            positions.len()
        )));
    }
    positions.shuffle(&mut rng_for(seed, &[0x5b1]));
    let n_test = ((test_fraction * positions.len() as f64).round() as usize).clamp(1, positions.len() - 1);
    let test: BTreeSet<u64> = positions[..n_test].iter().copied().collect();
    let (te, tr): (Vec<R>, Vec<R>) = records.iter().cloned().partition(|r| test.contains(&r.stage_position()));
    Ok((tr, te))
}

pub trait HasPosition {
    fn stage_position(&self) -> u64;
}

impl HasPosition for ImageRecord {
    fn stage_position(&self) -> u64 {
        self.stage_position
    }
}

// ---------------------------------------------------------------- image IO

fn image_error(path: &Path, detail: impl ToString) -> Error {
    Error::Image { path: path.to_path_buf(), detail: detail.to_string() }
}

fn luma16_tensor(w: u32, h: u32, px: impl Iterator<Item = f32>) -> Result<Tensor> {
    Tensor::new(vec![h as usize, w as usize, 1], px.collect())
}

/// Decode a PNG or PGM image to a grayscale `[0, 1]` tensor.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = ImageReader::open(path)
        .map_err(|e| image_error(path, e))?
        .with_guessed_format()
        .map_err(|e| image_error(path, e))?
        .decode()
        .map_err(|e| image_error(path, e))?;
    decode_dynamic(img).map_err(|e| image_error(path, e))
}

/// Decode in-memory PNG/PGM bytes.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory(bytes).map_err(|e| image_error(Path::new("<memory>"), e))?;
    decode_dynamic(img)
}

fn decode_dynamic(img: DynamicImage) -> Result<Tensor> {
    let (w, h) = (img.width(), img.height());
    match img {
        DynamicImage::ImageLuma16(buf) => luma16_tensor(w, h, buf.into_raw().into_iter().map(|v| v as f32 / 65535.0)),
        DynamicImage::ImageLuma8(buf) => luma16_tensor(w, h, buf.into_raw().into_iter().map(|v| v as f32 / 255.0)),
        other => luma16_tensor(w, h, other.to_luma32f().into_raw().into_iter()),
    }
}

fn to_u16(image: &Tensor) -> Result<(u32, u32, Vec<u16>)> {
    let (h, w) = match *image.shape() {
        [h, w, 1] | [h, w] => (h, w),
        ref s => return Err(Error::shape(format!("expected a single-channel image, got {s:?}"))),
    };
    image.check_finite("image to save")?;
    let px = image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    Ok((w as u32, h as u32, px))
}

/// Encode as 16-bit grayscale; values are clamped to `[0, 1]`.
pub fn encode_png16(image: &Tensor) -> Result<Vec<u8>> {
    let (w, h, px) = to_u16(image)?;
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w, h, px).expect("extents match");
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png).map_err(|e| image_error(Path::new("<memory>"), e))?;
    Ok(out.into_inner())
}

/// Write a 16-bit grayscale PNG (or PGM when the extension is `.pgm`).
pub fn save_image(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h, px) = to_u16(image)?;
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w, h, px).expect("extents match");
    buf.save(path).map_err(|e| image_error(path, e))
}

/// Write an 8-bit RGB image (`H×W×3` tensor with values in `[0, 1]`).
pub fn save_rgb(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let [h, w, 3] = *image.shape() else {
        return Err(Error::shape(format!("expected H×W×3, got {:?}", image.shape())));
    };
    let px = image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf: ImageBuffer<image::Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(w as u32, h as u32, px).expect("extents");
    buf.save(path).map_err(|e| image_error(path, e))
}

/// Sidecar describing a raw little-endian f32 dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub dtype: String,
    pub shape: Vec<usize>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// Write `tensor` as raw f32 LE to `path` and a JSON sidecar to `path.json`.
pub fn save_raw(tensor: &Tensor, path: impl AsRef<Path>, extra: BTreeMap<String, serde_json::Value>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(fs::File::create(path)?);
    for v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    let sidecar = RawSidecar { dtype: "f32le".into(), shape: tensor.shape().to_vec(), extra };
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    fs::write(side, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_raw(path: impl AsRef<Path>) -> Result<(Tensor, RawSidecar)> {
    let path = path.as_ref();
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    let sidecar: RawSidecar = serde_json::from_slice(&fs::read(side)?)?;
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(image_error(path, "raw dump length is not a multiple of 4"));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((Tensor::new(sidecar.shape.clone(), data)?, sidecar))
}

// ---------------------------------------------------------------- synthetic corpus

/// Structural parameters of the synthetic proxy. Healthy fields are dense
/// smooth elliptical cells with bright interior punctae; sick fields are
/// sparse high-contrast rounded rings with scattered dark punctae on a
/// mostly empty background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub background: f64,
    /// Per-stage-position background offset range (± this value).
    pub position_jitter: f64,
    pub noise_floor: f64,
    pub healthy_cells: (usize, usize),
    /// Semi-axis range, px.
    pub healthy_axes: (f64, f64),
    pub healthy_contrast: f64,
    pub healthy_punctae: (usize, usize),
    pub sick_rings: (usize, usize),
    pub sick_radius: (f64, f64),
    pub ring_contrast: f64,
    pub sick_punctae: (usize, usize),
    pub punctum_contrast: f64,
    /// Images sharing one stage position.
    pub images_per_position: usize,
    /// One healthy cell per quadrant, except that sick images replace one
    /// randomly chosen quadrant's cell with the sick structures.
    pub quadrant: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            height: 72,
            width: 72,
            background: 0.5,
            position_jitter: 0.05,
            noise_floor: 0.02,
            healthy_cells: (3, 5),
            healthy_axes: (7.0, 14.0),
            healthy_contrast: 0.15,
            healthy_punctae: (1, 3),
            sick_rings: (1, 2),
            sick_radius: (4.0, 7.0),
            ring_contrast: 0.35,
            sick_punctae: (3, 8),
            punctum_contrast: 0.2,
            images_per_position: 10,
            quadrant: false,
            seed: 0,
        }
    }
}

/// A generated image with its record and, for sick images in quadrant mode, the quadrant
/// (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right) holding the cells.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub image: Tensor,
    pub record: ImageRecord,
    pub quadrant: Option<usize>,
}

impl HasPosition for SyntheticImage {
    fn stage_position(&self) -> u64 {
        self.record.stage_position
    }
}

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<f64>,
}

impl Canvas {
    /// Add `amount · profile(x, y)` over a bounding box.
    fn splat(&mut self, cx: f64, cy: f64, reach: f64, f: impl Fn(f64, f64) -> f64) {
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(self.h - 1);
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(self.w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                self.px[y * self.w + x] += f(x as f64 - cx, y as f64 - cy);
            }
        }
    }
}

fn smoothstep_edge(d: f64, softness: f64) -> f64 {
    // 1 inside, 0 outside, smooth over `softness` px around d = 0.
    (0.5 - d / softness).clamp(0.0, 1.0)
}

fn blob(d2: f64, radius: f64) -> f64 {
    (-d2 / (2.0 * radius * radius)).exp()
}

fn range_usize(rng: &mut Rng, r: (usize, usize)) -> usize {
    rng.random_range(r.0..=r.1.max(r.0))
}

fn range_f64(rng: &mut Rng, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..r.1)
    } else {
        r.0
    }
}

/// Area where cells may be centred: whole image or one quadrant.
fn region(spec: &SyntheticSpec, quadrant: Option<usize>, margin: f64) -> (f64, f64, f64, f64) {
    let (h, w) = (spec.height as f64, spec.width as f64);
    match quadrant {
        None => (0.0, w, 0.0, h),
        Some(q) => {
            let (x0, y0) = ((q % 2) as f64 * w / 2.0, (q / 2) as f64 * h / 2.0);
            (x0 + margin, x0 + w / 2.0 - margin, y0 + margin, y0 + h / 2.0 - margin)
        }
    }
}

fn point_in(rng: &mut Rng, (x0, x1, y0, y1): (f64, f64, f64, f64)) -> (f64, f64) {
    let x = if x1 > x0 { rng.random_range(x0..x1) } else { x0 };
    let y = if y1 > y0 { rng.random_range(y0..y1) } else { y0 };
    (x, y)
}

fn healthy_cell(c: &mut Canvas, spec: &SyntheticSpec, quadrant: Option<usize>, rng: &mut Rng) {
    let margin = if quadrant.is_some() { spec.healthy_axes.0 * 0.8 } else { 0.0 };
    let (cx, cy) = point_in(rng, region(spec, quadrant, margin));
    let mut a = range_f64(rng, spec.healthy_axes);
    let mut b = range_f64(rng, (spec.healthy_axes.0 * 0.6, a));
    if quadrant.is_some() {
        a = a.min(margin * 1.2);
        b = b.min(a);
    }
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let (s, co) = theta.sin_cos();
    let contrast = spec.healthy_contrast;
    c.splat(cx, cy, a + 2.0, |dx, dy| {
        let u = (dx * co + dy * s) / a;
        let v = (-dx * s + dy * co) / b;
        let r = (u * u + v * v).sqrt();
        contrast * smoothstep_edge((r - 1.0) * b, 3.0)
    });
    for _ in 0..range_usize(rng, spec.healthy_punctae) {
        let t = rng.random_range(0.0..std::f64::consts::TAU);
        let rr = rng.random_range(0.0..0.5);
        let (px, py) = (cx + rr * a * t.cos() * co - rr * b * t.sin() * s, cy + rr * a * t.cos() * s + rr * b * t.sin() * co);
        let k = spec.punctum_contrast * 1.2;
        c.splat(px, py, 4.0, |dx, dy| k * blob(dx * dx + dy * dy, 1.3));
    }
}

/// In quadrant mode every quadrant holds a healthy cell except, in sick
/// images, the chosen one, which holds the sick structures instead.
fn render(spec: &SyntheticSpec, label: Label, background: f64, quadrant: Option<usize>, rng: &mut Rng) -> Tensor {
    let mut c = Canvas { h: spec.height, w: spec.width, px: vec![background; spec.height * spec.width] };
    if spec.quadrant {
        for other in (0..4).filter(|&o| Some(o) != quadrant) {
            healthy_cell(&mut c, spec, Some(other), rng);
        }
    } else if label == Label::Healthy {
        for _ in 0..range_usize(rng, spec.healthy_cells) {
            healthy_cell(&mut c, spec, None, rng);
        }
    }
    if label == Label::Sick {
        let margin = if quadrant.is_some() { spec.sick_radius.1 + 4.0 } else { 0.0 };
        let area = region(spec, quadrant, margin);
        for _ in 0..range_usize(rng, spec.sick_rings) {
            let (cx, cy) = point_in(rng, area);
            let radius = range_f64(rng, spec.sick_radius);
            let k = spec.ring_contrast;
            c.splat(cx, cy, radius + 4.0, |dx, dy| {
                let d = (dx * dx + dy * dy).sqrt();
                k * blob((d - radius) * (d - radius), 1.1) - 0.3 * k * smoothstep_edge(d - radius + 1.5, 2.0)
            });
        }
        let area = region(spec, quadrant, if quadrant.is_some() { 6.0 } else { 2.0 });
        for _ in 0..range_usize(rng, spec.sick_punctae) {
            let (px, py) = point_in(rng, area);
            let k = spec.punctum_contrast;
            c.splat(px, py, 4.0, |dx, dy| -k * blob(dx * dx + dy * dy, 1.1));
        }
    }
    let noise = Normal::new(0.0, spec.noise_floor.max(0.0)).expect("finite noise floor");
    let data = c.px.iter().map(|&v| (v + noise.sample(rng)).clamp(0.0, 1.0) as f32).collect();
    Tensor::new(vec![spec.height, spec.width, 1], data).expect("extents match")
}

/// Generate `count` images of one class. Stage positions are assigned in
/// blocks of `images_per_position`; healthy blocks take even ids and sick
/// blocks odd ids so classes never share a position. Image `i` depends only
/// on `(spec.seed, label, i)`.
pub fn generate_synthetic(spec: &SyntheticSpec, label: Label, count: usize) -> Result<Vec<SyntheticImage>> {
    let class = label.class_index().ok_or_else(|| Error::invalid("synthetic images need a class label"))?;
    if spec.height < 16 || spec.width < 16 || spec.images_per_position == 0 {
        return Err(Error::invalid("synthetic spec needs ≥16 px extents and ≥1 image per position"));
    }
    let per = spec.images_per_position;
    Ok((0..count)
        .map(|i| {
            let block = (i / per) as u64;
            let position = block * 2 + class as u64;
            let mut prng = rng_for(spec.seed, &[0x5a, position]);
            let background = spec.background + range_f64(&mut prng, (-spec.position_jitter, spec.position_jitter));
            let mut rng = rng_for(derive_seed(spec.seed, &[0x5b, class as u64]), &[i as u64]);
            let quadrant = (spec.quadrant && label == Label::Sick).then(|| rng.random_range(0..4usize));
            let image = render(spec, label, background, quadrant, &mut rng);
            let name = match label {
                Label::Healthy => "healthy",
                _ => "sick",
            };
            SyntheticImage {
                image,
                record: ImageRecord {
                    path: PathBuf::from(format!("{name}_{i:05}.png")),
                    stage_position: position,
                    light_dose: if label == Label::Healthy { 0.0 } else { 200.0 },
                    frame_index: (i % per) as u32,
                    label,
                    synthetic: true,
                },
                quadrant,
            }
        })
        .collect())
}

/// Balanced corpus: `per_class` healthy then `per_class` sick images.
pub fn generate_corpus(spec: &SyntheticSpec, per_class: usize) -> Result<Vec<SyntheticImage>> {
    let mut out = generate_synthetic(spec, Label::Healthy, per_class)?;
    out.extend(generate_synthetic(spec, Label::Sick, per_class)?);
    Ok(out)
}
