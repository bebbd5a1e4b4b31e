//! Frame tensors, image-sequence I/O and synthetic test scenes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffnet::{Real, Tensor};
use crate::pipeline::MaskSequence;
use crate::{Error, Result};

const IMAGE_EXTENSIONS: &[&str] = &["png", "ppm", "pgm", "pnm"];

/// Video frames `[N, C, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTensor {
    data: Vec<f32>,
    shape: [usize; 4],
    frame_index_offset: usize,
}

impl FrameTensor {
    /// Validates the shape (`N >= 1`, `C` in {1, 3}, `H, W >= 8`) and that
    /// every value is finite and inside `[0, 1]`.
    pub fn new(data: Vec<f32>, shape: [usize; 4], frame_index_offset: usize) -> Result<Self> {
        let [n, c, h, w] = shape;
        if n == 0 || !(c == 1 || c == 3) || h < 8 || w < 8 {
            return Err(Error::InvalidData(format!(
                "frame tensor shape {shape:?} needs N >= 1, C in {{1, 3}}, H, W >= 8"
            )));
        }
        if data.len() != n * c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "frame tensor {shape:?} needs {} values, got {}",
                n * c * h * w,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::InvalidData(format!("frame value {v} outside [0, 1]")));
        }
        Ok(FrameTensor {
            data,
            shape,
            frame_index_offset,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.shape[0] == 0
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// `[C, H, W]`.
    pub fn frame_shape(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn frame_index_offset(&self) -> usize {
        self.frame_index_offset
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn frame_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    /// Frame `i` as a `[C, H, W]` slice.
    pub fn frame(&self, i: usize) -> &[f32] {
        let len = self.frame_len();
        &self.data[i * len..(i + 1) * len]
    }

    /// Frames `range`, keeping the source index of the first one.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<FrameTensor> {
        if range.start >= range.end || range.end > self.len() {
            return Err(Error::InvalidData(format!(
                "frame range {range:?} outside 0..{}",
                self.len()
            )));
        }
        let len = self.frame_len();
        FrameTensor::new(
            self.data[range.start * len..range.end * len].to_vec(),
            [range.len(), self.shape[1], self.shape[2], self.shape[3]],
            self.frame_index_offset + range.start,
        )
    }

    /// Gathers the given frames (in order) into a batch tensor.
    pub fn gather<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        let len = self.frame_len();
        let mut out = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            out.extend(self.frame(i).iter().map(|&v| T::from_f32(v).unwrap()));
        }
        let [_, c, h, w] = self.shape;
        Tensor::from_vec(&[indices.len(), c, h, w], out).expect("gathered length matches")
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.gather(&all)
    }

    /// Builds frames from a `[N, C, H, W]` tensor, clamping into `[0, 1]`.
    pub fn from_tensor<T: Real>(tensor: &Tensor<T>, frame_index_offset: usize) -> Result<Self> {
        let shape: [usize; 4] = tensor.shape().try_into().map_err(|_| {
            Error::ShapeMismatch(format!("expected [N, C, H, W], got {:?}", tensor.shape()))
        })?;
        let data = tensor
            .data()
            .iter()
            .map(|v| v.to_f32().unwrap_or(f32::NAN).clamp(0.0, 1.0))
            .collect();
        FrameTensor::new(data, shape, frame_index_offset)
    }

    /// Concatenates frame tensors of identical frame shape.
    pub fn concat(parts: &[FrameTensor]) -> Result<FrameTensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidData("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.frame_shape() != first.frame_shape() {
                return Err(Error::ShapeMismatch(format!(
                    "cannot concatenate frames {:?} and {:?}",
                    first.frame_shape(),
                    p.frame_shape()
                )));
            }
            data.extend_from_slice(&p.data);
            n += p.len();
        }
        let [_, c, h, w] = first.shape;
        FrameTensor::new(data, [n, c, h, w], first.frame_index_offset)
    }
}

/// A binary `H x W` mask, `1` = foreground.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidData("mask values must be 0 or 1".into()));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// True when every foreground pixel of `other` is foreground here too.
    pub fn contains(&self, other: &Mask) -> bool {
        self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(&a, &b)| a >= b)
    }
}

/// Ground-truth masks for a video. Only `labeled` frames carry ground truth;
/// the others are all-zero placeholders.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthMasks {
    masks: Vec<Mask>,
    labeled: BTreeSet<usize>,
}

impl GroundTruthMasks {
    pub fn new(masks: Vec<Mask>, labeled: BTreeSet<usize>) -> Result<Self> {
        if let Some(&bad) = labeled.iter().find(|&&i| i >= masks.len()) {
            return Err(Error::InvalidData(format!(
                "labeled index {bad} outside 0..{}",
                masks.len()
            )));
        }
        Ok(GroundTruthMasks { masks, labeled })
    }

    /// Ground truth for every frame.
    pub fn fully_labeled(masks: Vec<Mask>) -> Self {
        let labeled = (0..masks.len()).collect();
        GroundTruthMasks { masks, labeled }
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn labeled_indices(&self) -> &BTreeSet<usize> {
        &self.labeled
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Restricts to frames `range`, re-indexing from zero.
    pub fn slice(&self, range: std::ops::Range<usize>) -> GroundTruthMasks {
        let labeled = self
            .labeled
            .range(range.clone())
            .map(|i| i - range.start)
            .collect();
        GroundTruthMasks {
            masks: self.masks[range].to_vec(),
            labeled,
        }
    }
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Image files of `dir` in lexicographic filename order.
pub fn list_image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file() && has_image_extension(p))
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if files.is_empty() {
        return Err(Error::EmptyDirectory(dir.to_path_buf()));
    }
    Ok(files)
}

/// The last run of ASCII digits in a file stem, e.g. `in000123.png` -> 123.
pub fn frame_number(path: &Path) -> Option<usize> {
    let stem = path.file_stem()?.to_str()?;
    let end = stem.rfind(|c: char| c.is_ascii_digit())? + 1;
    let start = stem[..end]
        .rfind(|c: char| !c.is_ascii_digit())
        .map_or(0, |i| i + 1);
    stem[start..end].parse().ok()
}

fn decode(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })
}

fn is_single_channel(img: &DynamicImage) -> bool {
    !img.color().has_color()
}

/// Planar `[C, H, W]` floats in `[0, 1]` from 8-bit samples.
fn planar(img: &DynamicImage, channels: usize) -> (Vec<f32>, usize, usize) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0f32; channels * h * w];
    if channels == 1 {
        let gray = grayscale_values(img);
        out.copy_from_slice(&gray);
    } else {
        let rgb = img.to_rgb8();
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                out[c * h * w + i] = px[c] as f32 / 255.0;
            }
        }
    }
    (out, h, w)
}

/// Luma `0.299 R + 0.587 G + 0.114 B` for color images; raw values for
/// single-channel ones.
fn grayscale_values(img: &DynamicImage) -> Vec<f32> {
    if is_single_channel(img) {
        img.to_luma8().pixels().map(|p| p[0] as f32 / 255.0).collect()
    } else {
        img.to_rgb8()
            .pixels()
            .map(|p| {
                (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0
            })
            .collect()
    }
}

/// Bilinear resize of a planar image with corner-aligned sampling: output
/// corners map exactly onto input corners.
pub fn resize_bilinear(
    planes: &[f32],
    channels: usize,
    (h, w): (usize, usize),
    (out_h, out_w): (usize, usize),
) -> Vec<f32> {
    let scale = |out: usize, inp: usize| {
        if out > 1 {
            (inp - 1) as f64 / (out - 1) as f64
        } else {
            0.0
        }
    };
    let (sy, sx) = (scale(out_h, h), scale(out_w, w));
    let mut out = vec![0f32; channels * out_h * out_w];
    for c in 0..channels {
        let src = &planes[c * h * w..(c + 1) * h * w];
        for oy in 0..out_h {
            let fy = oy as f64 * sy;
            let y0 = (fy.floor() as usize).min(h - 1);
            let y1 = (y0 + 1).min(h - 1);
            let ty = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = ox as f64 * sx;
                let x0 = (fx.floor() as usize).min(w - 1);
                let x1 = (x0 + 1).min(w - 1);
                let tx = fx - x0 as f64;
                let at = |y: usize, x: usize| src[y * w + x] as f64;
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                out[c * out_h * out_w + oy * out_w + ox] =
                    (top * (1.0 - ty) + bottom * ty).clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

/// Loads a single image as a one-frame tensor.
pub fn load_frame_file(path: &Path, resize: Option<(usize, usize)>, grayscale: bool) -> Result<FrameTensor> {
    let img = decode(path)?;
    let channels = if grayscale || is_single_channel(&img) { 1 } else { 3 };
    let (planes, h, w) = planar(&img, channels);
    let (planes, h, w) = match resize {
        Some((rh, rw)) if (rh, rw) != (h, w) => (resize_bilinear(&planes, channels, (h, w), (rh, rw)), rh, rw),
        _ => (planes, h, w),
    };
    FrameTensor::new(planes, [1, channels, h, w], frame_number(path).unwrap_or(0))
}

/// Loads every PNG/PPM/PGM in `dir` (lexicographic order) into a frame tensor.
///
/// Color frames are RGB; a sequence whose files are all single-channel (or
/// `grayscale` set) yields one channel. Without `resize` every frame must
/// have the same size. The frame index offset is the number in the first
/// filename, if any.
pub fn load_frame_sequence(
    dir: &Path,
    resize: Option<(usize, usize)>,
    grayscale: bool,
) -> Result<FrameTensor> {
    let files = list_image_files(dir)?;
    let images: Vec<DynamicImage> = files
        .par_iter()
        .map(|p| decode(p))
        .collect::<Result<Vec<_>>>()?;

    let first = (images[0].height() as usize, images[0].width() as usize);
    if resize.is_none() {
        for (img, path) in images.iter().zip(&files) {
            let dims = (img.height() as usize, img.width() as usize);
            if dims != first {
                return Err(Error::MixedDimensions {
                    path: path.clone(),
                    expected: first,
                    found: dims,
                });
            }
        }
    }
    let channels = if grayscale || images.iter().all(is_single_channel) {
        1
    } else {
        3
    };
    let (out_h, out_w) = resize.unwrap_or(first);
    let frames: Vec<Vec<f32>> = images
        .par_iter()
        .map(|img| {
            let (planes, h, w) = planar(img, channels);
            if (h, w) == (out_h, out_w) {
                planes
            } else {
                resize_bilinear(&planes, channels, (h, w), (out_h, out_w))
            }
        })
        .collect();
    let n = frames.len();
    FrameTensor::new(
        frames.concat(),
        [n, channels, out_h, out_w],
        frame_number(&files[0]).unwrap_or(0),
    )
}

fn to_byte(v: f32) -> u8 {
    (255.0 * v).round().clamp(0.0, 255.0) as u8
}

fn save(img: &DynamicImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Encode {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes frame `i` of `frames` as an 8-bit PNG (bytes `round(255 * v)`).
pub fn write_frame_png(frames: &FrameTensor, i: usize, path: &Path) -> Result<()> {
    let [_, c, h, w] = frames.shape();
    let planes = frames.frame(i);
    let img = if c == 1 {
        DynamicImage::ImageLuma8(
            GrayImage::from_raw(w as u32, h as u32, planes.iter().map(|&v| to_byte(v)).collect())
                .expect("buffer sized for image"),
        )
    } else {
        let mut rgb: RgbImage = ImageBuffer::new(w as u32, h as u32);
        for (idx, px) in rgb.pixels_mut().enumerate() {
            *px = Rgb([0, 1, 2].map(|ch| to_byte(planes[ch * h * w + idx])));
        }
        DynamicImage::ImageRgb8(rgb)
    };
    save(&img, path)
}

/// Writes every frame as `{prefix}{index:06}.png`, numbering from the frame
/// index offset.
pub fn write_frame_sequence(frames: &FrameTensor, out_dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    (0..frames.len())
        .map(|i| {
            let path = out_dir.join(format!("{prefix}{:06}.png", frames.frame_index_offset() + i));
            write_frame_png(frames, i, &path).map(|_| path)
        })
        .collect()
}

/// Writes a mask as an 8-bit grayscale PNG: 0 = background, 255 = foreground.
pub fn write_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let img = ImageBuffer::<Luma<u8>, _>::from_raw(
        mask.width as u32,
        mask.height as u32,
        mask.data.iter().map(|&v| v * 255).collect::<Vec<u8>>(),
    )
    .expect("buffer sized for image");
    save(&DynamicImage::ImageLuma8(img), path)
}

/// Reads a mask image; any value above 127 is foreground.
pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let img = decode(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Mask::from_vec(h, w, img.pixels().map(|p| u8::from(p[0] > 127)).collect())
}

/// Every mask image of `dir`, keyed by the number in its filename.
pub fn load_mask_dir(dir: &Path) -> Result<BTreeMap<usize, Mask>> {
    let mut out = BTreeMap::new();
    for path in list_image_files(dir)? {
        let index = frame_number(&path).ok_or_else(|| {
            Error::InvalidData(format!("{} has no frame number", path.display()))
        })?;
        if out.insert(index, read_mask_png(&path)?).is_some() {
            return Err(Error::InvalidData(format!(
                "frame number {index} appears twice in {}",
                dir.display()
            )));
        }
    }
    Ok(out)
}

/// Writes `mask_%06d.png` for every frame (numbered from the sequence's frame
/// index offset) and, when `with_backgrounds` is set and backgrounds are
/// present, `bg_%06d.png` into `background_dir`.
pub fn write_mask_sequence(
    masks: &MaskSequence,
    out_dir: &Path,
    background_dir: Option<&Path>,
) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let offset = masks.frame_index_offset;
    for (i, mask) in masks.masks.iter().enumerate() {
        write_mask_png(mask, &out_dir.join(format!("mask_{:06}.png", offset + i)))?;
    }
    if let (Some(dir), Some(bgs)) = (background_dir, masks.backgrounds.as_ref()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for i in 0..bgs.len() {
            write_frame_png(bgs, i, &dir.join(format!("bg_{:06}.png", offset + i)))?;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackgroundKind {
    Static,
    /// Global additive illumination `amplitude * sin(2 pi t / period)`.
    SinusoidalIllumination { amplitude: f32, period: f32 },
}

/// Moving-rectangle test scene. Positions wrap around the frame edges
/// (toroidally), so the footprint is always `rect_size` pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub frames: usize,
    /// `(height, width)`
    pub size: (usize, usize),
    pub background: BackgroundKind,
    /// `(height, width)`
    pub rect_size: (usize, usize),
    /// `(vx, vy)` in pixels per frame.
    pub velocity: (i32, i32),
    /// Intensity added to the background under the rectangle.
    pub contrast: f32,
    /// The rectangle stays at its start position for this many frames.
    pub park_frames: usize,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            frames: 100,
            size: (64, 64),
            background: BackgroundKind::Static,
            rect_size: (8, 8),
            velocity: (1, 0),
            contrast: 0.5,
            park_frames: 0,
            seed: 7,
        }
    }
}

/// Background intensities before illumination lie in this range.
const BACKGROUND_RANGE: (f32, f32) = (0.15, 0.4);

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size;
        let (rh, rw) = self.rect_size;
        let invalid = |msg: String| Err(Error::InvalidConfig(msg));
        if self.frames == 0 {
            return invalid("scene needs at least one frame".into());
        }
        if h < 8 || w < 8 {
            return invalid(format!("frame size {h}x{w} below 8x8"));
        }
        if rh == 0 || rw == 0 || rh > h || rw > w {
            return invalid(format!("rectangle {rh}x{rw} does not fit a {h}x{w} frame"));
        }
        if self.velocity == (0, 0) {
            return invalid("velocity must be nonzero".into());
        }
        let amplitude = match self.background {
            BackgroundKind::Static => 0.0,
            BackgroundKind::SinusoidalIllumination { amplitude, period } => {
                if !(0.0..=0.1).contains(&amplitude) || !(period > 0.0) {
                    return invalid(format!(
                        "illumination amplitude {amplitude} must be in [0, 0.1] and period {period} positive"
                    ));
                }
                amplitude
            }
        };
        let brightest = BACKGROUND_RANGE.1 + amplitude + self.contrast;
        if !(self.contrast > 0.0) || brightest > 1.0 {
            return invalid(format!(
                "contrast {} must be positive and keep intensities <= 1 (peak {brightest})",
                self.contrast
            ));
        }
        Ok(())
    }

    /// Top-left corner of the rectangle in frame `t`, before wrapping.
    fn position(&self, start: (i64, i64), t: usize) -> (i64, i64) {
        let moving = t.saturating_sub(self.park_frames) as i64;
        (
            start.0 + self.velocity.1 as i64 * moving,
            start.1 + self.velocity.0 as i64 * moving,
        )
    }
}

/// A generated scene with its planted truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub frames: FrameTensor,
    pub truth: GroundTruthMasks,
    /// The background each frame was rendered on (rectangle absent).
    pub background: FrameTensor,
}

/// Renders a single-channel moving-rectangle scene. Deterministic in `spec`.
pub fn generate_synthetic_scene(spec: &SyntheticSceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let (h, w) = spec.size;
    let (rh, rw) = spec.rect_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Smooth pattern: a few random low-frequency cosines, rescaled into range.
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.5..1.0),
            )
        })
        .collect();
    let raw: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
            waves
                .iter()
                .map(|&(fy, fx, phase, amp)| {
                    amp * (std::f64::consts::TAU * (fy * y + fx * x) + phase).cos()
                })
                .sum()
        })
        .collect();
    let (lo, hi) = raw
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-12);
    let (blo, bhi) = BACKGROUND_RANGE;
    let base: Vec<f32> = raw
        .iter()
        .map(|&v| blo + (bhi - blo) * ((v - lo) / span) as f32)
        .collect();

    let start = (
        rng.random_range(0..h) as i64,
        rng.random_range(0..w) as i64,
    );
    let mut frames = Vec::with_capacity(spec.frames * h * w);
    let mut background = Vec::with_capacity(spec.frames * h * w);
    let mut masks = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let light = match spec.background {
            BackgroundKind::Static => 0.0,
            BackgroundKind::SinusoidalIllumination { amplitude, period } => {
                amplitude * (std::f32::consts::TAU * t as f32 / period).sin()
            }
        };
        let bg: Vec<f32> = base.iter().map(|&v| (v + light).clamp(0.0, 1.0)).collect();
        let mut mask = Mask::zeros(h, w);
        let (py, px) = spec.position(start, t);
        for dy in 0..rh as i64 {
            for dx in 0..rw as i64 {
                let y = (py + dy).rem_euclid(h as i64) as usize;
                let x = (px + dx).rem_euclid(w as i64) as usize;
                mask.set(y, x, true);
            }
        }
        frames.extend(bg.iter().zip(mask.data()).map(|(&b, &m)| {
            if m == 1 {
                b + spec.contrast
            } else {
                b
            }
        }));
        background.extend(bg);
        masks.push(mask);
    }
    Ok(SyntheticScene {
        frames: FrameTensor::new(frames, [spec.frames, 1, h, w], 0)?,
        truth: GroundTruthMasks::fully_labeled(masks),
        background: FrameTensor::new(background, [spec.frames, 1, h, w], 0)?,
    })
}
