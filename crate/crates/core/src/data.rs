//! Synthetic image sets and on-disk labeled image directories.
//!
//! All images are `32×32` RGB with values in `[0, 1]`. On disk a dataset is a
//! directory of PNG files plus `labels.csv` (`path,label,group`, paths
//! relative to the directory).

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{C2eError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const SYNTH_SIZE: usize = 32;
/// Number of "videos" in a `phases` set.
pub const PHASE_VIDEOS: usize = 10;
pub const PHASE_COUNT: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// Band-limited noise fields for reconstruction pretraining.
    Textures,
    /// Four balanced classes: disk, bar, cross, ring.
    Shapes,
    /// Ten frame sequences, each passing through three phases in order.
    Phases,
}

impl FromStr for SynthKind {
    type Err = C2eError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "textures" => Ok(SynthKind::Textures),
            "shapes" => Ok(SynthKind::Shapes),
            "phases" => Ok(SynthKind::Phases),
            other => Err(C2eError::Config(format!(
                "unknown dataset kind {other:?} (expected textures, shapes or phases)"
            ))),
        }
    }
}

/// Images `[n × H × W × 3]` with a class label and a group id per image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Images at `idx`, stacked.
    pub fn select(&self, idx: &[usize]) -> Tensor {
        let per = self.images.len() / self.len().max(1);
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        Tensor::new(&shape, data).expect("image stack")
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledImages {
        LabeledImages {
            images: self.select(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            groups: idx.iter().map(|&i| self.groups[i]).collect(),
        }
    }
}

struct Canvas {
    px: Vec<f64>,
}

impl Canvas {
    fn new() -> Self {
        Canvas {
            px: vec![0.0; SYNTH_SIZE * SYNTH_SIZE * 3],
        }
    }

    fn fill(&mut self, f: impl Fn(f64, f64) -> Option<[f64; 3]>) {
        for y in 0..SYNTH_SIZE {
            for x in 0..SYNTH_SIZE {
                if let Some(c) = f(x as f64 + 0.5, y as f64 + 0.5) {
                    let o = (y * SYNTH_SIZE + x) * 3;
                    self.px[o..o + 3].copy_from_slice(&c);
                }
            }
        }
    }

    fn clamp(mut self) -> Vec<f64> {
        self.px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self.px
    }
}

/// Smooth field: a few low-frequency sinusoids per channel.
fn band_limited(rng: &mut Rng, canvas: &mut Canvas, max_freq: i64, waves: usize, amp: f64, base: [f64; 3]) {
    let n = SYNTH_SIZE as f64;
    for ch in 0..3 {
        let mut comps = Vec::with_capacity(waves);
        for _ in 0..waves {
            let (fx, fy) = loop {
                let fx = rng.below(2 * max_freq as usize + 1) as i64 - max_freq;
                let fy = rng.below(2 * max_freq as usize + 1) as i64 - max_freq;
                if fx != 0 || fy != 0 {
                    break (fx, fy);
                }
            };
            comps.push((fx as f64, fy as f64, rng.uniform() * 2.0 * PI, rng.normal()));
        }
        let norm = amp / (waves as f64).sqrt();
        for y in 0..SYNTH_SIZE {
            for x in 0..SYNTH_SIZE {
                let v: f64 = comps
                    .iter()
                    .map(|(fx, fy, ph, a)| a * (2.0 * PI * (fx * x as f64 + fy * y as f64) / n + ph).cos())
                    .sum();
                canvas.px[(y * SYNTH_SIZE + x) * 3 + ch] = base[ch] + norm * v;
            }
        }
    }
}

fn texture(rng: &mut Rng) -> Vec<f64> {
    let mut c = Canvas::new();
    // A per-image base color gives every patch a shared channel pattern that
    // visible context reveals; the field adds local detail on top.
    let base = [0; 3].map(|_| rng.uniform_range(0.2, 0.8));
    band_limited(rng, &mut c, 3, 6, 0.12, base);
    c.clamp()
}

/// Shape class `label` (0 disk, 1 bar, 2 cross, 3 ring) at a random place, size,
/// orientation and color over a textured background.
fn draw_shape(rng: &mut Rng, canvas: &mut Canvas, label: usize, center: (f64, f64), size: f64, color: [f64; 3]) {
    let (cx, cy) = center;
    let angle = rng.uniform() * PI;
    let (ca, sa) = (angle.cos(), angle.sin());
    let thick = (size * 0.35).max(2.0);
    canvas.fill(|x, y| {
        let (dx, dy) = (x - cx, y - cy);
        let r = (dx * dx + dy * dy).sqrt();
        // Coordinates along and across the shape's axis.
        let u = dx * ca + dy * sa;
        let v = -dx * sa + dy * ca;
        let inside = match label {
            0 => r <= size,
            1 => u.abs() <= size * 1.3 && v.abs() <= thick / 2.0,
            2 => (u.abs() <= size * 1.2 && v.abs() <= thick / 2.0) || (v.abs() <= size * 1.2 && u.abs() <= thick / 2.0),
            _ => r <= size * 1.1 && r >= size * 1.1 - thick,
        };
        inside.then_some(color)
    });
}

/// A light shape on a flat dark background. Gray levels vary per image; hue
/// is left out so the class is the only strong source of variation.
fn shape_image(rng: &mut Rng, label: usize) -> Vec<f64> {
    let mut c = Canvas::new();
    let bg = rng.uniform_range(0.05, 0.3);
    c.fill(|_, _| Some([bg; 3]));
    let fg = rng.uniform_range(0.7, 0.95);
    let size = rng.uniform_range(8.0, 11.0);
    let mid = SYNTH_SIZE as f64 / 2.0;
    let cx = mid + rng.uniform_range(-3.0, 3.0);
    let cy = mid + rng.uniform_range(-3.0, 3.0);
    draw_shape(rng, &mut c, label, (cx, cy), size, [fg; 3]);
    c.clamp()
}

/// Frames of one video: per-video background and tool gray levels, a tool
/// that drifts smoothly, and a tool shape that changes with the phase.
fn phase_video(rng: &mut Rng, frames: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let bg = rng.uniform_range(0.05, 0.3);
    let tool = rng.uniform_range(0.7, 0.95);
    // Phase boundaries: every phase gets at least one frame.
    let mut cuts = [0usize; 2];
    if frames >= PHASE_COUNT {
        let a = 1 + rng.below(frames - 2);
        let b = 1 + rng.below(frames - 2);
        cuts = [a.min(b), a.max(b)];
        if cuts[0] == cuts[1] {
            cuts[1] += 1;
        }
    }
    let mut base = Canvas::new();
    base.fill(|_, _| Some([bg; 3]));
    let (mut x, mut y) = (16.0, 16.0);
    let mut imgs = Vec::with_capacity(frames);
    let mut labels = Vec::with_capacity(frames);
    for f in 0..frames {
        let phase = if frames < PHASE_COUNT {
            f
        } else if f < cuts[0] {
            0
        } else if f < cuts[1] {
            1
        } else {
            2
        };
        x = (x + rng.normal()).clamp(13.0, 19.0);
        y = (y + rng.normal()).clamp(13.0, 19.0);
        let mut c = Canvas { px: base.px.clone() };
        // Phases map to the disk, bar and cross shapes.
        let size = rng.uniform_range(7.0, 10.0);
        draw_shape(rng, &mut c, phase, (x, y), size, [tool; 3]);
        imgs.push(c.clamp());
        labels.push(phase);
    }
    (imgs, labels)
}

/// Deterministic synthetic dataset of `n` images.
pub fn synth_dataset(kind: SynthKind, n: usize, seed: u64) -> Result<LabeledImages> {
    if n == 0 {
        return Err(C2eError::Config("dataset size must be >= 1".into()));
    }
    let mut rng = Rng::with_stream(seed, 7);
    let mut pixels = Vec::with_capacity(n * SYNTH_SIZE * SYNTH_SIZE * 3);
    let mut labels = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    match kind {
        SynthKind::Textures => {
            for i in 0..n {
                pixels.extend(texture(&mut rng));
                labels.push(0);
                groups.push(i);
            }
        }
        SynthKind::Shapes => {
            let mut order: Vec<usize> = (0..n).map(|i| i % 4).collect();
            rng.shuffle(&mut order);
            for (i, label) in order.into_iter().enumerate() {
                pixels.extend(shape_image(&mut rng, label));
                labels.push(label);
                groups.push(i);
            }
        }
        SynthKind::Phases => {
            if n < PHASE_VIDEOS {
                return Err(C2eError::Config(format!(
                    "phases needs at least {PHASE_VIDEOS} frames, got {n}"
                )));
            }
            for v in 0..PHASE_VIDEOS {
                let frames = n / PHASE_VIDEOS + usize::from(v < n % PHASE_VIDEOS);
                let (imgs, lab) = phase_video(&mut rng, frames);
                for (img, l) in imgs.into_iter().zip(lab) {
                    pixels.extend(img);
                    labels.push(l);
                    groups.push(v);
                }
            }
        }
    }
    Ok(LabeledImages {
        images: Tensor::new(&[n, SYNTH_SIZE, SYNTH_SIZE, 3], pixels)?,
        labels,
        groups,
    })
}

/// Writes an `H×W×3` slice in `[0,1]` as an 8-bit PNG.
pub fn save_png(path: &Path, pixels: &[f64], h: usize, w: usize) -> Result<()> {
    let bytes: Vec<u8> = pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer(path, &bytes, w as u32, h as u32, image::ExtendedColorType::Rgb8).map_err(|e| {
        C2eError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    })
}

/// Reads an image as RGB in `[0,1]`, resized to `size×size` when needed.
pub fn load_image(path: &Path, size: usize) -> Result<Vec<f64>> {
    let img = image::open(path).map_err(|e| C2eError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut rgb = img.to_rgb8();
    if rgb.width() as usize != size || rgb.height() as usize != size {
        rgb = image::imageops::resize(&rgb, size as u32, size as u32, image::imageops::FilterType::Triangle);
    }
    Ok(rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    path: String,
    label: usize,
    group: usize,
}

pub const LABELS_FILE: &str = "labels.csv";

/// Writes images as PNGs under `dir` plus `labels.csv`.
pub fn save_dataset(data: &LabeledImages, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| C2eError::io(dir, e))?;
    let s = data.image_size();
    let per = s * s * 3;
    let mut w = csv::Writer::from_path(dir.join(LABELS_FILE))?;
    for i in 0..data.len() {
        let name = format!("img_{i:06}.png");
        save_png(&dir.join(&name), &data.images.data()[i * per..(i + 1) * per], s, s)?;
        w.serialize(LabelRow {
            path: name,
            label: data.labels[i],
            group: data.groups[i],
        })?;
    }
    w.flush().map_err(|e| C2eError::io(dir.join(LABELS_FILE), e))?;
    Ok(())
}

/// Loads a dataset directory (`labels.csv`) or a frame manifest CSV (kept rows
/// only; label 0, group from the manifest's group column).
pub fn load_dataset(path: &Path, size: usize) -> Result<LabeledImages> {
    let (base, rows): (PathBuf, Vec<LabelRow>) = if path.is_dir() {
        let mut r = csv::Reader::from_path(path.join(LABELS_FILE))?;
        (path.to_path_buf(), r.deserialize().collect::<std::result::Result<_, _>>()?)
    } else {
        let manifest = crate::ingest::FrameManifest::read_csv(path)?;
        let mut names: Vec<&str> = Vec::new();
        let rows = manifest
            .entries
            .iter()
            .filter(|e| e.kept)
            .map(|e| {
                let g = names.iter().position(|n| *n == e.group).unwrap_or_else(|| {
                    names.push(&e.group);
                    names.len() - 1
                });
                LabelRow {
                    path: e.path.clone(),
                    label: 0,
                    group: g,
                }
            })
            .collect();
        (path.parent().map(Path::to_path_buf).unwrap_or_default(), rows)
    };
    if rows.is_empty() {
        return Err(C2eError::EmptyInput("dataset has no images"));
    }
    let mut pixels = Vec::with_capacity(rows.len() * size * size * 3);
    for r in &rows {
        let p = Path::new(&r.path);
        let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        pixels.extend(load_image(&full, size)?);
    }
    Ok(LabeledImages {
        images: Tensor::new(&[rows.len(), size, size, 3], pixels)?,
        labels: rows.iter().map(|r| r.label).collect(),
        groups: rows.iter().map(|r| r.group).collect(),
    })
}
