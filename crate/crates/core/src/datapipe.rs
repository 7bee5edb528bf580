//! Image IO, JSONL manifests, frame sampling and the procedural toy dataset.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::Mask;
use crate::seed;
use crate::tensor::ImageTensor;

/// Reads an RGB image, bilinearly resizes it to `target_size` square and
/// maps `[0, 255]` linearly onto `[-1, 1]`.
pub fn load_image(path: &Path, target_size: usize) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    let rgb = match img {
        DynamicImage::ImageRgb8(rgb) => rgb,
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgb32F(_) => img.to_rgb8(),
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("expected 3 channels, got {:?}", other.color()),
            })
        }
    };
    let s = target_size as u32;
    let rgb = if rgb.dimensions() == (s, s) {
        rgb
    } else {
        image::imageops::resize(&rgb, s, s, FilterType::Triangle)
    };
    Ok(rgb_to_tensor(&rgb))
}

fn rgb_to_tensor(rgb: &RgbImage) -> ImageTensor {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut t = ImageTensor::zeros(3, h, w);
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            t.set(c, y as usize, x as usize, p.0[c] as f64 / 127.5 - 1.0);
        }
    }
    t
}

/// Quantizes a 3-channel tensor to 8 bits and writes a PNG.
pub fn save_image(path: &Path, image: &ImageTensor) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::Shape(format!(
            "expected 3 channels, got {}",
            image.channels()
        )));
    }
    let (h, w) = (image.height(), image.width());
    let mut rgb = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = std::array::from_fn(|c| quantize(image.get(c, y, x)));
            rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    rgb.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

fn quantize(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

/// Provenance of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "original")]
    Original,
    DF,
    F2F,
    FS,
    NT,
    #[serde(rename = "mcdm")]
    Mcdm,
    #[serde(rename = "other")]
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: Label,
    pub source_id: String,
    pub method: Method,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_run: Option<String>,
    /// Image the entry was generated from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler_seed: Option<u64>,
}

impl ManifestEntry {
    pub fn real(path: impl Into<String>, source_id: impl Into<String>, split: Split) -> Self {
        Self {
            path: path.into(),
            label: Label::Real,
            source_id: source_id.into(),
            method: Method::Original,
            split,
            mask_seed: None,
            generator_run: None,
            source_path: None,
            sampler_seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.label == Label::Fake && self.method == Method::Original {
            return Err(Error::Manifest(format!(
                "`{}`: fake entry with method original",
                self.path
            )));
        }
        if self.method == Method::Mcdm && (self.mask_seed.is_none() || self.generator_run.is_none())
        {
            return Err(Error::Manifest(format!(
                "`{}`: mcdm entry without mask_seed and generator_run",
                self.path
            )));
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("entry serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let e: Self = serde_json::from_str(line).map_err(|err| Error::Manifest(err.to_string()))?;
        e.validate()?;
        Ok(e)
    }

    /// Path of the image, relative paths taken from `base`.
    pub fn resolve(&self, base: &Path) -> PathBuf {
        let p = Path::new(&self.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}

/// Serializes entries as JSONL, rejecting duplicate paths.
pub fn manifest_to_string(entries: &[ManifestEntry]) -> Result<String> {
    check_unique(entries)?;
    let mut out = String::new();
    for e in entries {
        e.validate()?;
        out.push_str(&e.to_json_line());
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let text = manifest_to_string(entries)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            ManifestEntry::from_json_line(&line)
                .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    check_unique(&out)?;
    Ok(out)
}

fn check_unique(entries: &[ManifestEntry]) -> Result<()> {
    let mut seen = HashSet::new();
    for e in entries {
        if !seen.insert(e.path.as_str()) {
            return Err(Error::DuplicatePath(e.path.clone()));
        }
    }
    Ok(())
}

/// Frames of one video (or any other group) with shared tags.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGroup {
    pub source_id: String,
    pub label: Label,
    pub method: Method,
    pub split: Split,
    pub frames: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub frames_per_fake_video: usize,
    pub frames_per_real_video: usize,
    pub frames_per_test_video: usize,
    pub seed: u64,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        Self {
            frames_per_fake_video: 4,
            frames_per_real_video: 8,
            frames_per_test_video: 32,
            seed: 0,
        }
    }
}

impl SamplingPlan {
    pub fn validate(&self) -> Result<()> {
        if self.frames_per_fake_video == 0
            || self.frames_per_real_video == 0
            || self.frames_per_test_video == 0
        {
            return Err(Error::param(
                "sampling plan",
                "all frame counts must be >= 1",
            ));
        }
        Ok(())
    }

    fn frames_for(&self, g: &FrameGroup) -> usize {
        match (g.split, g.label) {
            (Split::Test, _) => self.frames_per_test_video,
            (_, Label::Fake) => self.frames_per_fake_video,
            (_, Label::Real) => self.frames_per_real_video,
        }
    }
}

/// Samples frames without replacement per group. Group `i` draws from
/// `seed::derive(plan.seed, i)`; the chosen frames keep their original order.
pub fn build_training_manifest(
    groups: &[FrameGroup],
    plan: &SamplingPlan,
) -> Result<Vec<ManifestEntry>> {
    plan.validate()?;
    let mut out = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        let k = plan.frames_for(g);
        if g.frames.len() < k {
            return Err(Error::InsufficientFrames {
                group: g.source_id.clone(),
                available: g.frames.len(),
                requested: k,
            });
        }
        let mut rng = seed::rng(seed::derive(plan.seed, gi as u64));
        let mut picked = rand::seq::index::sample(&mut rng, g.frames.len(), k).into_vec();
        picked.sort_unstable();
        for i in picked {
            let e = ManifestEntry {
                path: g.frames[i].clone(),
                label: g.label,
                source_id: g.source_id.clone(),
                method: g.method,
                split: g.split,
                mask_seed: None,
                generator_run: None,
                source_path: None,
                sampler_seed: None,
            };
            e.validate()?;
            out.push(e);
        }
    }
    check_unique(&out)?;
    Ok(out)
}

/// How an augmented image was produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub mask_seed: u64,
    pub sampler_seed: u64,
    /// Identifies the generator weights, e.g. a prefix of the model checksum.
    pub generator_run: String,
}

/// File stem used for an augmented sample of `entry`.
pub fn augmented_stem(entry: &ManifestEntry, provenance: &Provenance) -> String {
    let stem = Path::new(&entry.path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let clean = |s: &str| -> String {
        s.chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                    c
                } else {
                    '_'
                }
            })
            .collect()
    };
    format!(
        "{}_{}_m{}",
        clean(&entry.source_id),
        clean(&stem),
        provenance.mask_seed
    )
}

/// Writes `image` and `mask` as PNGs into `out_dir` and returns the fake
/// entry describing them. The entry path is `out_dir/<stem>.png`.
pub fn write_augmented(
    entry_base: &ManifestEntry,
    image: &ImageTensor,
    mask: &Mask,
    out_dir: &Path,
    provenance: &Provenance,
) -> Result<ManifestEntry> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = augmented_stem(entry_base, provenance);
    let img_path = out_dir.join(format!("{stem}.png"));
    save_image(&img_path, image)?;
    mask.save_png(&out_dir.join(format!("{stem}_mask.png")))?;
    let entry = ManifestEntry {
        path: img_path.to_string_lossy().into_owned(),
        label: Label::Fake,
        source_id: entry_base.source_id.clone(),
        method: Method::Mcdm,
        split: entry_base.split,
        mask_seed: Some(provenance.mask_seed),
        generator_run: Some(provenance.generator_run.clone()),
        source_path: Some(entry_base.path.clone()),
        sampler_seed: Some(provenance.sampler_seed),
    };
    entry.validate()?;
    Ok(entry)
}

/// Structured synthetic image: a two-color linear gradient with a filled
/// disc and a filled rectangle on top, values in `[-1, 1]`.
pub fn toy_image(size: usize, seed: u64) -> ImageTensor {
    let mut rng = seed::rng(seed);
    let mut color = || -> [f64; 3] { std::array::from_fn(|_| rng.random_range(-0.9..0.9)) };
    let (c0, c1, disc, rect) = (color(), color(), color(), color());
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    let s = size as f64;
    let (cy, cx) = (
        rng.random_range(0.2 * s..0.8 * s),
        rng.random_range(0.2 * s..0.8 * s),
    );
    let radius = rng.random_range(0.12 * s..0.3 * s);
    let rh = rng.random_range(0.15 * s..0.4 * s);
    let rw = rng.random_range(0.15 * s..0.4 * s);
    let (ry, rx) = (rng.random_range(0.0..s - rh), rng.random_range(0.0..s - rw));
    let mut img = ImageTensor::zeros(3, size, size);
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let u = (((py / s - 0.5) * dy + (px / s - 0.5) * dx) + 0.71) / 1.42;
            let mut px_color: [f64; 3] =
                std::array::from_fn(|c| c0[c] + (c1[c] - c0[c]) * u.clamp(0.0, 1.0));
            if (py - cy).powi(2) + (px - cx).powi(2) <= radius * radius {
                px_color = disc;
            }
            if py >= ry && py < ry + rh && px >= rx && px < rx + rw {
                px_color = rect;
            }
            for (c, v) in px_color.iter().enumerate() {
                img.set(c, y, x, *v);
            }
        }
    }
    img
}
