//! Free-form brush-stroke masks.
//!
//! A mask is built by a random walk of round brush strokes that starts at a
//! uniformly drawn point, advances by `length` in a direction whose angle is
//! drawn from `[0, max_angle]`, and stops once the point leaves the image.
//! One random filled square is stamped on top. Masks whose coverage falls
//! outside the configured bounds are regenerated from the next derived seed.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::seed::{self, Rng};

pub const MAX_COVERAGE_RETRIES: usize = 100;
const RLE_TAG: &str = "mcdm-mask-rle-v1";

/// Binary grid, `1` marks a cell to regenerate.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    cells: Vec<u8>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mask")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("coverage", &self.coverage())
            .finish()
    }
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![1; height * width],
        }
    }

    pub fn from_cells(height: usize, width: usize, cells: Vec<u8>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(Error::Shape(format!(
                "{} mask cells for {height}x{width}",
                cells.len()
            )));
        }
        if let Some(bad) = cells.iter().find(|&&c| c > 1) {
            return Err(Error::param(
                "mask",
                format!("cell value {bad} is not binary"),
            ));
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.cells[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize) {
        self.cells[y * self.width + x] = 1;
    }

    pub fn count_ones(&self) -> usize {
        self.cells.iter().map(|&c| c as usize).sum()
    }

    pub fn coverage(&self) -> f64 {
        mask_coverage(self)
    }

    /// Cell values as floats, row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.cells.iter().map(|&c| c as f64).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let pixels = self.cells.iter().map(|&c| c * 255).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, pixels)
            .expect("buffer length matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| image_error(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| image_error(path, e))?;
        let gray = match img {
            image::DynamicImage::ImageLuma8(g) => g,
            other => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("mask must be 8-bit single channel, got {:?}", other.color()),
                })
            }
        };
        let (w, h) = gray.dimensions();
        let mut cells = Vec::with_capacity((w * h) as usize);
        for &p in gray.as_raw() {
            match p {
                0 => cells.push(0),
                255 => cells.push(1),
                v => {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        reason: format!("mask pixel value {v} is neither 0 nor 255"),
                    })
                }
            }
        }
        Self::from_cells(h as usize, w as usize, cells)
    }

    /// Run-length text form: a header line `mcdm-mask-rle-v1 H W` followed by
    /// one line of alternating run lengths in row-major order, starting with
    /// a (possibly empty) run of zeros.
    pub fn to_rle(&self) -> String {
        let mut out = format!("{RLE_TAG} {} {}\n", self.height, self.width);
        let mut current = 0u8;
        let mut run = 0usize;
        let mut first = true;
        for &c in &self.cells {
            if c == current {
                run += 1;
            } else {
                push_run(&mut out, run, &mut first);
                current = c;
                run = 1;
            }
        }
        push_run(&mut out, run, &mut first);
        out.push('\n');
        out
    }

    pub fn from_rle(text: &str) -> Result<Self> {
        let bad = |reason: &str| Error::param("rle", reason.to_string());
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty input"))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(RLE_TAG) {
            return Err(bad("missing format tag"));
        }
        let dim = |p: Option<&str>| -> Result<usize> {
            p.and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("malformed dimensions"))
        };
        let height = dim(parts.next())?;
        let width = dim(parts.next())?;
        let mut cells = Vec::with_capacity(height * width);
        let mut value = 0u8;
        for tok in lines.flat_map(str::split_whitespace) {
            let run: usize = tok.parse().map_err(|_| bad("malformed run length"))?;
            if cells.len() + run > height * width {
                return Err(bad("runs exceed mask size"));
            }
            cells.extend(std::iter::repeat_n(value, run));
            value ^= 1;
        }
        if cells.len() != height * width {
            return Err(bad("runs do not cover the mask"));
        }
        Self::from_cells(height, width, cells)
    }
}

fn push_run(out: &mut String, run: usize, first: &mut bool) {
    if !*first {
        out.push(' ');
    }
    *first = false;
    write!(out, "{run}").unwrap();
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskGenParams {
    pub image_height: usize,
    pub image_width: usize,
    /// Brush stroke length; also the stroke thickness and the cap diameter.
    pub length: f64,
    /// Upper end of the per-stroke angle draw, radians.
    pub max_angle: f64,
    pub coverage_bounds: (f64, f64),
    pub max_strokes: usize,
    /// Square side as fractions of `min(height, width)`.
    pub square_side_bounds: (f64, f64),
    pub seed: u64,
}

impl MaskGenParams {
    pub fn for_image(height: usize, width: usize, seed: u64) -> Self {
        Self {
            image_height: height,
            image_width: width,
            length: (height.min(width) as f64 / 8.0).max(1.0),
            max_angle: FRAC_PI_2,
            coverage_bounds: (0.05, 0.5),
            max_strokes: 256,
            square_side_bounds: (0.125, 0.25),
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let min_side = self.image_height.min(self.image_width);
        if min_side == 0 {
            return Err(Error::param(
                "image size",
                "height and width must be positive",
            ));
        }
        if !(self.length > 0.0 && self.length < min_side as f64) {
            return Err(Error::param(
                "length",
                format!("{} not in (0, {min_side})", self.length),
            ));
        }
        // max_angle = 0 is the degenerate straight walk; it still terminates.
        if !(0.0..=FRAC_PI_2).contains(&self.max_angle) {
            return Err(Error::param(
                "max_angle",
                format!("{} not in [0, pi/2]", self.max_angle),
            ));
        }
        let (lo, hi) = self.coverage_bounds;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::param(
                "coverage_bounds",
                format!("({lo}, {hi}) must satisfy 0 <= low < high <= 1"),
            ));
        }
        if self.max_strokes == 0 {
            return Err(Error::param("max_strokes", "must be at least 1"));
        }
        validate_side_bounds(self.square_side_bounds)
    }
}

fn validate_side_bounds((lo, hi): (f64, f64)) -> Result<()> {
    if !(lo > 0.0 && lo <= hi) {
        return Err(Error::param(
            "square_side_bounds",
            format!("({lo}, {hi}) must satisfy 0 < low <= high"),
        ));
    }
    if hi > 1.0 {
        return Err(Error::param(
            "square_side_bounds",
            format!("upper bound {hi} yields a square larger than the image"),
        ));
    }
    Ok(())
}

/// Where the square landed, in cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SquarePlacement {
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

/// A generated mask together with the trace of how it was built.
#[derive(Debug, Clone)]
pub struct MaskSample {
    pub mask: Mask,
    /// Number of generation attempts, 1 when the first mask was accepted.
    pub attempts: usize,
    /// Seed of the accepted attempt.
    pub attempt_seed: u64,
    pub start: (f64, f64),
    /// Walk vertices, starting with `start`.
    pub path: Vec<(f64, f64)>,
    pub square: SquarePlacement,
}

pub fn generate_random_mask(params: &MaskGenParams) -> Result<Mask> {
    generate_random_mask_traced(params).map(|s| s.mask)
}

pub fn generate_random_mask_traced(params: &MaskGenParams) -> Result<MaskSample> {
    params.validate()?;
    let (lo, hi) = params.coverage_bounds;
    let mut last = (0.0, "low", lo);
    for attempt in 0..MAX_COVERAGE_RETRIES {
        let attempt_seed = seed::derive(params.seed, attempt as u64);
        let mut rng = seed::rng(attempt_seed);
        let start = (
            rng.random_range(0.0..params.image_height as f64),
            rng.random_range(0.0..params.image_width as f64),
        );
        let mut mask = Mask::zeros(params.image_height, params.image_width);
        let path = brush_walk(&mut mask, start, params, &mut rng);
        let square = stamp_random_square(&mut mask, params.square_side_bounds, &mut rng)?;
        let coverage = mask.coverage();
        if coverage >= lo && coverage <= hi {
            return Ok(MaskSample {
                mask,
                attempts: attempt + 1,
                attempt_seed,
                start,
                path,
                square,
            });
        }
        last = if coverage < lo {
            (coverage, "low", lo)
        } else {
            (coverage, "high", hi)
        };
    }
    Err(Error::Generation {
        attempts: MAX_COVERAGE_RETRIES,
        bound: last.1,
        limit: last.2,
        coverage: last.0,
    })
}

/// Generates one mask per seed.
pub fn generate_masks(params: &MaskGenParams, seeds: &[u64], exec: Exec) -> Result<Vec<Mask>> {
    exec.map(seeds, |&s| generate_random_mask(&params.with_seed(s)))
        .into_iter()
        .collect()
}

/// Runs the brush walk from `start` and returns the visited vertices.
///
/// Each iteration stamps a disc of radius `length / 2` at the current point,
/// draws an angle in `[0, max_angle]`, steps by
/// `(length * sin(angle), length * cos(angle))` along (row, column) and
/// connects the two points with a stroke of thickness `length`. The walk
/// stops when the point leaves `[0, H] x [0, W]` or after `max_strokes`.
pub fn brush_walk(
    mask: &mut Mask,
    start: (f64, f64),
    params: &MaskGenParams,
    rng: &mut Rng,
) -> Vec<(f64, f64)> {
    let radius = params.length / 2.0;
    let (h, w) = (params.image_height as f64, params.image_width as f64);
    let mut path = vec![start];
    let (mut x1, mut y1) = start;
    let mut strokes = 0;
    while (0.0..=h).contains(&x1) && (0.0..=w).contains(&y1) && strokes < params.max_strokes {
        draw_segment(mask, (x1, y1), (x1, y1), radius);
        let angle = rng.random_range(0.0..=params.max_angle);
        let x2 = x1 + params.length * angle.sin();
        let y2 = y1 + params.length * angle.cos();
        draw_segment(mask, (x1, y1), (x2, y2), radius);
        x1 = x2;
        y1 = y2;
        path.push((x1, y1));
        strokes += 1;
    }
    path
}

/// Sets every cell whose center lies within `radius` of segment `a`-`b`.
pub fn draw_segment(mask: &mut Mask, a: (f64, f64), b: (f64, f64), radius: f64) {
    if mask.height == 0 || mask.width == 0 {
        return;
    }
    let row_lo = (a.0.min(b.0) - radius - 1.0).floor().max(0.0) as usize;
    let row_hi = ((a.0.max(b.0) + radius + 1.0).ceil().max(0.0) as usize).min(mask.height);
    let col_lo = (a.1.min(b.1) - radius - 1.0).floor().max(0.0) as usize;
    let col_hi = ((a.1.max(b.1) + radius + 1.0).ceil().max(0.0) as usize).min(mask.width);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let r2 = radius * radius;
    for r in row_lo..row_hi {
        for c in col_lo..col_hi {
            let (px, py) = (r as f64 + 0.5, c as f64 + 0.5);
            let s = if len2 > 0.0 {
                (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (ex, ey) = (px - (a.0 + s * dx), py - (a.1 + s * dy));
            if ex * ex + ey * ey <= r2 {
                mask.set(r, c);
            }
        }
    }
}

pub fn mask_coverage(mask: &Mask) -> f64 {
    let total = mask.height * mask.width;
    if total == 0 {
        return 0.0;
    }
    mask.count_ones() as f64 / total as f64
}

/// Returns `mask` with one random axis-aligned filled square added.
pub fn add_random_square(mask: &Mask, side_bounds: (f64, f64), rng: &mut Rng) -> Result<Mask> {
    let mut out = mask.clone();
    stamp_random_square(&mut out, side_bounds, rng)?;
    Ok(out)
}

fn stamp_random_square(
    mask: &mut Mask,
    side_bounds: (f64, f64),
    rng: &mut Rng,
) -> Result<SquarePlacement> {
    validate_side_bounds(side_bounds)?;
    let min_side = mask.height.min(mask.width);
    let (lo, hi) = (
        side_bounds.0 * min_side as f64,
        side_bounds.1 * min_side as f64,
    );
    let side_f = rng.random_range(lo..=hi);
    let side = (side_f.round() as usize).clamp(1, min_side);
    let top = rng.random_range(0..=mask.height - side);
    let left = rng.random_range(0..=mask.width - side);
    fill_square(mask, top, left, side);
    Ok(SquarePlacement { top, left, side })
}

pub fn fill_square(mask: &mut Mask, top: usize, left: usize, side: usize) {
    for r in top..(top + side).min(mask.height) {
        for c in left..(left + side).min(mask.width) {
            mask.set(r, c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coverage_counts() {
        assert_eq!(mask_coverage(&Mask::zeros(8, 8)), 0.0);
        assert_eq!(mask_coverage(&Mask::ones(8, 8)), 1.0);
        let mut m = Mask::zeros(4, 4);
        for i in 0..4 {
            m.set(i, i);
        }
        assert_eq!(mask_coverage(&m), 0.25);
    }

    #[test]
    fn square_on_saturated_mask_is_identity() {
        let full = Mask::ones(32, 32);
        let out = add_random_square(&full, (0.125, 0.25), &mut seed::rng(3)).unwrap();
        assert_eq!(out, full);
    }

    #[test]
    fn forced_square_side() {
        let out = add_random_square(&Mask::zeros(64, 64), (0.25, 0.25), &mut seed::rng(9)).unwrap();
        assert_eq!(out.count_ones(), 256);
        assert_eq!(out.coverage(), 0.0625);
    }

    #[test]
    fn square_is_deterministic_given_rng_state() {
        let base = Mask::zeros(40, 24);
        let a = add_random_square(&base, (0.1, 0.9), &mut seed::rng(11)).unwrap();
        let b = add_random_square(&base, (0.1, 0.9), &mut seed::rng(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_square_rejected() {
        let err = add_random_square(&Mask::zeros(8, 8), (0.5, 1.5), &mut seed::rng(0));
        assert!(matches!(
            err,
            Err(Error::Param {
                field: "square_side_bounds",
                ..
            })
        ));
    }

    #[test]
    fn square_keeps_existing_cells() {
        let mut m = Mask::zeros(16, 16);
        m.set(0, 0);
        m.set(15, 15);
        let out = add_random_square(&m, (0.25, 0.5), &mut seed::rng(1)).unwrap();
        assert!(out.get(0, 0) && out.get(15, 15));
    }

    #[test]
    fn invalid_params_rejected() {
        let base = MaskGenParams::for_image(64, 64, 0);
        let cases = [
            MaskGenParams {
                length: 0.0,
                ..base.clone()
            },
            MaskGenParams {
                length: 64.0,
                ..base.clone()
            },
            MaskGenParams {
                max_angle: 2.0,
                ..base.clone()
            },
            MaskGenParams {
                max_angle: -0.1,
                ..base.clone()
            },
            MaskGenParams {
                coverage_bounds: (0.5, 0.5),
                ..base.clone()
            },
            MaskGenParams {
                coverage_bounds: (0.1, 1.1),
                ..base.clone()
            },
            MaskGenParams {
                max_strokes: 0,
                ..base.clone()
            },
        ];
        for p in cases {
            assert!(
                matches!(generate_random_mask(&p), Err(Error::Param { .. })),
                "{p:?}"
            );
        }
    }

    #[test]
    fn unreachable_coverage_names_bound() {
        let p = MaskGenParams {
            coverage_bounds: (0.95, 1.0),
            ..MaskGenParams::for_image(64, 64, 5)
        };
        match generate_random_mask(&p) {
            Err(Error::Generation {
                bound, attempts, ..
            }) => {
                assert_eq!(bound, "low");
                assert_eq!(attempts, MAX_COVERAGE_RETRIES);
            }
            other => panic!("expected generation failure, got {other:?}"),
        }
    }

    #[test]
    fn straight_walk_from_origin() {
        let p = MaskGenParams {
            max_angle: 0.0,
            ..MaskGenParams::for_image(32, 32, 0)
        };
        let mut m = Mask::zeros(32, 32);
        let path = brush_walk(&mut m, (0.0, 0.0), &p, &mut seed::rng(0));
        // length 4: vertices at y = 0, 4, ..., 32, 36
        assert_eq!(path.len(), 10);
        assert!(path.iter().all(|&(x, _)| x == 0.0));
        for r in 0..32 {
            for c in 0..32 {
                assert_eq!(m.get(r, c), r < 2, "cell ({r}, {c})");
            }
        }
    }

    #[test]
    fn rle_handles_leading_ones() {
        let m = Mask::ones(2, 3);
        let text = m.to_rle();
        assert_eq!(text, "mcdm-mask-rle-v1 2 3\n0 6\n");
        assert_eq!(Mask::from_rle(&text).unwrap(), m);
        assert!(Mask::from_rle("mcdm-mask-rle-v1 2 3\n0 5\n").is_err());
        assert!(Mask::from_rle("nope 2 3\n6\n").is_err());
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let m = generate_random_mask(&MaskGenParams::for_image(24, 40, 77)).unwrap();
        m.save_png(&path).unwrap();
        assert_eq!(Mask::load_png(&path).unwrap(), m);
    }
}
