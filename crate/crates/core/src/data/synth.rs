//! Procedural surface textures with injected defects, written in the same
//! directory layout [`index_dataset`](super::dataset::index_dataset) reads.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use super::image::save_luma8;
use super::rng::RngStream;
use crate::error::{Error, Result};

/// Clean texture pixels are kept inside this range so that defect paint
/// (0 or 255) always differs from the underlying surface.
const TEXTURE_LO: f64 = 16.0;
const TEXTURE_HI: f64 = 239.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DefectKind {
    Scratch,
    Blob,
    Crack,
}

impl DefectKind {
    pub const ALL: [DefectKind; 3] = [DefectKind::Scratch, DefectKind::Blob, DefectKind::Crack];

    pub fn name(self) -> &'static str {
        match self {
            DefectKind::Scratch => "scratch",
            DefectKind::Blob => "blob",
            DefectKind::Crack => "crack",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureFamily {
    Grating,
    Checker,
    Grain,
}

impl TextureFamily {
    fn name(self) -> &'static str {
        match self {
            TextureFamily::Grating => "grating",
            TextureFamily::Checker => "checker",
            TextureFamily::Grain => "grain",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_classes: usize,
    pub side: usize,
    /// Images written to `train/good` per class.
    pub train_good: usize,
    pub test_good: usize,
    /// Defective test images per class and defect kind.
    pub defects_per_type: usize,
    pub defect_kinds: Vec<DefectKind>,
    /// Minimum fraction of the image a defect mask covers.
    pub min_defect_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_classes: 2,
            side: 256,
            train_good: 32,
            test_good: 8,
            defects_per_type: 8,
            defect_kinds: DefectKind::ALL.to_vec(),
            min_defect_fraction: 0.01,
        }
    }
}

/// Class-level texture parameters; each rendered image adds its own phase
/// and grain.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureClass {
    pub name: String,
    pub family: TextureFamily,
    /// `(wavelength px, orientation rad, amplitude)` per grating component.
    waves: Vec<(f64, f64, f64)>,
    cell: f64,
    warp_amp: f64,
    warp_len: f64,
    blur: usize,
    grain: f64,
}

impl TextureClass {
    /// Families cycle grating, checker, grain with the class index.
    pub fn for_class(seed: u64, class: usize) -> Self {
        let mut rng = RngStream::new(seed)
            .child("class", class as u64)
            .substream("texture");
        let family = [
            TextureFamily::Grating,
            TextureFamily::Checker,
            TextureFamily::Grain,
        ][class % 3];
        let waves = (0..2)
            .map(|k| {
                (
                    rng.random_range(8.0..20.0),
                    rng.random_range(0.0..PI),
                    if k == 0 {
                        1.0
                    } else {
                        rng.random_range(0.3..0.6)
                    },
                )
            })
            .collect();
        Self {
            name: format!("{}_{class:02}", family.name()),
            family,
            waves,
            cell: rng.random_range(10.0..20.0),
            warp_amp: rng.random_range(1.5..4.0),
            warp_len: rng.random_range(30.0..60.0),
            blur: rng.random_range(1..=2),
            grain: rng.random_range(0.04..0.08),
        }
    }

    /// One clean `side x side` instance as 8-bit luma.
    pub fn render(&self, side: usize, rng: &mut impl Rng) -> Vec<u8> {
        let n = side * side;
        let mut grain: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let values: Vec<f64> = match self.family {
            TextureFamily::Grating => {
                let phases: Vec<f64> = self
                    .waves
                    .iter()
                    .map(|_| rng.random_range(0.0..2.0 * PI))
                    .collect();
                let total: f64 = self.waves.iter().map(|w| w.2).sum();
                (0..n)
                    .map(|i| {
                        let (y, x) = ((i / side) as f64, (i % side) as f64);
                        let s: f64 = self
                            .waves
                            .iter()
                            .zip(&phases)
                            .map(|(&(len, theta, amp), ph)| {
                                amp * (2.0 * PI * (x * theta.cos() + y * theta.sin()) / len + ph)
                                    .sin()
                            })
                            .sum();
                        0.5 + 0.5 * s / total + self.grain * grain[i]
                    })
                    .collect()
            }
            TextureFamily::Checker => {
                let (oy, ox) = (
                    rng.random_range(0.0..self.cell * 2.0),
                    rng.random_range(0.0..self.cell * 2.0),
                );
                let (p1, p2) = (
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.0..2.0 * PI),
                );
                (0..n)
                    .map(|i| {
                        let (y, x) = ((i / side) as f64, (i % side) as f64);
                        let wx = x + ox + self.warp_amp * (2.0 * PI * y / self.warp_len + p1).sin();
                        let wy = y + oy + self.warp_amp * (2.0 * PI * x / self.warp_len + p2).sin();
                        let parity =
                            ((wx / self.cell).floor() + (wy / self.cell).floor()).rem_euclid(2.0);
                        0.25 + 0.5 * parity + self.grain * grain[i]
                    })
                    .collect()
            }
            TextureFamily::Grain => {
                // high-passed white noise: noise minus its local box mean
                let blurred = box_blur(&grain, side, self.blur);
                let hp: Vec<f64> = grain.iter().zip(&blurred).map(|(g, b)| g - b).collect();
                let shade_phase = rng.random_range(0.0..2.0 * PI);
                grain = hp;
                (0..n)
                    .map(|i| {
                        let x = (i % side) as f64;
                        0.5 + 0.35 * grain[i]
                            + 0.05 * (2.0 * PI * x / side as f64 + shade_phase).sin()
                    })
                    .collect()
            }
        };
        values
            .into_iter()
            .map(|t| (TEXTURE_LO + (TEXTURE_HI - TEXTURE_LO) * t.clamp(0.0, 1.0)).round() as u8)
            .collect()
    }
}

fn box_blur(v: &[f64], side: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for y in 0..side {
        for x in 0..side {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(side - 1));
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(side - 1));
            let mut s = 0.0;
            for yy in y0..=y1 {
                s += v[yy * side + x0..=yy * side + x1].iter().sum::<f64>();
            }
            out[y * side + x] = s / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
        }
    }
    out
}

fn paint_segment(mask: &mut [bool], side: usize, a: (f64, f64), b: (f64, f64), radius: f64) {
    let (ymin, ymax) = (a.0.min(b.0) - radius, a.0.max(b.0) + radius);
    let (xmin, xmax) = (a.1.min(b.1) - radius, a.1.max(b.1) + radius);
    let clamp = |v: f64| (v.max(0.0) as usize).min(side - 1);
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = (dy * dy + dx * dx).max(1e-12);
    for y in clamp(ymin.floor())..=clamp(ymax.ceil()) {
        for x in clamp(xmin.floor())..=clamp(xmax.ceil()) {
            let (py, px) = (y as f64 - a.0, x as f64 - a.1);
            let t = ((py * dy + px * dx) / len2).clamp(0.0, 1.0);
            let (ey, ex) = (py - t * dy, px - t * dx);
            if ey * ey + ex * ex <= radius * radius {
                mask[y * side + x] = true;
            }
        }
    }
}

fn paint_blob(mask: &mut [bool], side: usize, rng: &mut impl Rng) {
    let s = side as f64;
    let (ry, rx) = (
        rng.random_range(0.06..0.11) * s,
        rng.random_range(0.06..0.11) * s,
    );
    let r = ry.max(rx);
    let (cy, cx) = (rng.random_range(r..s - r), rng.random_range(r..s - r));
    let (lobes, wobble, phase) = (
        rng.random_range(3..7) as f64,
        rng.random_range(0.05..0.2),
        rng.random_range(0.0..2.0 * PI),
    );
    for y in 0..side {
        for x in 0..side {
            let (py, px) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
            let angle = py.atan2(px);
            let limit = 1.0 + wobble * (lobes * angle + phase).sin();
            if py * py + px * px <= limit * limit {
                mask[y * side + x] = true;
            }
        }
    }
}

fn paint_scratch(mask: &mut [bool], side: usize, rng: &mut impl Rng) {
    let s = side as f64;
    let len = rng.random_range(0.35..0.7) * s;
    let angle = rng.random_range(0.0..PI);
    let (cy, cx) = (
        rng.random_range(0.2 * s..0.8 * s),
        rng.random_range(0.2 * s..0.8 * s),
    );
    let (hy, hx) = (0.5 * len * angle.sin(), 0.5 * len * angle.cos());
    let radius = rng.random_range(1.5..2.5) * s / 256.0;
    paint_segment(mask, side, (cy - hy, cx - hx), (cy + hy, cx + hx), radius);
}

fn paint_crack(mask: &mut [bool], side: usize, rng: &mut impl Rng) {
    let s = side as f64;
    let mut p = (
        rng.random_range(0.2 * s..0.8 * s),
        rng.random_range(0.2 * s..0.8 * s),
    );
    let mut heading = rng.random_range(0.0..2.0 * PI);
    let radius = rng.random_range(1.0..1.8) * s / 256.0;
    for _ in 0..rng.random_range(6..10) {
        heading += rng.random_range(-0.7..0.7);
        let step = rng.random_range(0.04..0.08) * s;
        let q = (
            (p.0 + step * heading.sin()).clamp(0.0, s - 1.0),
            (p.1 + step * heading.cos()).clamp(0.0, s - 1.0),
        );
        paint_segment(mask, side, p, q, radius);
        p = q;
    }
}

/// Paints a defect of `kind` onto `clean`. Strokes are added until the
/// mask covers at least `min_fraction` of the image. Blobs and cracks are
/// painted black, scratches white; every masked pixel changes.
pub fn inject_defect(
    clean: &[u8],
    side: usize,
    kind: DefectKind,
    min_fraction: f64,
    rng: &mut impl Rng,
) -> (Vec<u8>, Vec<bool>) {
    let mut mask = vec![false; side * side];
    let needed = (min_fraction * (side * side) as f64).ceil() as usize;
    loop {
        match kind {
            DefectKind::Blob => paint_blob(&mut mask, side, rng),
            DefectKind::Scratch => paint_scratch(&mut mask, side, rng),
            DefectKind::Crack => paint_crack(&mut mask, side, rng),
        }
        if mask.iter().filter(|&&m| m).count() >= needed {
            break;
        }
    }
    let paint = if kind == DefectKind::Scratch { 255 } else { 0 };
    let out = clean
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| if m { paint } else { v })
        .collect();
    (out, mask)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSummary {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub images_written: usize,
    pub masks_written: usize,
}

fn write_gray(bytes: Vec<u8>, side: usize, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_luma8(side, side, bytes, path)
}

pub fn generate_synthetic_dataset(spec: &SynthSpec, root: &Path) -> Result<SynthSummary> {
    if spec.n_classes == 0 || spec.side < 64 {
        return Err(Error::config(
            "synthetic dataset needs at least one class and a side of 64 or more",
        ));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let stream = RngStream::new(spec.seed);
    let mut summary = SynthSummary {
        root: root.to_path_buf(),
        classes: Vec::new(),
        images_written: 0,
        masks_written: 0,
    };
    let side = spec.side;
    for c in 0..spec.n_classes {
        let tex = TextureClass::for_class(spec.seed, c);
        let class_dir = root.join(&tex.name);
        let cs = stream.child("class", c as u64);
        for i in 0..spec.train_good {
            let img = tex.render(side, &mut cs.child("train", i as u64).substream("render"));
            write_gray(img, side, &class_dir.join(format!("train/good/{i:03}.png")))?;
            summary.images_written += 1;
        }
        for i in 0..spec.test_good {
            let img = tex.render(
                side,
                &mut cs.child("test-good", i as u64).substream("render"),
            );
            write_gray(img, side, &class_dir.join(format!("test/good/{i:03}.png")))?;
            summary.images_written += 1;
        }
        for &kind in &spec.defect_kinds {
            for i in 0..spec.defects_per_type {
                let s = cs.child(kind.name(), i as u64);
                let clean = tex.render(side, &mut s.substream("render"));
                let (img, mask) = inject_defect(
                    &clean,
                    side,
                    kind,
                    spec.min_defect_fraction,
                    &mut s.substream("defect"),
                );
                write_gray(
                    img,
                    side,
                    &class_dir.join(format!("test/{}/{i:03}.png", kind.name())),
                )?;
                let mask_bytes = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
                write_gray(
                    mask_bytes,
                    side,
                    &class_dir.join(format!("ground_truth/{}/{i:03}_mask.png", kind.name())),
                )?;
                summary.images_written += 1;
                summary.masks_written += 1;
            }
        }
        summary.classes.push(tex.name);
    }
    Ok(summary)
}
