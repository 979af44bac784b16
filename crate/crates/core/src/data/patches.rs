use rand::Rng;

use super::image::{resize_bilinear, GrayImage};
use crate::error::{Error, Result};

pub const PATCH_SIDE: usize = 64;

/// Resolutions a training image is randomly rescaled to.
pub const DEFAULT_SCALES: [usize; 4] = [1024, 512, 256, 128];

/// 16 patches from the two large scales, 8 from the small ones.
pub fn patches_per_image(side: usize) -> usize {
    if side >= 512 {
        16
    } else {
        8
    }
}

/// Side drawn uniformly from `scales`.
pub fn choose_scale(scales: &[usize], rng: &mut impl Rng) -> usize {
    scales[rng.random_range(0..scales.len())]
}

/// Rescales a square image to a side drawn uniformly from `scales`.
pub fn random_rescale(img: &GrayImage, scales: &[usize], rng: &mut impl Rng) -> GrayImage {
    let side = choose_scale(scales, rng);
    resize_bilinear(img, side, side)
}

/// Independent uniformly placed `patch_side` windows, fully in bounds.
/// Overlap between patches is allowed.
pub fn sample_patches(
    img: &GrayImage,
    patch_side: usize,
    rng: &mut impl Rng,
) -> Result<Vec<GrayImage>> {
    if img.height() < patch_side || img.width() < patch_side {
        return Err(Error::invalid(format!(
            "{}x{} image is smaller than a {patch_side} patch",
            img.height(),
            img.width()
        )));
    }
    let n = patches_per_image(img.height().min(img.width()));
    (0..n)
        .map(|_| {
            let y = rng.random_range(0..=img.height() - patch_side);
            let x = rng.random_range(0..=img.width() - patch_side);
            img.crop(y, x, patch_side)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EraseConfig {
    /// Range of the erased area as a fraction of the patch area.
    pub area: (f64, f64),
    /// Range of the rectangle's height/width ratio, sampled log-uniformly.
    pub aspect: (f64, f64),
}

impl Default for EraseConfig {
    fn default() -> Self {
        Self {
            area: (0.02, 0.25),
            aspect: (0.3, 3.3),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EraseRect {
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
}

impl EraseRect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y..self.y + self.height).contains(&y) && (self.x..self.x + self.width).contains(&x)
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// Pixel-count bounds `[ceil(lo * N), floor(hi * N)]` of an erasure.
pub fn erase_area_bounds(cfg: &EraseConfig, pixels: usize) -> (usize, usize) {
    let lo = (cfg.area.0 * pixels as f64).ceil() as usize;
    let hi = (cfg.area.1 * pixels as f64).floor() as usize;
    (lo.max(1), hi.max(lo.max(1)))
}

/// Overwrites one random rectangle with uniform noise in `[0, 1)`.
///
/// Area and aspect are sampled from `cfg`; the integer rectangle is then
/// adjusted so its pixel count stays inside [`erase_area_bounds`].
pub fn random_erase(
    patch: &GrayImage,
    cfg: &EraseConfig,
    rng: &mut impl Rng,
) -> (GrayImage, EraseRect) {
    let (ph, pw) = (patch.height(), patch.width());
    let (min_px, max_px) = erase_area_bounds(cfg, ph * pw);
    let area = rng.random_range(cfg.area.0..=cfg.area.1) * (ph * pw) as f64;
    let log_aspect = rng.random_range(cfg.aspect.0.ln()..=cfg.aspect.1.ln());
    let ratio = log_aspect.exp();
    let mut h = ((area * ratio).sqrt().round() as usize).clamp(1, ph);
    let mut w = ((area / h as f64).round() as usize).clamp(1, pw);
    while h * w < min_px {
        if w < pw {
            w += 1;
        } else {
            h += 1;
        }
    }
    while h * w > max_px {
        if w > 1 && (w >= h || h == 1) {
            w -= 1;
        } else {
            h -= 1;
        }
    }
    let y = rng.random_range(0..=ph - h);
    let x = rng.random_range(0..=pw - w);
    let rect = EraseRect {
        y,
        x,
        height: h,
        width: w,
    };
    let mut out = patch.clone();
    let data = out.data_mut();
    for row in y..y + h {
        for v in &mut data[row * pw + x..row * pw + x + w] {
            *v = rng.random::<f32>();
        }
    }
    (out, rect)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::rng::RngStream;
    use proptest::prelude::*;

    fn ramp(side: usize) -> GrayImage {
        GrayImage::new(
            side,
            side,
            (0..side * side).map(|i| (i % 251) as f32 / 250.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn rescale_side_frequencies_are_uniform() {
        let img = GrayImage::filled(1024, 1024, 0.5);
        let mut rng = RngStream::new(3).substream("resize");
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            let side = choose_scale(&DEFAULT_SCALES, &mut rng);
            counts[DEFAULT_SCALES.iter().position(|&s| s == side).unwrap()] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((0.23..=0.27).contains(&f), "{counts:?}");
        }
        // same draw path through the public function
        let mut rng = RngStream::new(3).substream("resize");
        let out = random_rescale(&img, &[128], &mut rng);
        assert_eq!(out.height(), 128);
        let same = random_rescale(&ramp(1024), &[1024], &mut rng);
        assert_eq!(same, ramp(1024));
    }

    #[test]
    fn patch_counts_per_scale() {
        let mut rng = RngStream::new(1).substream("patch");
        for (side, n) in [(1024, 16), (512, 16), (256, 8), (128, 8)] {
            let p = sample_patches(&ramp(side), 64, &mut rng).unwrap();
            assert_eq!(p.len(), n);
            assert!(p.iter().all(|q| q.height() == 64 && q.width() == 64));
        }
        assert!(sample_patches(&ramp(32), 64, &mut rng).is_err());
    }

    #[test]
    fn erase_is_deterministic() {
        let p = ramp(64);
        let a = random_erase(
            &p,
            &EraseConfig::default(),
            &mut RngStream::new(8).substream("erase"),
        );
        let b = random_erase(
            &p,
            &EraseConfig::default(),
            &mut RngStream::new(8).substream("erase"),
        );
        assert_eq!(a, b);
    }

    #[test]
    fn erase_bounds_for_a_patch() {
        assert_eq!(erase_area_bounds(&EraseConfig::default(), 4096), (82, 1024));
    }

    proptest! {
        #[test]
        fn patches_stay_in_bounds(seed in any::<u64>(), scale in 0usize..4) {
            let side = DEFAULT_SCALES[scale];
            let img = ramp(side);
            let mut rng = RngStream::new(seed).substream("patch");
            for p in sample_patches(&img, 64, &mut rng).unwrap() {
                prop_assert_eq!((p.height(), p.width()), (64, 64));
            }
        }

        #[test]
        fn erase_respects_area_and_leaves_outside_untouched(seed in any::<u64>()) {
            let p = ramp(64);
            let (out, rect) = random_erase(&p, &EraseConfig::default(), &mut RngStream::new(seed).substream("erase"));
            prop_assert!((82..=1024).contains(&rect.area()));
            prop_assert!(rect.y + rect.height <= 64 && rect.x + rect.width <= 64);
            for y in 0..64 {
                for x in 0..64 {
                    let (a, b) = (p.get(y, x), out.get(y, x));
                    prop_assert!((0.0..=1.0).contains(&b));
                    if !rect.contains(y, x) {
                        prop_assert_eq!(a.to_bits(), b.to_bits());
                    }
                }
            }
        }
    }
}
