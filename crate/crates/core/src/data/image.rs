use std::path::Path;

use image::{ColorType, DynamicImage};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Side every image is resized to before training or evaluation.
pub const DEFAULT_TARGET_SIDE: usize = 1024;

/// Single-channel `f32` image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::invalid(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self::new(height, width, vec![value; height * width]).expect("non-empty image")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// `size x size` window with top-left corner `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, size: usize) -> Result<GrayImage> {
        if y + size > self.height || x + size > self.width {
            return Err(Error::invalid(format!(
                "crop {size}x{size} at ({y},{x}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(size * size);
        for row in y..y + size {
            data.extend_from_slice(&self.data[row * self.width + x..row * self.width + x + size]);
        }
        GrayImage::new(size, size, data)
    }

    /// `H x W x 1` tensor view for the network.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.height, self.width, 1], self.data.clone()).expect("valid image shape")
    }

    pub fn flip_horizontal(&self) -> GrayImage {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(self.width) {
            data.extend(row.iter().rev());
        }
        GrayImage::new(self.height, self.width, data).expect("same shape")
    }
}

/// Luma of a decoded raster in the 0..255 range; RGB uses BT.601 weights.
pub fn luma(img: &DynamicImage) -> GrayImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::L16 | ColorType::La16 => {
            if matches!(img.color(), ColorType::L8 | ColorType::La8) {
                img.to_luma8()
                    .into_raw()
                    .into_iter()
                    .map(f32::from)
                    .collect()
            } else {
                img.to_luma16()
                    .into_raw()
                    .into_iter()
                    .map(|v| v as f32 / 257.0)
                    .collect()
            }
        }
        _ => img
            .to_rgb8()
            .into_raw()
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32)
            .collect(),
    };
    GrayImage::new(h, w, data).expect("decoded image is non-empty")
}

/// Bilinear resampling with pixel-center alignment. Resizing to the same
/// size returns an identical image.
pub fn resize_bilinear(img: &GrayImage, height: usize, width: usize) -> GrayImage {
    if height == img.height && width == img.width {
        return img.clone();
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(height, img.height);
    let xs = axis(width, img.width);
    let mut data = Vec::with_capacity(height * width);
    for &(y0, y1, ty) in &ys {
        let r0 = &img.data[y0 * img.width..(y0 + 1) * img.width];
        let r1 = &img.data[y1 * img.width..(y1 + 1) * img.width];
        for &(x0, x1, tx) in &xs {
            let top = r0[x0] + (r0[x1] - r0[x0]) * tx;
            let bottom = r1[x0] + (r1[x1] - r1[x0]) * tx;
            data.push(top + (bottom - top) * ty);
        }
    }
    GrayImage::new(height, width, data).expect("positive target size")
}

/// Per-image min-max scaling to `[0, 1]`; constant images become all zeros.
pub fn min_max_scale(img: &GrayImage) -> GrayImage {
    let (lo, hi) = img
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    let data = if range > 0.0 {
        img.data
            .iter()
            .map(|&v| ((v - lo) / range).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; img.data.len()]
    };
    GrayImage::new(img.height, img.width, data).expect("same shape")
}

/// Square resize to `side` followed by min-max scaling.
pub fn preprocess(raw: &GrayImage, side: usize) -> GrayImage {
    min_max_scale(&resize_bilinear(raw, side, side))
}

pub fn load_raw(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(luma(&img))
}

/// Reads a raster, converts it to luma, resizes it to `side x side` and
/// min-max scales it.
pub fn load_and_preprocess(path: &Path, side: usize) -> Result<GrayImage> {
    Ok(preprocess(&load_raw(path)?, side))
}

/// Writes values in `[0, 1]` as an 8-bit grayscale PNG.
pub fn save_png(img: &GrayImage, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    save_luma8(img.width, img.height, bytes, path)
}

pub(crate) fn save_luma8(width: usize, height: usize, bytes: Vec<u8>, path: &Path) -> Result<()> {
    let buf = image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::invalid("pixel buffer does not match image size"))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_max_examples() {
        let img = GrayImage::new(1, 3, vec![2.0, 4.0, 6.0]).unwrap();
        assert_eq!(min_max_scale(&img).data(), &[0.0, 0.5, 1.0]);
        let flat = GrayImage::filled(4, 4, 17.0);
        assert!(min_max_scale(&flat).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resize_examples() {
        let img = GrayImage::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = resize_bilinear(&img, 700, 700);
        let out = resize_bilinear(&up, 1024, 1024);
        assert_eq!((out.height(), out.width()), (1024, 1024));
        // same-size resize is the identity
        assert_eq!(resize_bilinear(&img, 2, 2), img);
        // bilinear upsample of a linear ramp stays within its range
        assert!(up.data().iter().all(|&v| (0.0..=3.0).contains(&v)));
        let down = resize_bilinear(&GrayImage::filled(64, 64, 0.25), 8, 8);
        assert!(down.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn preprocessing_is_idempotent() {
        let raw =
            GrayImage::new(50, 70, (0..3500).map(|i| ((i * 31) % 97) as f32).collect()).unwrap();
        let once = preprocess(&raw, 128);
        let twice = preprocess(&once, 128);
        assert_eq!(
            once.data().iter().cloned().fold(f32::INFINITY, f32::min),
            0.0
        );
        assert_eq!(once.data().iter().cloned().fold(0.0, f32::max), 1.0);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn rgb_uses_bt601_weights() {
        let rgb = image::RgbImage::from_raw(2, 1, vec![255, 0, 0, 0, 0, 255]).unwrap();
        let g = luma(&DynamicImage::ImageRgb8(rgb));
        assert!((g.data()[0] - 0.299 * 255.0).abs() < 1e-3);
        assert!((g.data()[1] - 0.114 * 255.0).abs() < 1e-3);
    }

    #[test]
    fn png_round_trip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = GrayImage::new(
            70,
            70,
            (0..4900).map(|i| (i % 256) as f32 / 255.0).collect(),
        )
        .unwrap();
        save_png(&img, &path).unwrap();
        let back = load_and_preprocess(&path, 1024).unwrap();
        assert_eq!((back.height(), back.width()), (1024, 1024));
        let err = load_and_preprocess(&dir.path().join("missing.png"), 64).unwrap_err();
        assert!(err.to_string().contains("missing.png"));
    }
}
