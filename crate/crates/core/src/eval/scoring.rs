use std::fs;
use std::path::Path;

use super::prototype::Prototype;
use crate::data::image::{save_luma8, GrayImage};
use crate::error::{Error, Result};
use crate::model::FeatureExtractor;
use crate::nn::ops::DISTANCE_EPS;
use crate::nn::Tensor;

/// Per-cell Euclidean distance between an embedding and a prototype.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl DistanceMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height * width != data.len() || data.is_empty() {
            return Err(Error::invalid(format!(
                "distance map of {height}x{width} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self {
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Good,
    Defective,
}

impl Label {
    /// +1 for defective, the positive class of the ROC.
    pub fn sign(self) -> i8 {
        match self {
            Label::Good => -1,
            Label::Defective => 1,
        }
    }
}

/// One evaluated image reduced to its two distance features.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorePoint {
    pub class_name: String,
    pub image_id: String,
    pub mean_distance: f64,
    pub max_distance: f64,
    pub label: Label,
    pub defect_type: Option<String>,
}

impl ScorePoint {
    pub fn features(&self) -> [f64; 2] {
        [self.mean_distance, self.max_distance]
    }
}

pub fn distance_map_from_embedding(
    embedding: &Tensor<f32>,
    proto: &Prototype,
) -> Result<DistanceMap> {
    if embedding.shape() != proto.feature_mean.shape() {
        return Err(Error::invalid(format!(
            "embedding shape {:?} does not match prototype shape {:?}",
            embedding.shape(),
            proto.feature_mean.shape()
        )));
    }
    let (h, w, c) = embedding.dims3()?;
    let data = embedding
        .data()
        .chunks_exact(c)
        .zip(proto.feature_mean.data().chunks_exact(c))
        .map(|(a, b)| {
            let sq: f64 = a
                .iter()
                .zip(b)
                .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                .sum();
            (sq + DISTANCE_EPS).sqrt() as f32
        })
        .collect();
    DistanceMap::new(h, w, data)
}

pub fn distance_map(
    net: &FeatureExtractor<f32>,
    image: &GrayImage,
    proto: &Prototype,
) -> Result<DistanceMap> {
    distance_map_from_embedding(&net.embed(&image.to_tensor())?, proto)
}

/// (mean, max) over all cells.
pub fn score_features(map: &DistanceMap) -> (f64, f64) {
    let sum: f64 = map.data.iter().map(|&v| v as f64).sum();
    let max = map.data.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    (sum / map.data.len() as f64, max as f64)
}

/// Writes the map as an 8-bit PNG, linearly rescaled so its minimum is 0
/// and maximum 255, plus `<name>.scale.txt` holding the raw min and max.
/// A constant map is written black.
pub fn export_heatmap(map: &DistanceMap, path: &Path) -> Result<()> {
    let (lo, hi) = map.min_max();
    let range = hi - lo;
    let bytes = map
        .data
        .iter()
        .map(|&v| {
            if range > 0.0 {
                (((v - lo) / range) * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_luma8(map.width, map.height, bytes, path)?;
    let sidecar = path.with_extension("scale.txt");
    fs::write(&sidecar, format!("min {lo}\nmax {hi}\n")).map_err(|e| Error::io(&sidecar, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::rng::RngStream;
    use crate::eval::prototype::build_prototype;
    use crate::model::build_feature_extractor;
    use rand::Rng;

    #[test]
    fn score_feature_examples() {
        let zero = DistanceMap::new(3, 3, vec![0.0; 9]).unwrap();
        assert_eq!(score_features(&zero), (0.0, 0.0));
        let mut data = vec![0.0; 481 * 481];
        data[1000] = 2.5;
        let (mean, max) = score_features(&DistanceMap::new(481, 481, data).unwrap());
        assert!((mean - 2.5 / (481.0 * 481.0)).abs() < 1e-15);
        assert_eq!(max, 2.5);
    }

    #[test]
    fn own_source_image_scores_near_zero() {
        let net = build_feature_extractor(4);
        let mut rng = RngStream::new(9).substream("img");
        let img = GrayImage::new(80, 80, (0..6400).map(|_| rng.random::<f32>()).collect()).unwrap();
        let proto = build_prototype(&net, "c", std::slice::from_ref(&img)).unwrap();
        let map = distance_map(&net, &img, &proto).unwrap();
        assert_eq!((map.height(), map.width()), (9, 9));
        assert!(map.data().iter().all(|&v| (0.0..=1e-6 + 1e-9).contains(&v)));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let proto = Prototype {
            class_name: "c".into(),
            feature_mean: Tensor::zeros(&[2, 2, 16]),
            source_count: 1,
        };
        assert!(matches!(
            distance_map_from_embedding(&Tensor::zeros(&[3, 3, 16]), &proto),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn heatmap_of_zero_map_is_black_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/map.png");
        export_heatmap(&DistanceMap::new(4, 5, vec![0.0; 20]).unwrap(), &path).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (5, 4));
        assert!(img.pixels().all(|p| p.0[0] == 0));
        let side = fs::read_to_string(dir.path().join("sub/map.scale.txt")).unwrap();
        assert_eq!(side, "min 0\nmax 0\n");
    }

    #[test]
    fn heatmap_spans_full_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        export_heatmap(&DistanceMap::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap(), &path).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        let px: Vec<u8> = img.pixels().map(|p| p.0[0]).collect();
        assert_eq!(px, vec![0, 128, 255]);
    }
}
