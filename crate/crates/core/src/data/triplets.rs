use std::path::PathBuf;

use rand::Rng;
use rayon::prelude::*;

use super::dataset::DatasetIndex;
use super::image::{load_and_preprocess, GrayImage, DEFAULT_TARGET_SIDE};
use super::patches::{
    random_erase, random_rescale, sample_patches, EraseConfig, DEFAULT_SCALES, PATCH_SIDE,
};
use super::rng::RngStream;
use crate::error::{Error, Result};

/// How training patches are produced from source images.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingConfig {
    /// Side images are resized to on load.
    pub target_side: usize,
    /// Candidate sides for the random rescale.
    pub scales: Vec<usize>,
    pub patch_side: usize,
    pub erase: EraseConfig,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self::for_side(DEFAULT_TARGET_SIDE)
    }
}

impl SamplingConfig {
    /// Working resolution `side`, keeping the default scales that fit
    /// between the patch size and `side`.
    pub fn for_side(side: usize) -> Self {
        let mut scales: Vec<usize> = DEFAULT_SCALES
            .iter()
            .copied()
            .filter(|&s| s <= side && s >= 2 * PATCH_SIDE)
            .collect();
        if scales.is_empty() {
            scales.push(side);
        }
        Self {
            target_side: side,
            scales,
            patch_side: PATCH_SIDE,
            erase: EraseConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPatches {
    pub name: String,
    pub patches: Vec<GrayImage>,
}

/// Patches pooled per class for one pass over the source images.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPool {
    classes: Vec<ClassPatches>,
}

/// Matched anchor/positive/negative patches.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub anchors: Vec<GrayImage>,
    pub positives: Vec<GrayImage>,
    pub negatives: Vec<GrayImage>,
    /// Pool class of each triplet.
    pub classes: Vec<usize>,
    /// Index, within its class pool, of the patch each negative was erased from.
    pub negative_sources: Vec<usize>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

impl PatchPool {
    /// Rescales every preprocessed image and samples its patches. Image `i`
    /// (in iteration order) uses the child stream `("image", i)`.
    pub fn from_images(
        classes: Vec<(String, Vec<GrayImage>)>,
        cfg: &SamplingConfig,
        stream: &RngStream,
    ) -> Result<Self> {
        Self::build(classes, cfg, stream, |img| Ok(img.clone()))
    }

    /// Like [`PatchPool::from_images`] but loads each image only while its
    /// patches are sampled, so full-resolution images are never all
    /// resident at once.
    pub fn from_paths(
        classes: &[(String, Vec<PathBuf>)],
        cfg: &SamplingConfig,
        stream: &RngStream,
    ) -> Result<Self> {
        Self::build(classes.to_vec(), cfg, stream, |p| {
            load_and_preprocess(p, cfg.target_side)
        })
    }

    fn build<S: Sync>(
        classes: Vec<(String, Vec<S>)>,
        cfg: &SamplingConfig,
        stream: &RngStream,
        load: impl Fn(&S) -> Result<GrayImage> + Sync,
    ) -> Result<Self> {
        let mut next = 0u64;
        let mut out = Vec::with_capacity(classes.len());
        for (name, sources) in classes {
            let first = next;
            next += sources.len() as u64;
            let per_image: Vec<Vec<GrayImage>> = sources
                .par_iter()
                .enumerate()
                .map(|(i, src)| {
                    let img = load(src)?;
                    let s = stream.child("image", first + i as u64);
                    let scaled = random_rescale(&img, &cfg.scales, &mut s.substream("resize"));
                    sample_patches(&scaled, cfg.patch_side, &mut s.substream("patch"))
                })
                .collect::<Result<_>>()?;
            out.push(ClassPatches {
                name,
                patches: per_image.into_iter().flatten().collect(),
            });
        }
        Ok(Self { classes: out })
    }

    /// Pool over the training half of every known class. Defective and
    /// novel-class images are never used.
    pub fn from_index(
        index: &DatasetIndex,
        cfg: &SamplingConfig,
        stream: &RngStream,
    ) -> Result<Self> {
        let classes: Vec<(String, Vec<PathBuf>)> = index
            .known()
            .filter(|c| !c.train_good.is_empty())
            .map(|c| (c.name.clone(), c.train_good.clone()))
            .collect();
        if classes.is_empty() {
            return Err(Error::config("no known class has training images"));
        }
        Self::from_paths(&classes, cfg, stream)
    }

    pub fn classes(&self) -> &[ClassPatches] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(|c| c.patches.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch(&self, class: usize, index: usize) -> &GrayImage {
        &self.classes[class].patches[index]
    }

    /// `size` triplets. Each picks a non-empty class uniformly, an anchor
    /// and a distinct positive from it (when the class has two or more
    /// patches), and erases a third same-class patch for the negative.
    pub fn triplet_batch(
        &self,
        size: usize,
        erase: &EraseConfig,
        rng: &mut impl Rng,
    ) -> Result<TripletBatch> {
        let usable: Vec<usize> = (0..self.classes.len())
            .filter(|&i| !self.classes[i].patches.is_empty())
            .collect();
        if usable.is_empty() {
            return Err(Error::config("patch pool is empty"));
        }
        let mut batch = TripletBatch {
            anchors: Vec::with_capacity(size),
            positives: Vec::with_capacity(size),
            negatives: Vec::with_capacity(size),
            classes: Vec::with_capacity(size),
            negative_sources: Vec::with_capacity(size),
        };
        for _ in 0..size {
            let class = usable[rng.random_range(0..usable.len())];
            let pool = &self.classes[class].patches;
            let a = rng.random_range(0..pool.len());
            let p = other_index(pool.len(), a, rng);
            let n = other_index(pool.len(), a, rng);
            let (negative, _) = random_erase(&pool[n], erase, rng);
            batch.anchors.push(pool[a].clone());
            batch.positives.push(pool[p].clone());
            batch.negatives.push(negative);
            batch.classes.push(class);
            batch.negative_sources.push(n);
        }
        Ok(batch)
    }
}

/// Uniform index in `0..len` other than `avoid`, unless `len == 1`.
fn other_index(len: usize, avoid: usize, rng: &mut impl Rng) -> usize {
    if len < 2 {
        return avoid;
    }
    let i = rng.random_range(0..len - 1);
    if i >= avoid {
        i + 1
    } else {
        i
    }
}

/// Builds one batch from a dataset index: samples a fresh pool from the
/// known classes' training images, then draws `size` triplets.
pub fn build_triplet_batch(
    index: &DatasetIndex,
    cfg: &SamplingConfig,
    stream: &RngStream,
    size: usize,
) -> Result<TripletBatch> {
    let pool = PatchPool::from_index(index, cfg, &stream.child("pool", 0))?;
    pool.triplet_batch(size, &cfg.erase, &mut stream.substream("triplets"))
}
