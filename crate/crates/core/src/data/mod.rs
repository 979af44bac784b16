//! Image preprocessing, patch sampling, random erasing, triplet batches,
//! dataset indexing and a synthetic texture generator.

pub mod dataset;
pub mod image;
pub mod patches;
pub mod rng;
pub mod synth;
pub mod triplets;

pub use dataset::{index_dataset, ClassEntry, ClassRole, DatasetIndex, IndexOptions};
pub use image::{load_and_preprocess, min_max_scale, preprocess, resize_bilinear, GrayImage};
pub use patches::{random_erase, random_rescale, sample_patches, EraseConfig, EraseRect};
pub use rng::RngStream;
pub use synth::{generate_synthetic_dataset, DefectKind, SynthSpec};
pub use triplets::{build_triplet_batch, PatchPool, SamplingConfig, TripletBatch};
