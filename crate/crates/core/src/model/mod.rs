//! The residual feature extractor, the triplet head, training and
//! checkpoints.

pub mod arch;
pub mod checkpoint;
pub mod net;
pub mod train;
pub mod triplet;

pub use arch::{output_side, Architecture};
pub use checkpoint::{
    load_checkpoint, load_checkpoint_with, save_checkpoint, Checkpoint, TrainingMeta,
};
pub use net::{build_feature_extractor, FeatureExtractor, Gradients, ResidualBlock};
pub use train::{train, train_with, triplet_accuracy, EpochStats, TrainConfig, TrainHistory};
pub use triplet::{triplet_forward, triplet_loss_and_grad, TripletOutput};
