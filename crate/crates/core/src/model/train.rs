use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::net::{FeatureExtractor, Gradients};
use super::triplet::{triplet_forward, triplet_loss_and_grad};
use crate::data::dataset::DatasetIndex;
use crate::data::rng::RngStream;
use crate::data::triplets::{PatchPool, SamplingConfig, TripletBatch};
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Sum per-triplet gradients in a fixed order so runs are bit-reproducible.
    pub deterministic: bool,
    pub sampling: SamplingConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 256,
            epochs: 40,
            seed: 0,
            deterministic: true,
            sampling: SamplingConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub triplets: usize,
    pub batches: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss,triplets,batches\n");
        for e in &self.epochs {
            writeln!(
                s,
                "{},{:.9},{},{}",
                e.epoch, e.mean_loss, e.triplets, e.batches
            )
            .unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Forward/backward over one batch and a single Adam update on the mean
/// triplet loss. Returns the summed (not averaged) loss of the batch.
pub fn train_batch(
    net: &mut FeatureExtractor<f32>,
    batch: &TripletBatch,
    adam: &AdamConfig,
    deterministic: bool,
) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let shared: &FeatureExtractor<f32> = net;
    let per_triplet = |i: usize| -> Result<(f64, Gradients<f32>)> {
        let (out, g) = triplet_loss_and_grad(
            shared,
            &batch.anchors[i].to_tensor(),
            &batch.positives[i].to_tensor(),
            &batch.negatives[i].to_tensor(),
        )?;
        Ok((out.loss as f64, g))
    };

    let (loss_sum, mut grads) = if deterministic {
        let results: Vec<(f64, Gradients<f32>)> = (0..batch.len())
            .into_par_iter()
            .map(per_triplet)
            .collect::<Result<_>>()?;
        let mut it = results.into_iter();
        let (mut loss, mut acc) = it.next().expect("non-empty batch");
        for (l, g) in it {
            loss += l;
            acc.accumulate(&g)?;
        }
        (loss, acc)
    } else {
        (0..batch.len())
            .into_par_iter()
            .map(per_triplet)
            .try_reduce_with(|(la, mut ga), (lb, gb)| {
                ga.accumulate(&gb)?;
                Ok((la + lb, ga))
            })
            .expect("non-empty batch")?
    };

    if !loss_sum.is_finite() {
        return Err(Error::NumericAbort(format!(
            "non-finite batch loss {loss_sum}"
        )));
    }
    grads.scale(1.0 / batch.len() as f32);
    for (p, g) in net.params_mut().into_iter().zip(grads.0) {
        p.grad = g;
    }
    adam_step(&mut net.params_mut(), adam)?;
    Ok(loss_sum)
}

/// One epoch: every training image is loaded, rescaled and sampled once;
/// as many triplets as pooled patches are then drawn in batches of
/// `batch_size`, the last batch possibly partial.
pub fn train_epoch(
    net: &mut FeatureExtractor<f32>,
    pool: &PatchPool,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    let stream = RngStream::new(cfg.seed).child("epoch", epoch as u64);
    let total = pool.len();
    if total == 0 {
        return Err(Error::config("empty training set"));
    }
    let mut loss = 0.0;
    let mut batches = 0;
    let mut done = 0;
    while done < total {
        let size = cfg.batch_size.min(total - done);
        let mut rng = stream.child("batch", batches as u64).substream("triplets");
        let batch = pool.triplet_batch(size, &cfg.sampling.erase, &mut rng)?;
        loss += train_batch(net, &batch, &cfg.adam, cfg.deterministic)?;
        done += size;
        batches += 1;
    }
    Ok(EpochStats {
        epoch: epoch + 1,
        mean_loss: loss / total as f64,
        triplets: total,
        batches,
    })
}

pub fn train(
    net: &mut FeatureExtractor<f32>,
    index: &DatasetIndex,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    train_with(net, index, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    net: &mut FeatureExtractor<f32>,
    index: &DatasetIndex,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainHistory> {
    if cfg.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    if index.training_image_count() == 0 {
        return Err(Error::config(
            "empty training set: no known class has training images",
        ));
    }
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let pool_stream = RngStream::new(cfg.seed)
            .child("epoch", epoch as u64)
            .child("pool", 0);
        let pool = PatchPool::from_index(index, &cfg.sampling, &pool_stream)?;
        let stats = train_epoch(net, &pool, cfg, epoch)?;
        on_epoch(&stats);
        history.epochs.push(stats);
    }
    Ok(history)
}

/// Fraction of triplets with anchor-positive distance strictly below
/// anchor-negative distance.
pub fn triplet_accuracy(net: &FeatureExtractor<f32>, batch: &TripletBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::config("empty triplet batch"));
    }
    let hits: Vec<bool> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let out = triplet_forward(
                net,
                &batch.anchors[i].to_tensor(),
                &batch.positives[i].to_tensor(),
                &batch.negatives[i].to_tensor(),
            )?;
            Ok(out.d1 < out.d2)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / batch.len() as f64)
}
