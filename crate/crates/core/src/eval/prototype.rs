use std::fs;
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::data::image::{load_and_preprocess, GrayImage};
use crate::error::{CheckpointError, Error, Result};
use crate::model::FeatureExtractor;
use crate::nn::Tensor;

const MAGIC: &[u8; 7] = b"TGPROTO";
const VERSION: u32 = 1;

/// Per-cell, per-channel mean embedding of a class's non-defective images.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub class_name: String,
    pub feature_mean: Tensor<f32>,
    pub source_count: usize,
}

/// Streaming mean of embeddings, accumulated in f64.
#[derive(Clone, Debug)]
pub struct PrototypeBuilder {
    class_name: String,
    shape: Option<Vec<usize>>,
    sum: Vec<f64>,
    count: usize,
}

impl PrototypeBuilder {
    pub fn new(class_name: impl Into<String>) -> Self {
        Self {
            class_name: class_name.into(),
            shape: None,
            sum: Vec::new(),
            count: 0,
        }
    }

    pub fn add(&mut self, embedding: &Tensor<f32>) -> Result<()> {
        match &self.shape {
            None => {
                self.shape = Some(embedding.shape().to_vec());
                self.sum = vec![0.0; embedding.len()];
            }
            Some(s) if s.as_slice() != embedding.shape() => {
                return Err(Error::invalid(format!(
                    "embedding shape {:?} differs from prototype shape {s:?}",
                    embedding.shape()
                )))
            }
            Some(_) => {}
        }
        for (acc, &v) in self.sum.iter_mut().zip(embedding.data()) {
            *acc += v as f64;
        }
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(self) -> Result<Prototype> {
        let shape = self.shape.ok_or_else(|| {
            Error::config(format!(
                "no non-defective images for prototype of class {:?}",
                self.class_name
            ))
        })?;
        let n = self.count as f64;
        let data = self.sum.iter().map(|&s| (s / n) as f32).collect();
        Ok(Prototype {
            class_name: self.class_name,
            feature_mean: Tensor::new(shape, data)?,
            source_count: self.count,
        })
    }
}

pub fn build_prototype(
    net: &FeatureExtractor<f32>,
    class_name: &str,
    images: &[GrayImage],
) -> Result<Prototype> {
    let mut builder = PrototypeBuilder::new(class_name);
    embed_in_chunks(net, images.len(), |i| Ok(images[i].clone()), &mut builder)?;
    builder.finish()
}

/// Loads, preprocesses and embeds each image; only a few images are
/// resident at a time.
pub fn build_prototype_from_paths(
    net: &FeatureExtractor<f32>,
    class_name: &str,
    paths: &[impl AsRef<Path> + Sync],
    target_side: usize,
) -> Result<Prototype> {
    let mut builder = PrototypeBuilder::new(class_name);
    embed_in_chunks(
        net,
        paths.len(),
        |i| load_and_preprocess(paths[i].as_ref(), target_side),
        &mut builder,
    )?;
    builder.finish()
}

fn embed_in_chunks(
    net: &FeatureExtractor<f32>,
    n: usize,
    load: impl Fn(usize) -> Result<GrayImage> + Sync,
    builder: &mut PrototypeBuilder,
) -> Result<()> {
    let chunk = rayon::current_num_threads().max(1);
    for start in (0..n).step_by(chunk) {
        let embeddings: Vec<Tensor<f32>> = (start..(start + chunk).min(n))
            .into_par_iter()
            .map(|i| net.embed(&load(i)?.to_tensor()))
            .collect::<Result<_>>()?;
        // summed in index order so the result does not depend on scheduling
        for e in &embeddings {
            builder.add(e)?;
        }
    }
    Ok(())
}

pub fn encode_prototype(proto: &Prototype) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + proto.feature_mean.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let name = proto.class_name.as_bytes();
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name);
    out.extend_from_slice(&(proto.source_count as u64).to_le_bytes());
    let shape = proto.feature_mean.shape();
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in proto.feature_mean.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode_prototype(bytes: &[u8]) -> Result<Prototype, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(CheckpointError::Truncated {
            expected: MAGIC.len() + 4 + 32,
            found: bytes.len(),
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Corrupt("prototype digest mismatch".into()));
    }
    let name_len = r.u32()? as usize;
    let class_name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| CheckpointError::Corrupt("class name is not UTF-8".into()))?;
    let source_count = r.u64()? as usize;
    let rank = r.u32()? as usize;
    let shape = (0..rank)
        .map(|_| r.u64().map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let len: usize = shape.iter().product();
    let data = r
        .take(len * 4)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if r.pos != body.len() {
        return Err(CheckpointError::Corrupt(
            "trailing bytes in prototype".into(),
        ));
    }
    if source_count == 0 {
        return Err(CheckpointError::Corrupt(
            "prototype built from zero images".into(),
        ));
    }
    let feature_mean =
        Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    Ok(Prototype {
        class_name,
        feature_mean,
        source_count,
    })
}

pub fn save_prototype(proto: &Prototype, path: &Path) -> Result<()> {
    fs::write(path, encode_prototype(proto)).map_err(|e| Error::io(path, e))
}

pub fn load_prototype(path: &Path) -> Result<Prototype> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_prototype(&bytes)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(CheckpointError::Truncated {
                expected: self.pos.saturating_add(n),
                found: self.buf.len(),
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::rng::RngStream;
    use crate::model::build_feature_extractor;
    use rand::Rng;

    fn noise(seed: u64, side: usize) -> GrayImage {
        let mut rng = RngStream::new(seed).substream("noise");
        GrayImage::new(
            side,
            side,
            (0..side * side).map(|_| rng.random::<f32>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_and_repeated_images_give_their_embedding() {
        let net = build_feature_extractor(3);
        let img = noise(1, 72);
        let emb = net.embed(&img.to_tensor()).unwrap();
        let one = build_prototype(&net, "c", std::slice::from_ref(&img)).unwrap();
        assert_eq!(one.feature_mean, emb);
        assert_eq!(one.source_count, 1);
        let three = build_prototype(&net, "c", &[img.clone(), img.clone(), img]).unwrap();
        for (a, b) in three.feature_mean.data().iter().zip(emb.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn streaming_mean_matches_two_pass_mean() {
        let net = build_feature_extractor(3);
        let imgs: Vec<_> = (0..5).map(|s| noise(s, 70)).collect();
        let proto = build_prototype(&net, "c", &imgs).unwrap();
        let embs: Vec<_> = imgs
            .iter()
            .map(|i| net.embed(&i.to_tensor()).unwrap())
            .collect();
        for k in 0..proto.feature_mean.len() {
            let mean = embs.iter().map(|e| e.data()[k] as f64).sum::<f64>() / embs.len() as f64;
            assert!((proto.feature_mean.data()[k] as f64 - mean).abs() < 1e-5);
        }
    }

    #[test]
    fn empty_list_is_a_configuration_error() {
        let net = build_feature_extractor(3);
        assert!(matches!(
            build_prototype(&net, "c", &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn encoding_round_trips_and_detects_damage() {
        let proto = Prototype {
            class_name: "grain_02".into(),
            feature_mean: Tensor::from_fn(&[2, 3, 4], |i| i as f32 * 0.25),
            source_count: 7,
        };
        let bytes = encode_prototype(&proto);
        assert_eq!(decode_prototype(&bytes).unwrap(), proto);
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(matches!(
            decode_prototype(&bad),
            Err(CheckpointError::Corrupt(_))
        ));
        assert_eq!(
            decode_prototype(b"NOTPROTO....").unwrap_err(),
            CheckpointError::BadMagic
        );
    }
}
