//! Binary checkpoint format.
//!
//! ```text
//! "TGCKPT"            6 bytes magic
//! version             u32 LE (currently 1)
//! fingerprint         32 bytes, SHA-256 of the architecture description
//! optimizer flag      u8, 1 if Adam state follows the metadata
//! parameters          f32 LE, every parameter in declaration order
//! epoch               u32 LE, completed training epochs
//! seed                u64 LE
//! [step count         u64 LE                      ] if flag == 1
//! [adam m, adam v     f32 LE, declaration order   ] if flag == 1
//! digest              32 bytes, SHA-256 of all preceding bytes
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::arch::Architecture;
use super::net::FeatureExtractor;
use crate::error::{CheckpointError, Error, Result};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 6] = b"TGCKPT";
pub const FORMAT_VERSION: u32 = 1;

const HEADER_LEN: usize = 6 + 4 + 32 + 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainingMeta {
    pub epoch: u32,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: FeatureExtractor<f32>,
    pub meta: TrainingMeta,
    pub has_optimizer_state: bool,
}

pub fn encode_checkpoint(
    net: &FeatureExtractor<f32>,
    meta: TrainingMeta,
    with_optimizer: bool,
) -> Vec<u8> {
    let params = net.params();
    let mut buf = Vec::with_capacity(HEADER_LEN + 12 * net.param_count() + 64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&net.architecture().fingerprint());
    buf.push(with_optimizer as u8);
    let put = |buf: &mut Vec<u8>, t: &Tensor<f32>| {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in &params {
        put(&mut buf, &p.value);
    }
    buf.extend_from_slice(&meta.epoch.to_le_bytes());
    buf.extend_from_slice(&meta.seed.to_le_bytes());
    if with_optimizer {
        let step = params.first().map_or(0, |p| p.step_count);
        buf.extend_from_slice(&step.to_le_bytes());
        for p in &params {
            put(&mut buf, &p.adam_m);
        }
        for p in &params {
            put(&mut buf, &p.adam_v);
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

pub fn save_checkpoint(
    net: &FeatureExtractor<f32>,
    meta: TrainingMeta,
    with_optimizer: bool,
    path: &Path,
) -> Result<()> {
    fs::write(path, encode_checkpoint(net, meta, with_optimizer)).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint of the standard architecture.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    load_checkpoint_with(path, Architecture::standard())
}

pub fn load_checkpoint_with(path: &Path, arch: Architecture) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_checkpoint(&bytes, arch)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> &[u8] {
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take(8).try_into().unwrap())
    }

    fn floats(&mut self, n: usize) -> Vec<f32> {
        self.take(4 * n)
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }
}

pub fn decode_checkpoint(bytes: &[u8], arch: Architecture) -> Result<Checkpoint, CheckpointError> {
    let truncated = |expected| CheckpointError::Truncated {
        expected,
        found: bytes.len(),
    };
    if bytes.len() < MAGIC.len() {
        return Err(truncated(HEADER_LEN));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(HEADER_LEN));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let version = r.u32();
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    if r.take(32) != arch.fingerprint() {
        return Err(CheckpointError::FingerprintMismatch);
    }
    let with_optimizer = match r.take(1)[0] {
        0 => false,
        1 => true,
        f => return Err(CheckpointError::Corrupt(format!("optimizer flag {f}"))),
    };

    let n = arch.param_count();
    let mut expected = HEADER_LEN + 4 * n + 4 + 8 + DIGEST_LEN;
    if with_optimizer {
        expected += 8 + 8 * n;
    }
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    if bytes.len() > expected {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - expected
        )));
    }
    let body = &bytes[..expected - DIGEST_LEN];
    if Sha256::digest(body).as_slice() != &bytes[expected - DIGEST_LEN..] {
        return Err(CheckpointError::Corrupt("digest mismatch".into()));
    }

    let shapes: Vec<Vec<usize>> = arch
        .conv_channels()
        .into_iter()
        .flat_map(|(cin, cout)| [vec![3, 3, cin, cout], vec![cout]])
        .collect();
    let read_set = |r: &mut Reader| -> Result<Vec<Tensor<f32>>, CheckpointError> {
        shapes
            .iter()
            .map(|s| {
                let len = s.iter().product();
                let data = r.floats(len);
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(CheckpointError::Corrupt("non-finite parameter".into()));
                }
                Tensor::new(s.clone(), data).map_err(|e| CheckpointError::Corrupt(e.to_string()))
            })
            .collect()
    };
    let values = read_set(&mut r)?;
    let meta = TrainingMeta {
        epoch: r.u32(),
        seed: r.u64(),
    };
    let mut net = FeatureExtractor::from_parameters(arch, values)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    if with_optimizer {
        let step = r.u64();
        let ms = read_set(&mut r)?;
        let vs = read_set(&mut r)?;
        for ((p, m), v) in net.params_mut().into_iter().zip(ms).zip(vs) {
            p.adam_m = m;
            p.adam_v = v;
            p.step_count = step;
        }
    }
    Ok(Checkpoint {
        net,
        meta,
        has_optimizer_state: with_optimizer,
    })
}
