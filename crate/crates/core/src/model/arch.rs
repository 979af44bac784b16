use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Layer specification of the feature extractor.
///
/// The stem is `stem_convs` 3x3 valid convolutions with ReLU followed by a
/// 2x2/2 max pool; each residual block adds two 3x3 valid convolutions
/// (ReLU after each) to a 2-pixel crop of its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub in_channels: usize,
    pub filters: usize,
    pub stem_convs: usize,
    pub blocks: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self::standard()
    }
}

impl Architecture {
    /// 1 input channel, 16 filters, 3 stem convolutions, 7 residual blocks.
    pub const fn standard() -> Self {
        Self {
            in_channels: 1,
            filters: 16,
            stem_convs: 3,
            blocks: 7,
        }
    }

    /// The standard stem with fewer residual blocks.
    pub const fn with_blocks(blocks: usize) -> Self {
        Self {
            blocks,
            ..Self::standard()
        }
    }

    pub fn conv_layers(&self) -> usize {
        self.stem_convs + 2 * self.blocks
    }

    /// `(fan_in channels, out channels)` of every convolution in
    /// declaration order.
    pub fn conv_channels(&self) -> Vec<(usize, usize)> {
        (0..self.conv_layers())
            .map(|i| {
                let cin = if i == 0 {
                    self.in_channels
                } else {
                    self.filters
                };
                (cin, self.filters)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.conv_channels()
            .iter()
            .map(|&(cin, cout)| 9 * cin * cout + cout)
            .sum()
    }

    /// Spatial side of the embedding of an input of side `input_side`.
    pub fn output_side(&self, input_side: usize) -> Result<usize> {
        let too_small = || {
            Error::invalid(format!(
                "input side {input_side} is below the minimum {} for this network",
                self.patch_side()
            ))
        };
        let mut s = input_side;
        for _ in 0..self.stem_convs {
            s = s.checked_sub(2).filter(|&v| v >= 1).ok_or_else(too_small)?;
        }
        if s < 2 {
            return Err(too_small());
        }
        s /= 2;
        for _ in 0..self.blocks {
            s = s.checked_sub(4).filter(|&v| v >= 1).ok_or_else(too_small)?;
        }
        Ok(s)
    }

    /// Smallest input side whose embedding is 1x1; the training patch size.
    pub fn patch_side(&self) -> usize {
        2 * (1 + 4 * self.blocks) + 2 * self.stem_convs
    }

    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        for (i, (cin, cout)) in self.conv_channels().into_iter().enumerate() {
            if i == self.stem_convs {
                parts.push("maxpool2x2/2".to_string());
            }
            if i >= self.stem_convs && (i - self.stem_convs).is_multiple_of(2) {
                parts.push("block{".to_string());
            }
            parts.push(format!("conv3x3[{cin}->{cout}]valid+relu"));
            if i >= self.stem_convs && (i - self.stem_convs) % 2 == 1 {
                parts.push("}+crop2".to_string());
            }
        }
        if self.blocks == 0 {
            parts.push("maxpool2x2/2".to_string());
        }
        parts.join(";")
    }

    /// SHA-256 of [`Architecture::describe`].
    pub fn fingerprint(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.describe().as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }
}

/// Embedding side of the standard network: `((side - 6) div 2) - 28`.
pub fn output_side(input_side: usize) -> Result<usize> {
    Architecture::standard().output_side(input_side)
}
