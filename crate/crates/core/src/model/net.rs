use rand_distr::{Distribution, Normal};

use super::arch::Architecture;
use crate::data::rng::RngStream;
use crate::error::{Error, Result};
use crate::nn::ops;
use crate::nn::{Parameter, Scalar, Tensor};

/// One 3x3 valid convolution followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T = f32> {
    pub kernels: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Scalar> ConvLayer<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = ops::conv2d_valid(x, &self.kernels.value, &self.bias.value)?;
        ops::relu_inplace(&mut y);
        Ok(y)
    }

    /// Gradients of the layer given its input, its (post-ReLU) output and
    /// the upstream gradient.
    fn backward(
        &self,
        input: &Tensor<T>,
        output: &Tensor<T>,
        grad_out: &Tensor<T>,
        want_input_grad: bool,
    ) -> Result<ops::Conv2dGrads<T>> {
        let g = ops::relu_backward(output, grad_out)?;
        ops::conv2d_valid_backward(input, &self.kernels.value, &g, want_input_grad)
    }
}

/// Two conv+ReLU layers whose output is added to a 2-pixel crop of the
/// block input. No activation follows the addition.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock<T = f32> {
    pub conv_a: ConvLayer<T>,
    pub conv_b: ConvLayer<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.conv_a.forward(x)?;
        let h = self.conv_b.forward(&h)?;
        ops::add(&h, &ops::crop2d(x)?)
    }
}

/// Intermediate activations of one forward pass, kept for backward.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T = f32> {
    input: Tensor<T>,
    stem_out: Vec<Tensor<T>>,
    pool_argmax: Vec<usize>,
    blocks: Vec<BlockTrace<T>>,
    output: Tensor<T>,
}

#[derive(Clone, Debug)]
struct BlockTrace<T> {
    input: Tensor<T>,
    h1: Tensor<T>,
    h2: Tensor<T>,
}

impl<T> ForwardTrace<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }
}

impl<T: Scalar> ForwardTrace<T> {
    /// Which ReLUs are active and which element each max-pool window
    /// selected. The network is smooth in its parameters wherever this
    /// pattern stays fixed.
    pub fn activation_pattern(&self) -> Vec<u32> {
        let relu_outputs = self
            .stem_out
            .iter()
            .chain(self.blocks.iter().flat_map(|b| [&b.h1, &b.h2]));
        relu_outputs
            .flat_map(|t| t.data().iter().map(|&v| (v > T::zero()) as u32))
            .chain(self.pool_argmax.iter().map(|&i| i as u32))
            .collect()
    }
}

/// Per-parameter gradients in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T = f32>(pub Vec<Tensor<T>>);

impl<T: Scalar> Gradients<T> {
    pub fn zeros_for(net: &FeatureExtractor<T>) -> Self {
        Self(
            net.params()
                .iter()
                .map(|p| Tensor::zeros_like(&p.value))
                .collect(),
        )
    }

    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.accumulate(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        self.0.iter_mut().for_each(|g| g.scale(factor));
    }
}

/// Fully convolutional residual feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<T = f32> {
    arch: Architecture,
    stem: Vec<ConvLayer<T>>,
    blocks: Vec<ResidualBlock<T>>,
}

/// The standard network with He-normal kernels and zero biases.
pub fn build_feature_extractor(seed: u64) -> FeatureExtractor<f32> {
    FeatureExtractor::new(Architecture::standard(), seed)
}

impl<T: Scalar> FeatureExtractor<T> {
    /// Kernels drawn from N(0, 2 / fan_in) in declaration order, biases 0.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut rng = RngStream::new(seed).substream("init");
        let tensors = arch
            .conv_channels()
            .into_iter()
            .flat_map(|(cin, cout)| {
                let std = (2.0 / (9 * cin) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let k = Tensor::from_fn(&[3, 3, cin, cout], |_| {
                    T::from_f64_lossy(normal.sample(&mut rng) as f32 as f64)
                });
                [k, Tensor::zeros(&[cout])]
            })
            .collect();
        Self::from_parameters(arch, tensors).expect("shapes derived from the architecture")
    }

    /// Rebuilds a network from parameter values in declaration order.
    pub fn from_parameters(arch: Architecture, values: Vec<Tensor<T>>) -> Result<Self> {
        let channels = arch.conv_channels();
        if values.len() != 2 * channels.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                2 * channels.len(),
                values.len()
            )));
        }
        let mut layers = Vec::with_capacity(channels.len());
        let mut it = values.into_iter();
        for (cin, cout) in channels {
            let (k, b) = (it.next().unwrap(), it.next().unwrap());
            if k.shape() != [3, 3, cin, cout] || b.shape() != [cout] {
                return Err(Error::invalid(format!(
                    "parameter shapes {:?}/{:?} do not match a {cin}->{cout} conv",
                    k.shape(),
                    b.shape()
                )));
            }
            layers.push(ConvLayer {
                kernels: Parameter::new(k),
                bias: Parameter::new(b),
            });
        }
        let blocks_flat = layers.split_off(arch.stem_convs);
        let mut blocks = Vec::with_capacity(arch.blocks);
        let mut it = blocks_flat.into_iter();
        while let (Some(conv_a), Some(conv_b)) = (it.next(), it.next()) {
            blocks.push(ResidualBlock { conv_a, conv_b });
        }
        Ok(Self {
            arch,
            stem: layers,
            blocks,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn blocks(&self) -> &[ResidualBlock<T>] {
        &self.blocks
    }

    pub fn stem(&self) -> &[ConvLayer<T>] {
        &self.stem
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        self.layers().flat_map(|l| [&l.kernels, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = Vec::with_capacity(2 * self.arch.conv_layers());
        for l in self.stem.iter_mut() {
            out.push(&mut l.kernels);
            out.push(&mut l.bias);
        }
        for b in self.blocks.iter_mut() {
            for l in [&mut b.conv_a, &mut b.conv_b] {
                out.push(&mut l.kernels);
                out.push(&mut l.bias);
            }
        }
        out
    }

    fn layers(&self) -> impl Iterator<Item = &ConvLayer<T>> {
        self.stem
            .iter()
            .chain(self.blocks.iter().flat_map(|b| [&b.conv_a, &b.conv_b]))
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> FeatureExtractor<U> {
        let cast_layer = |l: &ConvLayer<T>| ConvLayer {
            kernels: l.kernels.cast(),
            bias: l.bias.cast(),
        };
        FeatureExtractor {
            arch: self.arch,
            stem: self.stem.iter().map(cast_layer).collect(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResidualBlock {
                    conv_a: cast_layer(&b.conv_a),
                    conv_b: cast_layer(&b.conv_b),
                })
                .collect(),
        }
    }

    fn check_input(&self, image: &Tensor<T>) -> Result<(usize, usize)> {
        let (h, w, c) = image.dims3()?;
        if c != self.arch.in_channels {
            return Err(Error::invalid(format!(
                "expected {} input channel(s), got {c}",
                self.arch.in_channels
            )));
        }
        Ok((self.arch.output_side(h)?, self.arch.output_side(w)?))
    }

    /// Feature map of an `H x W x 1` image; `output_side(H) x output_side(W) x 16`.
    pub fn embed(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(image)?;
        let mut x = self.stem[0].forward(image)?;
        for layer in &self.stem[1..] {
            x = layer.forward(&x)?;
        }
        let (mut x, _) = ops::maxpool2x2(&x)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        Ok(x)
    }

    /// Forward pass that records the activations backward needs.
    pub fn forward_traced(&self, image: &Tensor<T>) -> Result<ForwardTrace<T>> {
        self.check_input(image)?;
        let mut stem_out: Vec<Tensor<T>> = Vec::with_capacity(self.stem.len());
        for layer in &self.stem {
            let y = layer.forward(stem_out.last().unwrap_or(image))?;
            stem_out.push(y);
        }
        let (mut x, pool_argmax) = ops::maxpool2x2(stem_out.last().expect("non-empty stem"))?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let h1 = block.conv_a.forward(&x)?;
            let h2 = block.conv_b.forward(&h1)?;
            let out = ops::add(&h2, &ops::crop2d(&x)?)?;
            blocks.push(BlockTrace { input: x, h1, h2 });
            x = out;
        }
        Ok(ForwardTrace {
            input: image.clone(),
            stem_out,
            pool_argmax,
            blocks,
            output: x,
        })
    }

    /// Parameter gradients of `sum(grad_out * embed(input))`.
    pub fn backward(&self, trace: &ForwardTrace<T>, grad_out: &Tensor<T>) -> Result<Gradients<T>> {
        if grad_out.shape() != trace.output.shape() {
            return Err(Error::invalid(
                "backward: gradient shape does not match the output",
            ));
        }
        let n_params = 2 * self.arch.conv_layers();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n_params];
        let mut g = grad_out.clone();

        for (bi, (block, bt)) in self.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            let base = 2 * (self.arch.stem_convs + 2 * bi);
            let skip = ops::crop2d_backward(bt.input.shape(), &g)?;
            let gb = block.conv_b.backward(&bt.h1, &bt.h2, &g, true)?;
            grads[base + 2] = Some(gb.kernels);
            grads[base + 3] = Some(gb.bias);
            let ga =
                block
                    .conv_a
                    .backward(&bt.input, &bt.h1, &gb.input.expect("requested"), true)?;
            grads[base] = Some(ga.kernels);
            grads[base + 1] = Some(ga.bias);
            g = ga.input.expect("requested");
            g.accumulate(&skip)?;
        }

        let last = trace.stem_out.last().expect("non-empty stem");
        g = ops::maxpool2x2_backward(last.shape(), &trace.pool_argmax, &g)?;
        for i in (0..self.stem.len()).rev() {
            let input = if i == 0 {
                &trace.input
            } else {
                &trace.stem_out[i - 1]
            };
            let lg = self.stem[i].backward(input, &trace.stem_out[i], &g, i > 0)?;
            grads[2 * i] = Some(lg.kernels);
            grads[2 * i + 1] = Some(lg.bias);
            if let Some(gi) = lg.input {
                g = gi;
            }
        }
        Ok(Gradients(
            grads
                .into_iter()
                .map(|t| t.expect("every layer visited"))
                .collect(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(side: usize, seed: u64) -> Tensor<f32> {
        use rand::Rng;
        let mut rng = RngStream::new(seed).substream("img");
        Tensor::from_fn(&[side, side, 1], |_| rng.random::<f32>())
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_feature_extractor(5);
        let b = build_feature_extractor(5);
        assert_eq!(a, b);
        assert_ne!(a, build_feature_extractor(6));
        assert_eq!(a.param_count(), 37_280);
        assert_eq!(a.stem().len() + 2 * a.blocks().len(), 17);
    }

    #[test]
    fn init_statistics() {
        let net = build_feature_extractor(1);
        let p = net.params();
        assert!(p
            .iter()
            .skip(1)
            .step_by(2)
            .all(|b| b.value.data().iter().all(|&v| v == 0.0)));
        // 16->16 kernels: std sqrt(2/144)
        let k: Vec<f64> = p[2..]
            .iter()
            .step_by(2)
            .flat_map(|t| t.value.data().iter().map(|&v| v as f64))
            .collect();
        let mean = k.iter().sum::<f64>() / k.len() as f64;
        let var = k.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k.len() as f64;
        assert!(mean.abs() < 0.005);
        assert!((var.sqrt() - (2.0f64 / 144.0).sqrt()).abs() < 0.005);
    }

    #[test]
    fn patch_embeds_to_one_cell() {
        let net = build_feature_extractor(0);
        let e = net.embed(&image(64, 1)).unwrap();
        assert_eq!(e.shape(), &[1, 1, 16]);
        let e = net.embed(&image(128, 1)).unwrap();
        assert_eq!(e.shape(), &[33, 33, 16]);
        let e = net.embed(&Tensor::zeros(&[70, 65, 1])).unwrap();
        assert_eq!(e.shape(), &[4, 1, 16]);
        assert!(net.embed(&image(63, 1)).is_err());
        assert!(net.embed(&Tensor::zeros(&[64, 64, 2])).is_err());
    }

    #[test]
    fn traced_forward_matches_embed() {
        let net = build_feature_extractor(3);
        let x = image(72, 2);
        let t = net.forward_traced(&x).unwrap();
        assert_eq!(t.output(), &net.embed(&x).unwrap());
    }

    #[test]
    fn block_output_is_conv_path_plus_crop() {
        let net: FeatureExtractor<f64> = FeatureExtractor::new(Architecture::standard(), 4);
        let x = image(20, 9).cast::<f64>();
        let x = Tensor::from_fn(&[20, 20, 16], |i| x.data()[i % 400] - 0.5);
        let block = &net.blocks()[0];
        let out = block.forward(&x).unwrap();
        assert_eq!(out.shape(), &[16, 16, 16]);
        let conv = block
            .conv_b
            .forward(&block.conv_a.forward(&x).unwrap())
            .unwrap();
        let expected = ops::add(&conv, &ops::crop2d(&x).unwrap()).unwrap();
        assert_eq!(out, expected);
    }

    #[test]
    fn aligned_crops_match_full_embedding_cells() {
        let net = build_feature_extractor(11);
        let img = image(80, 4);
        let full = net.embed(&img).unwrap();
        let (_, fw, c) = full.dims3().unwrap();
        for (cy, cx) in [(0, 0), (1, 3), (4, 2), (8, 8), (5, 0), (2, 7)] {
            let (y0, x0) = (2 * cy, 2 * cx);
            let crop = Tensor::from_fn(&[64, 64, 1], |i| {
                img.data()[(y0 + i / 64) * 80 + x0 + i % 64]
            });
            let e = net.embed(&crop).unwrap();
            let cell = &full.data()[(cy * fw + cx) * c..(cy * fw + cx + 1) * c];
            for (a, b) in e.data().iter().zip(cell) {
                assert!(
                    (a - b).abs() <= 1e-4 * (1.0 + b.abs()),
                    "cell ({cy},{cx}): {a} vs {b}"
                );
            }
        }
    }
}
