use super::arch::Architecture;
use super::net::{FeatureExtractor, Gradients};
use crate::error::{Error, Result};
use crate::nn::gradcheck::Differentiable;
use crate::nn::ops;
use crate::nn::{Scalar, Tensor};

/// Target of the softmax head: all mass on the `d2` (anchor-negative) slot.
pub const TARGET: [f64; 2] = [1.0, 0.0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletOutput<T = f32> {
    /// Anchor-positive distance.
    pub d1: T,
    /// Anchor-negative distance.
    pub d2: T,
    /// `softmax([d2, d1])`.
    pub probs: [T; 2],
    pub loss: T,
}

fn check_patches<T: Scalar>(net: &FeatureExtractor<T>, patches: [&Tensor<T>; 3]) -> Result<()> {
    let side = net.architecture().patch_side();
    for p in patches {
        if p.shape() != [side, side, net.architecture().in_channels] {
            return Err(Error::invalid(format!(
                "triplet patches must be {side}x{side}x1, got {:?}",
                p.shape()
            )));
        }
    }
    Ok(())
}

fn head<T: Scalar>(d1: T, d2: T) -> TripletOutput<T> {
    let probs = ops::softmax2([d2, d1]);
    let target = TARGET.map(T::from_f64_lossy);
    TripletOutput {
        d1,
        d2,
        probs,
        loss: ops::mae_loss(probs, target),
    }
}

/// Shared-weight forward pass over `(anchor, positive, negative)`.
pub fn triplet_forward<T: Scalar>(
    net: &FeatureExtractor<T>,
    anchor: &Tensor<T>,
    positive: &Tensor<T>,
    negative: &Tensor<T>,
) -> Result<TripletOutput<T>> {
    check_patches(net, [anchor, positive, negative])?;
    let ea = net.embed(anchor)?;
    let ep = net.embed(positive)?;
    let en = net.embed(negative)?;
    let d1 = ops::euclidean_distance(&ea, &ep)?;
    let d2 = ops::euclidean_distance(&ea, &en)?;
    Ok(head(d1, d2))
}

/// Forward pass plus the loss gradient w.r.t. every parameter, summed
/// over the three weight-sharing branches.
pub fn triplet_loss_and_grad<T: Scalar>(
    net: &FeatureExtractor<T>,
    anchor: &Tensor<T>,
    positive: &Tensor<T>,
    negative: &Tensor<T>,
) -> Result<(TripletOutput<T>, Gradients<T>)> {
    check_patches(net, [anchor, positive, negative])?;
    let ta = net.forward_traced(anchor)?;
    let tp = net.forward_traced(positive)?;
    let tn = net.forward_traced(negative)?;
    let (ea, ep, en) = (ta.output(), tp.output(), tn.output());
    let d1 = ops::euclidean_distance(ea, ep)?;
    let d2 = ops::euclidean_distance(ea, en)?;
    let out = head(d1, d2);

    let target = TARGET.map(T::from_f64_lossy);
    let g_probs = ops::mae_loss_backward(out.probs, target);
    let [g_d2, g_d1] = ops::softmax2_backward(out.probs, g_probs);

    let (mut g_a, g_p) = ops::euclidean_distance_backward(ea, ep, d1, g_d1)?;
    let (g_a2, g_n) = ops::euclidean_distance_backward(ea, en, d2, g_d2)?;
    g_a.accumulate(&g_a2)?;

    let mut grads = net.backward(&ta, &g_a)?;
    grads.accumulate(&net.backward(&tp, &g_p)?)?;
    grads.accumulate(&net.backward(&tn, &g_n)?)?;
    Ok((out, grads))
}

/// Triplet loss as a function of the network parameters, for gradient
/// checks. Inputs are the parameter values in declaration order.
pub struct TripletLossProbe {
    pub arch: Architecture,
    pub anchor: Tensor<f64>,
    pub positive: Tensor<f64>,
    pub negative: Tensor<f64>,
}

impl TripletLossProbe {
    fn net(&self, inputs: &[Tensor<f64>]) -> FeatureExtractor<f64> {
        FeatureExtractor::from_parameters(self.arch, inputs.to_vec())
            .expect("probe parameter shapes")
    }
}

impl Differentiable for TripletLossProbe {
    fn name(&self) -> String {
        format!("triplet_loss[{} blocks]", self.arch.blocks)
    }

    fn value(&self, inputs: &[Tensor<f64>]) -> f64 {
        triplet_forward(
            &self.net(inputs),
            &self.anchor,
            &self.positive,
            &self.negative,
        )
        .expect("probe patches")
        .loss
    }

    fn gradient(&self, inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
        let (_, grads) = triplet_loss_and_grad(
            &self.net(inputs),
            &self.anchor,
            &self.positive,
            &self.negative,
        )
        .expect("probe patches");
        grads.0
    }

    fn piece(&self, inputs: &[Tensor<f64>]) -> Option<Vec<u32>> {
        let net = self.net(inputs);
        let mut pattern = Vec::new();
        for x in [&self.anchor, &self.positive, &self.negative] {
            let trace = net.forward_traced(x).expect("probe patches");
            pattern.extend(trace.activation_pattern());
        }
        Some(pattern)
    }
}
