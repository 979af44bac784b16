//! Central finite-difference verification of analytic gradients.
//!
//! Checks run in `f64`: a probe reduces an op to a scalar (usually by a
//! fixed random projection of its output) and the harness compares the
//! analytic gradient of that scalar against `(f(x+h) - f(x-h)) / 2h`.

use super::ops;
use super::tensor::Tensor;

/// Perturbation used for the central differences.
pub const FD_STEP: f64 = 1e-4;

/// Denominator floor of the relative error.
const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Number of input coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because the two perturbed points lie on
    /// different smooth pieces of the function.
    pub excluded: usize,
}

/// A scalar-valued function of several tensors with an analytic gradient.
pub trait Differentiable {
    fn name(&self) -> String;

    fn value(&self, inputs: &[Tensor<f64>]) -> f64;

    /// One gradient tensor per input, same shapes.
    fn gradient(&self, inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>>;

    /// `false` when `inputs` sit within the finite-difference step of a
    /// point where the function is not differentiable.
    fn smooth_at(&self, _inputs: &[Tensor<f64>], _step: f64) -> bool {
        true
    }

    /// For piecewise-smooth functions, an identifier of the piece that
    /// contains `inputs` (e.g. ReLU and max-pool selection patterns).
    /// Central differences whose endpoints land on different pieces are
    /// skipped.
    fn piece(&self, _inputs: &[Tensor<f64>]) -> Option<Vec<u32>> {
        None
    }
}

/// Compares every input coordinate. Returns `None` when the probe point is
/// excluded because the op is non-smooth there.
pub fn finite_difference_check(
    op: &dyn Differentiable,
    probe: &[Tensor<f64>],
    tolerance: f64,
) -> Option<GradCheckReport> {
    let coords: Vec<(usize, usize)> = probe
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    finite_difference_check_at(op, probe, tolerance, &coords)
}

/// Like [`finite_difference_check`] but only at the listed
/// `(input index, element index)` coordinates.
pub fn finite_difference_check_at(
    op: &dyn Differentiable,
    probe: &[Tensor<f64>],
    tolerance: f64,
    coords: &[(usize, usize)],
) -> Option<GradCheckReport> {
    if !op.smooth_at(probe, FD_STEP) {
        return None;
    }
    let analytic = op.gradient(probe);
    let mut inputs = probe.to_vec();
    let mut max_rel = 0.0f64;
    let mut excluded = 0;
    for &(i, j) in coords {
        let orig = inputs[i].data()[j];
        inputs[i].data_mut()[j] = orig + FD_STEP;
        let plus = op.value(&inputs);
        let plus_piece = op.piece(&inputs);
        inputs[i].data_mut()[j] = orig - FD_STEP;
        let minus = op.value(&inputs);
        let minus_piece = op.piece(&inputs);
        inputs[i].data_mut()[j] = orig;
        if plus_piece != minus_piece {
            excluded += 1;
            continue;
        }

        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[i].data()[j];
        let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
        let rel = (a - numeric).abs() / denom;
        if rel.is_nan() || rel > max_rel {
            max_rel = if rel.is_nan() { f64::INFINITY } else { rel };
        }
    }
    Some(GradCheckReport {
        op_name: op.name(),
        max_relative_error: max_rel,
        tolerance,
        passed: max_rel <= tolerance,
        checked: coords.len() - excluded,
        excluded,
    })
}

fn project(out: &Tensor<f64>, proj: &Tensor<f64>) -> f64 {
    out.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
}

/// `sum(proj * conv2d_valid(x, k, b))`; inputs `[x, k, b]`.
pub struct ConvProbe {
    pub proj: Tensor<f64>,
}

impl Differentiable for ConvProbe {
    fn name(&self) -> String {
        "conv2d_valid".into()
    }

    fn value(&self, inputs: &[Tensor<f64>]) -> f64 {
        let y = ops::conv2d_valid(&inputs[0], &inputs[1], &inputs[2]).expect("conv probe shapes");
        project(&y, &self.proj)
    }

    fn gradient(&self, inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
        let g = ops::conv2d_valid_backward(&inputs[0], &inputs[1], &self.proj, true)
            .expect("conv probe shapes");
        vec![g.input.expect("requested"), g.kernels, g.bias]
    }
}

/// `sum(proj * relu(x))`; inputs `[x]`.
pub struct ReluProbe {
    pub proj: Tensor<f64>,
}

impl Differentiable for ReluProbe {
    fn name(&self) -> String {
        "relu".into()
    }

    fn value(&self, inputs: &[Tensor<f64>]) -> f64 {
        project(&ops::relu(&inputs[0]), &self.proj)
    }

    fn gradient(&self, inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
        vec![ops::relu_backward(&inputs[0], &self.proj).expect("relu probe shapes")]
    }

    fn smooth_at(&self, inputs: &[Tensor<f64>], step: f64) -> bool {
        inputs[0].data().iter().all(|v| v.abs() > 2.0 * step)
    }
}

/// `sum(proj * maxpool2x2(x))`; inputs `[x]`.
pub struct MaxPoolProbe {
    pub proj: Tensor<f64>,
}

impl Differentiable for MaxPoolProbe {
    fn name(&self) -> String {
        "maxpool2x2".into()
    }

    fn value(&self, inputs: &[Tensor<f64>]) -> f64 {
        project(
            &ops::maxpool2x2(&inputs[0]).expect("pool probe shapes").0,
            &self.proj,
        )
    }

    fn gradient(&self, inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
        let (_, arg) = ops::maxpool2x2(&inputs[0]).expect("pool probe shapes");
        vec![ops::maxpool2x2_backward(inputs[0].shape(), &arg, &self.proj).expect("pool backward")]
    }

    fn smooth_at(&self, inputs: &[Tensor<f64>], step: f64) -> bool {
        // the winner of every window must lead the runner-up by more than 2h
        let Ok((h, w, c)) = inputs[0].dims3() else {
            return false;
        };
        let d = inputs[0].data();
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                for ch in 0..c {
                    let mut v: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(dy, dx)| d[((2 * y + dy) * w + 2 * x + dx) * c + ch])
                        .collect();
                    v.sort_by(|a, b| b.total_cmp(a));
                    if v[0] - v[1] <= 2.0 * step {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// `sum(proj * crop2d(x))`; inputs `[x]`.
pub struct CropProbe {
    pub proj: Tensor<f64>,
}

impl Differentiable for CropProbe {
    fn name(&self) -> String {
        "crop2d".into()
    }

    fn value(&self, inputs: &[Tensor<f64>]) -> f64 {
        project(
            &ops::crop2d(&inputs[0]).expect("crop probe shapes"),
            &self.proj,
        )
    }

    fn gradient(&self, inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
        vec![ops::crop2d_backward(inputs[0].shape(), &self.proj).expect("crop backward")]
    }
}

/// `sum(proj * (x + y))`; inputs `[x, y]`.
pub struct AddProbe {
    pub proj: Tensor<f64>,
}

impl Differentiable for AddProbe {
    fn name(&self) -> String {
        "add".into()
    }

    fn value(&self, inputs: &[Tensor<f64>]) -> f64 {
        project(
            &ops::add(&inputs[0], &inputs[1]).expect("add probe shapes"),
            &self.proj,
        )
    }

    fn gradient(&self, _inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
        vec![self.proj.clone(), self.proj.clone()]
    }
}

/// `euclidean_distance(a, b)`; inputs `[a, b]`.
pub struct DistanceProbe;

impl Differentiable for DistanceProbe {
    fn name(&self) -> String {
        "euclidean_distance".into()
    }

    fn value(&self, inputs: &[Tensor<f64>]) -> f64 {
        ops::euclidean_distance(&inputs[0], &inputs[1]).expect("distance probe shapes")
    }

    fn gradient(&self, inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
        let d = self.value(inputs);
        let (ga, gb) = ops::euclidean_distance_backward(&inputs[0], &inputs[1], d, 1.0)
            .expect("distance probe shapes");
        vec![ga, gb]
    }

    fn smooth_at(&self, inputs: &[Tensor<f64>], step: f64) -> bool {
        ops::squared_distance(inputs[0].data(), inputs[1].data()).sqrt() > 10.0 * step
    }
}

/// `proj . softmax2(v)`; inputs `[v]` with shape `[2]`.
pub struct Softmax2Probe {
    pub proj: [f64; 2],
}

impl Differentiable for Softmax2Probe {
    fn name(&self) -> String {
        "softmax2".into()
    }

    fn value(&self, inputs: &[Tensor<f64>]) -> f64 {
        let v = inputs[0].data();
        let p = ops::softmax2([v[0], v[1]]);
        p[0] * self.proj[0] + p[1] * self.proj[1]
    }

    fn gradient(&self, inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
        let v = inputs[0].data();
        let p = ops::softmax2([v[0], v[1]]);
        let g = ops::softmax2_backward(p, self.proj);
        vec![Tensor::new(vec![2], g.to_vec()).expect("2-vector")]
    }
}

/// `mae_loss(pred, target)`; inputs `[pred]` with shape `[2]`.
pub struct MaeProbe {
    pub target: [f64; 2],
}

impl Differentiable for MaeProbe {
    fn name(&self) -> String {
        "mae_loss".into()
    }

    fn value(&self, inputs: &[Tensor<f64>]) -> f64 {
        let p = inputs[0].data();
        ops::mae_loss([p[0], p[1]], self.target)
    }

    fn gradient(&self, inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
        let p = inputs[0].data();
        let g = ops::mae_loss_backward([p[0], p[1]], self.target);
        vec![Tensor::new(vec![2], g.to_vec()).expect("2-vector")]
    }

    fn smooth_at(&self, inputs: &[Tensor<f64>], step: f64) -> bool {
        inputs[0]
            .data()
            .iter()
            .zip(self.target)
            .all(|(p, t)| (p - t).abs() > 2.0 * step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct BrokenSquare;

    impl Differentiable for BrokenSquare {
        fn name(&self) -> String {
            "broken".into()
        }
        fn value(&self, inputs: &[Tensor<f64>]) -> f64 {
            inputs[0].data().iter().map(|v| v * v).sum()
        }
        fn gradient(&self, inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
            // wrong by a factor of two
            vec![inputs[0].clone()]
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = finite_difference_check(&BrokenSquare, &[x], 1e-4).unwrap();
        assert!(!r.passed);
        assert!((r.max_relative_error - 0.5).abs() < 1e-6);
        assert_eq!(r.passed, r.max_relative_error <= r.tolerance);
    }

    #[test]
    fn coincident_distance_probe_is_excluded() {
        let a = Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(finite_difference_check(&DistanceProbe, &[a.clone(), a], 1e-4).is_none());
    }

    #[test]
    fn relu_away_from_zero_passes() {
        let x = Tensor::new(vec![4], vec![-0.7, 0.3, 1.5, -2.0]).unwrap();
        let proj = Tensor::new(vec![4], vec![0.2, -1.1, 0.4, 0.9]).unwrap();
        let r = finite_difference_check(&ReluProbe { proj }, &[x], 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
    }
}
