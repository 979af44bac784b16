//! Linear soft-margin SVM on two features, solved in the dual by SMO with
//! second-order working-set selection.

use crate::error::{Error, Result};

pub const DEFAULT_C: f64 = 1e8;
pub const KKT_TOLERANCE: f64 = 1e-6;
pub const MAX_ITERATIONS: u64 = 1_000_000;

const TAU: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SvmModel {
    /// Hyperplane in standardized coordinates.
    pub weights: [f64; 2],
    pub bias: f64,
    pub c: f64,
    pub converged: bool,
    pub iterations: u64,
    pub feature_mean: [f64; 2],
    /// Per-feature standard deviation; 1 for constant features.
    pub feature_scale: [f64; 2],
    /// Dual coefficients, one per training point.
    pub alphas: Vec<f64>,
}

impl SvmModel {
    pub fn standardize(&self, x: [f64; 2]) -> [f64; 2] {
        [0, 1].map(|k| (x[k] - self.feature_mean[k]) / self.feature_scale[k])
    }

    /// Weights of the same hyperplane in raw feature coordinates.
    pub fn raw_weights(&self) -> [f64; 2] {
        [0, 1].map(|k| self.weights[k] / self.feature_scale[k])
    }

    pub fn raw_bias(&self) -> f64 {
        self.bias
            - (0..2)
                .map(|k| self.weights[k] * self.feature_mean[k] / self.feature_scale[k])
                .sum::<f64>()
    }
}

/// Signed decision value; positive predicts the +1 (defective) class.
pub fn svm_decision(model: &SvmModel, x: [f64; 2]) -> f64 {
    let z = model.standardize(x);
    model.weights[0] * z[0] + model.weights[1] * z[1] + model.bias
}

pub fn fit_linear_svm(points: &[[f64; 2]], labels: &[i8], c: f64) -> Result<SvmModel> {
    fit_linear_svm_with(points, labels, c, KKT_TOLERANCE, MAX_ITERATIONS)
}

pub fn fit_linear_svm_with(
    points: &[[f64; 2]],
    labels: &[i8],
    c: f64,
    tol: f64,
    max_iter: u64,
) -> Result<SvmModel> {
    if points.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} points but {} labels",
            points.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l != 1 && l != -1) {
        return Err(Error::invalid("labels must be +1 or -1"));
    }
    if !labels.contains(&1) || !labels.contains(&-1) {
        return Err(Error::config("SVM needs at least one point of each label"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite SVM feature"));
    }
    // Also rejects NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(c > 0.0) {
        return Err(Error::invalid("SVM penalty must be positive"));
    }

    let n = points.len() as f64;
    let mut feature_mean = [0.0; 2];
    let mut feature_scale = [1.0; 2];
    for k in 0..2 {
        let mean = points.iter().map(|p| p[k]).sum::<f64>() / n;
        let var = points.iter().map(|p| (p[k] - mean).powi(2)).sum::<f64>() / n;
        feature_mean[k] = mean;
        if var > 0.0 {
            feature_scale[k] = var.sqrt();
        }
    }
    let z: Vec<[f64; 2]> = points
        .iter()
        .map(|p| [0, 1].map(|k| (p[k] - feature_mean[k]) / feature_scale[k]))
        .collect();
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let (alphas, rho, iterations, converged) = smo(&z, &y, c, tol, max_iter);

    let mut weights = [0.0; 2];
    for ((zi, &yi), &ai) in z.iter().zip(&y).zip(&alphas) {
        for k in 0..2 {
            weights[k] += ai * yi * zi[k];
        }
    }
    Ok(SvmModel {
        weights,
        bias: -rho,
        c,
        converged,
        iterations,
        feature_mean,
        feature_scale,
        alphas,
    })
}

/// Minimizes 1/2 a'Qa - e'a subject to y'a = 0 and 0 <= a <= C, with
/// Q_ij = y_i y_j x_i.x_j. Returns (alpha, rho, iterations, converged) where
/// the decision function is sum_i a_i y_i x_i.x - rho.
fn smo(x: &[[f64; 2]], y: &[f64], c: f64, tol: f64, max_iter: u64) -> (Vec<f64>, f64, u64, bool) {
    let n = x.len();
    let k = |i: usize, j: usize| x[i][0] * x[j][0] + x[i][1] * x[j][1];
    let kmat: Vec<f64> = (0..n * n).map(|ij| k(ij / n, ij % n)).collect();
    let kk = |i: usize, j: usize| kmat[i * n + j];

    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let in_up = |a: f64, yt: f64| (yt > 0.0 && a < c) || (yt < 0.0 && a > 0.0);
    let in_low = |a: f64, yt: f64| (yt > 0.0 && a > 0.0) || (yt < 0.0 && a < c);

    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..n {
            if in_up(alpha[t], y[t]) && -y[t] * grad[t] >= gmax {
                gmax = -y[t] * grad[t];
                i_sel = Some(t);
            }
        }
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j_sel = None;
        let mut best = f64::INFINITY;
        if let Some(i) = i_sel {
            for t in 0..n {
                if !in_low(alpha[t], y[t]) {
                    continue;
                }
                gmax2 = gmax2.max(y[t] * grad[t]);
                let grad_diff = gmax + y[t] * grad[t];
                if grad_diff > 0.0 {
                    let quad = kk(i, i) + kk(t, t) - 2.0 * kk(i, t);
                    let obj = -(grad_diff * grad_diff) / if quad > 0.0 { quad } else { TAU };
                    if obj <= best {
                        best = obj;
                        j_sel = Some(t);
                    }
                }
            }
        }
        let (Some(i), Some(j)) = (i_sel, j_sel) else {
            converged = true;
            break;
        };
        if gmax + gmax2 < tol {
            converged = true;
            break;
        }
        iterations += 1;

        let qij = y[i] * y[j] * kk(i, j);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let quad = kk(i, i) + kk(j, j) + 2.0 * qij;
            let quad = if quad > 0.0 { quad } else { TAU };
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = kk(i, i) + kk(j, j) - 2.0 * qij;
            let quad = if quad > 0.0 { quad } else { TAU };
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * kk(i, t) * di + y[j] * kk(j, t) * dj);
        }
    }

    // rho from free vectors, else the midpoint of the feasible interval
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 {
        sum_free / n_free as f64
    } else {
        (ub + lb) / 2.0
    };
    (alpha, rho, iterations, converged)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_boundary_is_at_one() {
        let m = fit_linear_svm(&[[2.0, 0.0], [0.0, 0.0]], &[1, -1], DEFAULT_C).unwrap();
        assert!(m.converged);
        assert!(svm_decision(&m, [1.0, 0.0]).abs() < 1e-9);
        assert!(svm_decision(&m, [1.0, 5.0]).abs() < 1e-9);
        assert!((svm_decision(&m, [2.0, 0.0]) - 1.0).abs() < 1e-9);
        assert!((svm_decision(&m, [0.0, 0.0]) + 1.0).abs() < 1e-9);
        let w = m.raw_weights();
        assert!((w[0] - 1.0).abs() < 1e-9 && w[1].abs() < 1e-12);
        assert!((m.raw_bias() + 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_label_is_a_configuration_error() {
        assert!(matches!(
            fit_linear_svm(&[[1.0, 1.0], [2.0, 2.0]], &[1, 1], DEFAULT_C),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn duplicated_points_give_the_same_hyperplane() {
        let pts = [[0.1, 0.5], [0.2, 0.9], [0.6, 1.4], [0.8, 2.0], [0.3, 1.6]];
        let labels = [-1, -1, 1, 1, 1];
        let a = fit_linear_svm(&pts, &labels, DEFAULT_C).unwrap();
        let pts2: Vec<_> = pts.iter().chain(&pts).copied().collect();
        let labels2: Vec<_> = labels.iter().chain(&labels).copied().collect();
        let b = fit_linear_svm(&pts2, &labels2, DEFAULT_C).unwrap();
        for p in &pts {
            assert!((svm_decision(&a, *p) - svm_decision(&b, *p)).abs() < 1e-6);
        }
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let pts = [[0.0, 0.0], [1.0, 0.2], [0.4, 1.0], [0.9, 0.9]];
        let m = fit_linear_svm_with(&pts, &[-1, 1, 1, -1], DEFAULT_C, 1e-12, 1).unwrap();
        assert!(!m.converged);
        assert_eq!(m.iterations, 1);
    }
}
