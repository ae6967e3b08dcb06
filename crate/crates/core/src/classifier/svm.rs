//! One-vs-all linear SVMs.
//!
//! Each binary problem minimizes `½‖w‖² + C·Σ max(0, 1 − y(w·x + b))` with an
//! unregularized bias. The dual is solved by pairwise coordinate descent
//! (second-order working-set selection) on a precomputed linear Gram matrix,
//! which all classes share.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureMatrix;
use crate::error::{Error, Result};

/// Curvature used when a working pair has a non-positive second derivative.
const TAU: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmTrainOpts {
    pub c: f64,
    /// Cap on solver work, in units of `n` pair updates.
    pub max_epochs: usize,
    /// Stop when the maximal KKT violation falls below this.
    pub tol: f64,
}

impl Default for SvmTrainOpts {
    fn default() -> Self {
        Self {
            c: 100.0,
            max_epochs: 10_000,
            tol: 1e-8,
        }
    }
}

impl SvmTrainOpts {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::InvalidConfig(format!("C = {} must be positive", self.c)));
        }
        if !(self.tol > 0.0) || self.max_epochs == 0 {
            return Err(Error::InvalidConfig(
                "solver tolerance and epoch cap must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Solution of one binary problem.
#[derive(Debug, Clone)]
pub struct BinarySvm {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub alpha: Vec<f64>,
    /// Dual objective `½αᵀQα − Σα` at the end of each epoch; non-increasing.
    pub dual_objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl BinarySvm {
    /// Primal objective on the training data.
    pub fn primal_objective(&self, features: &FeatureMatrix, y: &[f64], c: f64) -> f64 {
        primal_objective(&self.weights, self.bias, features, y, c)
    }
}

pub fn primal_objective(w: &[f64], b: f64, features: &FeatureMatrix, y: &[f64], c: f64) -> f64 {
    let reg = 0.5 * w.iter().map(|v| v * v).sum::<f64>();
    let loss: f64 = features
        .iter_rows()
        .zip(y)
        .map(|(x, &yi)| (1.0 - yi * (dot(w, x) + b)).max(0.0))
        .sum();
    reg + c * loss
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Symmetric `n × n` matrix of row inner products.
pub fn linear_gram(features: &FeatureMatrix) -> Vec<f64> {
    let n = features.rows;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = features.row(i);
            (0..n).map(|j| dot(xi, features.row(j))).collect()
        })
        .collect();
    rows.into_iter().flatten().collect()
}

/// Hinge loss `Σ max(0, 1 − y(f + b))` as a function of the bias.
fn hinge_at(margins: &[f64], y: &[f64], b: f64) -> f64 {
    margins
        .iter()
        .zip(y)
        .map(|(&f, &yi)| (1.0 - yi * (f + b)).max(0.0))
        .sum()
}

/// Bias minimizing the hinge loss for fixed `w`; `hint` wins ties.
fn best_bias(margins: &[f64], y: &[f64], hint: f64) -> f64 {
    let mut best = hint;
    let mut best_loss = hinge_at(margins, y, hint);
    for (&f, &yi) in margins.iter().zip(y) {
        let b = yi - f;
        let loss = hinge_at(margins, y, b);
        if loss < best_loss {
            best = b;
            best_loss = loss;
        }
    }
    best
}

/// Solves one binary problem with labels `y ∈ {−1, +1}`.
pub fn train_binary(
    features: &FeatureMatrix,
    gram: &[f64],
    y: &[f64],
    opts: &SvmTrainOpts,
) -> Result<BinarySvm> {
    opts.validate()?;
    let n = features.rows;
    if y.len() != n || gram.len() != n * n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: y.len(),
        });
    }
    let c = opts.c;
    let has_pos = y.iter().any(|&v| v > 0.0);
    let has_neg = y.iter().any(|&v| v < 0.0);
    if !(has_pos && has_neg) {
        // One-sided problem: w = 0 and any bias on the correct side of ±1.
        let bias = if has_pos { 1.0 } else { -1.0 };
        return Ok(BinarySvm {
            weights: vec![0.0; features.cols],
            bias,
            alpha: vec![0.0; n],
            dual_objective: vec![0.0],
            iterations: 0,
            converged: true,
        });
    }

    let k = |i: usize, j: usize| gram[i * n + j];
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let dual = |alpha: &[f64], grad: &[f64]| -> f64 {
        0.5 * alpha
            .iter()
            .zip(grad)
            .map(|(a, g)| a * (g - 1.0))
            .sum::<f64>()
    };
    let mut trace = vec![0.0];
    let max_iter = opts.max_epochs.saturating_mul(n);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iter {
        // i: maximal violator in the "up" set.
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..n {
            let up = if y[t] > 0.0 { alpha[t] < c } else { alpha[t] > 0.0 };
            if up && -y[t] * grad[t] >= gmax {
                gmax = -y[t] * grad[t];
                i_sel = Some(t);
            }
        }
        let Some(i) = i_sel else {
            converged = true;
            break;
        };
        // j: largest guaranteed decrease among the "low" set.
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j_sel = None;
        let mut best_obj = f64::INFINITY;
        for t in 0..n {
            let low = if y[t] > 0.0 { alpha[t] > 0.0 } else { alpha[t] < c };
            if !low {
                continue;
            }
            let v = y[t] * grad[t];
            gmax2 = gmax2.max(v);
            let diff = gmax + v;
            if diff > 0.0 {
                let quad = k(i, i) + k(t, t) - 2.0 * k(i, t);
                let obj = -(diff * diff) / if quad > 0.0 { quad } else { TAU };
                if obj <= best_obj {
                    best_obj = obj;
                    j_sel = Some(t);
                }
            }
        }
        if gmax + gmax2 < opts.tol {
            converged = true;
            break;
        }
        let Some(j) = j_sel else {
            converged = true;
            break;
        };

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let qij = y[i] * y[j] * k(i, j);
        if y[i] != y[j] {
            let quad = (k(i, i) + k(j, j) + 2.0 * qij).max(TAU);
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
            let quad = (k(i, i) + k(j, j) - 2.0 * qij).max(TAU);
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
            grad[t] += y[t] * (y[i] * k(i, t) * di + y[j] * k(j, t) * dj);
        }
        iterations += 1;
        if iterations % n == 0 {
            trace.push(dual(&alpha, &grad));
        }
    }
    trace.push(dual(&alpha, &grad));

    // Bias from the free support vectors, refined by exact line search.
    let (mut sum, mut free) = (0.0, 0usize);
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] > 0.0 && alpha[t] < c {
            sum += yg;
            free += 1;
        } else {
            let at_upper = alpha[t] >= c;
            if (at_upper && y[t] < 0.0) || (!at_upper && y[t] > 0.0) {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        }
    }
    let rho = if free > 0 {
        sum / free as f64
    } else {
        0.5 * (ub + lb)
    };
    let mut weights = vec![0.0; features.cols];
    for (t, &a) in alpha.iter().enumerate() {
        if a != 0.0 {
            let s = a * y[t];
            for (w, &x) in weights.iter_mut().zip(features.row(t)) {
                *w += s * x;
            }
        }
    }
    let margins: Vec<f64> = features.iter_rows().map(|x| dot(&weights, x)).collect();
    let hint = if rho.is_finite() { -rho } else { 0.0 };
    let bias = best_bias(&margins, y, hint);
    if weights.iter().any(|v| !v.is_finite()) || !bias.is_finite() {
        return Err(Error::Numeric("SVM solution is not finite".into()));
    }
    Ok(BinarySvm {
        weights,
        bias,
        alpha,
        dual_objective: trace,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearOvaModel {
    pub class_labels: Vec<String>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

/// Trains one binary classifier per class. `labels[i]` indexes `class_labels`.
/// A class without training examples gets a zero classifier with bias −1.
pub fn svm_train_ova(
    features: &FeatureMatrix,
    labels: &[usize],
    class_labels: &[String],
    opts: &SvmTrainOpts,
) -> Result<LinearOvaModel> {
    opts.validate()?;
    if labels.len() != features.rows {
        return Err(Error::DimensionMismatch {
            expected: features.rows,
            actual: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_labels.len()) {
        return Err(Error::InvalidConfig(format!("label index {bad} out of range")));
    }
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::InsufficientData(
            "one-vs-all training needs at least two distinct labels".into(),
        ));
    }
    if features.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training features".into()));
    }
    let gram = linear_gram(features);
    let solved: Vec<BinarySvm> = (0..class_labels.len())
        .into_par_iter()
        .map(|c| {
            let y: Vec<f64> = labels
                .iter()
                .map(|&l| if l == c { 1.0 } else { -1.0 })
                .collect();
            train_binary(features, &gram, &y, opts)
        })
        .collect::<Result<_>>()?;
    let mut weights = Vec::with_capacity(solved.len());
    let mut biases = Vec::with_capacity(solved.len());
    for s in solved {
        weights.push(s.weights);
        biases.push(s.bias);
    }
    Ok(LinearOvaModel {
        class_labels: class_labels.to_vec(),
        weights,
        biases,
    })
}

impl LinearOvaModel {
    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    /// `w_c · x + b_c` for every class.
    pub fn predict_scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| dot(w, x) + b)
            .collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.predict_scores(x)?))
    }
}

/// Index of the largest score; ties go to the earliest class.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}
