//! Independent reference implementations and random instance builders shared
//! by the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stfv::data::{LocalDescriptor, VideoDescriptorSet, VideoHeader};
use stfv::gmm::GmmModel;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller, kept local so the oracles share no sampling code with the library.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// A mixture with weights bounded away from zero and variances in [0.3, 2].
pub fn random_gmm(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> GmmModel {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    GmmModel {
        k,
        dim,
        weights: raw.iter().map(|w| w / total).collect(),
        means: (0..k * dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
        variances: (0..k * dim).map(|_| rng.random_range(0.3..2.0)).collect(),
    }
}

/// Descriptors scattered uniformly over the video volume.
pub fn random_video(rng: &mut ChaCha8Rng, m: usize, dim: usize) -> VideoDescriptorSet {
    let header = VideoHeader::new(64, 48, 30, dim as u32).unwrap();
    let descriptors = (0..m)
        .map(|_| LocalDescriptor {
            x: rng.random_range(0.0..64.0),
            y: rng.random_range(0.0..48.0),
            t: rng.random_range(0.0..=29.0),
            phi: (0..dim).map(|_| (2.0 * normal(rng)) as f32).collect(),
        })
        .collect();
    VideoDescriptorSet::new(header, descriptors).unwrap()
}

/// Average Fisher vector of `phis`, straight from the textbook formula with
/// explicit Gaussian densities. Layout per component: dim mean entries, then
/// dim variance entries.
pub fn fisher_oracle(model: &GmmModel, phis: &[Vec<f64>]) -> Vec<f64> {
    let (k, dim) = (model.k, model.dim);
    let mut out = vec![0.0; 2 * k * dim];
    for phi in phis {
        let dens: Vec<f64> = (0..k)
            .map(|c| {
                let mut p = model.weights[c];
                for d in 0..dim {
                    let var = model.variances[c * dim + d];
                    let diff = phi[d] - model.means[c * dim + d];
                    p *= (-0.5 * diff * diff / var).exp() / (std::f64::consts::TAU * var).sqrt();
                }
                p
            })
            .collect();
        let z: f64 = dens.iter().sum();
        for c in 0..k {
            let g = dens[c] / z;
            let w = model.weights[c];
            for d in 0..dim {
                let s = model.variances[c * dim + d].sqrt();
                let u = (phi[d] - model.means[c * dim + d]) / s;
                out[c * 2 * dim + d] += g * u / w.sqrt();
                out[c * 2 * dim + dim + d] += g * (u * u - 1.0) / (2.0 * w).sqrt();
            }
        }
    }
    let m = phis.len() as f64;
    out.iter_mut().for_each(|v| *v /= m);
    out
}

pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Hinge-loss SVM primal `0.5|w|^2 + C sum max(0, 1 - y(w.x + b))`.
pub fn hinge_primal(w: &[f64], b: f64, xs: &[Vec<f64>], y: &[f64], c: f64) -> f64 {
    let reg: f64 = 0.5 * w.iter().map(|v| v * v).sum::<f64>();
    let loss: f64 = xs
        .iter()
        .zip(y)
        .map(|(x, &yi)| {
            let f: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b;
            (1.0 - yi * f).max(0.0)
        })
        .sum();
    reg + c * loss
}

fn softplus(a: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

fn logistic(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Solves `A x = r` for a small dense symmetric positive definite `A`.
fn cholesky_solve(a: &[f64], r: &[f64], n: usize) -> Vec<f64> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            if i == j {
                l[i * n + i] = s.max(1e-300).sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut z = vec![0.0; n];
    for i in 0..n {
        let mut s = r[i];
        for p in 0..i {
            s -= l[i * n + p] * z[p];
        }
        z[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = z[i];
        for p in i + 1..n {
            s -= l[p * n + i] * x[p];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// Reference primal solver: the hinge is replaced by `tau * softplus(z / tau)`
/// and minimized over `(w, b)` with damped Newton steps while `tau` shrinks to
/// 1e-9. Returns `(w, b)`.
pub fn reference_svm(xs: &[Vec<f64>], y: &[f64], c: f64) -> (Vec<f64>, f64) {
    let d = xs[0].len();
    let n = d + 1;
    let mut theta = vec![0.0; n];
    let smooth = |theta: &[f64], tau: f64| -> f64 {
        let reg: f64 = 0.5 * theta[..d].iter().map(|v| v * v).sum::<f64>();
        let loss: f64 = xs
            .iter()
            .zip(y)
            .map(|(x, &yi)| {
                let f: f64 = x.iter().zip(&theta[..d]).map(|(a, b)| a * b).sum::<f64>() + theta[d];
                tau * softplus((1.0 - yi * f) / tau)
            })
            .sum();
        reg + c * loss
    };
    let mut tau = 1.0;
    while tau >= 1e-9 {
        for _ in 0..200 {
            let mut grad = vec![0.0; n];
            let mut hess = vec![0.0; n * n];
            grad[..d].copy_from_slice(&theta[..d]);
            for i in 0..d {
                hess[i * n + i] = 1.0;
            }
            hess[d * n + d] = 1e-12;
            for (x, &yi) in xs.iter().zip(y) {
                let f: f64 = x.iter().zip(&theta[..d]).map(|(a, b)| a * b).sum::<f64>() + theta[d];
                let a = (1.0 - yi * f) / tau;
                let s1 = logistic(a);
                let s2 = s1 * (1.0 - s1) / tau;
                let xe: Vec<f64> = x.iter().copied().chain(std::iter::once(1.0)).collect();
                for i in 0..n {
                    grad[i] -= c * s1 * yi * xe[i];
                    for j in 0..n {
                        hess[i * n + j] += c * s2 * xe[i] * xe[j];
                    }
                }
            }
            let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if gnorm < 1e-12 {
                break;
            }
            let step = cholesky_solve(&hess, &grad, n);
            let f0 = smooth(&theta, tau);
            let slope: f64 = -grad.iter().zip(&step).map(|(g, s)| g * s).sum::<f64>();
            let mut t = 1.0;
            let mut improved = false;
            while t > 1e-16 {
                let cand: Vec<f64> = theta.iter().zip(&step).map(|(v, s)| v - t * s).collect();
                if smooth(&cand, tau) <= f0 + 1e-4 * t * slope {
                    theta = cand;
                    improved = true;
                    break;
                }
                t *= 0.5;
            }
            if !improved {
                break;
            }
        }
        tau *= 0.1;
    }
    let b = theta[d];
    theta.truncate(d);
    (theta, b)
}

/// Two labelled Gaussian clouds in `dim` dimensions; `gap` sets how far apart
/// their centres sit.
pub fn random_binary_problem(rng: &mut ChaCha8Rng, n: usize, dim: usize, gap: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let dir: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let yi = if i % 2 == 0 { 1.0 } else { -1.0 };
        xs.push(
            dir.iter()
                .map(|v| yi * gap * v / norm / 2.0 + normal(rng) * 0.5)
                .collect(),
        );
        ys.push(yi);
    }
    (xs, ys)
}
