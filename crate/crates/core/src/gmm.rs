//! Diagonal-covariance Gaussian mixture: training-point sampling, k-means
//! initialization, EM fitting and posterior evaluation.
//!
//! EM keeps every iterate inside the feasible set `{σ² ≥ variance_floor,
//! w ≥ weight_floor}` and solves each M-step exactly over that set, so the
//! average log-likelihood never decreases. Sufficient statistics are reduced
//! over fixed-size chunks in chunk order, which makes fits bit-identical for
//! any thread count.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::data::{DatasetManifest, Location, VideoDescriptorSet};
use crate::error::{Error, Result};

pub const GMM_MAGIC: &[u8; 4] = b"GMM1";

const CHUNK: usize = 8192;
const LLOYD_ITERATIONS: usize = 10;
/// Lower bound on a data-derived variance floor.
const MIN_VARIANCE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub k: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    /// `k × dim`, row-major.
    pub means: Vec<f64>,
    /// `k × dim` diagonal variances, row-major.
    pub variances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmTrainConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Stop once the relative log-likelihood gain drops below this.
    pub rel_tol: f64,
    pub seed: u64,
    /// `None` derives `1e-4 ×` the mean per-dimension data variance.
    pub variance_floor: Option<f64>,
    pub weight_floor: f64,
    pub sample_count: usize,
}

impl Default for GmmTrainConfig {
    fn default() -> Self {
        Self {
            k: 256,
            max_iter: 100,
            rel_tol: 1e-5,
            seed: 0,
            variance_floor: None,
            weight_floor: 1e-6,
            sample_count: 256_000,
        }
    }
}

impl GmmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.k == 0 || self.max_iter == 0 || self.sample_count == 0 {
            return bad("k, max_iter and sample_count must be positive".into());
        }
        if !(self.rel_tol > 0.0 && self.rel_tol < 1.0) {
            return bad(format!("rel_tol {} must lie in (0, 1)", self.rel_tol));
        }
        if !(self.weight_floor > 0.0 && self.weight_floor * self.k as f64 <= 1.0) {
            return bad(format!(
                "weight_floor {} must be positive and at most 1/k",
                self.weight_floor
            ));
        }
        if let Some(f) = self.variance_floor {
            if !(f > 0.0 && f.is_finite()) {
                return bad(format!("variance_floor {f} must be positive"));
            }
        }
        Ok(())
    }
}

/// Result of an EM run.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Average log-likelihood of the sample under each successive iterate.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// A training descriptor together with its normalized location.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledDescriptor {
    pub phi: Vec<f64>,
    pub location: Location,
}

/// Indices into a pool of `pool` items: without replacement when the pool is
/// large enough, with replacement otherwise.
pub fn sample_indices(pool: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if pool == 0 {
        return Err(Error::InsufficientData("descriptor pool is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if pool >= count {
        Ok(index::sample(&mut rng, pool, count).into_vec())
    } else {
        Ok((0..count).map(|_| rng.random_range(0..pool)).collect())
    }
}

/// Uniform sample over the concatenated descriptors of `sets`.
pub fn sample_from_sets(
    sets: &[&VideoDescriptorSet],
    count: usize,
    seed: u64,
) -> Result<Vec<SampledDescriptor>> {
    let mut starts = Vec::with_capacity(sets.len());
    let mut total = 0usize;
    for s in sets {
        starts.push(total);
        total += s.len();
    }
    let picks = sample_indices(total, count, seed)?;
    Ok(picks
        .into_iter()
        .map(|i| {
            let v = starts.partition_point(|&s| s <= i) - 1;
            let set = sets[v];
            let d = &set.descriptors[i - starts[v]];
            SampledDescriptor {
                phi: d.phi.iter().map(|&x| x as f64).collect(),
                location: crate::data::normalize_location(&set.header, d),
            }
        })
        .collect())
}

/// Samples raw first-channel descriptors from every manifest entry.
pub fn sample_training_points(
    manifest: &DatasetManifest,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let sets = manifest
        .entries
        .iter()
        .map(|e| crate::data::read_video_file(manifest.resolve(&e.path)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&VideoDescriptorSet> = sets.iter().collect();
    Ok(sample_from_sets(&refs, count, seed)?
        .into_iter()
        .map(|s| s.phi)
        .collect())
}

fn check_points<S: AsRef<[f64]>>(points: &[S]) -> Result<usize> {
    let dim = points
        .first()
        .ok_or_else(|| Error::InsufficientData("no training points".into()))?
        .as_ref()
        .len();
    if dim == 0 {
        return Err(Error::InsufficientData("training points have dimension 0".into()));
    }
    for p in points {
        let p = p.as_ref();
        if p.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: p.len(),
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training point".into()));
        }
    }
    Ok(dim)
}

/// `1e-4 ×` the mean over dimensions of the per-dimension population variance.
pub fn default_variance_floor<S: AsRef<[f64]>>(points: &[S]) -> f64 {
    let n = points.len().max(1) as f64;
    let dim = points.first().map_or(0, |p| p.as_ref().len());
    if dim == 0 {
        return MIN_VARIANCE_FLOOR;
    }
    let mut mean = vec![0.0; dim];
    for p in points {
        for (m, &v) in mean.iter_mut().zip(p.as_ref()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = 0.0;
    for p in points {
        for (m, &v) in mean.iter().zip(p.as_ref()) {
            var += (v - m) * (v - m);
        }
    }
    (1e-4 * var / (n * dim as f64)).max(MIN_VARIANCE_FLOOR)
}

/// Maximizes `Σ n_k ln w_k` over the simplex restricted to `w_k ≥ floor`.
fn floored_weights(counts: &[f64], floor: f64) -> Vec<f64> {
    let k = counts.len();
    let mut pinned = vec![false; k];
    let mut weights = vec![floor; k];
    loop {
        let free_mass = 1.0 - floor * pinned.iter().filter(|&&p| p).count() as f64;
        let free_count: f64 = counts
            .iter()
            .zip(&pinned)
            .filter(|(_, &p)| !p)
            .map(|(&c, _)| c)
            .sum();
        if free_count <= 0.0 {
            let free = pinned.iter().filter(|&&p| !p).count();
            for (w, _) in weights.iter_mut().zip(&pinned).filter(|(_, &p)| !p) {
                *w = free_mass / free as f64;
            }
            return weights;
        }
        let mut changed = false;
        for j in 0..k {
            if pinned[j] {
                continue;
            }
            let w = free_mass * counts[j] / free_count;
            if w < floor {
                pinned[j] = true;
                weights[j] = floor;
                changed = true;
            } else {
                weights[j] = w;
            }
        }
        if !changed {
            return weights;
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[f64], dim: usize) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, center) in centers.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, center);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Initial model from k-means: farthest-point seeding (first center drawn from
/// `seed`) followed by a fixed number of Lloyd iterations.
pub fn kmeans_init<S: AsRef<[f64]> + Sync>(
    points: &[S],
    k: usize,
    seed: u64,
    variance_floor: f64,
    weight_floor: f64,
) -> Result<GmmModel> {
    let dim = check_points(points)?;
    if k == 0 {
        return Err(Error::InvalidConfig("k must be positive".into()));
    }
    let distinct: HashSet<Vec<u64>> = points
        .iter()
        .map(|p| p.as_ref().iter().map(|v| v.to_bits()).collect())
        .collect();
    if distinct.len() < k {
        return Err(Error::InsufficientData(format!(
            "{} distinct points cannot seed {k} clusters",
            distinct.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..points.len());
    let mut centers: Vec<f64> = points[first].as_ref().to_vec();
    let mut min_d: Vec<f64> = points
        .par_iter()
        .map(|p| sq_dist(p.as_ref(), &centers))
        .collect();
    for _ in 1..k {
        let (far, _) = min_d
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bd), (i, &d)| {
                if d > bd {
                    (i, d)
                } else {
                    (bi, bd)
                }
            });
        let c = points[far].as_ref();
        centers.extend_from_slice(c);
        min_d
            .par_iter_mut()
            .zip(points.par_iter())
            .for_each(|(m, p)| *m = m.min(sq_dist(p.as_ref(), c)));
    }

    let mut assign: Vec<usize> = vec![0; points.len()];
    for _ in 0..LLOYD_ITERATIONS {
        assign
            .par_iter_mut()
            .zip(points.par_iter())
            .for_each(|(a, p)| *a = nearest(p.as_ref(), &centers, dim));
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p.as_ref()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..dim {
                    centers[c * dim + d] = sums[c * dim + d] / counts[c] as f64;
                }
            }
        }
    }
    assign
        .par_iter_mut()
        .zip(points.par_iter())
        .for_each(|(a, p)| *a = nearest(p.as_ref(), &centers, dim));

    let mut counts = vec![0usize; k];
    let mut var = vec![0.0; k * dim];
    for (p, &a) in points.iter().zip(&assign) {
        counts[a] += 1;
        for d in 0..dim {
            let diff = p.as_ref()[d] - centers[a * dim + d];
            var[a * dim + d] += diff * diff;
        }
    }
    for c in 0..k {
        for d in 0..dim {
            let v = &mut var[c * dim + d];
            *v = if counts[c] > 0 {
                *v / counts[c] as f64
            } else {
                0.0
            };
            *v = v.max(variance_floor);
        }
    }
    let fractions: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    Ok(GmmModel {
        k,
        dim,
        weights: floored_weights(&fractions, weight_floor),
        means: centers,
        variances: var,
    })
}

/// Per-component constants for evaluating log densities.
pub(crate) struct Evaluator<'a> {
    model: &'a GmmModel,
    log_norm: Vec<f64>,
    inv_var: Vec<f64>,
}

impl<'a> Evaluator<'a> {
    pub(crate) fn new(model: &'a GmmModel) -> Self {
        let dim = model.dim;
        let log_norm = (0..model.k)
            .map(|c| {
                let log_det: f64 = model.variances[c * dim..(c + 1) * dim]
                    .iter()
                    .map(|v| (2.0 * PI * v).ln())
                    .sum();
                model.weights[c].ln() - 0.5 * log_det
            })
            .collect();
        let inv_var = model.variances.iter().map(|v| 1.0 / v).collect();
        Self {
            model,
            log_norm,
            inv_var,
        }
    }

    /// Fills `post` with responsibilities and returns `ln p(phi)`.
    pub(crate) fn posteriors_into(&self, phi: &[f64], post: &mut [f64]) -> f64 {
        let dim = self.model.dim;
        let mut max = f64::NEG_INFINITY;
        for (c, lp) in post.iter_mut().enumerate() {
            let mu = &self.model.means[c * dim..(c + 1) * dim];
            let iv = &self.inv_var[c * dim..(c + 1) * dim];
            let mut maha = 0.0;
            for d in 0..dim {
                let diff = phi[d] - mu[d];
                maha += diff * diff * iv[d];
            }
            *lp = self.log_norm[c] - 0.5 * maha;
            max = max.max(*lp);
        }
        let mut sum = 0.0;
        for lp in post.iter_mut() {
            *lp = (*lp - max).exp();
            sum += *lp;
        }
        for lp in post.iter_mut() {
            *lp /= sum;
        }
        max + sum.ln()
    }
}

struct SuffStats {
    log_likelihood: f64,
    resp: Vec<f64>,
    /// First and second moments about the previous means.
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl SuffStats {
    fn zeros(k: usize, dim: usize) -> Self {
        Self {
            log_likelihood: 0.0,
            resp: vec![0.0; k],
            s1: vec![0.0; k * dim],
            s2: vec![0.0; k * dim],
        }
    }

    fn merge(&mut self, other: &SuffStats) {
        self.log_likelihood += other.log_likelihood;
        for (a, b) in self.resp.iter_mut().zip(&other.resp) {
            *a += b;
        }
        for (a, b) in self.s1.iter_mut().zip(&other.s1) {
            *a += b;
        }
        for (a, b) in self.s2.iter_mut().zip(&other.s2) {
            *a += b;
        }
    }
}

fn e_step<S: AsRef<[f64]> + Sync>(model: &GmmModel, points: &[S]) -> SuffStats {
    let eval = Evaluator::new(model);
    let (k, dim) = (model.k, model.dim);
    let partials: Vec<SuffStats> = points
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut st = SuffStats::zeros(k, dim);
            let mut post = vec![0.0; k];
            for p in chunk {
                let p = p.as_ref();
                st.log_likelihood += eval.posteriors_into(p, &mut post);
                for (c, &g) in post.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    st.resp[c] += g;
                    let mu = &model.means[c * dim..(c + 1) * dim];
                    let s1 = &mut st.s1[c * dim..(c + 1) * dim];
                    let s2 = &mut st.s2[c * dim..(c + 1) * dim];
                    for d in 0..dim {
                        let diff = p[d] - mu[d];
                        s1[d] += g * diff;
                        s2[d] += g * diff * diff;
                    }
                }
            }
            st
        })
        .collect();
    let mut total = SuffStats::zeros(k, dim);
    for part in &partials {
        total.merge(part);
    }
    total
}

fn m_step(model: &GmmModel, st: &SuffStats, variance_floor: f64, weight_floor: f64) -> GmmModel {
    let (k, dim) = (model.k, model.dim);
    let mut means = model.means.clone();
    let mut variances = model.variances.clone();
    for c in 0..k {
        let n = st.resp[c];
        if n <= 0.0 {
            continue;
        }
        for d in 0..dim {
            let i = c * dim + d;
            let shift = st.s1[i] / n;
            means[i] = model.means[i] + shift;
            variances[i] = (st.s2[i] / n - shift * shift).max(variance_floor);
        }
    }
    GmmModel {
        k,
        dim,
        weights: floored_weights(&st.resp, weight_floor),
        means,
        variances,
    }
}

/// Fits a mixture to `points` by EM from a k-means start.
pub fn gmm_fit_em<S: AsRef<[f64]> + Sync>(points: &[S], config: &GmmTrainConfig) -> Result<GmmFit> {
    config.validate()?;
    check_points(points)?;
    let variance_floor = config
        .variance_floor
        .unwrap_or_else(|| default_variance_floor(points));
    let mut model = kmeans_init(points, config.k, config.seed, variance_floor, config.weight_floor)?;
    let n = points.len() as f64;
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let st = e_step(&model, points);
        let ll = st.log_likelihood / n;
        if !ll.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite log-likelihood at EM iteration {iterations}"
            )));
        }
        if let Some(&prev) = trace.last() {
            let gain = (ll - prev) / prev.abs().max(f64::MIN_POSITIVE);
            trace.push(ll);
            if gain < config.rel_tol {
                converged = true;
                break;
            }
        } else {
            trace.push(ll);
        }
        if iterations == config.max_iter {
            break;
        }
        model = m_step(&model, &st, variance_floor, config.weight_floor);
        iterations += 1;
    }
    Ok(GmmFit {
        model,
        log_likelihood: trace,
        iterations,
        converged,
    })
}

impl GmmModel {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.dim == 0 {
            return Err(Error::Format("mixture needs positive k and dim".into()));
        }
        if self.weights.len() != self.k
            || self.means.len() != self.k * self.dim
            || self.variances.len() != self.k * self.dim
        {
            return Err(Error::Format("mixture parameter lengths disagree with k, dim".into()));
        }
        let all = self.weights.iter().chain(&self.means).chain(&self.variances);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mixture parameters".into()));
        }
        if self.weights.iter().any(|&w| w <= 0.0) || self.variances.iter().any(|&v| v <= 0.0) {
            return Err(Error::Format("mixture weights and variances must be positive".into()));
        }
        Ok(())
    }

    pub fn mean(&self, c: usize) -> &[f64] {
        &self.means[c * self.dim..(c + 1) * self.dim]
    }

    pub fn variance(&self, c: usize) -> &[f64] {
        &self.variances[c * self.dim..(c + 1) * self.dim]
    }

    /// Responsibilities `γ(k)` of every component for `phi`, normalized in log space.
    pub fn posteriors(&self, phi: &[f64]) -> Result<Vec<f64>> {
        if phi.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: phi.len(),
            });
        }
        let mut post = vec![0.0; self.k];
        Evaluator::new(self).posteriors_into(phi, &mut post);
        Ok(post)
    }

    /// Average log-likelihood of `points`.
    pub fn log_likelihood<S: AsRef<[f64]> + Sync>(&self, points: &[S]) -> f64 {
        e_step(self, points).log_likelihood / points.len().max(1) as f64
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = binfmt::create(path)?;
        binfmt::write_header(&mut w, path, GMM_MAGIC)?;
        binfmt::write_u32(&mut w, path, binfmt::to_u32(self.k, "k")?)?;
        binfmt::write_u32(&mut w, path, binfmt::to_u32(self.dim, "dim")?)?;
        binfmt::write_f64s_as_f32(&mut w, path, &self.weights)?;
        binfmt::write_f64s_as_f32(&mut w, path, &self.means)?;
        binfmt::write_f64s_as_f32(&mut w, path, &self.variances)?;
        binfmt::finish(w, path)
    }

    /// Loads a stored model; weights are renormalized after widening to f64.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = binfmt::open(path)?;
        binfmt::read_header(&mut r, path, GMM_MAGIC)?;
        let k = binfmt::read_u32(&mut r, path, "k")? as usize;
        let dim = binfmt::read_u32(&mut r, path, "dim")? as usize;
        let mut weights = binfmt::read_f32s_as_f64(&mut r, path, "weights", k)?;
        let means = binfmt::read_f32s_as_f64(&mut r, path, "means", k * dim)?;
        let variances = binfmt::read_f32s_as_f64(&mut r, path, "variances", k * dim)?;
        binfmt::expect_eof(&mut r, path)?;
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let model = Self {
            k,
            dim,
            weights,
            means,
            variances,
        };
        model.validate()?;
        Ok(model)
    }
}
