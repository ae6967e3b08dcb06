//! Descriptor preprocessing: RootSIFT-style square-rooting and PCA.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::error::{Error, Result};

pub const PCA_MAGIC: &[u8; 4] = b"PCA1";

/// Signed square root of the L1-normalized vector. The zero vector maps to itself.
pub fn rootsift_transform(phi: &[f64]) -> Vec<f64> {
    let l1: f64 = phi.iter().map(|c| c.abs()).sum();
    if l1 <= 0.0 {
        return vec![0.0; phi.len()];
    }
    phi.iter()
        .map(|&c| c.signum() * (c.abs() / l1).sqrt())
        .map(|c| if c == 0.0 { 0.0 } else { c })
        .collect()
}

/// Principal-component projection fitted on a descriptor sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub input_dim: usize,
    pub output_dim: usize,
    pub mean: Vec<f64>,
    /// `output_dim` rows of length `input_dim`, row-major.
    pub basis: Vec<f64>,
    /// Non-increasing, non-negative.
    pub eigenvalues: Vec<f64>,
}

/// Output dimension for halving the descriptor, never below one.
pub fn halved_dim(input_dim: usize) -> usize {
    (input_dim / 2).max(1)
}

/// Fits PCA on `samples` with an (n-1)-normalized covariance. Basis rows are
/// sign-fixed so their first nonzero entry is positive.
pub fn pca_fit<S: AsRef<[f64]>>(samples: &[S], output_dim: usize) -> Result<PcaModel> {
    let n = samples.len();
    let Some(first) = samples.first() else {
        return Err(Error::InsufficientData("PCA needs at least one sample".into()));
    };
    let dim = first.as_ref().len();
    if output_dim == 0 || output_dim > dim {
        return Err(Error::InvalidConfig(format!(
            "PCA output dimension {output_dim} must be in 1..={dim}"
        )));
    }
    if n < output_dim {
        return Err(Error::InsufficientData(format!(
            "PCA to {output_dim} dimensions needs at least {output_dim} samples, got {n}"
        )));
    }

    let mut mean = vec![0.0; dim];
    for s in samples {
        let s = s.as_ref();
        if s.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: s.len(),
            });
        }
        for (m, &v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    // Upper triangle accumulation, mirrored afterwards.
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    let mut centered = vec![0.0; dim];
    for s in samples {
        for ((c, &v), &m) in centered.iter_mut().zip(s.as_ref()).zip(&mean) {
            *c = v - m;
        }
        for i in 0..dim {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..dim {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    let denom = n.saturating_sub(1).max(1) as f64;
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut basis = Vec::with_capacity(output_dim * dim);
    let mut eigenvalues = Vec::with_capacity(output_dim);
    for &col in order.iter().take(output_dim) {
        let v = eig.eigenvectors.column(col);
        let flip = v
            .iter()
            .find(|c| c.abs() > 1e-12)
            .is_some_and(|&c| c < 0.0);
        let sign = if flip { -1.0 } else { 1.0 };
        basis.extend(v.iter().map(|&c| sign * c));
        eigenvalues.push(eig.eigenvalues[col].max(0.0));
    }

    Ok(PcaModel {
        input_dim: dim,
        output_dim,
        mean,
        basis,
        eigenvalues,
    })
}

impl PcaModel {
    pub fn basis_row(&self, r: usize) -> &[f64] {
        &self.basis[r * self.input_dim..(r + 1) * self.input_dim]
    }

    /// `basis · (phi - mean)`.
    pub fn transform(&self, phi: &[f64]) -> Result<Vec<f64>> {
        if phi.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: phi.len(),
            });
        }
        Ok(self.transform_unchecked(phi))
    }

    pub(crate) fn transform_unchecked(&self, phi: &[f64]) -> Vec<f64> {
        (0..self.output_dim)
            .map(|r| {
                self.basis_row(r)
                    .iter()
                    .zip(phi)
                    .zip(&self.mean)
                    .map(|((b, p), m)| b * (p - m))
                    .sum()
            })
            .collect()
    }

    /// `mean + basisᵀ · projected`.
    pub fn reconstruct(&self, projected: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (r, &p) in projected.iter().enumerate() {
            for (o, b) in out.iter_mut().zip(self.basis_row(r)) {
                *o += p * b;
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = binfmt::create(path)?;
        binfmt::write_header(&mut w, path, PCA_MAGIC)?;
        binfmt::write_u32(&mut w, path, binfmt::to_u32(self.input_dim, "input_dim")?)?;
        binfmt::write_u32(&mut w, path, binfmt::to_u32(self.output_dim, "output_dim")?)?;
        binfmt::write_f64s_as_f32(&mut w, path, &self.mean)?;
        binfmt::write_f64s_as_f32(&mut w, path, &self.eigenvalues)?;
        binfmt::write_f64s_as_f32(&mut w, path, &self.basis)?;
        binfmt::finish(w, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = binfmt::open(path)?;
        binfmt::read_header(&mut r, path, PCA_MAGIC)?;
        let input_dim = binfmt::read_u32(&mut r, path, "input_dim")? as usize;
        let output_dim = binfmt::read_u32(&mut r, path, "output_dim")? as usize;
        if input_dim == 0 || output_dim == 0 || output_dim > input_dim {
            return Err(Error::Format(format!(
                "{}: invalid PCA dimensions {input_dim} -> {output_dim}",
                path.display()
            )));
        }
        let mean = binfmt::read_f32s_as_f64(&mut r, path, "mean", input_dim)?;
        let eigenvalues = binfmt::read_f32s_as_f64(&mut r, path, "eigenvalues", output_dim)?;
        let basis = binfmt::read_f32s_as_f64(&mut r, path, "basis", input_dim * output_dim)?;
        binfmt::expect_eof(&mut r, path)?;
        if mean.iter().chain(&eigenvalues).chain(&basis).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{}: PCA model", path.display())));
        }
        Ok(Self {
            input_dim,
            output_dim,
            mean,
            basis,
            eigenvalues,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rootsift_examples() {
        let out = rootsift_transform(&[1.0, 1.0]);
        assert!((out[0] - 0.70710678).abs() < 1e-8);
        assert!((out[1] - 0.70710678).abs() < 1e-8);
        assert_eq!(rootsift_transform(&[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(rootsift_transform(&[4.0, 0.0]), vec![1.0, 0.0]);
        let neg = rootsift_transform(&[-1.0, 3.0]);
        assert_eq!(neg, vec![-0.5, 0.75f64.sqrt()]);
    }

    #[test]
    fn pca_axis_example() {
        let samples = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![2.0, 0.0], vec![-2.0, 0.0]];
        let m = pca_fit(&samples, 1).unwrap();
        assert_eq!(m.basis_row(0), &[1.0, 0.0]);
        assert!((m.eigenvalues[0] - 10.0 / 3.0).abs() < 1e-12);
        assert!((m.transform(&[2.0, 0.0]).unwrap()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn identical_samples_give_zero_eigenvalue() {
        let samples = vec![vec![3.0, -1.0, 2.0]; 5];
        let m = pca_fit(&samples, 1).unwrap();
        assert_eq!(m.eigenvalues[0], 0.0);
        let row = m.basis_row(0);
        let norm: f64 = row.iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(row.iter().find(|c| c.abs() > 1e-12).unwrap() > &0.0);
        assert!(m.transform(&[3.0, -1.0, 2.0]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_model_is_passthrough() {
        let m = PcaModel {
            input_dim: 2,
            output_dim: 2,
            mean: vec![0.0, 0.0],
            basis: vec![1.0, 0.0, 0.0, 1.0],
            eigenvalues: vec![1.0, 1.0],
        };
        assert_eq!(m.transform(&[0.25, -7.0]).unwrap(), vec![0.25, -7.0]);
        assert!(matches!(
            m.transform(&[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn fit_preconditions() {
        let samples = vec![vec![1.0, 2.0]];
        assert!(matches!(pca_fit(&samples, 2), Err(Error::InsufficientData(_))));
        assert!(matches!(pca_fit(&samples, 3), Err(Error::InvalidConfig(_))));
        assert_eq!(halved_dim(426), 213);
        assert_eq!(halved_dim(1), 1);
    }

    #[test]
    fn file_round_trip_within_f32() {
        let samples: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![i as f64, (i * i) as f64 * 0.1, (i % 3) as f64])
            .collect();
        let m = pca_fit(&samples, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pca.bin");
        m.save(&path).unwrap();
        assert_eq!(
            std::fs::metadata(&path).unwrap().len() as usize,
            16 + 4 * (3 + 2 + 6)
        );
        let back = PcaModel::load(&path).unwrap();
        assert_eq!(back.output_dim, 2);
        for (a, b) in back.basis.iter().zip(&m.basis) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn full_rank_projection_is_an_isometry(
            seed_rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 4..12)
        ) {
            let m = pca_fit(&seed_rows, 3).unwrap();
            let proj: Vec<Vec<f64>> = seed_rows.iter().map(|r| m.transform(r).unwrap()).collect();
            for i in 0..seed_rows.len() {
                let back = m.reconstruct(&proj[i]);
                for (a, b) in back.iter().zip(&seed_rows[i]) {
                    prop_assert!((a - b).abs() < 1e-8);
                }
                for j in 0..i {
                    let d0: f64 = seed_rows[i].iter().zip(&seed_rows[j]).map(|(a, b)| (a - b).powi(2)).sum();
                    let d1: f64 = proj[i].iter().zip(&proj[j]).map(|(a, b)| (a - b).powi(2)).sum();
                    prop_assert!((d0.sqrt() - d1.sqrt()).abs() < 1e-8);
                }
            }
        }
    }
}
