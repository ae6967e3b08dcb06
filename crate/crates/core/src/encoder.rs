//! Fisher-vector encoding of descriptor sets, with optional space-time
//! extension of each descriptor and power/L2 normalization.
//!
//! Per descriptor: optional RootSIFT, optional PCA, optional location append,
//! then the mean/variance gradients against the mixture. Contributions are
//! averaged per pyramid cell, each cell is power- then L2-normalized, and the
//! concatenation gets a final L2 normalization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::data::{normalize_location, Location, VideoDescriptorSet};
use crate::error::{Error, Result};
use crate::gmm::{Evaluator, GmmModel};
use crate::pooling::{CellAccumulator, EncodingLayout, PooledCells, PyramidSpec, VideoEncoding};
use crate::preprocess::{rootsift_transform, PcaModel};

pub const FVEC_MAGIC: &[u8; 4] = b"FVEC";
pub const FMAT_MAGIC: &[u8; 4] = b"FMAT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub rootsift: bool,
    /// Append the scaled normalized location to every descriptor.
    pub sted: bool,
    /// Multiplier on the appended `(u, v, w)`.
    pub location_scale: f64,
    pub power_alpha: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            rootsift: false,
            sted: false,
            location_scale: 1.0,
            power_alpha: 0.5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.power_alpha > 0.0 && self.power_alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "power alpha {} must lie in (0, 1]",
                self.power_alpha
            )));
        }
        if !(self.location_scale.is_finite() && self.location_scale >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "location scale {} must be finite and non-negative",
                self.location_scale
            )));
        }
        Ok(())
    }

    /// Rejects pooling grids when the location is already part of the descriptor.
    pub fn check_pyramid(&self, pyramid: &PyramidSpec) -> Result<()> {
        if self.sted && !pyramid.is_trivial() {
            return Err(Error::InvalidConfig(format!(
                "space-time extended descriptors use the single 1x1x1 cell, got pyramid {pyramid}"
            )));
        }
        Ok(())
    }
}

/// Gradient of one descriptor's log-likelihood: per component, `dim` mean
/// entries followed by `dim` variance entries.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherBlock {
    pub values: Vec<f64>,
}

impl AsRef<[f64]> for FisherBlock {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

pub fn sted_augment(phi: &[f64], loc: Location, location_scale: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(phi.len() + 3);
    out.extend_from_slice(phi);
    out.extend([loc.u, loc.v, loc.w].map(|c| location_scale * c));
    out
}

fn fisher_into(model: &GmmModel, post: &[f64], phi: &[f64], out: &mut [f64]) {
    let dim = model.dim;
    for (c, &g) in post.iter().enumerate() {
        let block = &mut out[2 * dim * c..2 * dim * (c + 1)];
        if g == 0.0 {
            block.fill(0.0);
            continue;
        }
        let w = model.weights[c];
        let mean_scale = g / w.sqrt();
        let var_scale = g / (2.0 * w).sqrt();
        let mu = model.mean(c);
        let var = model.variance(c);
        let (mean_part, var_part) = block.split_at_mut(dim);
        for d in 0..dim {
            let z = (phi[d] - mu[d]) / var[d].sqrt();
            mean_part[d] = mean_scale * z;
            var_part[d] = var_scale * (z * z - 1.0);
        }
    }
}

pub fn fv_contribution(model: &GmmModel, phi: &[f64]) -> Result<FisherBlock> {
    let post = model.posteriors(phi)?;
    let mut values = vec![0.0; 2 * model.dim * model.k];
    fisher_into(model, &post, phi, &mut values);
    Ok(FisherBlock { values })
}

/// Signed power `sign(c)·|c|^α`, in place.
pub fn power_normalize_in_place(x: &mut [f64], alpha: f64) {
    if alpha == 1.0 {
        return;
    }
    for c in x.iter_mut() {
        *c = c.signum() * c.abs().powf(alpha);
        if *c == 0.0 {
            *c = 0.0;
        }
    }
}

pub fn power_normalize(x: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = x.to_vec();
    power_normalize_in_place(&mut out, alpha);
    out
}

/// Scales to unit Euclidean norm; the zero vector is left unchanged.
pub fn l2_normalize_in_place(x: &mut [f64]) {
    let norm = x.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm > 0.0 {
        x.iter_mut().for_each(|c| *c /= norm);
    }
}

pub fn l2_normalize(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    l2_normalize_in_place(&mut out);
    out
}

/// PCA and mixture for one descriptor channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelCodebook {
    pub pca: Option<PcaModel>,
    pub gmm: GmmModel,
}

/// Runs the per-descriptor transforms ahead of the mixture.
pub fn prepare_descriptor(
    phi: &[f64],
    loc: Location,
    pca: Option<&PcaModel>,
    config: &EncoderConfig,
) -> Result<Vec<f64>> {
    let mut v = if config.rootsift {
        rootsift_transform(phi)
    } else {
        phi.to_vec()
    };
    if let Some(p) = pca {
        v = p.transform(&v)?;
    }
    if config.sted {
        v = sted_augment(&v, loc, config.location_scale);
    }
    Ok(v)
}

/// Mixture input dimension implied by the raw descriptor dimension and config.
pub fn expected_model_dim(raw_dim: usize, pca: Option<&PcaModel>, config: &EncoderConfig) -> usize {
    pca.map_or(raw_dim, |p| p.output_dim) + if config.sted { 3 } else { 0 }
}

fn check_inputs(
    set: &VideoDescriptorSet,
    model: &GmmModel,
    pca: Option<&PcaModel>,
    config: &EncoderConfig,
    pyramid: &PyramidSpec,
) -> Result<()> {
    config.validate()?;
    config.check_pyramid(pyramid)?;
    if let Some(p) = pca {
        if p.input_dim != set.dim() {
            return Err(Error::DimensionMismatch {
                expected: p.input_dim,
                actual: set.dim(),
            });
        }
    }
    let want = expected_model_dim(set.dim(), pca, config);
    if model.dim != want {
        return Err(Error::DimensionMismatch {
            expected: want,
            actual: model.dim,
        });
    }
    Ok(())
}

/// Average-pooled Fisher contributions per cell, before any normalization.
pub fn pooled_contributions(
    set: &VideoDescriptorSet,
    model: &GmmModel,
    pca: Option<&PcaModel>,
    config: &EncoderConfig,
    pyramid: &PyramidSpec,
) -> Result<PooledCells> {
    check_inputs(set, model, pca, config, pyramid)?;
    let eval = Evaluator::new(model);
    let mut acc = CellAccumulator::new(pyramid, 2 * model.dim * model.k);
    let mut post = vec![0.0; model.k];
    let mut block = vec![0.0; 2 * model.dim * model.k];
    let mut raw = vec![0.0; set.dim()];
    for d in &set.descriptors {
        for (r, &p) in raw.iter_mut().zip(&d.phi) {
            *r = p as f64;
        }
        let loc = normalize_location(&set.header, d);
        let x = prepare_descriptor(&raw, loc, pca, config)?;
        eval.posteriors_into(&x, &mut post);
        fisher_into(model, &post, &x, &mut block);
        acc.add(loc, &block)?;
    }
    Ok(acc.finish())
}

/// Per-cell power and L2 normalization followed by a global L2 normalization.
pub fn normalize_cells(mut pooled: PooledCells, alpha: f64) -> Vec<f64> {
    if pooled.block_len > 0 {
        for cell in pooled.values.chunks_exact_mut(pooled.block_len) {
            power_normalize_in_place(cell, alpha);
            l2_normalize_in_place(cell);
        }
    }
    l2_normalize_in_place(&mut pooled.values);
    pooled.values
}

/// Encodes one descriptor channel of a video.
pub fn encode_video(
    set: &VideoDescriptorSet,
    model: &GmmModel,
    pca: Option<&PcaModel>,
    config: &EncoderConfig,
    pyramid: &PyramidSpec,
) -> Result<VideoEncoding> {
    let pooled = pooled_contributions(set, model, pca, config, pyramid)?;
    let values = normalize_cells(pooled, config.power_alpha);
    VideoEncoding::new(
        values,
        EncodingLayout {
            pyramid: if config.sted {
                PyramidSpec::trivial()
            } else {
                pyramid.clone()
            },
            k: model.k,
            dim: model.dim,
            channels: 1,
            sted: config.sted,
        },
    )
}

/// Encodes every channel with its own codebook and concatenates the results.
/// More than one channel gets a final L2 normalization over the concatenation.
pub fn encode_channels(
    sets: &[VideoDescriptorSet],
    codebooks: &[ChannelCodebook],
    config: &EncoderConfig,
    pyramid: &PyramidSpec,
) -> Result<VideoEncoding> {
    if sets.len() != codebooks.len() || sets.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: codebooks.len(),
            actual: sets.len(),
        });
    }
    let mut parts = sets
        .iter()
        .zip(codebooks)
        .map(|(s, cb)| encode_video(s, &cb.gmm, cb.pca.as_ref(), config, pyramid));
    let first = parts.next().expect("nonempty")?;
    if sets.len() == 1 {
        return Ok(first);
    }
    let (k, dim) = (first.layout.k, first.layout.dim);
    let mut layout = first.layout;
    let mut values = first.values;
    for part in parts {
        let part = part?;
        if part.layout.k != k || part.layout.dim != dim {
            return Err(Error::InvalidConfig(
                "all channels must share mixture size and encoded dimension".into(),
            ));
        }
        values.extend(part.values);
    }
    layout.channels = sets.len();
    l2_normalize_in_place(&mut values);
    VideoEncoding::new(values, layout)
}

pub fn write_fvec(path: impl AsRef<Path>, values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut w = binfmt::create(path)?;
    binfmt::write_header(&mut w, path, FVEC_MAGIC)?;
    binfmt::write_u64(&mut w, path, values.len() as u64)?;
    binfmt::write_f64s_as_f32(&mut w, path, values)?;
    binfmt::finish(w, path)
}

pub fn read_fvec(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let mut r = binfmt::open(path)?;
    binfmt::read_header(&mut r, path, FVEC_MAGIC)?;
    let len = binfmt::read_u64(&mut r, path, "length")? as usize;
    check_payload(path, 16, len)?;
    let values = binfmt::read_f32s_as_f64(&mut r, path, "values", len)?;
    binfmt::expect_eof(&mut r, path)?;
    Ok(values)
}

fn check_payload(path: &Path, header: u64, floats: usize) -> Result<()> {
    let have = std::fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
    if have != header + 4 * floats as u64 {
        return Err(Error::Format(format!(
            "{}: {have} bytes does not match {floats} stored values",
            path.display()
        )));
    }
    Ok(())
}

/// Dense row-major matrix of video encodings, one row per video.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = binfmt::create(path)?;
        binfmt::write_header(&mut w, path, FMAT_MAGIC)?;
        binfmt::write_u64(&mut w, path, self.rows as u64)?;
        binfmt::write_u64(&mut w, path, self.cols as u64)?;
        binfmt::write_f64s_as_f32(&mut w, path, &self.data)?;
        binfmt::finish(w, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = binfmt::open(path)?;
        binfmt::read_header(&mut r, path, FMAT_MAGIC)?;
        let rows = binfmt::read_u64(&mut r, path, "rows")? as usize;
        let cols = binfmt::read_u64(&mut r, path, "cols")? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format(format!("{}: matrix too large", path.display())))?;
        check_payload(path, 24, n)?;
        let data = binfmt::read_f32s_as_f64(&mut r, path, "values", n)?;
        binfmt::expect_eof(&mut r, path)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{}: feature matrix", path.display())));
        }
        Ok(Self { rows, cols, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LocalDescriptor, VideoHeader};
    use crate::pooling::representation_dim;

    fn unit_model() -> GmmModel {
        GmmModel {
            k: 1,
            dim: 1,
            weights: vec![1.0],
            means: vec![0.0],
            variances: vec![1.0],
        }
    }

    #[test]
    fn sted_augment_examples() {
        let loc = Location::new(0.25, 0.5, 0.75);
        assert_eq!(sted_augment(&[0.5], loc, 1.0), vec![0.5, 0.25, 0.5, 0.75]);
        assert_eq!(sted_augment(&[0.5], loc, 2.0), vec![0.5, 0.5, 1.0, 1.5]);
        assert_eq!(sted_augment(&[0.5], loc, 0.0), vec![0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn fisher_examples() {
        let m = unit_model();
        assert_eq!(fv_contribution(&m, &[1.0]).unwrap().values, vec![1.0, 0.0]);
        let at_mean = fv_contribution(&m, &[0.0]).unwrap().values;
        assert_eq!(at_mean[0], 0.0);
        assert!((at_mean[1] + 0.70710678).abs() < 1e-8);
        assert!(fv_contribution(&m, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn centered_inputs_zero_every_mean_block() {
        let m = GmmModel {
            k: 2,
            dim: 2,
            weights: vec![0.3, 0.7],
            means: vec![1.0, 1.0, 1.0, 1.0],
            variances: vec![0.5, 2.0, 1.0, 3.0],
        };
        let fv = fv_contribution(&m, &[1.0, 1.0]).unwrap().values;
        assert_eq!(&fv[0..2], &[0.0, 0.0]);
        assert_eq!(&fv[4..6], &[0.0, 0.0]);
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(power_normalize(&[4.0, -9.0, 0.0], 0.5), vec![2.0, -3.0, 0.0]);
        assert_eq!(power_normalize(&[0.3, -7.0], 1.0), vec![0.3, -7.0]);
        assert_eq!(power_normalize(&[-0.25], 0.5), vec![-0.5]);
        assert_eq!(l2_normalize(&[3.0, 4.0]), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(l2_normalize(&[0.0, 1.0, 0.0]), vec![0.0, 1.0, 0.0]);
    }

    fn set_of(points: &[(f32, f32, f32, f32)]) -> VideoDescriptorSet {
        let header = VideoHeader::new(100, 100, 11, 1).unwrap();
        VideoDescriptorSet::new(
            header,
            points
                .iter()
                .map(|&(x, y, t, p)| LocalDescriptor { x, y, t, phi: vec![p] })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn symmetric_pair_cancels() {
        let set = set_of(&[(10.0, 10.0, 0.0, 1.0), (90.0, 90.0, 10.0, -1.0)]);
        let cfg = EncoderConfig {
            power_alpha: 1.0,
            ..EncoderConfig::default()
        };
        let pooled =
            pooled_contributions(&set, &unit_model(), None, &cfg, &PyramidSpec::trivial()).unwrap();
        assert_eq!(pooled.values, vec![0.0, 0.0]);
    }

    #[test]
    fn empty_video_encodes_to_zeros() {
        let set = set_of(&[]);
        let p: PyramidSpec = "1x1x1,2x2x2".parse().unwrap();
        let enc = encode_video(&set, &unit_model(), None, &EncoderConfig::default(), &p).unwrap();
        assert_eq!(enc.values.len() as u64, representation_dim(1, 1, &p, false, 1));
        assert!(enc.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sted_requires_trivial_pyramid_and_extended_model() {
        let set = set_of(&[(10.0, 10.0, 0.0, 1.0)]);
        let cfg = EncoderConfig {
            sted: true,
            ..EncoderConfig::default()
        };
        let p: PyramidSpec = "2x2x2".parse().unwrap();
        let model4 = GmmModel {
            k: 1,
            dim: 4,
            weights: vec![1.0],
            means: vec![0.0; 4],
            variances: vec![1.0; 4],
        };
        assert!(matches!(
            encode_video(&set, &model4, None, &cfg, &p),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            encode_video(&set, &unit_model(), None, &cfg, &PyramidSpec::trivial()),
            Err(Error::DimensionMismatch { .. })
        ));
        let enc = encode_video(&set, &model4, None, &cfg, &PyramidSpec::trivial()).unwrap();
        assert_eq!(enc.values.len(), 8);
        let norm: f64 = enc.values.iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_cell_encoding_is_normalized_mean() {
        let set = set_of(&[(10.0, 10.0, 0.0, 0.5), (50.0, 20.0, 3.0, 2.0), (70.0, 80.0, 9.0, -1.5)]);
        let m = unit_model();
        let cfg = EncoderConfig::default();
        let enc = encode_video(&set, &m, None, &cfg, &PyramidSpec::trivial()).unwrap();
        let mut mean = vec![0.0; 2];
        for d in &set.descriptors {
            let fv = fv_contribution(&m, &[d.phi[0] as f64]).unwrap();
            for (a, b) in mean.iter_mut().zip(&fv.values) {
                *a += b / 3.0;
            }
        }
        let expect = l2_normalize(&power_normalize(&mean, 0.5));
        for (a, b) in enc.values.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_concatenation() {
        let set = set_of(&[(10.0, 10.0, 0.0, 0.5), (50.0, 20.0, 3.0, 2.0)]);
        let cb = ChannelCodebook {
            pca: None,
            gmm: unit_model(),
        };
        let cfg = EncoderConfig::default();
        let p = PyramidSpec::trivial();
        let two = encode_channels(&[set.clone(), set.clone()], &[cb.clone(), cb.clone()], &cfg, &p)
            .unwrap();
        assert_eq!(two.layout.channels, 2);
        assert_eq!(two.values.len(), 4);
        let one = encode_channels(&[set], &[cb], &cfg, &p).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        for (a, b) in two.values.iter().zip(one.values.iter().chain(&one.values)) {
            assert!((a - s * b).abs() < 1e-12);
        }
    }

    #[test]
    fn vector_and_matrix_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.fvec");
        write_fvec(&p, &[0.5, -0.25, 1.0]).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 16 + 12);
        assert_eq!(read_fvec(&p).unwrap(), vec![0.5, -0.25, 1.0]);

        let m = FeatureMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let p = dir.path().join("x.fmat");
        m.save(&p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 24 + 24);
        assert_eq!(FeatureMatrix::load(&p).unwrap(), m);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(FeatureMatrix::load(&p), Err(Error::Format(_))));
    }
}
