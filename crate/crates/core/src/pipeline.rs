//! End-to-end train/evaluate loop: codebook fitting, encoding, one-vs-all
//! training and the split protocols.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    argmax, mean_accuracy, mean_average_precision, svm_train_ova, ClassMetric, EvalReport,
    LinearOvaModel, SvmTrainOpts,
};
use crate::data::{DatasetManifest, VideoDescriptorSet};
use crate::encoder::{encode_channels, prepare_descriptor, ChannelCodebook, EncoderConfig, FeatureMatrix};
use crate::error::{Error, Result};
use crate::gmm::{gmm_fit_em, sample_from_sets, GmmTrainConfig};
use crate::pooling::{representation_dim, PyramidSpec};
use crate::preprocess::{halved_dim, pca_fit, rootsift_transform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PcaChoice {
    Off,
    /// Keep `floor(D/2)` components.
    Halve,
    Dim(usize),
}

impl PcaChoice {
    pub fn output_dim(&self, input_dim: usize) -> Result<Option<usize>> {
        match *self {
            PcaChoice::Off => Ok(None),
            PcaChoice::Halve => Ok(Some(halved_dim(input_dim))),
            PcaChoice::Dim(d) if d >= 1 && d <= input_dim => Ok(Some(d)),
            PcaChoice::Dim(d) => Err(Error::InvalidConfig(format!(
                "PCA dimension {d} outside 1..={input_dim}"
            ))),
        }
    }
}

/// Settings shared by every encoding method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub pca: PcaChoice,
    pub rootsift: bool,
    pub gmm: GmmTrainConfig,
    pub power_alpha: f64,
    pub svm: SvmTrainOpts,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            pca: PcaChoice::Halve,
            rootsift: false,
            gmm: GmmTrainConfig::default(),
            power_alpha: 0.5,
            svm: SvmTrainOpts::default(),
        }
    }
}

impl PipelineConfig {
    /// Small mixture and sample for synthetic runs that finish in minutes.
    pub fn desk_scale() -> Self {
        Self {
            gmm: GmmTrainConfig {
                k: 16,
                sample_count: 16_000,
                ..GmmTrainConfig::default()
            },
            ..Self::default()
        }
    }
}

/// How space-time location enters the representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    /// One whole-video cell, location ignored.
    Baseline,
    /// Spatio-temporal pyramid: `{1x1xl', 2x2xl'}` for every `l'` in 1, 2, 4, … `levels`.
    Stp { levels: usize },
    /// Only the `{1x1xl, 2x2xl}` grids.
    StpSingle { levels: usize },
    /// Location appended to every descriptor, scaled by `location_scale`.
    Sted { location_scale: f64 },
}

impl Method {
    pub fn pyramid(&self) -> Result<PyramidSpec> {
        match *self {
            Method::Baseline | Method::Sted { .. } => Ok(PyramidSpec::trivial()),
            Method::Stp { levels } => PyramidSpec::stp_pyramid(levels),
            Method::StpSingle { levels } => PyramidSpec::stp_single(levels),
        }
    }

    pub fn encoder_config(&self, cfg: &PipelineConfig) -> EncoderConfig {
        let (sted, location_scale) = match *self {
            Method::Sted { location_scale } => (true, location_scale),
            _ => (false, 1.0),
        };
        EncoderConfig {
            rootsift: cfg.rootsift,
            sted,
            location_scale,
            power_alpha: cfg.power_alpha,
        }
    }

    /// File-name friendly identifier.
    pub fn slug(&self) -> String {
        self.to_string().replace([':', '.'], "-")
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Baseline => f.write_str("baseline"),
            Method::Stp { levels } => write!(f, "stp:{levels}"),
            Method::StpSingle { levels } => write!(f, "stp-single:{levels}"),
            Method::Sted { location_scale } => write!(f, "sted:{location_scale}"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let bad = || Error::InvalidConfig(format!("unknown method {s:?}"));
        let levels = |a: Option<&str>| -> Result<usize> {
            let l = a.ok_or_else(bad)?.parse::<usize>().map_err(|_| bad())?;
            if l == 0 {
                return Err(bad());
            }
            Ok(l)
        };
        let m = match name {
            "baseline" if arg.is_none() => Method::Baseline,
            "stp" => Method::Stp { levels: levels(arg)? },
            "stp-single" => Method::StpSingle { levels: levels(arg)? },
            "sted" => Method::Sted {
                location_scale: match arg {
                    Some(a) => a.parse().map_err(|_| bad())?,
                    None => 1.0,
                },
            },
            _ => return Err(bad()),
        };
        m.pyramid()?;
        Ok(m)
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    MeanAccuracy,
    MeanAveragePrecision,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macc" | "mean-accuracy" => Ok(Metric::MeanAccuracy),
            "map" | "mean-average-precision" => Ok(Metric::MeanAveragePrecision),
            _ => Err(Error::InvalidConfig(format!("unknown metric {s:?}"))),
        }
    }
}

/// A manifest with every descriptor file read into memory.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    /// `videos[i][channel]` for manifest entry `i`.
    pub videos: Vec<Vec<VideoDescriptorSet>>,
    /// Index into `manifest.label_set` for every entry.
    pub labels: Vec<usize>,
}

impl LoadedDataset {
    pub fn load(manifest: DatasetManifest) -> Result<Self> {
        let videos = manifest
            .entries
            .par_iter()
            .map(|e| manifest.read_entry(e))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(manifest, videos)
    }

    pub fn from_parts(manifest: DatasetManifest, videos: Vec<Vec<VideoDescriptorSet>>) -> Result<Self> {
        manifest.validate()?;
        if videos.len() != manifest.entries.len() {
            return Err(Error::Manifest("video count differs from manifest entries".into()));
        }
        let channels = manifest.channel_count();
        for (e, v) in manifest.entries.iter().zip(&videos) {
            if v.len() != channels {
                return Err(Error::Manifest(format!("entry {:?} channel count", e.id)));
            }
        }
        for ch in 0..channels {
            if let Some(first) = videos.first() {
                let dim = first[ch].dim();
                if let Some(v) = videos.iter().find(|v| v[ch].dim() != dim) {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        actual: v[ch].dim(),
                    });
                }
            }
        }
        let labels = manifest
            .entries
            .iter()
            .map(|e| manifest.label_index(&e.label).expect("validated label"))
            .collect();
        Ok(Self {
            manifest,
            videos,
            labels,
        })
    }

    pub fn channel_count(&self) -> usize {
        self.manifest.channel_count()
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}

/// Fits PCA (optional) and the mixture for one channel on a shared sample.
pub fn fit_channel_codebook(
    sets: &[&VideoDescriptorSet],
    cfg: &PipelineConfig,
    enc: &EncoderConfig,
    seed: u64,
) -> Result<ChannelCodebook> {
    let sample = sample_from_sets(sets, cfg.gmm.sample_count, seed)?;
    let raw_dim = sets.first().map_or(0, |s| s.dim());
    let pca = match cfg.pca.output_dim(raw_dim)? {
        Some(out) => {
            let pre: Vec<Vec<f64>> = sample
                .iter()
                .map(|s| {
                    if cfg.rootsift {
                        rootsift_transform(&s.phi)
                    } else {
                        s.phi.clone()
                    }
                })
                .collect();
            Some(pca_fit(&pre, out)?)
        }
        None => None,
    };
    let points = sample
        .iter()
        .map(|s| prepare_descriptor(&s.phi, s.location, pca.as_ref(), enc))
        .collect::<Result<Vec<_>>>()?;
    let gmm_cfg = GmmTrainConfig {
        seed,
        ..cfg.gmm.clone()
    };
    let fit = gmm_fit_em(&points, &gmm_cfg)?;
    Ok(ChannelCodebook {
        pca,
        gmm: fit.model,
    })
}

/// One codebook per channel, fitted on the given training videos.
pub fn fit_codebooks(
    train: &[&[VideoDescriptorSet]],
    cfg: &PipelineConfig,
    enc: &EncoderConfig,
) -> Result<Vec<ChannelCodebook>> {
    let channels = train.first().map_or(0, |v| v.len());
    (0..channels)
        .map(|ch| {
            let sets: Vec<&VideoDescriptorSet> = train.iter().map(|v| &v[ch]).collect();
            fit_channel_codebook(&sets, cfg, enc, cfg.gmm.seed.wrapping_add(ch as u64))
        })
        .collect()
}

/// Encodes videos in parallel; row order follows `videos`.
pub fn encode_videos(
    videos: &[&[VideoDescriptorSet]],
    codebooks: &[ChannelCodebook],
    enc: &EncoderConfig,
    pyramid: &PyramidSpec,
) -> Result<FeatureMatrix> {
    let rows = videos
        .par_iter()
        .map(|v| encode_channels(v, codebooks, enc, pyramid).map(|e| e.values))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Ok(FeatureMatrix {
            rows: 0,
            cols: 0,
            data: vec![],
        });
    }
    FeatureMatrix::from_rows(&rows)
}

/// Everything produced by training on one split and testing on its complement.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub held_out: String,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub train_features: FeatureMatrix,
    pub test_features: FeatureMatrix,
    pub classifier: LinearOvaModel,
    /// `scores[v][c]` for test video `v` and class `c`.
    pub scores: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
    pub report: EvalReport,
    pub representation_dim: u64,
    /// Wall-clock seconds spent encoding train and test videos.
    pub encode_seconds: f64,
}

/// Scores test predictions with the chosen metric.
pub fn score_split(
    metric: Metric,
    scores: &[Vec<f64>],
    predictions: &[usize],
    truths: &[usize],
    label_set: &[String],
) -> Result<EvalReport> {
    match metric {
        Metric::MeanAccuracy => mean_accuracy(predictions, truths, label_set),
        Metric::MeanAveragePrecision => {
            let per_class: Vec<Vec<f64>> = (0..label_set.len())
                .map(|c| scores.iter().map(|s| s[c]).collect())
                .collect();
            let truth_sets: Vec<Vec<usize>> = truths.iter().map(|&t| vec![t]).collect();
            mean_average_precision(&per_class, &truth_sets, label_set)
        }
    }
}

/// Fits codebooks and classifier on `train_indices` only, then scores `test_indices`.
pub fn run_split(
    data: &LoadedDataset,
    train_indices: &[usize],
    test_indices: &[usize],
    cfg: &PipelineConfig,
    method: &Method,
    metric: Metric,
) -> Result<FoldOutcome> {
    let enc = method.encoder_config(cfg);
    enc.validate()?;
    let pyramid = method.pyramid()?;
    let label_set = &data.manifest.label_set;
    let pick = |idx: &[usize]| -> Vec<&[VideoDescriptorSet]> {
        idx.iter().map(|&i| data.videos[i].as_slice()).collect()
    };
    let train_videos = pick(train_indices);
    let test_videos = pick(test_indices);
    if train_videos.is_empty() || test_videos.is_empty() {
        return Err(Error::InsufficientData("empty train or test split".into()));
    }

    let codebooks = fit_codebooks(&train_videos, cfg, &enc)?;
    let started = Instant::now();
    let train_features = encode_videos(&train_videos, &codebooks, &enc, &pyramid)?;
    let test_features = encode_videos(&test_videos, &codebooks, &enc, &pyramid)?;
    let encode_seconds = started.elapsed().as_secs_f64();

    let train_labels: Vec<usize> = train_indices.iter().map(|&i| data.labels[i]).collect();
    let classifier = svm_train_ova(&train_features, &train_labels, label_set, &cfg.svm)?;
    let scores = test_features
        .iter_rows()
        .map(|x| classifier.predict_scores(x))
        .collect::<Result<Vec<_>>>()?;
    let predictions: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
    let truths: Vec<usize> = test_indices.iter().map(|&i| data.labels[i]).collect();
    let report = score_split(metric, &scores, &predictions, &truths, label_set)?;

    let first = &codebooks[0];
    let raw_dim = first.pca.as_ref().map_or(first.gmm.dim - if enc.sted { 3 } else { 0 }, |p| p.output_dim);
    let representation_dim = representation_dim(
        raw_dim as u64,
        first.gmm.k as u64,
        &pyramid,
        enc.sted,
        codebooks.len() as u64,
    );
    Ok(FoldOutcome {
        held_out: String::new(),
        train_indices: train_indices.to_vec(),
        test_indices: test_indices.to_vec(),
        train_features,
        test_features,
        classifier,
        scores,
        predictions,
        report,
        representation_dim,
        encode_seconds,
    })
}

#[derive(Debug, Clone)]
pub struct LogoOutcome {
    /// Per-fold metric (labelled `group=<name>`) and their mean.
    pub report: EvalReport,
    pub folds: Vec<FoldOutcome>,
}

/// Holds out each group in turn; every model component is refit per fold.
pub fn leave_one_group_out(
    data: &LoadedDataset,
    cfg: &PipelineConfig,
    method: &Method,
    metric: Metric,
) -> Result<LogoOutcome> {
    data.manifest.require_groups()?;
    let groups = data.manifest.groups();
    if groups.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "leave-one-group-out needs at least two groups, found {}",
            groups.len()
        )));
    }
    let mut folds = Vec::with_capacity(groups.len());
    for g in &groups {
        folds.push(run_group_fold(data, cfg, method, metric, g)?);
    }
    let per_fold = folds
        .iter()
        .map(|f| ClassMetric {
            label: format!("group={}", f.held_out),
            value: f.report.aggregate,
        })
        .collect();
    let report = EvalReport::from_entries(format!("leave-one-group-out/{}", metric_name(metric)), per_fold)?;
    Ok(LogoOutcome { report, folds })
}

/// Trains on every group except `group` and tests on `group`.
pub fn run_group_fold(
    data: &LoadedDataset,
    cfg: &PipelineConfig,
    method: &Method,
    metric: Metric,
    group: &str,
) -> Result<FoldOutcome> {
    let (test, train): (Vec<usize>, Vec<usize>) =
        (0..data.len()).partition(|&i| data.manifest.entries[i].group == group);
    if test.is_empty() {
        return Err(Error::InvalidConfig(format!("group {group:?} has no videos")));
    }
    let trained: std::collections::HashSet<usize> = train.iter().map(|&i| data.labels[i]).collect();
    if !test.iter().any(|&i| trained.contains(&data.labels[i])) {
        return Err(Error::InsufficientData(format!(
            "none of the labels in group {group:?} occur in the training folds"
        )));
    }
    let mut fold = run_split(data, &train, &test, cfg, method, metric)?;
    fold.held_out = group.to_string();
    Ok(fold)
}

pub fn metric_name(metric: Metric) -> &'static str {
    match metric {
        Metric::MeanAccuracy => "mean-accuracy",
        Metric::MeanAveragePrecision => "mean-average-precision",
    }
}
