//! Side-by-side comparison of encoding methods on identical splits.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, Discrete};

use crate::classifier::{ClassMetric, EvalReport};
use crate::digest::config_digest;
use crate::error::{Error, Result};
use crate::pipeline::{
    leave_one_group_out, metric_name, run_group_fold, FoldOutcome, LoadedDataset, Method, Metric,
    PipelineConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitScheme {
    LeaveOneGroupOut,
    /// Train on every other group, test on this one.
    HoldOutGroup(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub pipeline: PipelineConfig,
    pub split: SplitScheme,
    pub metric: Metric,
    /// Label pairs scored head to head (see [`PairStats`]).
    #[serde(default)]
    pub pairs: Vec<(String, String)>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("at least one method is required".into()));
        }
        for m in &self.methods {
            m.pyramid()?;
            m.encoder_config(&self.pipeline).validate()?;
        }
        self.pipeline.gmm.validate()?;
        self.pipeline.svm.validate()
    }
}

/// Head-to-head accuracy on paired classes: a test video of either class in
/// a pair counts as correct when its own class outscores the partner (ties go
/// to the earlier label). `p_value` is the two-sided binomial test against 1/2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub correct: u64,
    pub total: u64,
    pub accuracy: f64,
    pub p_value: f64,
}

impl PairStats {
    pub fn from_counts(correct: u64, total: u64) -> Self {
        let accuracy = if total == 0 { f64::NAN } else { correct as f64 / total as f64 };
        Self {
            correct,
            total,
            accuracy,
            p_value: binomial_two_sided_p(correct, total, 0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub representation_dim: u64,
    pub aggregate: f64,
    pub per_fold: Vec<ClassMetric>,
    pub pairwise: Option<PairStats>,
}

/// Deterministic part of a benchmark run; timings are kept separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config_digest: String,
    pub metric: String,
    pub methods: Vec<MethodResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodTiming {
    pub method: Method,
    pub encode_seconds: f64,
}

pub struct ExperimentOutcome {
    pub report: BenchReport,
    pub timings: Vec<MethodTiming>,
    /// Folds of each method, in `config.methods` order.
    pub folds: Vec<Vec<FoldOutcome>>,
}

/// Two-sided exact binomial test: total probability of outcomes no more
/// likely than `k`.
pub fn binomial_two_sided_p(k: u64, n: u64, p: f64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let dist = Binomial::new(p, n).expect("valid binomial parameters");
    let observed = dist.pmf(k);
    let cutoff = observed * (1.0 + 1e-7);
    let total: f64 = (0..=n).map(|i| dist.pmf(i)).filter(|&q| q <= cutoff).sum();
    total.min(1.0)
}

/// Counts head-to-head wins over `pairs` in the test predictions of `folds`.
pub fn pair_stats(data: &LoadedDataset, folds: &[FoldOutcome], pairs: &[(usize, usize)]) -> PairStats {
    let partner: HashMap<usize, usize> = pairs
        .iter()
        .flat_map(|&(a, b)| [(a, b), (b, a)])
        .collect();
    let (mut correct, mut total) = (0u64, 0u64);
    for fold in folds {
        for (&v, scores) in fold.test_indices.iter().zip(&fold.scores) {
            let truth = data.labels[v];
            if let Some(&other) = partner.get(&truth) {
                let (lo, hi) = (truth.min(other), truth.max(other));
                let winner = if scores[hi] > scores[lo] { hi } else { lo };
                total += 1;
                correct += u64::from(winner == truth);
            }
        }
    }
    PairStats::from_counts(correct, total)
}

fn resolve_pairs(data: &LoadedDataset, pairs: &[(String, String)]) -> Result<Vec<(usize, usize)>> {
    pairs
        .iter()
        .map(|(a, b)| {
            let find = |l: &str| {
                data.manifest
                    .label_index(l)
                    .ok_or_else(|| Error::InvalidConfig(format!("pair label {l:?} not in label set")))
            };
            Ok((find(a)?, find(b)?))
        })
        .collect()
}

/// Runs every method on the same splits, one method at a time.
pub fn run_experiment(config: &ExperimentConfig, data: &LoadedDataset) -> Result<ExperimentOutcome> {
    config.validate()?;
    let pairs = resolve_pairs(data, &config.pairs)?;
    let mut results = Vec::new();
    let mut timings = Vec::new();
    let mut all_folds = Vec::new();
    for method in &config.methods {
        log::info!("running {method}");
        let (report, folds): (EvalReport, Vec<FoldOutcome>) = match &config.split {
            SplitScheme::LeaveOneGroupOut => {
                let out = leave_one_group_out(data, &config.pipeline, method, config.metric)?;
                (out.report, out.folds)
            }
            SplitScheme::HoldOutGroup(g) => {
                let fold = run_group_fold(data, &config.pipeline, method, config.metric, g)?;
                let entry = ClassMetric {
                    label: format!("group={g}"),
                    value: fold.report.aggregate,
                };
                (EvalReport::from_entries("hold-out-group", vec![entry])?, vec![fold])
            }
        };
        results.push(MethodResult {
            method: method.clone(),
            representation_dim: folds[0].representation_dim,
            aggregate: report.aggregate,
            per_fold: report.per_class,
            pairwise: (!pairs.is_empty()).then(|| pair_stats(data, &folds, &pairs)),
        });
        timings.push(MethodTiming {
            method: method.clone(),
            encode_seconds: folds.iter().map(|f| f.encode_seconds).sum(),
        });
        all_folds.push(folds);
    }
    Ok(ExperimentOutcome {
        report: BenchReport {
            config_digest: config_digest(config),
            metric: metric_name(config.metric).to_string(),
            methods: results,
        },
        timings,
        folds: all_folds,
    })
}

/// Aligned plain-text table of a report, with encode times when given.
pub fn format_table(report: &BenchReport, timings: Option<&[MethodTiming]>) -> String {
    let mut rows = vec![vec![
        "method".to_string(),
        "dim".into(),
        report.metric.clone(),
        "pair-acc".into(),
        "pair-p".into(),
        "encode-s".into(),
    ]];
    for (i, r) in report.methods.iter().enumerate() {
        let (acc, p) = match &r.pairwise {
            Some(s) => (format!("{:.4}", s.accuracy), format!("{:.4}", s.p_value)),
            None => ("-".into(), "-".into()),
        };
        let secs = timings
            .and_then(|t| t.get(i))
            .map_or("-".into(), |t| format!("{:.2}", t.encode_seconds));
        rows.push(vec![
            r.method.to_string(),
            r.representation_dim.to_string(),
            format!("{:.4}", r.aggregate),
            acc,
            p,
            secs,
        ]);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, &w))| {
                if c == 0 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect();
        writeln!(out, "{}", line.join("  ").trim_end()).expect("write to string");
    }
    out
}
