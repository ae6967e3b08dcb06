use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use stfv::bench::{format_table, run_experiment, ExperimentConfig, SplitScheme};
use stfv::classifier::{argmax, svm_train_ova, LinearOvaModel, SvmTrainOpts};
use stfv::data::{read_video_file, write_video_file, DatasetManifest, LocalDescriptor, VideoDescriptorSet, VideoHeader};
use stfv::encoder::{encode_video, prepare_descriptor, write_fvec, EncoderConfig, FeatureMatrix};
use stfv::gmm::{gmm_fit_em, sample_from_sets, GmmModel, GmmTrainConfig};
use stfv::pipeline::{
    leave_one_group_out, score_split, LoadedDataset, Method, Metric, PcaChoice, PipelineConfig,
};
use stfv::pooling::{representation_dim, PyramidSpec};
use stfv::preprocess::{halved_dim, pca_fit, rootsift_transform, PcaModel};
use stfv::synth::{generate_dataset, SynthSpec};
use stfv::{Error, Result};

use crate::settings::{
    digest_of, ensure_parent, read_json, sidecar_path, write_json, write_sidecar, Settings,
};
use crate::{
    BenchCmd, Cli, Command, DimsCmd, EncodeCmd, EvalCmd, GmmCmd, GmmFitCmd, PcaApplyCmd, PcaCmd,
    PcaFitCmd, PipelineArgs, Protocol, SvmArgs, SynthArgs, SynthCmd, TrainCmd,
};

/// Prints a line to stdout; a closed pipe (e.g. `| head`) is not an error.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

pub fn run(cli: Cli) -> Result<()> {
    let settings = Settings::load(cli.config.as_deref())?;
    let threads = settings.opt(cli.threads, "threads")?;
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::InvalidConfig("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    let s = &settings;
    match cli.command {
        Command::Synth(c) => synth(s, c),
        Command::Pca(PcaCmd::Fit(c)) => pca_fit_cmd(s, c),
        Command::Pca(PcaCmd::Apply(c)) => pca_apply(s, c),
        Command::Gmm(GmmCmd::Fit(c)) => gmm_fit(s, c),
        Command::Encode(c) => encode(s, c),
        Command::Train(c) => train(s, c),
        Command::Eval(c) => eval(s, c),
        Command::Dims(c) => dims(s, c),
        Command::Bench(c) => bench(s, c),
    }
}

fn synth_spec(s: &Settings, a: SynthArgs) -> Result<SynthSpec> {
    let d = SynthSpec::default();
    let spec = SynthSpec {
        num_classes: s.get(a.num_classes, "num-classes", d.num_classes)?,
        videos_per_class: s.get(a.videos_per_class, "videos-per-class", d.videos_per_class)?,
        phases_per_class: s.get(a.phases_per_class, "phases-per-class", d.phases_per_class)?,
        descriptors_per_video: s.get(a.descriptors_per_video, "descriptors-per-video", d.descriptors_per_video)?,
        dim: s.get(a.synth_dim, "synth-dim", d.dim)?,
        spatial_jitter: s.get(a.spatial_jitter, "spatial-jitter", d.spatial_jitter)?,
        temporal_jitter: s.get(a.temporal_jitter, "temporal-jitter", d.temporal_jitter)?,
        reversed_pairs: s.get(a.reversed_pairs, "reversed-pairs", d.reversed_pairs)?,
        noise_sigma: s.get(a.noise_sigma, "noise-sigma", d.noise_sigma)?,
        seed: s.get(a.synth_seed, "synth-seed", d.seed)?,
        groups: s.get(a.groups, "groups", d.groups)?,
    };
    spec.validate()?;
    Ok(spec)
}

fn synth(s: &Settings, c: SynthCmd) -> Result<()> {
    let spec = synth_spec(s, c.spec)?;
    let out = s.path(c.out, "out")?;
    let manifest = generate_dataset(&spec, &out)?;
    let path = out.join("manifest.json");
    write_sidecar(&path, "synth", &spec, None)?;
    say!("wrote {} videos to {}", manifest.entries.len(), path.display());
    Ok(())
}

fn load_dataset(path: &Path) -> Result<LoadedDataset> {
    LoadedDataset::load(DatasetManifest::load(path)?)
}

fn channel_sets(data: &LoadedDataset, channel: usize) -> Result<Vec<&VideoDescriptorSet>> {
    if channel >= data.channel_count() {
        return Err(Error::InvalidConfig(format!(
            "channel {channel} out of range; manifest has {}",
            data.channel_count()
        )));
    }
    Ok(data.videos.iter().map(|v| &v[channel]).collect())
}

#[derive(Serialize)]
struct PcaFitConfig {
    output_dim: usize,
    rootsift: bool,
    sample_count: usize,
    seed: u64,
    channel: usize,
}

fn pca_fit_cmd(s: &Settings, c: PcaFitCmd) -> Result<()> {
    let manifest = s.path(c.manifest, "manifest")?;
    let out = s.path(c.out, "out")?;
    let data = load_dataset(&manifest)?;
    let channel = s.get(c.channel, "channel", 0)?;
    let sets = channel_sets(&data, channel)?;
    let input_dim = sets.first().map_or(0, |v| v.dim());
    let cfg = PcaFitConfig {
        output_dim: s.get(c.pca_dim, "pca-dim", halved_dim(input_dim))?,
        rootsift: s.switch(c.rootsift, "rootsift")?,
        sample_count: s.get(c.sample_count, "sample-count", GmmTrainConfig::default().sample_count)?,
        seed: s.get(c.seed, "seed", 0)?,
        channel,
    };
    let sample = sample_from_sets(&sets, cfg.sample_count, cfg.seed)?;
    let points: Vec<Vec<f64>> = sample
        .into_iter()
        .map(|d| if cfg.rootsift { rootsift_transform(&d.phi) } else { d.phi })
        .collect();
    let model = pca_fit(&points, cfg.output_dim)?;
    ensure_parent(&out)?;
    model.save(&out)?;
    write_sidecar(&out, "pca-fit", &cfg, None)?;
    say!("PCA {} -> {} written to {}", model.input_dim, model.output_dim, out.display());
    Ok(())
}

fn pca_apply(s: &Settings, c: PcaApplyCmd) -> Result<()> {
    let model_path = s.path(c.model, "model")?;
    let input = s.path(c.input, "input")?;
    let out = s.path(c.out, "out")?;
    let rootsift = s.switch(c.rootsift, "rootsift")?;
    let model = PcaModel::load(&model_path)?;
    let set = read_video_file(&input)?;
    let descriptors = set
        .descriptors
        .iter()
        .map(|d| {
            let phi: Vec<f64> = d.phi.iter().map(|&x| x as f64).collect();
            let phi = if rootsift { rootsift_transform(&phi) } else { phi };
            Ok(LocalDescriptor {
                x: d.x,
                y: d.y,
                t: d.t,
                phi: model.transform(&phi)?.into_iter().map(|v| v as f32).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let header = VideoHeader::new(set.header.width, set.header.height, set.header.frames, model.output_dim as u32)?;
    ensure_parent(&out)?;
    write_video_file(&VideoDescriptorSet::new(header, descriptors)?, &out)?;
    write_sidecar(&out, "pca-apply", &json!({ "rootsift": rootsift, "output_dim": model.output_dim }), None)?;
    Ok(())
}

#[derive(Serialize)]
struct GmmFitConfig {
    gmm: GmmTrainConfig,
    encoder: EncoderConfig,
    pca: bool,
    channel: usize,
}

fn gmm_fit(s: &Settings, c: GmmFitCmd) -> Result<()> {
    let manifest = s.path(c.manifest, "manifest")?;
    let out = s.path(c.out, "out")?;
    let pca = s.opt_path(c.pca, "pca")?.map(PcaModel::load).transpose()?;
    let d = GmmTrainConfig::default();
    let gmm = GmmTrainConfig {
        k: s.get(c.k, "k", d.k)?,
        max_iter: s.get(c.max_iter, "max-iter", d.max_iter)?,
        rel_tol: s.get(c.rel_tol, "rel-tol", d.rel_tol)?,
        seed: s.get(c.seed, "seed", d.seed)?,
        variance_floor: s.opt(c.variance_floor, "variance-floor")?,
        weight_floor: s.get(c.weight_floor, "weight-floor", d.weight_floor)?,
        sample_count: s.get(c.sample_count, "sample-count", d.sample_count)?,
    };
    gmm.validate()?;
    let encoder = EncoderConfig {
        rootsift: s.switch(c.rootsift, "rootsift")?,
        sted: s.switch(c.sted, "sted")?,
        location_scale: s.get(c.location_scale, "location-scale", 1.0)?,
        ..EncoderConfig::default()
    };
    encoder.validate()?;
    let cfg = GmmFitConfig {
        gmm,
        encoder,
        pca: pca.is_some(),
        channel: s.get(c.channel, "channel", 0)?,
    };
    let data = load_dataset(&manifest)?;
    let sets = channel_sets(&data, cfg.channel)?;
    let sample = sample_from_sets(&sets, cfg.gmm.sample_count, cfg.gmm.seed)?;
    let points = sample
        .iter()
        .map(|d| prepare_descriptor(&d.phi, d.location, pca.as_ref(), &cfg.encoder))
        .collect::<Result<Vec<_>>>()?;
    let fit = gmm_fit_em(&points, &cfg.gmm)?;
    ensure_parent(&out)?;
    fit.model.save(&out)?;
    let extra = json!({
        "iterations": fit.iterations,
        "converged": fit.converged,
        "log_likelihood": fit.log_likelihood,
    });
    write_sidecar(&out, "gmm-fit", &cfg, Some(extra))?;
    say!(
        "GMM K={} dim={} after {} iterations (avg log-likelihood {:.6}) written to {}",
        fit.model.k,
        fit.model.dim,
        fit.iterations,
        fit.log_likelihood.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EncodeConfig {
    encoder: EncoderConfig,
    pyramid: PyramidSpec,
    pca: bool,
    channel: usize,
}

fn encode(s: &Settings, c: EncodeCmd) -> Result<()> {
    let pyramid: PyramidSpec = s.get(c.pyramid, "pyramid", "1x1x1".to_string())?.parse()?;
    let encoder = EncoderConfig {
        rootsift: s.switch(c.rootsift, "rootsift")?,
        sted: s.switch(c.sted, "sted")?,
        location_scale: s.get(c.location_scale, "location-scale", 1.0)?,
        power_alpha: s.get(c.power_alpha, "power-alpha", 0.5)?,
    };
    encoder.validate()?;
    encoder.check_pyramid(&pyramid)?;
    let gmm = GmmModel::load(s.path(c.gmm, "gmm")?)?;
    let pca = s.opt_path(c.pca, "pca")?.map(PcaModel::load).transpose()?;
    let out = s.path(c.out, "out")?;
    let cfg = EncodeConfig {
        encoder,
        pyramid,
        pca: pca.is_some(),
        channel: s.get(c.channel, "channel", 0)?,
    };
    let input = s.opt_path(c.input, "input")?;
    let manifest = s.opt_path(c.manifest, "manifest")?;
    ensure_parent(&out)?;
    match (input, manifest) {
        (Some(input), None) => {
            let set = read_video_file(&input)?;
            let enc = encode_video(&set, &gmm, pca.as_ref(), &cfg.encoder, &cfg.pyramid)?;
            write_fvec(&out, &enc.values)?;
            write_sidecar(&out, "encode", &cfg, None)?;
            say!("encoded {} descriptors into {} values", set.len(), enc.values.len());
        }
        (None, Some(manifest)) => {
            let data = load_dataset(&manifest)?;
            let sets = channel_sets(&data, cfg.channel)?;
            let rows = sets
                .par_iter()
                .map(|set| encode_video(set, &gmm, pca.as_ref(), &cfg.encoder, &cfg.pyramid).map(|e| e.values))
                .collect::<Result<Vec<_>>>()?;
            let matrix = FeatureMatrix::from_rows(&rows)?;
            matrix.save(&out)?;
            write_sidecar(&out, "encode", &cfg, Some(row_meta(&data.manifest, None)))?;
            say!("encoded {} videos into a {}x{} matrix", matrix.rows, matrix.rows, matrix.cols);
        }
        _ => {
            return Err(Error::InvalidConfig("give exactly one of --input or --manifest".into()));
        }
    }
    Ok(())
}

fn row_meta(manifest: &DatasetManifest, rows: Option<&[usize]>) -> Value {
    let pick = |f: &dyn Fn(usize) -> String| -> Vec<String> {
        match rows {
            Some(r) => r.iter().map(|&i| f(i)).collect(),
            None => (0..manifest.entries.len()).map(f).collect(),
        }
    };
    json!({
        "row_ids": pick(&|i| manifest.entries[i].id.clone()),
        "row_labels": pick(&|i| manifest.entries[i].label.clone()),
    })
}

/// Row ids recorded next to a feature matrix, if any.
fn recorded_row_ids(features: &Path) -> Result<Option<Vec<String>>> {
    let meta = sidecar_path(features);
    if !meta.exists() {
        return Ok(None);
    }
    let v: Value = read_json(&meta)?;
    Ok(v.get("row_ids")
        .and_then(|ids| serde_json::from_value(ids.clone()).ok()))
}

/// Label index of every matrix row, matched through recorded row ids when present.
fn row_labels(manifest: &DatasetManifest, features: &Path, rows: usize) -> Result<Vec<usize>> {
    let entries: Vec<usize> = match recorded_row_ids(features)? {
        Some(ids) => ids
            .iter()
            .map(|id| {
                manifest
                    .entries
                    .iter()
                    .position(|e| &e.id == id)
                    .ok_or_else(|| Error::Manifest(format!("row id {id:?} not in manifest")))
            })
            .collect::<Result<_>>()?,
        None => (0..manifest.entries.len()).collect(),
    };
    if entries.len() != rows {
        return Err(Error::DimensionMismatch {
            expected: entries.len(),
            actual: rows,
        });
    }
    Ok(entries
        .iter()
        .map(|&i| manifest.label_index(&manifest.entries[i].label).expect("validated manifest"))
        .collect())
}

fn svm_opts(s: &Settings, a: SvmArgs) -> Result<SvmTrainOpts> {
    let d = SvmTrainOpts::default();
    let opts = SvmTrainOpts {
        c: s.get(a.c, "c", d.c)?,
        tol: s.get(a.svm_tol, "svm-tol", d.tol)?,
        max_epochs: s.get(a.max_epochs, "max-epochs", d.max_epochs)?,
    };
    opts.validate()?;
    Ok(opts)
}

#[derive(Serialize, Deserialize)]
struct SavedModel {
    config_digest: String,
    model: LinearOvaModel,
}

fn train(s: &Settings, c: TrainCmd) -> Result<()> {
    let features_path = s.path(c.features, "features")?;
    let manifest = DatasetManifest::load(s.path(c.manifest, "manifest")?)?;
    let out = s.path(c.out, "out")?;
    let opts = svm_opts(s, c.svm)?;
    let features = FeatureMatrix::load(&features_path)?;
    let labels = row_labels(&manifest, &features_path, features.rows)?;
    let model = svm_train_ova(&features, &labels, &manifest.label_set, &opts)?;
    ensure_parent(&out)?;
    let digest = digest_of("train", &opts);
    write_json(&out, &SavedModel { config_digest: digest, model })?;
    write_sidecar(&out, "train", &opts, None)?;
    say!("trained {} one-vs-all classifiers on {} rows", manifest.label_set.len(), features.rows);
    Ok(())
}

fn pipeline_config(s: &Settings, a: PipelineArgs, defaults: PipelineConfig) -> Result<PipelineConfig> {
    let pca = match s.opt(a.pca_dim, "pca-dim")? {
        None => defaults.pca,
        Some(0) => PcaChoice::Off,
        Some(d) => PcaChoice::Dim(d),
    };
    let g = defaults.gmm;
    let cfg = PipelineConfig {
        pca,
        rootsift: s.switch(a.rootsift, "rootsift")? || defaults.rootsift,
        gmm: GmmTrainConfig {
            k: s.get(a.k, "k", g.k)?,
            max_iter: s.get(a.max_iter, "max-iter", g.max_iter)?,
            rel_tol: s.get(a.rel_tol, "rel-tol", g.rel_tol)?,
            seed: s.get(a.seed, "seed", g.seed)?,
            sample_count: s.get(a.sample_count, "sample-count", g.sample_count)?,
            ..g
        },
        power_alpha: s.get(a.power_alpha, "power-alpha", defaults.power_alpha)?,
        svm: svm_opts(s, a.svm)?,
    };
    cfg.gmm.validate()?;
    Ok(cfg)
}

fn parse_metric(s: &Settings, flag: Option<String>) -> Result<Metric> {
    s.get(flag, "metric", "macc".to_string())?.parse()
}

fn eval(s: &Settings, c: EvalCmd) -> Result<()> {
    let protocol = match s.opt(c.protocol.map(|p| format!("{p:?}").to_lowercase()), "protocol")? {
        None => Protocol::Split,
        Some(p) if p == "split" => Protocol::Split,
        Some(p) if p == "logo" => Protocol::Logo,
        Some(p) => return Err(Error::InvalidConfig(format!("unknown protocol {p:?}"))),
    };
    let metric = parse_metric(s, c.metric)?;
    let manifest_path = s.path(c.manifest, "manifest")?;
    let report = match protocol {
        Protocol::Split => {
            let manifest = DatasetManifest::load(&manifest_path)?;
            let saved: SavedModel = read_json(&s.path(c.model, "model")?)?;
            let features_path = s.path(c.features, "features")?;
            let features = FeatureMatrix::load(&features_path)?;
            let truths = row_labels(&manifest, &features_path, features.rows)?;
            if saved.model.class_labels != manifest.label_set {
                return Err(Error::Manifest("model labels differ from the manifest label set".into()));
            }
            let scores = features
                .iter_rows()
                .map(|x| saved.model.predict_scores(x))
                .collect::<Result<Vec<_>>>()?;
            let predictions: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
            let report = score_split(metric, &scores, &predictions, &truths, &manifest.label_set)?;
            let digest = digest_of("eval-split", &json!({ "metric": metric, "model": saved.config_digest }));
            report.with_digest(digest)
        }
        Protocol::Logo => {
            let method: Method = s.get(c.method, "method", "baseline".to_string())?.parse()?;
            let cfg = pipeline_config(s, c.pipeline, PipelineConfig::default())?;
            let data = load_dataset(&manifest_path)?;
            let out = leave_one_group_out(&data, &cfg, &method, metric)?;
            let digest = digest_of("eval-logo", &json!({ "metric": metric, "method": method, "pipeline": cfg }));
            out.report.with_digest(digest)
        }
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    say!("{text}");
    if let Some(out) = s.opt_path(c.out, "out")? {
        ensure_parent(&out)?;
        write_json(&out, &report)?;
    }
    Ok(())
}

fn dims(s: &Settings, c: DimsCmd) -> Result<()> {
    let dim = s.require(c.dim, "dim")?;
    let k = s.require(c.k, "k")?;
    let sted = s.switch(c.sted, "sted")?;
    let pyramid: PyramidSpec = s.get(c.pyramid, "pyramid", "1x1x1".to_string())?.parse()?;
    let channels = s.get(c.channels, "channels", 1)?;
    if dim == 0 || k == 0 || channels == 0 {
        return Err(Error::InvalidConfig("dim, k and channels must be positive".into()));
    }
    if sted && !pyramid.is_trivial() {
        return Err(Error::InvalidConfig(format!(
            "space-time extended descriptors use the single 1x1x1 cell, got pyramid {pyramid}"
        )));
    }
    say!("{}", representation_dim(dim, k, &pyramid, sted, channels));
    Ok(())
}

fn parse_list<T>(text: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    text.split(',').map(str::trim).filter(|t| !t.is_empty()).map(f).collect()
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    parse_list(text, |p| {
        p.split_once(':')
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .ok_or_else(|| Error::InvalidConfig(format!("pair {p:?} is not <label>:<label>")))
    })
}

fn bench(s: &Settings, c: BenchCmd) -> Result<()> {
    let out = s.path(c.out, "out")?;
    let methods = parse_list(
        &s.get(c.methods, "methods", "baseline,stp:2,stp:4,stp:8,sted".to_string())?,
        |m| m.parse::<Method>(),
    )?;
    let metric = parse_metric(s, c.metric)?;
    let split = match s.get(c.split, "split", "logo".to_string())?.as_str() {
        "logo" => SplitScheme::LeaveOneGroupOut,
        other => match other.strip_prefix("group:") {
            Some(g) => SplitScheme::HoldOutGroup(g.to_string()),
            None => return Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        },
    };
    let pipeline = pipeline_config(s, c.pipeline, PipelineConfig::desk_scale())?;
    let explicit_pairs = s.opt(c.pairs, "pairs")?.map(|p| parse_pairs(&p)).transpose()?;

    let (manifest_path, synth) = match s.opt_path(c.manifest, "manifest")? {
        Some(p) => (p, None),
        None => {
            let spec = synth_spec(s, c.synth)?;
            let dir = out.join("data");
            generate_dataset(&spec, &dir)?;
            (dir.join("manifest.json"), Some(spec))
        }
    };
    let pairs = match (explicit_pairs, &synth) {
        (Some(p), _) => p,
        (None, Some(spec)) => spec.reversed_pair_labels(),
        (None, None) => Vec::new(),
    };
    let config = ExperimentConfig {
        methods,
        pipeline,
        split,
        metric,
        pairs,
    };
    let data = load_dataset(&manifest_path)?;
    let outcome = run_experiment(&config, &data)?;
    let resolved = json!({ "experiment": config, "synth": synth });
    let digest = digest_of("bench", &resolved);
    let mut report = outcome.report;
    report.config_digest = digest.clone();

    let enc_dir = out.join("encodings");
    for (method, folds) in config.methods.iter().zip(&outcome.folds) {
        let dir = enc_dir.join(method.slug());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for fold in folds {
            let name = if fold.held_out.is_empty() { "split".to_string() } else { fold.held_out.clone() };
            for (part, matrix, rows) in [
                ("train", &fold.train_features, &fold.train_indices),
                ("test", &fold.test_features, &fold.test_indices),
            ] {
                let path: PathBuf = dir.join(format!("{name}-{part}.fmat"));
                matrix.save(&path)?;
                write_sidecar(&path, "bench", &resolved, Some(row_meta(&data.manifest, Some(rows))))?;
            }
        }
    }
    write_json(&out.join("report.json"), &report)?;
    write_json(&out.join("timings.json"), &outcome.timings)?;
    let table = format_table(&report, Some(&outcome.timings));
    fs::write(out.join("table.txt"), &table).map_err(|e| Error::io(out.join("table.txt"), e))?;
    say!("{}", table.trim_end());
    say!("config digest {digest}");
    Ok(())
}
