use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn stfv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stfv")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn dims_reproduces_reference_sizes() {
    let o = stfv(&["dims", "--dim", "426", "--k", "256", "--pyramid", "1x1x1,1x1x3,2x2x1,2x2x3"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).trim(), "4362240");
    let o = stfv(&["dims", "--dim", "426", "--k", "256", "--sted"]);
    assert_eq!(stdout(&o).trim(), "219648");
    let o = stfv(&["dims", "--dim", "100", "--k", "8", "--channels", "3"]);
    assert_eq!(stdout(&o).trim(), "4800");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&stfv(&["dims", "--nope"])), 1);
    assert_eq!(code(&stfv(&["frobnicate"])), 1);
    assert_eq!(code(&stfv(&["dims", "--k", "4"])), 1);
    let o = stfv(&["encode", "--sted", "--pyramid", "2x2x2", "--gmm", "g", "--input", "i", "--out", "o"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("1x1x1"));
    assert_eq!(code(&stfv(&["dims", "--dim", "4", "--k", "2", "--pyramid", "2x2"])), 1);
}

#[test]
fn help_exists_for_every_subcommand() {
    for sub in [
        vec!["synth"],
        vec!["pca", "fit"],
        vec!["pca", "apply"],
        vec!["gmm", "fit"],
        vec!["encode"],
        vec!["train"],
        vec!["eval"],
        vec!["dims"],
        vec!["bench"],
    ] {
        let mut args = sub.clone();
        args.push("--help");
        let o = stfv(&args);
        assert_eq!(code(&o), 0, "{sub:?}");
        assert!(stdout(&o).contains("Usage"));
    }
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.bin");
    fs::write(&bad, b"nonsense").unwrap();
    let o = stfv(&["pca", "apply", "--model", p(&bad), "--input", p(&bad), "--out", p(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    let o = stfv(&["train", "--features", p(&bad), "--manifest", p(&dir.path().join("missing.json")), "--out", "x"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_file_keys_apply_below_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{ "dim": 426, "k": 256, "sted": true }"#).unwrap();
    let o = stfv(&["--config", p(&cfg), "dims"]);
    assert_eq!(stdout(&o).trim(), "219648");
    let o = stfv(&["--config", p(&cfg), "dims", "--k", "128"]);
    assert_eq!(stdout(&o).trim(), "109824");
    fs::write(&cfg, r#"{ "k": "many" }"#).unwrap();
    assert_eq!(code(&stfv(&["--config", p(&cfg), "dims", "--dim", "4"])), 1);
}

#[test]
fn end_to_end_artifacts_carry_digests() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let run = |args: &[&str]| {
        let o = stfv(args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    run(&["synth", "--out", p(&data), "--videos-per-class", "6", "--descriptors-per-video", "40"]);
    let manifest = data.join("manifest.json");
    let pca = d.join("pca.bin");
    let gmm = d.join("gmm.bin");
    let fmat = d.join("feat.fmat");
    let model = d.join("model.json");
    run(&["pca", "fit", "--manifest", p(&manifest), "--out", p(&pca), "--sample-count", "500"]);
    run(&["gmm", "fit", "--manifest", p(&manifest), "--pca", p(&pca), "--k", "4", "--sample-count", "500", "--out", p(&gmm)]);
    run(&["encode", "--gmm", p(&gmm), "--pca", p(&pca), "--manifest", p(&manifest), "--pyramid", "1x1x1,2x2x2", "--out", p(&fmat)]);
    run(&["train", "--features", p(&fmat), "--manifest", p(&manifest), "--out", p(&model)]);
    let o = run(&["eval", "--protocol", "split", "--model", p(&model), "--features", p(&fmat), "--manifest", p(&manifest)]);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["protocol"], "mean-accuracy");
    assert_eq!(report["config_digest"].as_str().unwrap().len(), 64);

    for artifact in [&manifest, &pca, &gmm, &fmat, &model] {
        let meta = fs::read_to_string(format!("{}.meta.json", artifact.display())).unwrap();
        let v: serde_json::Value = serde_json::from_str(&meta).unwrap();
        assert_eq!(v["config_digest"].as_str().unwrap().len(), 64, "{}", artifact.display());
    }
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(format!("{}.meta.json", fmat.display())).unwrap()).unwrap();
    assert_eq!(meta["row_ids"].as_array().unwrap().len(), 24);

    // Identical config, identical bytes and digest; thread count does not matter.
    let gmm2 = d.join("gmm2.bin");
    run(&["--threads", "3", "gmm", "fit", "--manifest", p(&manifest), "--pca", p(&pca), "--k", "4", "--sample-count", "500", "--out", p(&gmm2)]);
    assert_eq!(fs::read(&gmm).unwrap(), fs::read(&gmm2).unwrap());
    let digest = |path: &Path| -> String {
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(format!("{}.meta.json", path.display())).unwrap()).unwrap();
        v["config_digest"].as_str().unwrap().to_string()
    };
    assert_eq!(digest(&gmm), digest(&gmm2));

    let one = d.join("one.fvec");
    run(&["encode", "--gmm", p(&gmm), "--pca", p(&pca), "--input", p(&data.join("videos/c0_v0.bin")), "--out", p(&one)]);
    assert_eq!(fs::metadata(&one).unwrap().len() as usize, 4 + 4 + 8 + 4 * 2 * 4 * 4);
}

#[test]
fn logo_eval_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = stfv(&["synth", "--out", p(&data), "--videos-per-class", "6", "--descriptors-per-video", "40"]);
    assert_eq!(code(&o), 0);
    let report = dir.path().join("r.json");
    let o = stfv(&[
        "eval", "--protocol", "logo", "--manifest", p(&data.join("manifest.json")), "--method", "sted",
        "--k", "4", "--sample-count", "1000", "--metric", "map", "--out", p(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["protocol"], "leave-one-group-out/mean-average-precision");
    assert_eq!(v["per_class"].as_array().unwrap().len(), 2);
}
