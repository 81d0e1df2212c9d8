use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rq(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rq"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("failed to run rq")
}

fn ok(args: &[&str], out: &Path) -> String {
    let o = rq(args, out);
    assert!(
        o.status.success(),
        "rq {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Setup {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
}

fn setup() -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    ok(&["synth", "--count", "8", "--size", "16", "--seed", "5"], &data);
    Setup { _dir: dir, root, data }
}

fn stage1(s_: &Setup, name: &str, seed: &str) -> PathBuf {
    let out = s_.root.join(name);
    ok(
        &[
            "train-stage1",
            "--data",
            s(&s_.data),
            "-k",
            "16",
            "-d",
            "2",
            "--epochs",
            "2",
            "--seed",
            seed,
        ],
        &out,
    );
    out
}

#[test]
fn missing_images_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = rq(&["train-stage1", "--data", s(&empty)], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no input images"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 1, "bogus": 2}"#).unwrap();
    let o = rq(&["selftest", "--config", s(&cfg)], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stage1_is_reproducible() {
    let st = setup();
    let a = stage1(&st, "a", "3");
    let b = stage1(&st, "b", "3");
    for f in ["codebook.rqcb", "codec.rqpc", "stage1.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(a.join("run_config.json").exists());
}

#[test]
fn encode_decode_and_codebook_mismatch() {
    let st = setup();
    let a = stage1(&st, "a", "3");
    let b = stage1(&st, "b", "4");
    let img = st
        .data
        .read_dir()
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().unwrap() == "ppm")
        .unwrap();
    let enc = st.root.join("enc");
    let report: serde_json::Value = serde_json::from_str(&ok(&["encode", s(&img), "--stage1", s(&a)], &enc)).unwrap();
    let mse = report["mse"].as_array().unwrap();
    assert_eq!(mse.len(), 2);
    let codes = PathBuf::from(report["codes"].as_str().unwrap());
    let map = rq_core::CodeStackMap::from_bytes(&fs::read(&codes).unwrap()).unwrap();
    assert_eq!((map.height, map.width, map.depth()), (4, 4, 2));

    let dec = st.root.join("dec");
    let path = ok(&["decode", s(&codes), "--stage1", s(&a)], &dec);
    let decoded = fs::read(path.trim()).unwrap();
    let stem = codes.file_stem().unwrap().to_str().unwrap();
    assert_eq!(decoded, fs::read(enc.join(format!("{stem}.d2.ppm"))).unwrap());

    let o = rq(&["decode", s(&codes), "--stage1", s(&b)], &dec);
    assert_eq!(o.status.code(), Some(4));

    fs::copy(b.join("codebook.rqcb"), a.join("codebook.rqcb")).unwrap();
    let o = rq(&["encode", s(&img), "--stage1", s(&a)], &enc);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mismatch"));
}

fn train_ar(st: &Setup, stage1: &Path, name: &str) -> PathBuf {
    let out = st.root.join(name);
    ok(
        &[
            "train-ar",
            "--stage1",
            s(stage1),
            "--data",
            s(&st.data),
            "--steps",
            "15",
            "--batch-size",
            "4",
            "--n-spatial",
            "1",
            "--n-depth",
            "1",
            "--n-e",
            "16",
            "--heads",
            "2",
            "--soft-label",
            "0.5",
            "--stochastic",
            "0.5",
            "--seed",
            "9",
        ],
        &out,
    );
    out
}

#[test]
fn train_ar_and_sample() {
    let st = setup();
    let a = stage1(&st, "a", "3");
    let m1 = train_ar(&st, &a, "ar1");
    let m2 = train_ar(&st, &a, "ar2");
    assert_eq!(
        fs::read(m1.join("model.rqtm")).unwrap(),
        fs::read(m2.join("model.rqtm")).unwrap()
    );
    let metrics = fs::read_to_string(m1.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 15);

    let model = m1.join("model.rqtm");
    let mut runs = Vec::new();
    for (name, threads) in [("s1", "1"), ("s2", "2")] {
        let out = st.root.join(name);
        ok(
            &[
                "sample",
                "--model",
                s(&model),
                "--stage1",
                s(&a),
                "--count",
                "3",
                "--top-k",
                "1",
                "--threads",
                threads,
            ],
            &out,
        );
        runs.push(
            (0..3)
                .map(|i| fs::read(out.join(format!("sample_{i:04}.ppm"))).unwrap())
                .collect::<Vec<_>>(),
        );
    }
    assert_eq!(runs[0], runs[1]);
    assert!(runs[0].windows(2).all(|w| w[0] == w[1]));

    let b = stage1(&st, "b", "4");
    let o = rq(
        &["sample", "--model", s(&model), "--stage1", s(&b)],
        &st.root.join("s3"),
    );
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn sweep_writes_csv() {
    let st = setup();
    let out = st.root.join("sweep");
    let held = st.root.join("held");
    ok(&["synth", "--count", "4", "--size", "16", "--seed", "6"], &held);
    ok(
        &[
            "sweep",
            "--data",
            s(&st.data),
            "--heldout",
            s(&held),
            "--ks",
            "4,16",
            "--ds",
            "1,2",
            "--epochs",
            "1",
            "--compare-per-depth",
        ],
        &out,
    );
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 16);
    assert!(csv.lines().next().unwrap().contains("bits"));
}

#[test]
fn bench_reports_both_architectures() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["bench", "--batch-sizes", "2", "--images", "2"], dir.path());
    let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("bench.json")).unwrap()).unwrap();
    assert!(v["rq_parameters"].as_u64().unwrap() > 0);
    assert_eq!(v["throughput"].as_array().unwrap().len(), 1);
    assert!(v["model_flops"]["exact_match"].as_bool().unwrap());
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["selftest"], dir.path());
    assert!(out.contains("[PASS]") && !out.contains("[FAIL]"));
}
