use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::Value;
use specast_cli::heatmap::read_pgm;

fn specast(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specast"))
        .args(args)
        .env("SPECAST_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn outcome(o: &Output) -> Value {
    assert!(
        o.status.success(),
        "exit {:?}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    serde_json::from_slice(&o.stdout).unwrap()
}

#[rustfmt::skip]
const TINY: &[&str] = &[
    "--history-len", "2", "--k-max", "2", "--d-latent", "4", "--n-experts", "2", "--n-bands", "2",
    "--n-prompts", "2", "--d-model", "16", "--n-layers", "1", "--n-heads", "2", "--batch-size", "16",
    "--quiet",
];

fn synth(root: &Path, steps: &str) -> PathBuf {
    let out = root.join("data");
    let o = specast(
        root,
        &[
            "synth",
            "--out",
            out.to_str().unwrap(),
            "--n-lat",
            "8",
            "--n-lon",
            "16",
            "--n-steps",
            steps,
        ],
    );
    PathBuf::from(outcome(&o)["out"].as_str().unwrap())
}

fn train(root: &Path, data: &Path, out: &str, extra: &[&str]) -> Value {
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", out];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    outcome(&specast(root, &args))
}

#[test]
fn synth_is_deterministic_and_refuses_overwrite() {
    let root = tempfile::tempdir().unwrap();
    let manifest = synth(root.path(), "40");
    let first = fs::read(manifest.with_file_name("synthetic.grd1")).unwrap();

    let again = specast(
        root.path(),
        &[
            "synth",
            "--out",
            root.path().join("data").to_str().unwrap(),
            "--n-lat",
            "8",
            "--n-lon",
            "16",
            "--n-steps",
            "40",
        ],
    );
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("already exists"));

    let forced = specast(
        root.path(),
        &[
            "synth",
            "--force",
            "--out",
            root.path().join("data").to_str().unwrap(),
            "--n-lat",
            "8",
            "--n-lon",
            "16",
            "--n-steps",
            "40",
        ],
    );
    outcome(&forced);
    assert_eq!(
        fs::read(manifest.with_file_name("synthetic.grd1")).unwrap(),
        first
    );

    let m: Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 16);
    specast::Dataset::load(&manifest).unwrap();
}

#[test]
fn train_smoke_resume_and_flags() {
    let root = tempfile::tempdir().unwrap();
    let data = synth(root.path(), "300");
    let run = root.path().join("run");
    let t = Instant::now();
    let first = train(root.path(), &data, run.to_str().unwrap(), &["--epochs", "2"]);
    assert!(t.elapsed().as_secs() < 60);
    let hash = first["config_hash"].as_str().unwrap().to_string();
    for f in ["last.ckpt", "best.ckpt", "train_log.jsonl", "config.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert!(log.lines().all(|l| l.contains(&hash)));

    let ckpt = run.join("last.ckpt");
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--resume",
        ckpt.to_str().unwrap(),
        "--epochs",
        "3",
        "--quiet",
    ];
    let resumed = outcome(&specast(root.path(), &args));
    assert_eq!(resumed["config_hash"], hash.as_str());
    assert_eq!(resumed["summary"]["epochs"], 3);
    assert_eq!(
        fs::read_to_string(run.join("train_log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    // model settings are fixed on resume
    args.extend(["--d-model", "32"]);
    assert_eq!(specast(root.path(), &args).status.code(), Some(1));

    let no_fft = train(
        root.path(),
        &data,
        root.path().join("nofft").to_str().unwrap(),
        &["--epochs", "1", "--no-fft"],
    );
    assert_ne!(no_fft["config_hash"], hash.as_str());
    let cfg: Value =
        serde_json::from_str(&fs::read_to_string(root.path().join("nofft/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["model"]["use_fft"], false);
    assert_eq!(cfg["config_hash"], no_fft["config_hash"]);
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let root = tempfile::tempdir().unwrap();
    let data = synth(root.path(), "120");
    let cfg = root.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"model": {"d_model": 32, "mlp_ratio": 3}, "train": {"epochs": 1, "learning_rate": 0.002}}"#,
    )
    .unwrap();
    let out = root.path().join("run");
    train(
        root.path(),
        &data,
        out.to_str().unwrap(),
        &["--config", cfg.to_str().unwrap(), "--lr", "0.0005"],
    );
    let written: Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    // --d-model 16 from TINY beats the file; mlp_ratio comes from the file
    assert_eq!(written["model"]["d_model"], 16);
    assert_eq!(written["model"]["mlp_ratio"], 3);
    assert_eq!(written["train"]["learning_rate"], 0.0005);
    assert_eq!(written["train"]["epochs"], 1);

    fs::write(&cfg, r#"{"modle": {}}"#).unwrap();
    let bad = specast(
        root.path(),
        &[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
        ],
    );
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn eval_writes_report_and_maps() {
    let root = tempfile::tempdir().unwrap();
    let data = synth(root.path(), "200");
    let run = root.path().join("run");
    let trained = train(root.path(), &data, run.to_str().unwrap(), &["--epochs", "1"]);
    let hash = trained["config_hash"].as_str().unwrap();

    // no --out: lands under the output root, named by time and hash
    let o = specast(
        root.path(),
        &[
            "eval",
            "--checkpoint",
            run.join("best.ckpt").to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--lead-hours",
            "6,12",
            "--case",
            "0,2",
            "--variable",
            "z",
        ],
    );
    let ev = outcome(&o);
    let out = PathBuf::from(ev["out"].as_str().unwrap());
    assert!(out.starts_with(root.path()));
    assert!(out
        .file_name()
        .unwrap()
        .to_str()
        .unwrap()
        .ends_with(&format!("eval-{hash}")));

    let report: specast::EvalReport =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.model_id, hash);
    for e in &report.entries {
        if let Some(a) = e.acc {
            assert!((-1.0..=1.0).contains(&a));
        }
    }
    assert!(report.get("persistence", "t2m", 1).is_some());
    assert!(report.get("model", "t", 2).is_some());
    assert!(fs::read_to_string(out.join("report.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .all(|l| l.starts_with(hash)));

    for case in [0, 2] {
        for kind in ["truth_t0", "truth_t1", "pred_t1", "truth_diff", "pred_error"] {
            let stem = out.join("maps").join(format!("case{case}_{kind}"));
            let bytes = fs::read(stem.with_extension("pgm")).unwrap();
            let (w, h, _) = read_pgm(&bytes).expect("valid pgm");
            assert_eq!((w, h), (16, 8));
            assert!(String::from_utf8_lossy(&bytes[..40]).contains(hash));
            let side: Value =
                serde_json::from_str(&fs::read_to_string(stem.with_extension("json")).unwrap()).unwrap();
            assert_eq!(side["variable"], "z");
            assert!(side["min"].as_f64().unwrap() <= side["max"].as_f64().unwrap());
        }
    }
}

#[test]
fn eval_error_exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let data = synth(root.path(), "120");
    let missing = specast(
        root.path(),
        &[
            "eval",
            "--checkpoint",
            "/nonexistent.ckpt",
            "--data",
            data.to_str().unwrap(),
        ],
    );
    assert_eq!(missing.status.code(), Some(1));

    let run = root.path().join("run");
    train(root.path(), &data, run.to_str().unwrap(), &["--epochs", "1"]);
    let ckpt = run.join("best.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0xff;
    fs::write(&ckpt, bytes).unwrap();
    let corrupt = specast(
        root.path(),
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
        ],
    );
    assert_eq!(corrupt.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&corrupt.stderr).contains("corrupt checkpoint"));
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_gradient() {
    let root = tempfile::tempdir().unwrap();
    let ok = outcome(&specast(
        root.path(),
        &["gradcheck", "--out", root.path().join("ok").to_str().unwrap()],
    ));
    assert_eq!(ok["summary"]["precision"], "f64");
    assert_eq!(ok["summary"]["groups"].as_array().unwrap().len(), 6);

    let bad = specast(
        root.path(),
        &[
            "gradcheck",
            "--out",
            root.path().join("bad").to_str().unwrap(),
            "--corrupt-param",
            "head.w",
            "--samples-per-group",
            "1000",
        ],
    );
    assert_eq!(bad.status.code(), Some(1));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(root.path().join("bad/gradcheck.json")).unwrap()).unwrap();
    let head = report["report"]["groups"]
        .as_array()
        .unwrap()
        .iter()
        .find(|g| g["group"] == "head")
        .unwrap()
        .clone();
    assert_eq!(head["passed"], false);
}

#[test]
fn prop1_report_carries_the_note() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("p");
    let o = outcome(&specast(
        root.path(),
        &[
            "prop1",
            "--out",
            out.to_str().unwrap(),
            "--count",
            "50",
            "--sizes",
            "8",
        ],
    ));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("prop1.json")).unwrap()).unwrap();
    assert_eq!(report["config_hash"], o["config_hash"]);
    assert_eq!(report["report"]["note"], specast::spectral::PROP1_AMBIGUITY_NOTE);
    assert!(report["report"]["max_roundtrip_error"].as_f64().unwrap() <= 1e-9);
    assert_eq!(report["report"]["fields"].as_array().unwrap().len(), 50);
}

#[test]
fn bad_usage_exits_with_one() {
    let root = tempfile::tempdir().unwrap();
    assert_eq!(specast(root.path(), &["train"]).status.code(), Some(1));
    assert_eq!(specast(root.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(specast(root.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(
        specast(root.path(), &["prop1", "--sizes", "1"]).status.code(),
        Some(1)
    );
}
