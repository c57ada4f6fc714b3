//! End-to-end checks of the binary: exit codes, output layout, and
//! idempotence under a fixed seed.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aga3d"))
}

fn workdir(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn assert_code(out: &Output, code: i32, context: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{context}: stdout={} stderr={}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Snapshot of every file under a directory except the manifest (whose
/// duration field is timing-dependent by design).
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().map(|n| n != "manifest.json").unwrap_or(true) {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn write_phantom_config(dir: &Path) -> PathBuf {
    let path = dir.join("phantom.json");
    fs::write(
        &path,
        r#"{
  "dims": [20, 20, 12],
  "num_regions": 4,
  "region_radius": 3.5,
  "lesion_region": 0,
  "lesion_delta": 3.0,
  "lesion_radius": [1.2, 2.0],
  "positive_prob": 0.5,
  "negative_blob_prob": 1.0,
  "noise_stddev": 0.5,
  "patients": 10,
  "scans_per_patient": [1, 1],
  "seed": 5
}"#,
    )
    .unwrap();
    path
}

fn write_run_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.json");
    fs::write(
        &path,
        r#"{
  "train": {
    "learning_rate": 0.002,
    "batch_size": 4,
    "epochs": 2,
    "lr_floor": 1e-6,
    "patience": 5,
    "fractions": [0.7, 0.15, 0.15],
    "focal": {"alpha_f": 0.25, "gamma": 2.0},
    "tau": 0.07,
    "lambda": 0.5,
    "grounding_k": 1,
    "embed_dim": 16,
    "use_prior": true,
    "threshold": 0.5,
    "net": {
      "input_dims": [20, 20, 12],
      "channels": 4,
      "strides": [2, 2, 2],
      "kernel": 3,
      "d_h": 8,
      "mlstm_depth": 2,
      "embedding_dim": 32,
      "head_hidden": 8,
      "seed": 5
    },
    "prior": {"sigma": 3.0, "fusion": "max"},
    "seed": 5
  },
  "phantom": {
    "dims": [20, 20, 12],
    "num_regions": 4,
    "region_radius": 3.5,
    "lesion_region": 0,
    "lesion_delta": 3.0,
    "lesion_radius": [1.2, 2.0],
    "positive_prob": 0.5,
    "negative_blob_prob": 1.0,
    "noise_stddev": 0.5,
    "patients": 10,
    "scans_per_patient": [1, 1],
    "seed": 5
  }
}"#,
    )
    .unwrap();
    path
}

#[test]
fn synth_prior_ground_are_idempotent() {
    let dir = workdir("idempotence");
    let phantom = write_phantom_config(&dir);

    let synth_a = dir.join("synth_a");
    let synth_b = dir.join("synth_b");
    for out in [&synth_a, &synth_b] {
        let o = run(bin().args([
            "synth",
            "--config",
            phantom.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]));
        assert_code(&o, 0, "synth");
    }
    assert_eq!(snapshot(&synth_a), snapshot(&synth_b), "synth not idempotent");

    let phrases = dir.join("phrases.txt");
    fs::write(&phrases, "hippocampus\nthalamus region\n").unwrap();
    let labels = synth_a.join("scans/scan_0001_labels");

    let prior_a = dir.join("prior_a");
    let prior_b = dir.join("prior_b");
    for out in [&prior_a, &prior_b] {
        let o = run(bin().args([
            "prior",
            "--labels",
            labels.to_str().unwrap(),
            "--phrases",
            phrases.to_str().unwrap(),
            "--k",
            "2",
            "--out",
            out.to_str().unwrap(),
        ]));
        assert_code(&o, 0, "prior");
    }
    assert_eq!(snapshot(&prior_a), snapshot(&prior_b), "prior not idempotent");
    assert!(prior_a.join("prior.json").exists());
    assert!(prior_a.join("prior.raw").exists());
    assert!(prior_a.join("grounding.json").exists());
    assert!(prior_a.join("manifest.json").exists());

    let ground_a = dir.join("ground_a");
    let ground_b = dir.join("ground_b");
    for out in [&ground_a, &ground_b] {
        let o = run(bin().args([
            "ground",
            "--phrases",
            phrases.to_str().unwrap(),
            "--labels",
            labels.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]));
        assert_code(&o, 0, "ground");
    }
    assert_eq!(snapshot(&ground_a), snapshot(&ground_b));
}

#[test]
fn prior_with_empty_phrases_writes_zero_channel() {
    let dir = workdir("empty_phrases");
    let phantom = write_phantom_config(&dir);
    let synth = dir.join("synth");
    assert_code(
        &run(bin().args([
            "synth",
            "--config",
            phantom.to_str().unwrap(),
            "--out",
            synth.to_str().unwrap(),
        ])),
        0,
        "synth",
    );
    let phrases = dir.join("empty.txt");
    fs::write(&phrases, "\n").unwrap();
    let out_dir = dir.join("prior");
    let o = run(bin().args([
        "prior",
        "--labels",
        synth.join("scans/scan_0001_labels").to_str().unwrap(),
        "--phrases",
        phrases.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    assert_code(&o, 0, "prior with empty phrases");
    let raw = fs::read(out_dir.join("prior.raw")).unwrap();
    assert!(raw.chunks_exact(4).all(|c| c == [0, 0, 0, 0]));
}

#[test]
fn exit_codes_follow_the_scheme() {
    let dir = workdir("exit_codes");
    let phantom = write_phantom_config(&dir);
    let synth = dir.join("synth");
    assert_code(
        &run(bin().args([
            "synth",
            "--config",
            phantom.to_str().unwrap(),
            "--out",
            synth.to_str().unwrap(),
        ])),
        0,
        "synth",
    );
    let labels = synth.join("scans/scan_0001_labels");
    let phrases = dir.join("phrases.txt");
    fs::write(&phrases, "hippocampus\n").unwrap();

    // truncated raw payload -> input format error (2)
    let raw_path = labels.with_extension("raw");
    let bytes = fs::read(&raw_path).unwrap();
    fs::write(&raw_path, &bytes[..bytes.len() - 6]).unwrap();
    let o = run(bin().args([
        "prior",
        "--labels",
        labels.to_str().unwrap(),
        "--phrases",
        phrases.to_str().unwrap(),
        "--out",
        dir.join("p1").to_str().unwrap(),
    ]));
    assert_code(&o, 2, "truncated avol");
    fs::write(&raw_path, &bytes).unwrap();

    // missing file -> 2
    let o = run(bin().args([
        "prior",
        "--labels",
        dir.join("nope").to_str().unwrap(),
        "--phrases",
        phrases.to_str().unwrap(),
        "--out",
        dir.join("p2").to_str().unwrap(),
    ]));
    assert_code(&o, 2, "missing labels");

    // degenerate reference extent -> domain error (3)
    let ref_ext = dir.join("ref.json");
    let tgt_ext = dir.join("tgt.json");
    let roi_box = dir.join("box.json");
    fs::write(&ref_ext, r#"{"center":[0,0,0],"sides":[0.0,1.0,1.0]}"#).unwrap();
    fs::write(&tgt_ext, r#"{"center":[0,0,0],"sides":[1.0,1.0,1.0]}"#).unwrap();
    fs::write(&roi_box, r#"{"center":[0,0,0],"sides":[1.0,1.0,1.0]}"#).unwrap();
    let o = run(bin().args([
        "roi-transfer",
        "--ref-extent",
        ref_ext.to_str().unwrap(),
        "--tgt-extent",
        tgt_ext.to_str().unwrap(),
        "--box",
        roi_box.to_str().unwrap(),
        "--out",
        dir.join("roi").to_str().unwrap(),
    ]));
    assert_code(&o, 3, "degenerate extent");

    // malformed JSON -> 2
    fs::write(&ref_ext, "{not json").unwrap();
    let o = run(bin().args([
        "roi-transfer",
        "--ref-extent",
        ref_ext.to_str().unwrap(),
        "--tgt-extent",
        tgt_ext.to_str().unwrap(),
        "--box",
        roi_box.to_str().unwrap(),
        "--out",
        dir.join("roi2").to_str().unwrap(),
    ]));
    assert_code(&o, 2, "malformed extent json");
}

#[test]
fn train_then_eval_produces_metrics_and_plots() {
    let dir = workdir("train_eval");
    let run_cfg = write_run_config(&dir);

    let train_a = dir.join("train_a");
    let train_b = dir.join("train_b");
    for out in [&train_a, &train_b] {
        let o = run(bin().args([
            "train",
            "--config",
            run_cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]));
        assert_code(&o, 0, "train");
    }
    assert_eq!(
        fs::read(train_a.join("checkpoint.agap")).unwrap(),
        fs::read(train_b.join("checkpoint.agap")).unwrap(),
        "training is not byte-deterministic"
    );
    assert_eq!(snapshot(&train_a), snapshot(&train_b));

    let eval_a = dir.join("eval_a");
    let eval_b = dir.join("eval_b");
    for out in [&eval_a, &eval_b] {
        let o = run(bin().args([
            "eval",
            "--config",
            run_cfg.to_str().unwrap(),
            "--checkpoint",
            train_a.join("checkpoint.agap").to_str().unwrap(),
            "--split",
            "test",
            "--plot",
            "--out",
            out.to_str().unwrap(),
        ]));
        assert_code(&o, 0, "eval");
    }
    assert_eq!(snapshot(&eval_a), snapshot(&eval_b));

    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_a.join("metrics.json")).unwrap()).unwrap();
    for field in ["acc", "auc", "precision", "recall", "f1_macro"] {
        assert!(
            metrics.get(field).is_some(),
            "metrics.json missing {field}"
        );
    }
    assert!(eval_a.join("metrics.csv").exists());
    assert!(eval_a.join("scores.svg").exists());
    assert!(eval_a.join("roc.svg").exists());
    let svg = fs::read_to_string(eval_a.join("roc.svg")).unwrap();
    assert!(svg.contains("<svg"));

    // no files outside --out
    let stray: Vec<_> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| !["run.json", "train_a", "train_b", "eval_a", "eval_b"].contains(&n.as_str()))
        .collect();
    assert!(stray.is_empty(), "unexpected files {stray:?}");
}

#[test]
fn seed_env_var_is_a_fallback() {
    let dir = workdir("seed_env");
    let phantom = write_phantom_config(&dir);
    let out_env = dir.join("env");
    let o = run(bin()
        .env("AGA3D_SEED", "99")
        .args([
            "synth",
            "--config",
            phantom.to_str().unwrap(),
            "--out",
            out_env.to_str().unwrap(),
        ]));
    assert_code(&o, 0, "synth with env seed");
    let out_flag = dir.join("flag");
    let o = run(bin().args([
        "synth",
        "--config",
        phantom.to_str().unwrap(),
        "--seed",
        "99",
        "--out",
        out_flag.to_str().unwrap(),
    ]));
    assert_code(&o, 0, "synth with flag seed");
    assert_eq!(snapshot(&out_env), snapshot(&out_flag));

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_env.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 99);
}

#[test]
fn gradcheck_quick_passes() {
    let dir = workdir("gradcheck");
    let o = run(bin().args(["gradcheck", "--quick", "--out", dir.join("gc").to_str().unwrap()]));
    assert_code(&o, 0, "gradcheck --quick");
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("full model"));
    assert!(stdout.lines().filter(|l| l.contains("PASS")).count() >= 20);
    assert!(dir.join("gc/gradcheck.json").exists());
}
