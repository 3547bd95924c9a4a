//! End-to-end checks of the `carma` binary: artifacts, determinism, and
//! exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn carma(lab: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_carma"));
    cmd.env("CARMA_LAB_DIR", lab);
    cmd.env("RUST_LOG", "error");
    cmd
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed ({:?}):\n{}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn gen_small(lab: &Path, task: &str) -> PathBuf {
    let out = carma(lab)
        .args(["gen", "--task", task, "--seed", "1", "--n", "60"])
        .output()
        .unwrap();
    ok(&out);
    lab.join("data").join(format!("{task}-s1-n60"))
}

/// Tiny but real training run shared by the pipeline tests.
fn train_small(lab: &Path, data: &Path, variant: &str, seeds: &str) {
    let out = carma(lab)
        .args([
            "train",
            "--variant",
            variant,
            "--seeds",
            seeds,
            "--data",
            data.to_str().unwrap(),
            "--jobs",
            "2",
            "--set",
            "train.epochs=2",
            "--set",
            "model.d_model=16",
            "--set",
            "model.d_mlp=32",
            "--set",
            "model.n_layers=2",
            "--set",
            "carma.layer_end=1",
        ])
        .output()
        .unwrap();
    ok(&out);
}

#[test]
fn gen_is_deterministic_and_validates_minimum() {
    let tmp = TempDir::new().unwrap();
    let lab = tmp.path();
    let dir = gen_small(lab, "idm");
    let tsv1 = std::fs::read(dir.join("dataset.tsv")).unwrap();
    let manifest1 = std::fs::read(dir.join("manifest.json")).unwrap();
    gen_small(lab, "idm");
    assert_eq!(tsv1, std::fs::read(dir.join("dataset.tsv")).unwrap());
    assert_eq!(manifest1, std::fs::read(dir.join("manifest.json")).unwrap());
    assert!(String::from_utf8_lossy(&manifest1).contains("\"seed\": 1"));

    let out = carma(lab)
        .args(["gen", "--task", "idm", "--seed", "1", "--n", "10"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "below-minimum n must exit 2");
}

#[test]
fn train_writes_one_run_dir_per_seed_with_artifacts() {
    let tmp = TempDir::new().unwrap();
    let lab = tmp.path();
    let data = gen_small(lab, "idm");
    train_small(lab, &data, "ft", "1,2");
    for seed in ["1", "2"] {
        let dir = lab.join("runs").join("ft").join("idm").join(seed);
        for f in ["checkpoint.json", "trainlog.jsonl", "summary.json", "runconfig.json"] {
            assert!(dir.join(f).is_file(), "missing {f} for seed {seed}");
        }
    }
    // FT forces lambda to zero: the regularizer losses never move.
    let log = std::fs::read_to_string(
        lab.join("runs").join("ft").join("idm").join("1").join("trainlog.jsonl"),
    )
    .unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["l_mi"].as_f64(), Some(0.0));
        assert_eq!(v["l_stab"].as_f64(), Some(0.0));
    }
}

#[test]
fn train_checkpoints_are_reproducible() {
    let tmp = TempDir::new().unwrap();
    let lab = tmp.path();
    let data = gen_small(lab, "idm");
    train_small(lab, &data, "carma", "3");
    let ck = lab.join("runs").join("carma").join("idm").join("3").join("checkpoint.json");
    let first = std::fs::read(&ck).unwrap();
    train_small(lab, &data, "carma", "3");
    assert_eq!(first, std::fs::read(&ck).unwrap(), "checkpoint bytes differ");
}

#[test]
fn cap_and_synonym_csvs_have_schema_and_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let lab = tmp.path();
    let data = gen_small(lab, "idm");
    train_small(lab, &data, "ft", "1");
    train_small(lab, &data, "carma", "1");

    let cap = |path: &str| {
        let out = carma(lab)
            .args([
                "cap",
                "--data",
                data.to_str().unwrap(),
                "--split",
                "validation",
                "--out",
                path,
            ])
            .output()
            .unwrap();
        ok(&out);
    };
    let cap1 = lab.join("cap1.csv");
    let cap2 = lab.join("cap2.csv");
    cap(cap1.to_str().unwrap());
    cap(cap2.to_str().unwrap());
    let text = std::fs::read_to_string(&cap1).unwrap();
    assert_eq!(
        std::fs::read(&cap1).unwrap(),
        std::fs::read(&cap2).unwrap(),
        "cap csv not byte-identical"
    );
    assert!(text.starts_with("# carma v"), "missing provenance line");
    let mut lines = text.lines();
    lines.next();
    assert_eq!(
        lines.next().unwrap(),
        "variant,task,split,layer,layer_frac,mode,accuracy,n_seeds"
    );
    // Two variants x two layers x (three modes + one average row).
    let body: Vec<&str> = text.lines().skip(2).collect();
    assert_eq!(body.len(), 2 * 2 * 4);
    for chunk in body.chunks(4) {
        assert!(chunk[0].contains(",mean,"));
        assert!(chunk[1].contains(",max,"));
        assert!(chunk[2].contains(",sum,"));
        assert!(chunk[3].contains(",avg3,"));
    }
    for line in &body {
        let frac: f64 = line.split(',').nth(4).unwrap().parse().unwrap();
        assert!(frac > 0.0 && frac <= 1.0);
    }

    let syn = |path: &str| {
        let out = carma(lab)
            .args([
                "synonyms",
                "--data",
                data.to_str().unwrap(),
                "--split",
                "train",
                "--out",
                path,
            ])
            .output()
            .unwrap();
        ok(&out);
    };
    let s1 = lab.join("syn1.csv");
    let s2 = lab.join("syn2.csv");
    syn(s1.to_str().unwrap());
    syn(s2.to_str().unwrap());
    assert_eq!(
        std::fs::read(&s1).unwrap(),
        std::fs::read(&s2).unwrap(),
        "synonyms csv not byte-identical"
    );
    let text = std::fs::read_to_string(&s1).unwrap();
    let rows: Vec<&str> = text.lines().skip(2).collect();
    // Two rates x two variants.
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().any(|r| r.contains(",0.25,")));
    assert!(rows.iter().any(|r| r.contains(",0.4,")));
    // One-run rows are flagged against the N>=5 rule.
    assert!(rows.iter().all(|r| r.ends_with(",insufficient") || r.ends_with(",ok")));
}

#[test]
fn report_requires_results_and_regenerates_identically() {
    let tmp = TempDir::new().unwrap();
    let lab = tmp.path();
    std::fs::create_dir_all(lab.join("results")).unwrap();
    let out = carma(lab).args(["report"]).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "empty results must exit 3");

    let data = gen_small(lab, "idm");
    train_small(lab, &data, "ft", "1");
    train_small(lab, &data, "carma", "1");
    ok(&carma(lab)
        .args(["cap", "--data", data.to_str().unwrap(), "--split", "validation"])
        .output()
        .unwrap());
    ok(&carma(lab)
        .args(["synonyms", "--data", data.to_str().unwrap(), "--split", "train"])
        .output()
        .unwrap());
    ok(&carma(lab).args(["report", "--svg"]).output().unwrap());
    let md = lab.join("report").join("summary.md");
    let plot = lab.join("report").join("plot_cap_idm.csv");
    let svg = lab.join("report").join("plot_cap_idm.svg");
    let first = (
        std::fs::read(&md).unwrap(),
        std::fs::read(&plot).unwrap(),
        std::fs::read(&svg).unwrap(),
    );
    ok(&carma(lab).args(["report", "--svg"]).output().unwrap());
    assert_eq!(first.0, std::fs::read(&md).unwrap());
    assert_eq!(first.1, std::fs::read(&plot).unwrap());
    assert_eq!(first.2, std::fs::read(&svg).unwrap());
    // Plot data carries one row per (variant, layer) pair.
    let plot_text = String::from_utf8(first.1).unwrap();
    assert_eq!(plot_text.lines().count(), 1 + 2 * 2);
}

#[test]
fn config_errors_exit_with_code_2() {
    let tmp = TempDir::new().unwrap();
    let lab = tmp.path();
    let data = gen_small(lab, "idm");

    let out = carma(lab)
        .args([
            "train",
            "--variant",
            "ft",
            "--seeds",
            "1",
            "--data",
            data.to_str().unwrap(),
            "--set",
            "train.epochz=2",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "typo override must exit 2");

    let bad = lab.join("bad.json");
    std::fs::write(&bad, r#"{"train": {"epochs": 1, "unknown_key": 3}}"#).unwrap();
    let out = carma(lab)
        .args([
            "train",
            "--variant",
            "ft",
            "--seeds",
            "1",
            "--data",
            data.to_str().unwrap(),
            "--config",
            bad.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "unknown config key must exit 2");

    let out = carma(lab)
        .args([
            "synonyms",
            "--data",
            data.to_str().unwrap(),
            "--rates",
            "1.5",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "out-of-range rate must exit 2");
}
