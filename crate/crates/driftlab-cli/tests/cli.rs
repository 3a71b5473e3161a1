//! End-to-end tests of the command-line interface.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_driftlab"))
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("driftlab_cli_{name}_{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut map = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        let path = entry.path();
        if path.is_dir() {
            for (name, bytes) in dir_contents(&path) {
                map.insert(
                    format!("{}/{name}", entry.file_name().to_string_lossy()),
                    bytes,
                );
            }
        } else {
            map.insert(
                entry.file_name().to_string_lossy().into_owned(),
                fs::read(&path).unwrap(),
            );
        }
    }
    map
}

fn assert_success(output: &Output) {
    assert!(
        output.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn generate_corpus_is_byte_identical_per_seed() {
    let dir = tmp_dir("gen");
    let a = dir.join("a.jsonl");
    let b = dir.join("b.jsonl");
    for out in [&a, &b] {
        let output = bin()
            .args(["generate-corpus", "--seed", "11", "--out"])
            .arg(out)
            .output()
            .unwrap();
        assert_success(&output);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let c = dir.join("c.jsonl");
    let output = bin()
        .args(["generate-corpus", "--seed", "12", "--out"])
        .arg(&c)
        .output()
        .unwrap();
    assert_success(&output);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    let first_line = fs::read_to_string(&a)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert!(
        first_line.contains("\"domain\""),
        "corpus lines are entry objects"
    );
}

#[test]
fn validate_reports_issues_and_exit_codes() {
    let dir = tmp_dir("validate");

    let good = dir.join("good.json");
    fs::write(&good, r#"{"corpus":{"generate":{"seed":5}},"seed":5}"#).unwrap();
    let output = bin()
        .args(["validate", "--config"])
        .arg(&good)
        .output()
        .unwrap();
    assert_success(&output);
    assert!(String::from_utf8_lossy(&output.stdout).contains("config ok"));

    let missing_seed = dir.join("missing_seed.json");
    fs::write(&missing_seed, r#"{"corpus":{"generate":{}},"seed":5}"#).unwrap();
    let output = bin()
        .args(["validate", "--config"])
        .arg(&missing_seed)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("corpus.generate.seed"));

    let zero_k = dir.join("zero_k.json");
    fs::write(
        &zero_k,
        r#"{"corpus":{"generate":{"seed":5}},"seed":5,"k":0}"#,
    )
    .unwrap();
    let output = bin()
        .args(["validate", "--config"])
        .arg(&zero_k)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("k:"));

    let garbage = dir.join("garbage.json");
    fs::write(&garbage, "{not json").unwrap();
    let output = bin()
        .args(["validate", "--config"])
        .arg(&garbage)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn run_produces_all_seven_tables_and_is_deterministic() {
    let out_a = tmp_dir("run_a");
    let out_b = tmp_dir("run_b");
    for out in [&out_a, &out_b] {
        let output = bin()
            .args(["run", "--seed", "7", "--output-dir"])
            .arg(out)
            .output()
            .unwrap();
        assert_success(&output);
    }
    for table in [
        "filter_pass_table.csv",
        "cdg_table.csv",
        "sdr_trajectory.csv",
        "attribution_table.json",
        "cct_comparison.csv",
        "rcm_sweep.csv",
        "mpifc_blocking.csv",
        "run_manifest.json",
        "metrics_summary.csv",
    ] {
        assert!(out_a.join(table).exists(), "missing artifact {table}");
    }
    assert_eq!(
        dir_contents(&out_a),
        dir_contents(&out_b),
        "same config and seed must produce byte-identical outputs"
    );

    // Report summarizes the directory.
    let output = bin()
        .args(["report", "--dir"])
        .arg(&out_a)
        .output()
        .unwrap();
    assert_success(&output);
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("valid_primary"));
    assert!(stdout.contains("cct_comparison.csv"));
}

#[test]
fn run_from_corpus_file_round_trips() {
    let dir = tmp_dir("file_corpus");
    let corpus_path = dir.join("corpus.jsonl");
    let output = bin()
        .args(["generate-corpus", "--seed", "9", "--out"])
        .arg(&corpus_path)
        .output()
        .unwrap();
    assert_success(&output);

    let config_path = dir.join("config.json");
    fs::write(
        &config_path,
        format!(
            r#"{{"corpus":{{"path":{{"path":{:?}}}}},"seed":9,"experiments":["filter_evasion"],"output_dir":{:?}}}"#,
            corpus_path.to_string_lossy(),
            dir.join("out").to_string_lossy()
        ),
    )
    .unwrap();
    let output = bin()
        .args(["run", "--config"])
        .arg(&config_path)
        .output()
        .unwrap();
    assert_success(&output);
    assert!(dir.join("out/filter_pass_table.csv").exists());
    assert!(
        !dir.join("out/cdg_table.csv").exists(),
        "unselected experiments must not run"
    );
}

#[test]
fn protected_pipeline_makes_directive_scans_uninformative() {
    // With the provenance defense enabled, directive-carrying attacks are
    // blocked, so the counterfactual scan reports uninformative base checks.
    let dir = tmp_dir("mpifc_cct");
    let output = bin()
        .args([
            "run",
            "--seed",
            "7",
            "--mpifc",
            "true",
            "--experiments",
            "cct_compare",
            "--output-dir",
        ])
        .arg(&dir)
        .output()
        .unwrap();
    assert_success(&output);
    let table = fs::read_to_string(dir.join("cct_comparison.csv")).unwrap();
    let uninformative = table.matches("none_uninformative").count();
    assert!(
        uninformative > 14,
        "blocked attacks must show up as uninformative beyond the benign rows:\n{table}"
    );
}

#[test]
fn output_dir_env_var_is_honored() {
    let dir = tmp_dir("env_out");
    let output = bin()
        .env("DRIFTLAB_OUT_DIR", &dir)
        .args(["run", "--seed", "3", "--experiments", "filter_evasion"])
        .output()
        .unwrap();
    assert_success(&output);
    assert!(dir.join("filter_pass_table.csv").exists());
}
