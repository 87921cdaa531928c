//! End-to-end tests of the installed binary: configuration handling,
//! byte-level determinism of artifacts, sweep resume behavior, and the
//! consistency of the metrics subcommand with the recorded run metrics.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_contrastlab");

const SIM_TOML: &str = r#"
config_version = 1
mode = "coupled-sim"

[dataset]
classes = 4
per_class = 8
dim = 8
separation = 2.0
noise_scale = 0.1

[train]
batch_size = 8
tau = 0.5
steps = 12
master_seed = 7

[train.schedule]
kind = "constant"
eta = 0.1
"#;

const ENC_TOML: &str = r#"
config_version = 1
mode = "coupled-encoder"

[dataset]
classes = 3
per_class = 8
dim = 6
separation = 2.0
noise_scale = 0.1

[train]
batch_size = 6
tau = 0.5
steps = 15
master_seed = 7

[train.schedule]
kind = "constant"
eta = 0.1

[encoder]
hidden = 8
embed_dim = 6
objectives = ["cl", "nscl"]
record_every = 5
"#;

const SWEEP_TOML: &str = r#"
config_version = 1
mode = "sweep"

[dataset]
classes = 4
per_class = 8
dim = 8
separation = 2.0
noise_scale = 0.1

[train]
batch_size = 8
tau = 0.5
steps = 10
master_seed = 7

[train.schedule]
kind = "constant"
eta = 0.1

[sweep]
axis = "classes"
values = [4, 2]
seeds = 2
child_mode = "coupled-sim"
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn run_cli(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit={:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn run_artifacts_are_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "sim.toml", SIM_TOML);
    for (toml, files) in [
        (
            &config,
            &["trace.csv", "metrics.json", "bound_report.json"][..],
        ),
        (
            &write_config(tmp.path(), "enc.toml", ENC_TOML),
            &["trace.csv", "metrics.json", "embeddings_nscl.csv"][..],
        ),
    ] {
        let a = tmp.path().join("a");
        let b = tmp.path().join("b");
        for out in [&a, &b] {
            let res = run_cli(&[
                "run",
                "--config",
                toml.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ]);
            assert_ok(&res);
        }
        for file in files {
            let bytes_a = fs::read(a.join(file)).unwrap();
            let bytes_b = fs::read(b.join(file)).unwrap();
            assert_eq!(bytes_a, bytes_b, "{file} differs between identical runs");
        }
        fs::remove_dir_all(&a).unwrap();
        fs::remove_dir_all(&b).unwrap();
    }
}

#[test]
fn seed_override_changes_the_config_hash_and_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "sim.toml", SIM_TOML);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for (out, seed) in [(&a, "7"), (&b, "8")] {
        let res = run_cli(&[
            "run",
            "--config",
            config.to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_ok(&res);
    }
    // seed 7 equals the config's own seed, so run A matches a no-flag run
    let metrics_a: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("metrics.json")).unwrap()).unwrap();
    let metrics_b: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(b.join("metrics.json")).unwrap()).unwrap();
    assert_ne!(metrics_a["config_hash"], metrics_b["config_hash"]);
    assert_ne!(
        fs::read(a.join("trace.csv")).unwrap(),
        fs::read(b.join("trace.csv")).unwrap()
    );
}

#[test]
fn unknown_config_keys_are_rejected_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = SIM_TOML.replace("noise_scale = 0.1", "noise_scale = 0.1\nnoise_shape = 3");
    let config = write_config(tmp.path(), "bad.toml", &bad);
    let out = run_cli(&["run", "--config", config.to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("noise_shape"), "stderr was: {stderr}");
}

#[test]
fn mode_and_subcommand_must_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "sim.toml", SIM_TOML);
    let out = run_cli(&["sweep", "--config", config.to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("coupled-sim"), "stderr was: {stderr}");
}

#[test]
fn sweep_resumes_by_recomputing_only_missing_children() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "sweep.toml", SWEEP_TOML);
    let out_dir = tmp.path().join("grid");
    let args = [
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--workers",
        "2",
    ];
    assert_ok(&run_cli(&args));
    let summary_first = fs::read(out_dir.join("summary.csv")).unwrap();

    // values [4, 2] must come out sorted ascending with seeds inside values
    let text = String::from_utf8(summary_first.clone()).unwrap();
    let leading: Vec<&str> = text
        .lines()
        .skip(2)
        .map(|l| l.split_once(',').unwrap().0)
        .collect();
    assert_eq!(leading, ["2", "2", "4", "4"]);

    // drop one completed child; a re-run recomputes it and nothing else
    let children: Vec<_> = fs::read_dir(out_dir.join("children"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(children.len(), 4);
    let victim = children[1].clone();
    let survivor_manifest = children[0].join("manifest.json");
    let survivor_bytes = fs::read(&survivor_manifest).unwrap();
    fs::remove_dir_all(&victim).unwrap();

    assert_ok(&run_cli(&args));
    assert_eq!(
        fs::read(out_dir.join("summary.csv")).unwrap(),
        summary_first,
        "summary must be byte-identical after resume"
    );
    assert!(victim.join("metrics.json").exists());
    assert_eq!(
        fs::read(&survivor_manifest).unwrap(),
        survivor_bytes,
        "completed children must not be rewritten on resume"
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    let reused: Vec<bool> = manifest["children"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["reused"].as_bool().unwrap())
        .collect();
    assert_eq!(reused.iter().filter(|r| !**r).count(), 1);
}

#[test]
fn bounds_subcommand_emits_the_envelope_with_the_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        "bounds.toml",
        r#"
config_version = 1
mode = "bounds"

[bounds]
classes = 10
batch_size = 128
steps = 100
delta = 0.1
tau = 0.5
sum_eta = 10.0
"#,
    );
    let out_dir = tmp.path().join("bounds");
    let out = run_cli(&[
        "bounds",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let stdout: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("stdout is a JSON report");
    assert_eq!(stdout["config_hash"].as_str().unwrap().len(), 64);
    assert!(stdout["terminal_drift"].as_f64().unwrap() > 0.0);
    assert!(stdout["epsilon"].as_f64().unwrap() > 0.0);
    let written: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("bound_report.json")).unwrap())
            .unwrap();
    assert_eq!(written, stdout);
}

#[test]
fn metrics_subcommand_matches_the_recorded_run_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "enc.toml", ENC_TOML);
    let out_dir = tmp.path().join("enc");
    assert_ok(&run_cli(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    let cl = out_dir.join("embeddings_cl.csv");
    let nscl = out_dir.join("embeddings_nscl.csv");
    let out = run_cli(&["metrics", cl.to_str().unwrap(), nscl.to_str().unwrap()]);
    assert_ok(&out);
    let compare: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();

    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("metrics.json")).unwrap()).unwrap();
    let recorded = metrics["objectives"]
        .as_array()
        .unwrap()
        .iter()
        .find(|o| o["objective"] == "nscl")
        .unwrap();
    // the CSV stores shortest-roundtrip floats, so recomputation is exact
    let cka_diff =
        (compare["cka"].as_f64().unwrap() - recorded["cka_vs_cl"].as_f64().unwrap()).abs();
    let rsa_diff =
        (compare["rsa"].as_f64().unwrap() - recorded["rsa_vs_cl"].as_f64().unwrap()).abs();
    assert!(cka_diff < 1e-12, "cka mismatch: {cka_diff}");
    assert!(rsa_diff < 1e-12, "rsa mismatch: {rsa_diff}");
    assert_eq!(compare["rows"].as_u64().unwrap(), 24);
}

#[test]
fn verify_subcommand_writes_a_report_and_respects_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("verify");
    // a tiny trial budget exercises the full pipeline quickly
    let out = run_cli(&[
        "verify",
        "--seed",
        "2026",
        "--trials",
        "8",
        "--out",
        out_dir.to_str().unwrap(),
        "--workers",
        "2",
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("verify_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["master_seed"].as_u64().unwrap(), 2026);
    assert_eq!(report["trials"].as_u64().unwrap(), 8);
    let checks = report["checks"].as_array().unwrap();
    assert!(!checks.is_empty());
    assert_eq!(
        stdout
            .lines()
            .filter(|l| l.starts_with("PASS") || l.starts_with("FAIL"))
            .count(),
        checks.len()
    );
    // exit status mirrors the aggregate verdict
    assert_eq!(
        out.status.code(),
        Some(if report["all_passed"].as_bool().unwrap() {
            0
        } else {
            1
        })
    );
}
