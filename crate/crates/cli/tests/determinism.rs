//! End-to-end CLI checks: byte-identical reruns (same seed, any thread
//! count), manifest completeness and the documented exit codes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_g4vdyn")
}

fn quick_config(dir: &Path) -> PathBuf {
    let path = dir.join("quick.json");
    fs::write(
        &path,
        r#"{
  "simulation": {
    "telegraph": {"repeat_count": 3},
    "capture": {"n_reps": 60},
    "init_eff": {"n_reps": 40, "pulse_lengths_s": [2e-4, 7.8e-4, 2.6e-3]},
    "ple": {"n_scans": 6, "n_points": 41, "dwell_s": 0.02},
    "cpt": {"n_points": 21, "span_hz": 4e6},
    "readout": {"n_shots": 400}
  }
}"#,
    )
    .unwrap();
    path
}

fn run(args: &[&str], extra_env: &[(&str, &str)]) -> std::process::Output {
    let mut cmd = Command::new(binary());
    cmd.args(args);
    for (key, value) in extra_env {
        cmd.env(key, value);
    }
    cmd.output().expect("binary runs")
}

/// Every file in the directory except the manifest (which carries wall time).
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        let name = entry.file_name().to_string_lossy().to_string();
        if name == "run_manifest.json" || !entry.path().is_file() {
            continue;
        }
        files.insert(name, fs::read(entry.path()).unwrap());
    }
    files
}

fn run_subcommand(
    subcommand: &str,
    config: &Path,
    out: &Path,
    extra: &[&str],
    env: &[(&str, &str)],
) {
    fs::create_dir_all(out).unwrap();
    let mut args = vec![
        subcommand,
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let output = run(&args, env);
    assert!(
        output.status.success(),
        "{subcommand} failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn criterion_9_reruns_are_byte_identical_across_threads() {
    let root = tempfile::tempdir().unwrap();
    let config = quick_config(root.path());
    let subcommands = [
        "telegraph",
        "capture",
        "init-eff",
        "enhance",
        "ple-series",
        "cpt",
        "readout",
    ];
    for subcommand in subcommands {
        let base = root.path().join(format!("{subcommand}_a"));
        let again = root.path().join(format!("{subcommand}_b"));
        let threaded = root.path().join(format!("{subcommand}_t"));
        run_subcommand(subcommand, &config, &base, &[], &[]);
        run_subcommand(subcommand, &config, &again, &[], &[]);
        run_subcommand(subcommand, &config, &threaded, &["--threads", "8"], &[]);
        let reference = snapshot(&base);
        assert!(!reference.is_empty(), "{subcommand} wrote no outputs");
        assert_eq!(reference, snapshot(&again), "{subcommand}: rerun differs");
        assert_eq!(
            reference,
            snapshot(&threaded),
            "{subcommand}: thread count changed outputs"
        );

        // --threads 1 through the environment fallback.
        let env_dir = root.path().join(format!("{subcommand}_env"));
        run_subcommand(
            subcommand,
            &config,
            &env_dir,
            &[],
            &[("G4VDYN_THREADS", "1")],
        );
        assert_eq!(
            reference,
            snapshot(&env_dir),
            "{subcommand}: G4VDYN_THREADS=1 changed outputs"
        );
    }

    // The fit subcommand replays a produced histogram.
    let capture_dir = root.path().join("capture_a");
    let hist = capture_dir.join("capture_histogram.csv");
    for name in ["fit_a", "fit_b"] {
        let out = root.path().join(name);
        run_subcommand(
            "fit",
            &config,
            &out,
            &["--model", "exponential", "--data", hist.to_str().unwrap()],
            &[],
        );
    }
    assert_eq!(
        snapshot(&root.path().join("fit_a")),
        snapshot(&root.path().join("fit_b")),
        "fit: rerun differs"
    );
    println!("acceptance 9 determinism: PASS -- 8 subcommands byte-identical across reruns and thread counts");
}

#[test]
fn manifest_lists_every_output_and_echoes_the_config() {
    let root = tempfile::tempdir().unwrap();
    let config = quick_config(root.path());
    let out = root.path().join("run");
    run_subcommand("cpt", &config, &out, &[], &[]);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("run_manifest.json")).unwrap()).unwrap();
    let listed: Vec<String> = manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    let mut on_disk: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().to_string())
        .filter(|n| n != "run_manifest.json")
        .collect();
    on_disk.sort();
    let mut sorted = listed.clone();
    sorted.sort();
    assert_eq!(
        sorted, on_disk,
        "manifest must list exactly the produced files"
    );

    assert_eq!(manifest["subcommand"], "cpt");
    assert_eq!(manifest["tool_version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(manifest["master_seed"], 5);
    // The embedded snapshot parses back into a full configuration.
    let snapshot: g4vdyn::config::Config =
        serde_json::from_value(manifest["config"].clone()).unwrap();
    assert_eq!(snapshot.simulation.cpt.n_points, 21);
}

#[test]
fn waterfall_matrix_has_one_row_per_scan() {
    let root = tempfile::tempdir().unwrap();
    let config = quick_config(root.path());
    let out = root.path().join("ple");
    run_subcommand("ple-series", &config, &out, &[], &[]);
    let waterfall = fs::read_to_string(out.join("ple_waterfall.csv")).unwrap();
    let rows = waterfall.lines().filter(|l| !l.is_empty()).count();
    assert_eq!(rows, 1 + 6, "header plus one row per scan");
    let header_cols = waterfall.lines().next().unwrap().split(',').count();
    assert_eq!(
        header_cols,
        1 + 41,
        "scan_index plus one column per grid point"
    );
}

#[test]
fn exit_codes_follow_the_contract() {
    let root = tempfile::tempdir().unwrap();

    // Usage errors.
    assert_eq!(run(&[], &[]).status.code(), Some(64));
    assert_eq!(run(&["bogus"], &[]).status.code(), Some(64));
    assert_eq!(
        run(&["capture", "--no-such-flag"], &[]).status.code(),
        Some(64)
    );
    assert_eq!(run(&["--help"], &[]).status.code(), Some(0));

    // Configuration errors.
    let bad_key = root.path().join("bad_key.json");
    fs::write(&bad_key, r#"{"emitter": {"gamma_zero": 1.0}}"#).unwrap();
    let out = run(
        &[
            "capture",
            "--config",
            bad_key.to_str().unwrap(),
            "--out",
            root.path().to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));

    let bad_value = root.path().join("bad_value.json");
    fs::write(&bad_value, r#"{"charge": {"eta_max": 1.2}}"#).unwrap();
    let out = run(
        &[
            "capture",
            "--config",
            bad_value.to_str().unwrap(),
            "--out",
            root.path().to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("eta_max"));

    // Simulation/statistics errors: a zero-power probe never captures.
    let no_rate = root.path().join("no_rate.json");
    fs::write(
        &no_rate,
        r#"{"simulation": {"capture": {"resonant_power_nw": 0.0}}}"#,
    )
    .unwrap();
    let out = run(
        &[
            "capture",
            "--config",
            no_rate.to_str().unwrap(),
            "--out",
            root.path().to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(3));

    // Strict fit non-convergence: a flat histogram has no decay rate.
    let flat = root.path().join("flat.csv");
    fs::write(
        &flat,
        "t_lo_s,t_hi_s,count\r\n0,1,7\r\n1,2,7\r\n2,3,7\r\n3,4,7\r\n4,5,7\r\n5,6,7\r\n",
    )
    .unwrap();
    let strict_dir = root.path().join("strict");
    fs::create_dir_all(&strict_dir).unwrap();
    let out = run(
        &[
            "fit",
            "--model",
            "exponential",
            "--data",
            flat.to_str().unwrap(),
            "--out",
            strict_dir.to_str().unwrap(),
            "--strict",
        ],
        &[],
    );
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = run(
        &[
            "fit",
            "--model",
            "exponential",
            "--data",
            flat.to_str().unwrap(),
            "--out",
            strict_dir.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn capture_example_reproduces_reference_rate() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("run");
    fs::create_dir_all(&out).unwrap();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/paper.json");
    let output = run(
        &[
            "capture",
            "--config",
            config.to_str().unwrap(),
            "--seed",
            "1",
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert!(output.status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("capture_summary.json")).unwrap())
            .unwrap();
    let rate = summary["fitted_rate_hz"].as_f64().unwrap();
    let err = summary["fitted_rate_err_hz"].as_f64().unwrap();
    assert!((rate - 26.5).abs() < 3.0 * err, "rate {rate} ± {err}");
}
