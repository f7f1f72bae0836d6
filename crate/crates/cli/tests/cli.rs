use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use p2pgrid::scenario::{write_dataset, Dataset, DropStats, SampledParams, SamplingRanges, ScenarioRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_p2pgrid");

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Default config with the network path made absolute and optional table edits.
fn write_config(dir: &Path, edit: impl FnOnce(&mut toml::Table)) -> PathBuf {
    let text = fs::read_to_string(repo().join("configs/default.toml")).unwrap();
    let mut t: toml::Table = text.parse().unwrap();
    let net = repo().join("data/ieee33.case").canonicalize().unwrap();
    t["network"]["path"] = toml::Value::String(net.display().to_string());
    edit(&mut t);
    let path = dir.join("config.toml");
    fs::write(&path, toml::to_string(&t).unwrap()).unwrap();
    path
}

fn run(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn read(dir: &Path, name: &str, file: &str) -> Vec<u8> {
    fs::read(dir.join(name).join(file)).unwrap()
}

#[test]
fn gen_data_is_reproducible_across_runs_and_workers() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), |_| {});
    let out = tmp.path().join("runs");
    for (name, workers) in [("a", "1"), ("b", "1"), ("c", "3")] {
        let o = run(&cfg, &out, &["gen-data", "--n", "12", "--seed", "7", "--workers", workers, "--run-name", name]);
        ok(&o);
    }
    let a = read(&out, "a", "dataset.csv");
    assert!(a.len() > 100);
    assert_eq!(a, read(&out, "b", "dataset.csv"));
    assert_eq!(a, read(&out, "c", "dataset.csv"));
    assert_eq!(read(&out, "a", "manifest.json"), read(&out, "c", "manifest.json"));
    let run: serde_json::Value = serde_json::from_slice(&read(&out, "a", "run-manifest.json")).unwrap();
    assert_eq!(run["command"], "gen-data");
    assert_eq!(run["seed"], 7);
    let sidecar: serde_json::Value = serde_json::from_slice(&read(&out, "a", "manifest.json")).unwrap();
    assert_eq!(sidecar["master_seed"], 7);
    assert_eq!(sidecar["ranges_are_figure_estimates"], true);
}

#[test]
fn usage_errors_exit_with_the_usage_code() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), |_| {});
    let out = tmp.path().join("runs");
    for args in [
        &["gen-data", "--n", "0"][..],
        &["train", "--data", "x.csv", "--epochs", "0"],
        &["run-case", "4"],
        &["--workers", "0", "gen-data", "--n", "3"],
    ] {
        let o = run(&cfg, &out, args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
    }
    let o = run(&cfg, &out, &["run-case", "3"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("--model"), "{err}");

    let o = run(&tmp.path().join("absent.toml"), &out, &["export-network"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_the_data_code() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), |_| {});
    let out = tmp.path().join("runs");
    let o = run(&cfg, &out, &["train", "--data", tmp.path().join("none.csv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let o = run(&cfg, &out, &["run-case", "3", "--model", tmp.path().join("none.bin").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let bad = write_config(tmp.path(), |t| {
        t["network"]["path"] = toml::Value::String("/nonexistent/feeder.case".into());
    });
    let o = run(&bad, &out, &["export-network"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn run_case_bundles_are_reproducible_and_comparable() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), |_| {});
    let out = tmp.path().join("runs");
    for name in ["one", "again"] {
        ok(&run(&cfg, &out, &["run-case", "1", "--seed", "7", "--run-name", name]));
    }
    ok(&run(&cfg, &out, &["run-case", "2", "--seed", "7", "--run-name", "two"]));
    assert_eq!(read(&out, "one", "result.json"), read(&out, "again", "result.json"));
    assert_eq!(read(&out, "one", "hourly.csv"), read(&out, "again", "hourly.csv"));
    let timing: serde_json::Value = serde_json::from_slice(&read(&out, "one", "timing.json")).unwrap();
    assert!(timing["wall_time_s"].as_f64().unwrap() > 0.0);

    let o = run(
        &cfg,
        &out,
        &["compare", out.join("one").to_str().unwrap(), out.join("two").to_str().unwrap(), "--run-name", "cmp"],
    );
    ok(&o);
    let table = String::from_utf8_lossy(&o.stdout);
    for col in ["traded kW", "payoff Rs", "max dV %", "OPF calls", "wall s"] {
        assert!(table.contains(col), "{table}");
    }
    let csv = String::from_utf8(read(&out, "cmp", "comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("case,total_p2p_traded_kw"));

    // replaying the manifest reproduces the bundle
    let manifest = out.join("one/run-manifest.json");
    ok(&run(&cfg, &out, &["rerun", manifest.to_str().unwrap(), "--run-name", "replay"]));
    assert_eq!(read(&out, "one", "result.json"), read(&out, "replay", "result.json"));
}

#[test]
fn compare_rejects_results_from_different_configs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), |_| {});
    let other_dir = tmp.path().join("other");
    fs::create_dir_all(&other_dir).unwrap();
    let other = write_config(&other_dir, |t| {
        t["dopf"]["c_ls"] = toml::Value::Float(1.25);
    });
    let out = tmp.path().join("runs");
    ok(&run(&cfg, &out, &["run-case", "1", "--run-name", "a"]));
    ok(&run(&other, &out, &["run-case", "1", "--run-name", "b"]));
    let o = run(&cfg, &out, &["compare", out.join("a").to_str().unwrap(), out.join("b").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn export_network_writes_the_feeder_summary() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), |_| {});
    let out = tmp.path().join("runs");
    ok(&run(&cfg, &out, &["export-network", "--run-name", "net"]));
    let v: serde_json::Value = serde_json::from_slice(&read(&out, "net", "network.json")).unwrap();
    assert_eq!(v["n_buses"], 33);
    assert_eq!(v["n_lines"], 32);
    assert!((v["total_load_kw"].as_f64().unwrap() - 3715.0).abs() < 1e-6);
}

/// Scenarios whose target is an exact linear function of the features.
fn linear_dataset(n: usize, buses: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut next = move || rng.gen::<f64>();
    let records = (0..n as u64)
        .map(|id| {
            let pf = 0.8 + 0.15 * next();
            let c_ls = 1.0 + next();
            let lambda = 0.0075 + 0.005 * next();
            let features: Vec<[f64; 5]> = (0..buses)
                .map(|_| [40.0 * next() - 20.0, 100.0 * next(), pf, c_ls, lambda])
                .collect();
            let target = features
                .iter()
                .map(|f| 0.6 * f[0] - 0.05 * f[1] + 8.0 * (f[2] - 0.875) - 3.0 * (f[3] - 1.5) + 400.0 * (f[4] - 0.01))
                .collect();
            ScenarioRecord {
                id,
                seed: id,
                params: SampledParams {
                    c_ls,
                    lambda_corr: lambda,
                    load_scale: 1.0,
                    power_factor: pf,
                    solar_uncertainty_pct: 0.0,
                    hour: 0,
                },
                buses: (1..=buses).collect(),
                features,
                target,
                market_iterations: 0,
                market_converged: true,
                exact: true,
            }
        })
        .collect();
    Dataset {
        master_seed: 0,
        requested: n,
        ranges: SamplingRanges {
            c_ls: (1.0, 2.0),
            lambda_corr: (0.0075, 0.0125),
            load_scale: (1.0, 1.0),
            power_factor: (0.8, 0.95),
            solar_uncertainty_pct: (0.0, 0.0),
            hours: 1,
        },
        records,
        drops: DropStats::default(),
    }
}

#[test]
fn training_fits_a_linear_target_and_evaluates_the_same() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), |t| {
        let tr = t["training"].as_table_mut().unwrap();
        tr.insert("learning_rate".into(), toml::Value::Float(3e-3));
        tr.insert("epochs".into(), toml::Value::Integer(60));
        tr.insert("batch_size".into(), toml::Value::Integer(16));
        let h = tr["hyper"].as_table_mut().unwrap();
        h.insert("d_model".into(), toml::Value::Integer(16));
        h.insert("n_layers".into(), toml::Value::Integer(1));
        h.insert("d_ff".into(), toml::Value::Integer(32));
        h.insert("n_heads".into(), toml::Value::Integer(2));
    });
    let data = tmp.path().join("data");
    write_dataset(&data, &linear_dataset(400, 6), serde_json::Value::Null).unwrap();
    let out = tmp.path().join("runs");

    let o = run(&cfg, &out, &["train", "--data", data.to_str().unwrap(), "--run-name", "fit"]);
    ok(&o);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("MAE (MW)") && stdout.contains("RMSE (MW)") && stdout.contains("R2"), "{stdout}");
    let m: serde_json::Value = serde_json::from_slice(&read(&out, "fit", "metrics.json")).unwrap();
    let r2 = m["r2"].as_f64().unwrap();
    assert!(r2 >= 0.999, "R2 {r2}");
    let history = String::from_utf8(read(&out, "fit", "history.csv")).unwrap();
    assert!(history.lines().count() > 1);

    let model = out.join("fit/model.bin");
    let o = run(
        &cfg,
        &out,
        &["eval-model", "--model", model.to_str().unwrap(), "--data", data.to_str().unwrap(), "--run-name", "eval"],
    );
    ok(&o);
    assert_eq!(read(&out, "fit", "metrics.json"), read(&out, "eval", "metrics.json"));

    // same seed, same bytes
    ok(&run(&cfg, &out, &["train", "--data", data.to_str().unwrap(), "--run-name", "refit"]));
    assert_eq!(read(&out, "fit", "model.bin"), read(&out, "refit", "model.bin"));
}
