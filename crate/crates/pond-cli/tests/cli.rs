//! End-to-end tests of the `pond` binary: every subcommand runs against a
//! desk-scale configuration in a temporary directory, artifacts re-parse
//! through their published types, reruns are byte-identical, and the exit
//! codes follow the documented contract (2 usage/config, 3 I/O, 4 numeric).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

use pond::data::{SplitRatios, SyntheticSpec};
use pond::eval::{heatmap_from_csv, MetricsReport};
use pond::model::{ModelConfig, MoEModel, PatchConfig};
use pond::train::RunConfig;

/// Run the binary with the given arguments and extra environment.
fn pond_cmd(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pond"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary should launch")
}

fn pond_ok(args: &[&str]) -> Output {
    let out = pond_cmd(args, &[]);
    assert!(
        out.status.success(),
        "pond {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process should exit, not signal")
}

/// A configuration small enough that the whole chain runs in seconds.
fn desk_config() -> Value {
    let spec = SyntheticSpec {
        domains: 6,
        length: 32,
        instances_per_domain: 30,
        ..SyntheticSpec::default()
    };
    let model = ModelConfig {
        series_len: 32,
        prompt_len: 8,
        d_model: 8,
        heads: 2,
        blocks: 1,
        d_ff: 16,
        experts: 2,
        patch: PatchConfig {
            patch_len: 8,
            stride: 8,
        },
        router_hidden: 8,
        ..ModelConfig::default()
    };
    let run = RunConfig {
        epochs: 6,
        batch: 8,
        steps: 10,
        prompt_len: 8,
        shots: 9,
        ..RunConfig::default()
    };
    json!({
        "spec": spec,
        "model": model,
        "run": run,
        "ratios": SplitRatios::default(),
        "seeds": [0],
        "counts": [2],
    })
}

fn write_config(dir: &Path, value: &Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn read_value(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &PathBuf) -> &str {
    path.to_str().unwrap()
}

/// gen-data → pretrain → tune → adapt → eval → heatmap in one directory,
/// checking each artifact along the way.
#[test]
fn command_chain_produces_consistent_artifacts() {
    let dir = TempDir::new().unwrap();
    let cfg_value = desk_config();
    let cfg = write_config(dir.path(), &cfg_value);
    let data = dir.path().join("data");

    // Generation: six split sources, one unsplit target, a manifest.
    pond_ok(&["gen-data", "--config", p(&cfg), "--out", p(&data)]);
    let manifest = read_value(&data.join("manifest.json"));
    let sources: Vec<String> = manifest["sources"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    assert_eq!(sources.len(), 6);
    assert_eq!(manifest["target"], "target.pond");
    for file in sources.iter().chain([&"target.pond".to_string()]) {
        assert!(data.join(file).exists(), "{file} should exist");
    }

    // Pretraining with --epochs 0 is exactly a fresh initialization.
    let init_ckpt = dir.path().join("init.ckpt");
    pond_ok(&[
        "pretrain",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&init_ckpt),
        "--epochs",
        "0",
    ]);
    let model_cfg: ModelConfig = serde_json::from_value(cfg_value["model"].clone()).unwrap();
    let run_cfg: RunConfig = serde_json::from_value(cfg_value["run"].clone()).unwrap();
    let fresh = dir.path().join("fresh.ckpt");
    MoEModel::init(&model_cfg, run_cfg.seeds.model)
        .unwrap()
        .save(&fresh)
        .unwrap();
    assert_eq!(
        std::fs::read(&init_ckpt).unwrap(),
        std::fs::read(&fresh).unwrap(),
        "an untrained checkpoint should be bit-identical to a fresh init"
    );
    let init_history = read_value(&dir.path().join("init.ckpt.history.json"));
    assert_eq!(init_history["epoch_losses"].as_array().unwrap().len(), 0);
    assert_eq!(init_history["steps"], 0);

    // Real pretraining records one mean loss per epoch.
    let ckpt = dir.path().join("model.ckpt");
    pond_ok(&[
        "pretrain",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&ckpt),
    ]);
    let history = read_value(&dir.path().join("model.ckpt.history.json"));
    assert_eq!(history["epoch_losses"].as_array().unwrap().len(), 6);
    assert!(history["steps"].as_u64().unwrap() > 0);

    // Tuning with λ overrides: the recorded breakdown must satisfy
    // total = ℓ_R + λ₁·ℓ_D + λ₂·ℓ_F with the overridden weights.
    let state = dir.path().join("state.ckpt");
    pond_ok(&[
        "tune",
        "--config",
        p(&cfg),
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--out",
        p(&state),
        "--lambda1",
        "0.25",
        "--lambda2",
        "1.5",
    ]);
    let tune_history = read_value(&dir.path().join("state.ckpt.history.json"));
    let steps = tune_history["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 10);
    for record in steps {
        let r = record["loss_r"].as_f64().unwrap();
        let d = record["loss_d"].as_f64().unwrap();
        let f = record["loss_f"].as_f64().unwrap();
        let total = record["total"].as_f64().unwrap();
        let recomputed = r + 0.25 * d + 1.5 * f;
        assert!(
            (total - recomputed).abs() <= 1e-12 * total.abs().max(1.0),
            "weights should flow from the flags into the objective"
        );
    }

    // Adaptation: the selected source carries the maximal cosine.
    let report_path = dir.path().join("adapt.json");
    pond_ok(&[
        "adapt",
        "--config",
        p(&cfg),
        "--state",
        p(&state),
        "--target",
        p(&data.join("target.pond")),
        "--out",
        p(&report_path),
    ]);
    let report = read_value(&report_path);
    let sims = report["similarities"].as_array().unwrap();
    assert_eq!(sims.len(), 6);
    let selected = report["selected_index"].as_u64().unwrap() as usize;
    assert_eq!(report["selected_source"], sims[selected]["domain_id"]);
    let best = sims[selected]["cosine"].as_f64().unwrap();
    for row in sims {
        assert!(row["cosine"].as_f64().unwrap() <= best + 1e-12);
    }

    // Evaluation: strict metrics, deterministic across reruns.
    let metrics_path = dir.path().join("metrics.json");
    pond_ok(&[
        "eval",
        "--state",
        p(&state),
        "--target",
        p(&data.join("target.pond")),
        "--out",
        p(&metrics_path),
    ]);
    let metrics: MetricsReport =
        serde_json::from_str(&std::fs::read_to_string(&metrics_path).unwrap()).unwrap();
    assert_eq!(metrics.scenario, "target");
    assert!((0.0..=1.0).contains(&metrics.accuracy));
    assert!((0.0..=1.0).contains(&metrics.macro_f1));
    let total: usize = metrics.confusion.iter().flatten().sum();
    assert_eq!(total, 30 - 9, "eval should score the complement of the shots");

    let metrics_again = dir.path().join("metrics2.json");
    pond_ok(&[
        "eval",
        "--state",
        p(&state),
        "--target",
        p(&data.join("target.pond")),
        "--out",
        p(&metrics_again),
    ]);
    assert_eq!(
        std::fs::read(&metrics_path).unwrap(),
        std::fs::read(&metrics_again).unwrap(),
        "evaluation should be byte-identical across reruns"
    );

    // Heatmap: CSV round-trips, diagonal absent, sidecar names domains.
    let heat_path = dir.path().join("heat.csv");
    pond_ok(&["heatmap", "--state", p(&state), "--out", p(&heat_path)]);
    let heat = heatmap_from_csv(&std::fs::read_to_string(&heat_path).unwrap()).unwrap();
    assert_eq!(heat.domain_ids.len(), 6);
    for (i, row) in heat.entries.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            assert_eq!(cell.is_none(), i == j);
        }
    }
    let meta = read_value(&dir.path().join("heat.csv.meta.json"));
    assert_eq!(meta["domain_ids"].as_array().unwrap().len(), 6);
    assert_eq!(meta["fallback"], false);
}

/// The same configuration and seeds must reproduce every artifact
/// byte-for-byte, and the seed override must actually change them.
#[test]
fn generation_is_deterministic_and_seed_override_works() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &desk_config());
    let (a, b, c, d) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
        dir.path().join("d"),
    );

    pond_ok(&["gen-data", "--config", p(&cfg), "--out", p(&a)]);
    pond_ok(&["gen-data", "--config", p(&cfg), "--out", p(&b)]);
    for file in ["manifest.json", "source-0.pond", "target.pond"] {
        assert_eq!(
            std::fs::read(a.join(file)).unwrap(),
            std::fs::read(b.join(file)).unwrap(),
            "{file} should be byte-identical across reruns"
        );
    }

    let seeded = pond_cmd(
        &["gen-data", "--config", p(&cfg), "--out", p(&c)],
        &[("POND_SEED", "7")],
    );
    assert!(seeded.status.success());
    let seeded_again = pond_cmd(
        &["gen-data", "--config", p(&cfg), "--out", p(&d)],
        &[("POND_SEED", "7")],
    );
    assert!(seeded_again.status.success());
    assert_eq!(
        std::fs::read(c.join("target.pond")).unwrap(),
        std::fs::read(d.join("target.pond")).unwrap(),
        "the same seed override should reproduce the data"
    );
    assert_ne!(
        std::fs::read(a.join("target.pond")).unwrap(),
        std::fs::read(c.join("target.pond")).unwrap(),
        "the seed override should change the generated data"
    );
}

/// The grid commands emit one row per (variant, seed) and per count.
#[test]
fn grid_commands_emit_expected_row_counts() {
    let dir = TempDir::new().unwrap();
    let mut value = desk_config();
    value["seeds"] = json!([0]);
    value["counts"] = json!([2, 3]);
    let cfg = write_config(dir.path(), &value);

    let ablate_path = dir.path().join("ablate.json");
    pond_ok(&["ablate", "--config", p(&cfg), "--out", p(&ablate_path)]);
    let cells = read_value(&ablate_path);
    let cells = cells.as_array().unwrap();
    assert_eq!(cells.len(), 6, "six ablation variants × one seed");
    assert!(cells.iter().any(|c| c["label"] == "full"));

    let sweep_path = dir.path().join("sweep.json");
    pond_ok(&[
        "sweep-sources",
        "--config",
        p(&cfg),
        "--out",
        p(&sweep_path),
    ]);
    let rows = read_value(&sweep_path);
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["sources"], 2);
    assert_eq!(rows[1]["sources"], 3);
    for row in rows {
        assert_eq!(row["per_seed_macro_f1"].as_array().unwrap().len(), 1);
    }
}

/// flexdemo honours the budget override; gradcheck prints a verdict per
/// audited graph and exits cleanly when everything passes.
#[test]
fn flexdemo_and_gradcheck_run() {
    let dir = TempDir::new().unwrap();
    let flex_path = dir.path().join("flex.json");
    pond_ok(&["flexdemo", "--out", p(&flex_path), "--budget", "40"]);
    let report = read_value(&flex_path);
    assert_eq!(report["step_budget"], 40);
    assert_eq!(report["outcomes"].as_array().unwrap().len(), 10);

    let out = pond_ok(&["gradcheck"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("objective"));
    assert!(stdout.contains("pass"));
    assert!(!stdout.contains("FAIL"));
}

/// Usage errors and bad configurations exit 2; unreadable or mismatched
/// inputs exit 3.
#[test]
fn exit_codes_follow_the_contract() {
    let dir = TempDir::new().unwrap();

    // Missing required flag and unknown subcommand: usage errors.
    let out = pond_cmd(&["gen-data", "--config", "x.json"], &[]);
    assert_eq!(exit_code(&out), 2);
    let out = pond_cmd(&["frobnicate"], &[]);
    assert_eq!(exit_code(&out), 2);

    // Unknown configuration keys are rejected.
    let bad_key = dir.path().join("bad_key.json");
    std::fs::write(&bad_key, "{\"surprise\": 1}").unwrap();
    let out = pond_cmd(&["gen-data", "--config", p(&bad_key), "--out", "unused"], &[]);
    assert_eq!(exit_code(&out), 2);

    // Invalid values fail validation.
    let bad_value = dir.path().join("bad_value.json");
    std::fs::write(&bad_value, "{\"run\": {\"steps\": 0}}").unwrap();
    let out = pond_cmd(
        &["gen-data", "--config", p(&bad_value), "--out", "unused"],
        &[],
    );
    assert_eq!(exit_code(&out), 2);

    // A malformed seed override is a configuration error.
    let cfg = write_config(dir.path(), &desk_config());
    let out = pond_cmd(
        &["gen-data", "--config", p(&cfg), "--out", p(&dir.path().join("x"))],
        &[("POND_SEED", "not-a-number")],
    );
    assert_eq!(exit_code(&out), 2);

    // Unreadable inputs are I/O errors.
    let out = pond_cmd(
        &["gen-data", "--config", "missing.json", "--out", "unused"],
        &[],
    );
    assert_eq!(exit_code(&out), 3);
    let out = pond_cmd(
        &[
            "pretrain",
            "--config",
            p(&cfg),
            "--data",
            p(&dir.path().join("no-data")),
            "--out",
            "unused",
        ],
        &[],
    );
    assert_eq!(exit_code(&out), 3);
    let out = pond_cmd(
        &[
            "eval",
            "--state",
            p(&dir.path().join("no-state.ckpt")),
            "--target",
            "unused",
            "--out",
            "unused",
        ],
        &[],
    );
    assert_eq!(exit_code(&out), 3);

    // A checkpoint built for a different geometry is incompatible.
    let model_cfg: ModelConfig = serde_json::from_value(desk_config()["model"].clone()).unwrap();
    let ckpt = dir.path().join("other.ckpt");
    MoEModel::init(
        &ModelConfig {
            d_model: 16,
            ..model_cfg
        },
        0,
    )
    .unwrap()
    .save(&ckpt)
    .unwrap();
    let data = dir.path().join("data");
    pond_ok(&["gen-data", "--config", p(&cfg), "--out", p(&data)]);
    let out = pond_cmd(
        &[
            "tune",
            "--config",
            p(&cfg),
            "--checkpoint",
            p(&ckpt),
            "--data",
            p(&data),
            "--out",
            "unused",
        ],
        &[],
    );
    assert_eq!(exit_code(&out), 3);
}
