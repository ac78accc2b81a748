//! End-to-end tests of the command-line interface: artifact layout, exit
//! codes, overrides and byte-level reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_adaptconv"))
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("adaptconv-cli-{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_tiny_cls_config(dir: &Path) -> PathBuf {
    let path = dir.join("cls.json");
    std::fs::write(
        &path,
        r#"{
  "task": "classification",
  "seed": 5,
  "dataset": { "generator": "shapes3", "samples_per_class": 8, "points": 32, "split": [0.75, 0.25] },
  "model": { "k": 4, "conv_widths": [4, 4], "kernel_hidden": 6, "aggregate_width": 8, "head_widths": [6] },
  "train": { "epochs": 1, "batch_size": 4 }
}"#,
    )
    .unwrap();
    path
}

fn write_tiny_seg_config(dir: &Path) -> PathBuf {
    let path = dir.join("seg.json");
    std::fs::write(
        &path,
        r#"{
  "task": "segmentation",
  "seed": 5,
  "dataset": { "generator": "parts2", "samples_per_class": 6, "points": 48, "split": [0.5, 0.5] },
  "model": { "k": 4, "conv_widths": [4, 4, 6], "kernel_hidden": 6, "pool_after": [1], "decoder_widths": [8], "feature_source": "xyz_normals", "dynamic_graph": false },
  "train": { "epochs": 1, "batch_size": 4 }
}"#,
    )
    .unwrap();
    path
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn train_smoke_writes_artifacts() {
    let dir = tmp_dir("train-smoke");
    let cfg = write_tiny_cls_config(&dir);
    let out = dir.join("run");
    run_ok(bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out));
    for file in ["resolved-config.json", "checkpoint.bin", "train-log.csv", "metrics.txt"] {
        assert!(out.join(file).exists(), "missing {file}");
    }
    let log = std::fs::read_to_string(out.join("train-log.csv")).unwrap();
    let rows: Vec<&str> = log.lines().collect();
    assert_eq!(rows[0], "epoch,lr,train_loss,test_oa");
    assert_eq!(rows.len(), 2, "one epoch, one data row");
}

#[test]
fn rerun_from_resolved_config_is_bit_exact() {
    let dir = tmp_dir("rerun");
    let cfg = write_tiny_cls_config(&dir);
    let out1 = dir.join("a");
    run_ok(bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out1));
    // second run starts from the resolved config the first one wrote
    let out2 = dir.join("b");
    run_ok(
        bin()
            .args(["train", "--config"])
            .arg(out1.join("resolved-config.json"))
            .arg("--out")
            .arg(&out2),
    );
    for file in ["resolved-config.json", "checkpoint.bin", "train-log.csv", "metrics.txt"] {
        let a = std::fs::read(out1.join(file)).unwrap();
        let b = std::fs::read(out2.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between runs");
    }
}

#[test]
fn set_override_lands_in_resolved_config() {
    let dir = tmp_dir("override");
    let cfg = write_tiny_cls_config(&dir);
    let out = dir.join("run");
    run_ok(
        bin()
            .args(["model-info", "--config"])
            .arg(&cfg)
            .args(["--set", "model.k=5", "--out"])
            .arg(&out),
    );
    let resolved = std::fs::read_to_string(out.join("resolved-config.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&resolved).unwrap();
    assert_eq!(v["model"]["k"], 5);
}

#[test]
fn invalid_config_exits_2() {
    let dir = tmp_dir("invalid");
    let cfg = write_tiny_cls_config(&dir);
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--set", "model.k=0", "--out"])
        .arg(dir.join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.k"));
}

#[test]
fn missing_checkpoint_exits_2() {
    let dir = tmp_dir("missing-ckpt");
    let cfg = write_tiny_cls_config(&dir);
    let out = bin()
        .args(["eval", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(dir.join("nope.bin"))
        .arg("--out")
        .arg(dir.join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_fault_injection_fails() {
    let dir = tmp_dir("gradcheck");
    let ok = run_ok(bin().args(["gradcheck", "--out"]).arg(dir.join("ok")));
    let stdout = String::from_utf8_lossy(&ok.stdout);
    for needle in [
        "adaptconv_spatial",
        "adaptconv_feature",
        "adaptconv_normal",
        "adaptconv_initialattributes",
    ] {
        assert!(stdout.contains(needle), "report misses {needle}");
    }

    let bad = bin()
        .args(["gradcheck", "--inject-fault", "--out"])
        .arg(dir.join("bad"))
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&bad.stderr);
    assert!(
        stderr.contains("injected fault"),
        "failure should name the op: {stderr}"
    );
}

#[test]
fn gen_then_train_from_manifest() {
    let dir = tmp_dir("gen");
    let cfg = write_tiny_cls_config(&dir);
    let out = dir.join("data");
    run_ok(bin().args(["gen", "--config"]).arg(&cfg).arg("--out").arg(&out));
    let manifest = out.join("dataset").join("manifest.json");
    assert!(manifest.exists());
    let run_out = dir.join("run");
    run_ok(
        bin()
            .args(["train", "--config"])
            .arg(&cfg)
            .args([
                "--set",
                &format!("dataset.manifest={}", manifest.display()),
            ])
            .arg("--out")
            .arg(&run_out),
    );
    assert!(run_out.join("checkpoint.bin").exists());
}

#[test]
fn eval_robustness_featmap_pipeline() {
    let dir = tmp_dir("pipeline");
    let cfg = write_tiny_cls_config(&dir);
    let train_out = dir.join("train");
    run_ok(bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&train_out));
    let ckpt = train_out.join("checkpoint.bin");

    let eval_out = dir.join("eval");
    run_ok(
        bin()
            .args(["eval", "--config"])
            .arg(&cfg)
            .arg("--checkpoint")
            .arg(&ckpt)
            .arg("--out")
            .arg(&eval_out),
    );
    assert!(eval_out.join("metrics.csv").exists());

    let rob_out = dir.join("rob");
    run_ok(
        bin()
            .args(["robustness", "--config"])
            .arg(&cfg)
            .arg("--checkpoint")
            .arg(&ckpt)
            .arg("--out")
            .arg(&rob_out),
    );
    let dropout = std::fs::read_to_string(rob_out.join("robustness-dropout.csv")).unwrap();
    assert_eq!(dropout.lines().count(), 5, "header + one row per level");
    let noise = std::fs::read_to_string(rob_out.join("robustness-noise.csv")).unwrap();
    assert_eq!(noise.lines().count(), 6);

    let fm_out = dir.join("featmap");
    run_ok(
        bin()
            .args(["featmap", "--config"])
            .arg(&cfg)
            .arg("--checkpoint")
            .arg(&ckpt)
            .args(["--layer", "1", "--point", "3", "--out"])
            .arg(&fm_out),
    );
    let csv = std::fs::read_to_string(fm_out.join("featmap.csv")).unwrap();
    let target_row = csv.lines().nth(4).unwrap();
    assert!(
        target_row.starts_with("3,") && target_row.ends_with(",0"),
        "target point should have distance 0: {target_row}"
    );
}

#[test]
fn ablate_emits_seven_methods_with_means() {
    let dir = tmp_dir("ablate");
    let cfg = write_tiny_seg_config(&dir);
    let out = dir.join("run");
    run_ok(
        bin()
            .args(["ablate", "--config"])
            .arg(&cfg)
            .args(["--seeds", "2", "--out"])
            .arg(&out),
    );
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    let seed_rows: Vec<&str> = rows
        .iter()
        .copied()
        .filter(|r| !r.contains(",mean,"))
        .collect();
    let mean_rows: Vec<&str> = rows
        .iter()
        .copied()
        .filter(|r| r.contains(",mean,"))
        .collect();
    assert_eq!(seed_rows.len(), 7 * 2, "7 methods x 2 seeds");
    assert_eq!(mean_rows.len(), 7);
    // the mean rows really average the per-seed rows
    for mean_row in mean_rows {
        let method = mean_row.split(',').next().unwrap();
        let mean_miou: f64 = mean_row.rsplit(',').next().unwrap().parse().unwrap();
        let seeds: Vec<f64> = seed_rows
            .iter()
            .filter(|r| r.split(',').next().unwrap() == method)
            .map(|r| r.rsplit(',').next().unwrap().parse::<f64>().unwrap())
            .collect();
        let expect = seeds.iter().sum::<f64>() / seeds.len() as f64;
        assert!((mean_miou - expect).abs() < 1e-12, "{method}");
    }
    // resolved per-method configs differ only in layer kind / variant
    let adapt: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("configs/adaptconv.json")).unwrap(),
    )
    .unwrap();
    let graph: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("configs/graphconv.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(adapt["model"]["encoder_kind"], "adapt");
    assert_eq!(graph["model"]["encoder_kind"], "graph_conv");
    let mut a = adapt.clone();
    a["model"]["encoder_kind"] = graph["model"]["encoder_kind"].clone();
    assert_eq!(a, graph, "configs differ beyond the layer kind");
}

#[test]
fn model_info_total_matches_library_count() {
    let dir = tmp_dir("model-info");
    let cfg_path = write_tiny_seg_config(&dir);
    let out = dir.join("run");
    let output = run_ok(
        bin()
            .args(["model-info", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out),
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    let total: usize = stdout
        .lines()
        .find(|l| l.starts_with("total parameters:"))
        .unwrap()
        .rsplit(' ')
        .next()
        .unwrap()
        .parse()
        .unwrap();

    let cfg = adaptconv_core::config::RunConfig::load(&cfg_path).unwrap();
    let dataset = adaptconv_core::data::generate(&cfg.dataset, cfg.seed).unwrap();
    let mut store = adaptconv_core::ParamStore::new();
    let mut rng = adaptconv_core::Rng::new(cfg.seed).stream("init");
    let net = adaptconv_core::net::SegmentationNet::new(
        &mut store,
        &mut rng,
        &cfg.model,
        dataset.part_count,
        dataset.category_count,
    )
    .unwrap();
    assert_eq!(total, net.count_parameters());
    assert_eq!(total, store.count_trainable());
}

#[test]
fn diverging_run_aborts_with_diagnostic() {
    let dir = tmp_dir("nan");
    let cfg = write_tiny_cls_config(&dir);
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args([
            "--set",
            "train.lr_max=1e14",
            "--set",
            "train.lr_min=1e13",
            "--set",
            "model.norm=false",
            "--set",
            "train.epochs=6",
            "--out",
        ])
        .arg(dir.join("run"))
        .output()
        .unwrap();
    if out.status.success() {
        // divergence is not guaranteed, but if the run fails it must fail
        // with the non-finite-loss diagnostic and exit code 1
        return;
    }
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not finite"));
}
