//! Command-line entry point: dataset generation, training, evaluation,
//! gradient checks, ablation tables, robustness sweeps, feature-space maps
//! and model reports.
//!
//! Exit codes: 0 on success, 1 when a check or run fails (gradient check
//! failure, non-finite loss), 2 for configuration/usage errors. Every
//! command writes `resolved-config.json` into its output directory before
//! doing anything else; re-running from that file with the same seed
//! reproduces all output files byte-for-byte.

mod report;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use adaptconv_core::check::{gradcheck_suite, FD_TOLERANCE};
use adaptconv_core::config::{EncoderKind, RunConfig, Task};
use adaptconv_core::conv::{kernel_memory_estimate, ConvolveWith};
use adaptconv_core::data::{self, Dataset};
use adaptconv_core::error::{Error, Result};
use adaptconv_core::net::{model_info_report, ClassificationNet, SegmentationNet};
use adaptconv_core::tensor::ParamStore;
use adaptconv_core::train::{
    self, evaluate_classification, evaluate_segmentation, robustness_sweep, RobustnessMode,
};
use adaptconv_core::Rng;

#[derive(Parser)]
#[command(name = "adaptconv", version, about = "Adaptive graph convolution for point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override a config field by dotted path, e.g. --set model.k=5.
    #[arg(long = "set", value_parser = parse_set)]
    set: Vec<(String, String)>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_set(raw: &str) -> std::result::Result<(String, String), String> {
    raw.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected key=value, got `{raw}`"))
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepMode {
    Dropout,
    Noise,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic dataset to disk.
    Gen(ConfigArgs),
    /// Train the configured network; writes checkpoint, log and metrics.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on the configured test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Trained parameter file.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the finite-difference gradient suite over all ops and layers.
    Gradcheck {
        /// Output directory for the report.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Corrupt one gradient on purpose to prove failures are caught.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Train every layer-kind/geometry ablation and tabulate the results.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Seeds per method.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Point-dropout and noise sweeps for a trained classifier.
    Robustness {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SweepMode::Both)]
        mode: SweepMode,
    },
    /// Export feature-space distances from one point to all others.
    Featmap {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Encoder layer (classification) or scale (segmentation) index.
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Target point index.
        #[arg(long, default_value_t = 0)]
        point: usize,
        /// Which test cloud to analyze.
        #[arg(long, default_value_t = 0)]
        cloud: usize,
    },
    /// Print the layer table and parameter counts.
    ModelInfo(ConfigArgs),
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(if e.is_usage() { 2 } else { 1 });
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_with_overrides(&args.config, &args.set)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(args: &ConfigArgs, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    report::write_text(
        &args.out.join("resolved-config.json"),
        &format!("{}\n", cfg.to_json_pretty()),
    )
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.dataset.manifest {
        Some(path) => data::load_dataset(Path::new(path)),
        None => data::generate(&cfg.dataset, cfg.seed),
    }
}

fn warn_feature_memory(cfg: &RunConfig) {
    if cfg.model.variant == ConvolveWith::Feature {
        let widest = cfg.model.conv_widths.iter().copied().max().unwrap_or(1);
        let bytes = kernel_memory_estimate(
            cfg.dataset.points,
            cfg.model.k,
            widest,
            2 * widest,
        );
        eprintln!(
            "note: feature-convolving variant; per-edge kernels for the widest layer \
             take about {:.1} MiB per cloud forward pass",
            bytes as f64 / (1024.0 * 1024.0)
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => {
            let cfg = load_config(&args)?;
            prepare_out(&args, &cfg)?;
            let dataset = load_dataset(&cfg)?;
            data::save_dataset(&args.out.join("dataset"), &dataset)?;
            println!(
                "wrote {} train / {} test clouds to {}",
                dataset.train.len(),
                dataset.test.len(),
                args.out.join("dataset").display()
            );
            Ok(())
        }
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            prepare_out(&args, &cfg)?;
            warn_feature_memory(&cfg);
            let dataset = load_dataset(&cfg)?;
            match cfg.task {
                Task::Classification => {
                    let run = train::train_classification(&cfg, &dataset)?;
                    for row in &run.log {
                        eprintln!(
                            "epoch {:>3} lr {:.5} loss {:.5} OA {:.4}",
                            row.epoch, row.lr, row.train_loss, row.test_metric
                        );
                    }
                    run.store.save(&args.out.join("checkpoint.bin"))?;
                    report::write_text(
                        &args.out.join("train-log.csv"),
                        &report::train_log_csv(&run.log, "test_oa"),
                    )?;
                    report::write_text(
                        &args.out.join("metrics.txt"),
                        &run.final_metrics.summary(),
                    )?;
                    println!("{}", run.final_metrics.summary());
                }
                Task::Segmentation => {
                    let run = train::train_segmentation(&cfg, &dataset)?;
                    for row in &run.log {
                        eprintln!(
                            "epoch {:>3} lr {:.5} loss {:.5} mIoU {:.4}",
                            row.epoch, row.lr, row.train_loss, row.test_metric
                        );
                    }
                    run.store.save(&args.out.join("checkpoint.bin"))?;
                    report::write_text(
                        &args.out.join("train-log.csv"),
                        &report::train_log_csv(&run.log, "test_miou"),
                    )?;
                    report::write_text(
                        &args.out.join("metrics.txt"),
                        &run.final_metrics.summary(),
                    )?;
                    println!("{}", run.final_metrics.summary());
                }
            }
            Ok(())
        }
        Command::Eval { cfg: args, checkpoint } => {
            let cfg = load_config(&args)?;
            prepare_out(&args, &cfg)?;
            let dataset = load_dataset(&cfg)?;
            match cfg.task {
                Task::Classification => {
                    let (net, store) = build_classifier(&cfg, &dataset, Some(&checkpoint))?;
                    let labels: Vec<usize> = dataset
                        .test
                        .iter()
                        .map(|c| c.shape_label().unwrap_or(0))
                        .collect();
                    let preds = train::classify_clouds(&net, &store, &dataset.test)?;
                    let metrics = evaluate_classification(&preds, &labels)?;
                    report::write_text(
                        &args.out.join("metrics.csv"),
                        &report::classification_eval_csv(&preds, &labels),
                    )?;
                    report::write_text(&args.out.join("metrics.txt"), &metrics.summary())?;
                    println!("{}", metrics.summary());
                }
                Task::Segmentation => {
                    let (net, store) = build_segmenter(&cfg, &dataset, Some(&checkpoint))?;
                    let labels: Vec<Vec<usize>> = dataset
                        .test
                        .iter()
                        .map(|c| c.point_labels().unwrap_or_default().to_vec())
                        .collect();
                    let categories: Vec<usize> = dataset
                        .test
                        .iter()
                        .map(|c| c.category().unwrap_or(0))
                        .collect();
                    let preds =
                        train::segment_clouds(&net, &store, &dataset.test, &dataset.part_sets)?;
                    let metrics =
                        evaluate_segmentation(&preds, &labels, &categories, &dataset.part_sets)?;
                    let shape_ious =
                        train::per_shape_iou(&preds, &labels, &categories, &dataset.part_sets)?;
                    report::write_text(
                        &args.out.join("metrics.csv"),
                        &report::segmentation_eval_csv(&categories, &shape_ious),
                    )?;
                    report::write_text(&args.out.join("metrics.txt"), &metrics.summary())?;
                    println!("{}", metrics.summary());
                }
            }
            Ok(())
        }
        Command::Gradcheck { out, inject_fault } => {
            std::fs::create_dir_all(&out)?;
            let reports = gradcheck_suite(inject_fault);
            let mut lines = String::new();
            let mut failed = Vec::new();
            for r in &reports {
                let status = if r.passed() { "PASS" } else { "FAIL" };
                let line = format!(
                    "{status} {:<28} worst rel err {:.3e} (checked {}, skipped {})",
                    r.name, r.worst_rel_err, r.checked, r.skipped
                );
                println!("{line}");
                lines.push_str(&line);
                lines.push('\n');
                if !r.passed() {
                    failed.push(r.name.clone());
                }
            }
            report::write_text(&out.join("gradcheck.txt"), &lines)?;
            if failed.is_empty() {
                println!(
                    "all {} checks within tolerance {FD_TOLERANCE:.0e}",
                    reports.len()
                );
                Ok(())
            } else {
                Err(Error::contract(format!(
                    "gradient check failed for: {}",
                    failed.join(", ")
                )))
            }
        }
        Command::Ablate { cfg: args, seeds } => {
            let cfg = load_config(&args)?;
            if cfg.task != Task::Segmentation {
                return Err(Error::config("ablate expects a segmentation config"));
            }
            prepare_out(&args, &cfg)?;
            let configs_dir = args.out.join("configs");
            std::fs::create_dir_all(&configs_dir)?;
            let methods: [(&str, EncoderKind, ConvolveWith); 7] = [
                ("adaptconv", EncoderKind::Adapt, ConvolveWith::Spatial),
                ("graphconv", EncoderKind::GraphConv, ConvolveWith::Spatial),
                ("attention_point", EncoderKind::AttentionPoint, ConvolveWith::Spatial),
                ("attention_channel", EncoderKind::AttentionChannel, ConvolveWith::Spatial),
                ("feature", EncoderKind::Adapt, ConvolveWith::Feature),
                ("normal", EncoderKind::Adapt, ConvolveWith::Normal),
                ("initial_attributes", EncoderKind::Adapt, ConvolveWith::InitialAttributes),
            ];
            let mut rows = Vec::new();
            for (name, kind, variant) in methods {
                let mut mcfg = cfg.clone();
                mcfg.model.encoder_kind = kind;
                mcfg.model.variant = variant;
                report::write_text(
                    &configs_dir.join(format!("{name}.json")),
                    &format!("{}\n", mcfg.to_json_pretty()),
                )?;
                warn_feature_memory(&mcfg);
                let dataset = load_dataset(&mcfg)?;
                let mut mciou_sum = 0.0;
                let mut miou_sum = 0.0;
                for s in 0..seeds {
                    let mut scfg = mcfg.clone();
                    scfg.seed = mcfg.seed + s as u64;
                    let run = train::train_segmentation(&scfg, &dataset)?;
                    let mciou = run.final_metrics.mean_class_iou.unwrap_or(0.0);
                    let miou = run.final_metrics.mean_instance_iou.unwrap_or(0.0);
                    eprintln!(
                        "{name} seed {}: mcIoU {mciou:.4} mIoU {miou:.4} ({} epochs)",
                        scfg.seed, run.epochs_run
                    );
                    rows.push(report::AblationRow {
                        method: name.to_string(),
                        seed: scfg.seed.to_string(),
                        mciou,
                        miou,
                    });
                    mciou_sum += mciou;
                    miou_sum += miou;
                }
                rows.push(report::AblationRow {
                    method: name.to_string(),
                    seed: "mean".to_string(),
                    mciou: mciou_sum / seeds as f64,
                    miou: miou_sum / seeds as f64,
                });
            }
            let csv = report::ablation_csv(&rows);
            report::write_text(&args.out.join("ablation.csv"), &csv)?;
            println!("{csv}");
            Ok(())
        }
        Command::Robustness { cfg: args, checkpoint, mode } => {
            let cfg = load_config(&args)?;
            if cfg.task != Task::Classification {
                return Err(Error::config("robustness expects a classification config"));
            }
            prepare_out(&args, &cfg)?;
            let dataset = load_dataset(&cfg)?;
            let (net, store) = build_classifier(&cfg, &dataset, Some(&checkpoint))?;
            let n = cfg.dataset.points as f64;
            if matches!(mode, SweepMode::Dropout | SweepMode::Both) {
                let levels = [n, 0.75 * n, 0.5 * n, 0.25 * n];
                let curve = robustness_sweep(
                    &net,
                    &store,
                    &dataset.test,
                    RobustnessMode::Dropout,
                    &levels,
                    cfg.seed,
                )?;
                report::write_text(
                    &args.out.join("robustness-dropout.csv"),
                    &report::robustness_csv(&curve),
                )?;
                for (level, oa) in &curve {
                    println!("dropout keep {level}: OA {oa:.4}");
                }
            }
            if matches!(mode, SweepMode::Noise | SweepMode::Both) {
                let levels = [0.0, 0.01, 0.02, 0.05, 0.1];
                let curve = robustness_sweep(
                    &net,
                    &store,
                    &dataset.test,
                    RobustnessMode::Noise,
                    &levels,
                    cfg.seed,
                )?;
                report::write_text(
                    &args.out.join("robustness-noise.csv"),
                    &report::robustness_csv(&curve),
                )?;
                for (level, oa) in &curve {
                    println!("noise level {level}: OA {oa:.4}");
                }
            }
            Ok(())
        }
        Command::Featmap { cfg: args, checkpoint, layer, point, cloud } => {
            let cfg = load_config(&args)?;
            prepare_out(&args, &cfg)?;
            let dataset = load_dataset(&cfg)?;
            let target_cloud = dataset.test.get(cloud).ok_or_else(|| {
                Error::config(format!(
                    "cloud index {cloud} out of range ({} test clouds)",
                    dataset.test.len()
                ))
            })?;
            let distances = match cfg.task {
                Task::Classification => {
                    let (net, store) = build_classifier(&cfg, &dataset, Some(&checkpoint))?;
                    train::feature_distance_map(&net, &store, target_cloud, layer, point)?
                }
                Task::Segmentation => {
                    let (net, store) = build_segmenter(&cfg, &dataset, Some(&checkpoint))?;
                    train::feature_distance_map_seg(&net, &store, target_cloud, layer, point)?
                }
            };
            report::write_text(
                &args.out.join("featmap.csv"),
                &report::featmap_csv(target_cloud.positions(), &distances),
            )?;
            println!(
                "wrote {} distances from point {point} at layer {layer}",
                distances.len()
            );
            Ok(())
        }
        Command::ModelInfo(args) => {
            let cfg = load_config(&args)?;
            prepare_out(&args, &cfg)?;
            let dataset = load_dataset(&cfg)?;
            let text = match cfg.task {
                Task::Classification => {
                    let (net, store) = build_classifier(&cfg, &dataset, None)?;
                    let infos = net.layer_infos();
                    let total = net.count_parameters();
                    debug_assert_eq!(total, store.count_trainable());
                    model_info_report(&infos, total)
                }
                Task::Segmentation => {
                    let (net, store) = build_segmenter(&cfg, &dataset, None)?;
                    let infos = net.layer_infos();
                    let total = net.count_parameters();
                    debug_assert_eq!(total, store.count_trainable());
                    model_info_report(&infos, total)
                }
            };
            report::write_text(&args.out.join("model-info.txt"), &text)?;
            println!("{text}");
            Ok(())
        }
    }
}

fn build_classifier(
    cfg: &RunConfig,
    dataset: &Dataset,
    checkpoint: Option<&Path>,
) -> Result<(ClassificationNet, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(cfg.seed).stream("init");
    let net = ClassificationNet::new(&mut store, &mut rng, &cfg.model, dataset.class_count)?;
    if let Some(path) = checkpoint {
        if !path.exists() {
            return Err(Error::config(format!(
                "checkpoint {} does not exist",
                path.display()
            )));
        }
        store.assign_from(&ParamStore::load(path)?)?;
    }
    Ok((net, store))
}

fn build_segmenter(
    cfg: &RunConfig,
    dataset: &Dataset,
    checkpoint: Option<&Path>,
) -> Result<(SegmentationNet, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(cfg.seed).stream("init");
    let net = SegmentationNet::new(
        &mut store,
        &mut rng,
        &cfg.model,
        dataset.part_count,
        dataset.category_count,
    )?;
    if let Some(path) = checkpoint {
        if !path.exists() {
            return Err(Error::config(format!(
                "checkpoint {} does not exist",
                path.display()
            )));
        }
        store.assign_from(&ParamStore::load(path)?)?;
    }
    Ok((net, store))
}
