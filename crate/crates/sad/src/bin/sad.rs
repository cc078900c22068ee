//! Pipeline driver: dataset generation, teacher/student training, teacher
//! annotation of unlabeled data, transfer-set filtering, distillation, and
//! evaluation, each as a reproducible subcommand.

use clap::{Parser, Subcommand};
use sad::anchors::AnchorSet;
use sad::config::{hex_string, RunConfig};
use sad::dataset::{read_dataset, write_dataset};
use sad::error::{Error, Result};
use sad::eval::{
    evaluate_detections, write_detections, write_pr_csv, write_report, DetectionRecord, EvalReport,
};
use sad::gradcheck::run_suite;
use sad::model::{load_checkpoint, save_checkpoint, Checkpoint, DenseModel, ModelDims};
use sad::scene::{generate_dataset, Scene};
use sad::semisup::{
    assemble_manifest, filter_unlabeled, manifest_kind, mix_pools, read_fragment, read_manifest,
    write_fragment, write_manifest, ManifestFragment, MixConfig, Provenance, TransferSetManifest,
};
use sad::teacher::{
    calibrate_threshold, detect, generate_targets, read_records_config_hash,
    read_target_records, write_target_records,
};
use sad::train::{train, train_with_mode, write_loss_csv, ExtraTerm, LossMode, TrainInputs};
use serde::Serialize;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "sad", version, about = "Semi-supervised adaptive distillation pipeline")]
struct Cli {
    /// Worker threads for per-image computation; results are bit-identical
    /// for any value, 1 is the reference path.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Train a detector on one dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Overrides the loss mode from the config.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<LossMode>,
        #[arg(long)]
        out: PathBuf,
        /// Teacher checkpoint; required by the distillation modes.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Calibrate the teacher threshold and annotate unlabeled scenes.
    Annotate {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Labeled dataset whose instance statistics set the calibration target.
        #[arg(long)]
        labeled_stats: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Split annotated scenes into pools and sample a transfer fragment.
    Filter {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        rho: f64,
        #[arg(long)]
        total: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a student against a transfer manifest (or fragment).
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Verify analytic loss gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Inject a deliberate gradient error (negative control).
        #[arg(long, hide = true)]
        perturb: bool,
    },
}

fn parse_mode(s: &str) -> std::result::Result<LossMode, String> {
    match s {
        "baseline" => Ok(LossMode::Baseline),
        "adl_distill" => Ok(LossMode::AdlDistill),
        "fdl_baseline" => Ok(LossMode::FdlBaseline),
        "mimic_baseline" => Ok(LossMode::MimicBaseline),
        "self_distill" => Ok(LossMode::SelfDistill),
        other => Err(format!(
            "unknown mode {other}; expected baseline|adl_distill|fdl_baseline|mimic_baseline|self_distill"
        )),
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(err.exit_code());
        }
    }
}

#[derive(Serialize)]
struct RunSummary<'a> {
    format: &'a str,
    version: u32,
    command: &'a str,
    mode: String,
    config_hash: &'a str,
    iterations: usize,
    final_total: f64,
    final_focal: f64,
    final_distill: f64,
    final_loc: f64,
}

fn model_dims_from_config(cfg: &RunConfig) -> ModelDims {
    ModelDims {
        classes: cfg.generator.classes,
        anchor_slots: cfg.anchors.scales.len(),
        window: cfg.model.window,
        features: cfg.generator.features,
    }
}

fn check_scenes_against(scenes: &[Scene], features: usize, classes: usize) -> Result<()> {
    for s in scenes {
        if s.f != features {
            return Err(Error::config(format!(
                "scene {} has {} features, expected {features}",
                s.scene_id, s.f
            )));
        }
        for b in &s.boxes {
            if b.class_id >= classes {
                return Err(Error::config(format!(
                    "scene {} references class {} beyond {classes}",
                    s.scene_id, b.class_id
                )));
            }
        }
    }
    Ok(())
}

fn write_run_summary(
    out_dir: &Path,
    command: &str,
    mode: String,
    config_hash: &str,
    log: &[sad::train::LossLogRow],
) -> Result<()> {
    let last = log.last().ok_or_else(|| Error::config("empty training log"))?;
    let summary = RunSummary {
        format: "sad-run",
        version: 1,
        command,
        mode,
        config_hash,
        iterations: log.len(),
        final_total: last.total,
        final_focal: last.focal,
        final_distill: last.distill,
        final_loc: last.loc,
    };
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::format(format!("run summary: {e}")))?;
    std::fs::write(out_dir.join("run.json"), text + "\n")?;
    Ok(())
}

fn run(cli: Cli) -> Result<i32> {
    if cli.workers == 0 {
        return Err(Error::config("--workers must be at least 1"));
    }
    match cli.command {
        Command::GenData {
            config,
            out,
            count,
            seed,
        } => {
            let cfg = RunConfig::load(&config)?;
            let scenes = generate_dataset(&cfg.generator, count, seed)?;
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            write_dataset(&out, &scenes, &cfg.config_hash())?;
            println!(
                "wrote {count} scenes to {} (config_hash={})",
                out.display(),
                cfg.config_hash()
            );
            Ok(0)
        }

        Command::Train {
            config,
            data,
            mode,
            out,
            teacher,
        } => {
            let cfg = RunConfig::load(&config)?;
            let mut trainer = cfg.trainer.clone();
            if let Some(mode) = mode {
                trainer.loss_mode = mode;
            }
            let (_, scenes) = read_dataset(&data)?;
            let dims = model_dims_from_config(&cfg);
            check_scenes_against(&scenes, dims.features, dims.classes)?;
            let teacher_ckpt = teacher.map(|p| load_checkpoint(&p)).transpose()?;
            let teacher_model = teacher_ckpt.as_ref().map(|c| &c.model);
            let student = DenseModel::init_seeded(dims, trainer.init_seed())?;
            let hash = cfg.config_hash();
            let output = train_with_mode(
                student,
                &scenes,
                teacher_model,
                &trainer,
                &cfg.loss,
                &cfg.anchors,
                &hash,
                cli.workers,
            )?;
            std::fs::create_dir_all(&out)?;
            save_checkpoint(
                &out.join("checkpoint.bin"),
                &output.model,
                &cfg.anchors.scales,
                &cfg.config_hash_bytes(),
            )?;
            write_loss_csv(&out.join("loss.csv"), &output.log, &hash)?;
            let mode_name = format!("{:?}", trainer.loss_mode);
            write_run_summary(&out, "train", mode_name, &hash, &output.log)?;
            let last = output.log.last().expect("non-empty log");
            println!(
                "trained {} iterations, final total loss {:.6} -> {}",
                output.log.len(),
                last.total,
                out.join("checkpoint.bin").display()
            );
            Ok(0)
        }

        Command::Annotate {
            teacher,
            data,
            labeled_stats,
            out,
            config,
        } => {
            let cfg = config.map(|p| RunConfig::load(&p)).transpose()?;
            let teacher_ckpt = load_checkpoint(&teacher)?;
            let (_, unlabeled) = read_dataset(&data)?;
            let (_, labeled) = read_dataset(&labeled_stats)?;
            if labeled.is_empty() {
                return Err(Error::config("labeled stats dataset is empty"));
            }
            let labeled_avg = labeled.iter().map(|s| s.boxes.len()).sum::<usize>() as f64
                / labeled.len() as f64;
            let infer = cfg
                .as_ref()
                .map(|c| c.inference)
                .unwrap_or_default();
            let anchors = anchors_for_checkpoint(&teacher_ckpt, &unlabeled)?;
            let calibration = calibrate_threshold(
                &teacher_ckpt.model,
                &unlabeled,
                labeled_avg,
                &anchors,
                &infer,
            )?;
            let records = generate_targets(
                &teacher_ckpt.model,
                &unlabeled,
                &calibration,
                &anchors,
                &infer,
            )?;
            let hash = cfg
                .as_ref()
                .map(|c| c.config_hash())
                .unwrap_or_else(|| hex_string(&teacher_ckpt.config_hash));
            std::fs::create_dir_all(&out)?;
            write_target_records(&out, &records, &calibration, &hash)?;
            println!(
                "calibrated threshold {:.6}: labeled avg {:.4}, unlabeled avg {:.4}{}{}",
                calibration.threshold,
                calibration.avg_instances_labeled,
                calibration.avg_instances_unlabeled_at_threshold,
                if calibration.within_tolerance {
                    " (within tolerance)"
                } else {
                    " (OUTSIDE tolerance)"
                },
                if calibration.boundary {
                    " [boundary: target unreachable]"
                } else {
                    ""
                }
            );
            println!("wrote {} target records to {}", records.len(), out.display());
            Ok(0)
        }

        Command::Filter {
            records,
            rho,
            total,
            seed,
            out,
            config,
        } => {
            let cfg = config.map(|p| RunConfig::load(&p)).transpose()?;
            let recs = read_target_records(&records)?;
            let (positive, negative) = filter_unlabeled(&recs);
            let mix = MixConfig {
                rho,
                total_count: total,
                seed,
            };
            let sampled = mix_pools(&positive, &negative, &mix)?;
            let hash = match &cfg {
                Some(c) => c.config_hash(),
                None => read_records_config_hash(&records)?,
            };
            let fragment = ManifestFragment {
                kind: "manifest-fragment".into(),
                version: 1,
                rho,
                total,
                seed,
                positive_pool: positive.len(),
                negative_pool: negative.len(),
                sampled_unlabeled_ids: sampled.clone(),
                records: records.to_string_lossy().into_owned(),
                config_hash: hash,
            };
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            write_fragment(&out, &fragment)?;
            println!(
                "positive pool {}, negative pool {}, sampled {} -> {}",
                positive.len(),
                negative.len(),
                sampled.len(),
                out.display()
            );
            Ok(0)
        }

        Command::Distill {
            config,
            manifest,
            teacher,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let hash = cfg.config_hash();
            let teacher_ckpt = load_checkpoint(&teacher)?;
            let (full_manifest, records_dir) = resolve_manifest(&cfg, &manifest, &hash)?;

            let (_, labeled) = read_dataset(Path::new(&full_manifest.provenance.labeled_data))?;
            let mut scenes = labeled;
            if !full_manifest.unlabeled_ids.is_empty() {
                let (_, unlabeled) =
                    read_dataset(Path::new(&full_manifest.provenance.unlabeled_data))?;
                scenes.extend(unlabeled);
            }
            let dims = model_dims_from_config(&cfg);
            check_scenes_against(&scenes, dims.features, dims.classes)?;

            let records = match records_dir {
                Some(dir) => Some(read_target_records(&dir)?),
                None => None,
            };
            let student = DenseModel::init_seeded(dims, cfg.trainer.init_seed())?;
            let inputs = TrainInputs {
                scenes: &scenes,
                manifest: &full_manifest,
                teacher: Some(&teacher_ckpt.model),
                records: records.as_ref(),
                extra: ExtraTerm::None,
            };
            let output = train(
                student,
                &inputs,
                &cfg.trainer,
                &cfg.loss,
                &cfg.anchors,
                cli.workers,
            )?;
            std::fs::create_dir_all(&out)?;
            save_checkpoint(
                &out.join("checkpoint.bin"),
                &output.model,
                &cfg.anchors.scales,
                &cfg.config_hash_bytes(),
            )?;
            write_loss_csv(&out.join("loss.csv"), &output.log, &hash)?;
            write_manifest(&out.join("manifest.json"), &full_manifest)?;
            let mode_name = serde_json::to_string(&full_manifest.mode)
                .map_err(|e| Error::format(format!("mode: {e}")))?
                .trim_matches('"')
                .to_string();
            write_run_summary(&out, "distill", mode_name, &hash, &output.log)?;
            let last = output.log.last().expect("non-empty log");
            println!(
                "distilled {} labeled + {} unlabeled scenes, final total loss {:.6} -> {}",
                full_manifest.labeled_ids.len(),
                full_manifest.unlabeled_ids.len(),
                last.total,
                out.join("checkpoint.bin").display()
            );
            Ok(0)
        }

        Command::Eval {
            model,
            data,
            out,
            config,
        } => {
            let cfg = config.map(|p| RunConfig::load(&p)).transpose()?;
            let ckpt = load_checkpoint(&model)?;
            let (_, scenes) = read_dataset(&data)?;
            if scenes.is_empty() {
                return Err(Error::config("evaluation dataset is empty"));
            }
            check_scenes_against(&scenes, ckpt.model.dims.features, ckpt.model.dims.classes)?;
            let infer = cfg.as_ref().map(|c| c.inference).unwrap_or_default();
            let anchors = anchors_for_checkpoint(&ckpt, &scenes)?;
            let mut per_image = Vec::with_capacity(scenes.len());
            let mut det_records = Vec::with_capacity(scenes.len());
            for scene in &scenes {
                let dets = detect(&ckpt.model, scene, &anchors, &infer, None)?;
                det_records.push(DetectionRecord {
                    scene_id: scene.scene_id.clone(),
                    detections: dets.clone(),
                });
                per_image.push((dets, scene.boxes.clone()));
            }
            let summary = evaluate_detections(&per_image, ckpt.model.dims.classes)?;
            let hash = cfg
                .as_ref()
                .map(|c| c.config_hash())
                .unwrap_or_else(|| hex_string(&ckpt.config_hash));
            let seed = cfg.as_ref().map(|c| c.trainer.seed).unwrap_or(0);
            let report = EvalReport::from_summary(&summary, seed, &hash);
            std::fs::create_dir_all(&out)?;
            write_report(&out.join("report.json"), &report)?;
            write_pr_csv(&out.join("pr_curves.csv"), &report)?;
            write_detections(&out.join("detections.jsonl"), &det_records)?;
            println!(
                "ap={:.4} ap50={:.4} ap75={:.4} over {} images ({} boxes)",
                report.ap, report.ap50, report.ap75, report.num_images, report.num_gt
            );
            Ok(0)
        }

        Command::Gradcheck {
            trials,
            seed,
            perturb,
        } => {
            let reports = run_suite(trials, seed, perturb)?;
            println!("{:<10} {:>7} {:>9} {:>13}  status", "kernel", "trials", "failures", "max_rel_err");
            let mut all_pass = true;
            for r in &reports {
                all_pass &= r.passed();
                println!(
                    "{:<10} {:>7} {:>9} {:>13.3e}  {}",
                    r.kernel,
                    r.trials,
                    r.failures,
                    r.max_rel_err,
                    if r.passed() { "PASS" } else { "FAIL" }
                );
            }
            Ok(if all_pass { 0 } else { 1 })
        }
    }
}

fn anchors_for_checkpoint(ckpt: &Checkpoint, scenes: &[Scene]) -> Result<AnchorSet> {
    let first = scenes
        .first()
        .ok_or_else(|| Error::config("dataset is empty"))?;
    let anchor_cfg = sad::anchors::AnchorConfig {
        scales: ckpt.anchor_scales.clone(),
        ..Default::default()
    };
    AnchorSet::generate(first.h, first.w, &anchor_cfg)
}

/// `--manifest` accepts either a full transfer manifest or a fragment from
/// `filter`; fragments are completed using the config's paths and mode.
fn resolve_manifest(
    cfg: &RunConfig,
    path: &Path,
    hash: &str,
) -> Result<(TransferSetManifest, Option<PathBuf>)> {
    match manifest_kind(path)?.as_str() {
        "transfer-manifest" => {
            let manifest = read_manifest(path)?;
            let records_dir = if manifest.provenance.records.is_empty() {
                None
            } else {
                Some(PathBuf::from(&manifest.provenance.records))
            };
            Ok((manifest, records_dir))
        }
        "manifest-fragment" => {
            let fragment = read_fragment(path)?;
            if cfg.paths.labeled_data.is_empty() {
                return Err(Error::config(
                    "config paths.labeled_data must be set to assemble a manifest from a fragment",
                ));
            }
            let (_, labeled) = read_dataset(Path::new(&cfg.paths.labeled_data))?;
            let labeled_ids: Vec<String> = labeled.iter().map(|s| s.scene_id.clone()).collect();
            let records_dir = PathBuf::from(&fragment.records);
            let records = read_target_records(&records_dir)?;
            let with_soft: BTreeSet<String> = records.keys().cloned().collect();
            let unlabeled_path = if cfg.paths.unlabeled_data.is_empty() {
                return Err(Error::config(
                    "config paths.unlabeled_data must be set to assemble a manifest from a fragment",
                ));
            } else {
                cfg.paths.unlabeled_data.clone()
            };
            let mode = cfg.semisup.mode;
            let unlabeled_ids = if mode.unlabeled_flags().is_some() {
                fragment.sampled_unlabeled_ids.clone()
            } else {
                Vec::new()
            };
            let manifest = assemble_manifest(
                &labeled_ids,
                &unlabeled_ids,
                mode,
                Provenance {
                    labeled_data: cfg.paths.labeled_data.clone(),
                    unlabeled_data: unlabeled_path,
                    records: fragment.records.clone(),
                },
                &with_soft,
                true,
                hash,
            )?;
            Ok((manifest, Some(records_dir)))
        }
        other => Err(Error::format(format!(
            "{} has unknown kind {other}",
            path.display()
        ))),
    }
}
