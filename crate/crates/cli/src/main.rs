use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use emocue_core::config::{load_run_config, RunConfig};
use emocue_core::datamodel::{load_manifest, DatasetManifest};
use emocue_core::graph_topology::Topology;
use emocue_core::inference::{
    evaluate, predict_voted, predictions_csv, run_ablation, AblationGrid, AblationSettings,
    Strategy,
};
use emocue_core::keypoint_features::OffsetConfig;
use emocue_core::model::{
    load_checkpoint, BranchKind, Checkpoint, GroupGraphs, StageTag, TrimodalModel,
};
use emocue_core::encoders::SpatialKind;
use emocue_core::synthgen::{describe, generate_dataset};
use emocue_core::training::{
    finetune_full, load_dataset, pretrain_branch, train_full_from_scratch, FeaturePipeline,
    TrainReport,
};
use emocue_core::weaksup::{
    parse_response, select_pseudo_label_with_threshold, simulate_pseudo_labels, PseudoLabel,
};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "emocue",
    version,
    about = "Trimodal win/loss pipeline: synthetic data, two-stage training, voted inference"
)]
struct Cli {
    /// Run configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-sample feature preparation (0 = default).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trimodal dataset with its manifest.
    Synth {
        /// Target directory; defaults to the configured data_dir.
        #[arg(long)]
        dir: Option<PathBuf>,
        /// Sample-id prefix; distinct prefixes keep generated sets mergeable.
        #[arg(long)]
        prefix: Option<String>,
        /// Override the configured sample count.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Audit feature extraction over a manifest: load every sample, build
    /// one deterministic feature view, and tabulate shapes.
    Featgen {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Stage 1: train one branch with a temporary head.
    Pretrain {
        /// keypoint | visual | text
        #[arg(long)]
        branch: String,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Stage 2: fine-tune the full model from the three branch checkpoints.
    Finetune {
        /// Gold-labeled manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Directory holding the pretrain checkpoints; defaults to out_dir.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Train from random initialization instead of branch checkpoints.
        #[arg(long)]
        from_scratch: bool,
        /// Unlabeled pool manifest to fold in with pseudo-labels.
        #[arg(long)]
        pool: Option<PathBuf>,
        /// Directory of reasoning-model response files, one per pool sample.
        #[arg(long)]
        responses: Option<PathBuf>,
        /// Simulate pseudo-labels by flipping pool truth at this rate.
        #[arg(long)]
        simulate_noise: Option<f64>,
    },
    /// Predict every record in a manifest with voted inference.
    Infer {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Voted predictions plus confusion-matrix metrics on labeled data.
    Evaluate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sweep encoders x offsets x strategies x seeds and tabulate accuracy.
    Ablate {
        /// Comma-separated spatial encoder kinds (mlp,gcn,gat,gin).
        #[arg(long, default_value = "mlp,gcn")]
        encoders: String,
        /// Comma-separated offset toggles (on,off).
        #[arg(long, default_value = "on")]
        offsets: String,
        /// Comma-separated strategies
        /// (direct,weak_sup,weak_sup+offsets,pretrain+weak_sup).
        #[arg(long, default_value = "direct")]
        strategies: String,
        /// Comma-separated seeds.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        /// Wall-clock budget; the table is flagged incomplete beyond it.
        #[arg(long, default_value_t = 1.0e9)]
        budget_seconds: f64,
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        eval: Option<PathBuf>,
    },
    /// Verify analytic gradients against finite differences; nonzero exit
    /// on any block above tolerance.
    Gradcheck,
    /// Summarize the artifacts found in a run directory.
    Report {
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => load_run_config(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = out.clone();
    }
    cfg.validate()?;
    if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global()
            .context("configuring worker threads")?;
    }
    Ok(cfg)
}

/// Every run records the exact configuration and seed it executed with.
fn echo_config(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.paths.out_dir)?;
    fs::write(
        cfg.paths.out_dir.join("run_config_echo.toml"),
        cfg.to_toml()?,
    )?;
    println!("seed: {}", cfg.seed);
    Ok(())
}

fn manifest_or_default(cfg: &RunConfig, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .unwrap_or_else(|| cfg.paths.data_dir.join("manifest.jsonl"))
}

fn load_manifest_at(path: &Path) -> Result<DatasetManifest> {
    load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn pipeline_for(cfg: &RunConfig) -> Result<FeaturePipeline> {
    let model = cfg.model_config()?;
    let mut pipeline = FeaturePipeline::from_config(&model, cfg.sampling_settings());
    pipeline.offsets = cfg.offset_config();
    Ok(pipeline)
}

fn model_from_checkpoint(cfg: &RunConfig, path: &Path) -> Result<TrimodalModel> {
    let model_cfg = cfg.model_config()?;
    let ckpt = load_checkpoint(path, Some(model_cfg.fingerprint()))
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let mut model = TrimodalModel::new(model_cfg, &Topology::openpose_default(), 0)?;
    model.params = ckpt.params;
    Ok(model)
}

fn write_report(out_dir: &Path, report: &TrainReport) -> Result<()> {
    let stem = &report.stage;
    fs::write(out_dir.join(format!("{stem}.jsonl")), report.to_jsonl())?;
    println!("{}", report.summary_table());
    if report.error_flag {
        bail!("stage '{stem}' finished without training (zero epochs?)");
    }
    Ok(())
}

fn parse_list<T>(s: &str, what: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<T> = s
        .split(',')
        .filter(|p| !p.is_empty())
        .map(|p| f(p.trim()))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        bail!("empty {what} list");
    }
    Ok(items)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Synth { dir, prefix, count } => {
            echo_config(&cfg)?;
            let target = dir.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
            let mut synth_cfg = cfg.synth_config()?;
            if let Some(prefix) = prefix {
                // Per-sample draws hash the full id, so a new prefix yields
                // new samples while class signal directions stay shared.
                synth_cfg.id_prefix = prefix.clone();
            }
            if let Some(count) = count {
                synth_cfg.sample_count = *count;
            }
            let (manifest, _) = generate_dataset(&synth_cfg, &target)?;
            println!(
                "wrote {} samples to {}",
                manifest.records.len(),
                target.display()
            );
            print!("{}", describe(&manifest)?.render());
        }
        Command::Featgen { manifest } => {
            echo_config(&cfg)?;
            let manifest = load_manifest_at(&manifest_or_default(&cfg, manifest))?;
            let pipeline = pipeline_for(&cfg)?;
            let samples = load_dataset(&manifest)?;
            let mut table = String::from(
                "sample_id\tframes\tkp_view\tfeature_width\tvisual_view\ttokens\tlabel\n",
            );
            for sample in &samples {
                let seed = emocue_core::seeding::derive_sample_seed(
                    cfg.seed,
                    "featgen",
                    &sample.sample_id,
                    &[],
                );
                let inputs = pipeline.view_inputs(sample, seed)?;
                let label = sample
                    .label
                    .map(|l| l.to_string())
                    .unwrap_or_else(|| "-".to_string());
                let _ = writeln!(
                    table,
                    "{}\t{}\t{}\t{}\t{}x{}\t{}\t{}",
                    sample.sample_id,
                    sample.keypoints.frames(),
                    inputs.keypoints.n_frames(),
                    inputs.keypoints.feature_width(),
                    inputs.visual.nrows(),
                    inputs.visual.ncols(),
                    inputs.tokens.len(),
                    label,
                );
            }
            fs::write(cfg.paths.out_dir.join("feature_audit.tsv"), &table)?;
            println!(
                "audited {} samples -> {}",
                samples.len(),
                cfg.paths.out_dir.join("feature_audit.tsv").display()
            );
        }
        Command::Pretrain { branch, manifest } => {
            echo_config(&cfg)?;
            let kind = match branch.as_str() {
                "keypoint" => BranchKind::Keypoint,
                "visual" => BranchKind::Visual,
                "text" => BranchKind::Text,
                other => bail!("unknown branch '{other}' (keypoint | visual | text)"),
            };
            let manifest = load_manifest_at(&manifest_or_default(&cfg, manifest))?;
            let model_cfg = cfg.model_config()?;
            let graphs = GroupGraphs::from_topology(&Topology::openpose_default());
            let pipeline = pipeline_for(&cfg)?;
            let stage = cfg.stage_config(StageTag::for_branch(kind));
            let (report, _) = pretrain_branch(
                &model_cfg,
                &graphs,
                kind,
                &manifest,
                &stage,
                &cfg.loss_params(),
                &pipeline,
                Some(&cfg.paths.out_dir),
            )?;
            write_report(&cfg.paths.out_dir, &report)?;
        }
        Command::Finetune {
            manifest,
            checkpoints,
            from_scratch,
            pool,
            responses,
            simulate_noise,
        } => {
            echo_config(&cfg)?;
            let gold = load_manifest_at(&manifest_or_default(&cfg, manifest))?;
            let model_cfg = cfg.model_config()?;
            let pipeline = pipeline_for(&cfg)?;
            let stage = cfg.stage_config(StageTag::FinetuneFull);
            let topology = Topology::openpose_default();

            let dataset = match pool {
                Some(pool_path) => {
                    let pool = load_manifest_at(pool_path)?;
                    let pseudo = gather_pseudo_labels(
                        &cfg,
                        &pool,
                        responses.as_deref(),
                        *simulate_noise,
                    )?;
                    let kept = pseudo.iter().filter(|p| !p.excluded).count();
                    println!(
                        "pseudo-labels: {} kept, {} excluded",
                        kept,
                        pseudo.len() - kept
                    );
                    emocue_core::weaksup::merge_datasets(&gold, &pseudo, &pool)?
                }
                None => {
                    if responses.is_some() || simulate_noise.is_some() {
                        bail!("--responses/--simulate-noise require --pool");
                    }
                    gold
                }
            };

            let (report, _) = if *from_scratch {
                train_full_from_scratch(
                    &model_cfg,
                    &topology,
                    &dataset,
                    &stage,
                    &cfg.loss_params(),
                    &pipeline,
                    Some(&cfg.paths.out_dir),
                )?
            } else {
                let dir = checkpoints.clone().unwrap_or_else(|| cfg.paths.out_dir.clone());
                let mut ckpts: Vec<Checkpoint> = Vec::with_capacity(3);
                for kind in [BranchKind::Keypoint, BranchKind::Visual, BranchKind::Text] {
                    let path = dir.join(format!("{}.ckpt", StageTag::for_branch(kind).name()));
                    ckpts.push(
                        load_checkpoint(&path, Some(model_cfg.fingerprint()))
                            .with_context(|| format!("loading {}", path.display()))?,
                    );
                }
                finetune_full(
                    &model_cfg,
                    &topology,
                    [&ckpts[0], &ckpts[1], &ckpts[2]],
                    &dataset,
                    &stage,
                    &cfg.loss_params(),
                    &pipeline,
                    Some(&cfg.paths.out_dir),
                )?
            };
            write_report(&cfg.paths.out_dir, &report)?;
        }
        Command::Infer {
            manifest,
            checkpoint,
        } => {
            echo_config(&cfg)?;
            let manifest = load_manifest_at(&manifest_or_default(&cfg, manifest))?;
            let ckpt_path = checkpoint
                .clone()
                .unwrap_or_else(|| cfg.paths.out_dir.join("finetune_full.ckpt"));
            let model = model_from_checkpoint(&cfg, &ckpt_path)?;
            let pipeline = pipeline_for(&cfg)?;
            let vote = cfg.vote_config();
            let samples = load_dataset(&manifest)?;
            let mut csv = String::from("sample_id,prediction,mean_win_probability\n");
            for sample in &samples {
                let voted = predict_voted(&model, sample, &pipeline, &vote)?;
                let _ = writeln!(
                    csv,
                    "{},{},{}",
                    sample.sample_id, voted.label, voted.mean_win_probability
                );
            }
            let out = cfg.paths.out_dir.join("predictions.csv");
            fs::write(&out, &csv)?;
            println!("wrote {} predictions -> {}", samples.len(), out.display());
        }
        Command::Evaluate {
            manifest,
            checkpoint,
        } => {
            echo_config(&cfg)?;
            let manifest = load_manifest_at(&manifest_or_default(&cfg, manifest))?;
            let ckpt_path = checkpoint
                .clone()
                .unwrap_or_else(|| cfg.paths.out_dir.join("finetune_full.ckpt"));
            let model = model_from_checkpoint(&cfg, &ckpt_path)?;
            let pipeline = pipeline_for(&cfg)?;
            let samples = load_dataset(&manifest)?;
            let evaluation = evaluate(&model, &samples, &pipeline, &cfg.vote_config())?;
            fs::write(
                cfg.paths.out_dir.join("predictions.csv"),
                predictions_csv(&evaluation.records),
            )?;
            fs::write(
                cfg.paths.out_dir.join("metrics.txt"),
                evaluation.metrics.render(),
            )?;
            print!("{}", evaluation.metrics.render());
        }
        Command::Ablate {
            encoders,
            offsets,
            strategies,
            seeds,
            budget_seconds,
            gold,
            pool,
            eval,
        } => {
            echo_config(&cfg)?;
            let grid = AblationGrid {
                encoders: parse_list(encoders, "encoder", |s| Ok(SpatialKind::parse(s)?))?,
                offsets_on: parse_list(offsets, "offsets", |s| match s {
                    "on" => Ok(true),
                    "off" => Ok(false),
                    other => bail!("offsets toggle must be 'on' or 'off', got '{other}'"),
                })?,
                strategies: parse_list(strategies, "strategy", |s| Ok(Strategy::parse(s)?))?,
                seeds: parse_list(seeds, "seed", |s| Ok(s.parse::<u64>()?))?,
            };
            let gold = load_manifest_at(&manifest_or_default(&cfg, gold))?;
            let pool = match pool {
                Some(p) => load_manifest_at(p)?,
                None => gold.clone(),
            };
            let eval_manifest = match eval {
                Some(p) => load_manifest_at(p)?,
                None => gold.clone(),
            };
            let settings = AblationSettings {
                config: cfg.model_config()?,
                sampling: cfg.sampling_settings(),
                offsets: if cfg.offsets.lags.is_empty() {
                    OffsetConfig::default()
                } else {
                    cfg.offset_config()
                },
                loss: cfg.loss_params(),
                pretrain_epochs: cfg.pretrain.epochs,
                finetune_epochs: cfg.finetune.epochs,
                batch_size: cfg.finetune.batch_size,
                learning_rate: cfg.finetune.learning_rate,
                val_fraction: cfg.finetune.val_fraction,
                noise_rate: cfg.weaksup.noise_rate,
                vote: cfg.vote_config(),
                budget_seconds: *budget_seconds,
            };
            let table = run_ablation(
                &grid,
                &gold,
                &pool,
                &eval_manifest,
                &Topology::openpose_default(),
                &settings,
            )?;
            fs::write(cfg.paths.out_dir.join("ablation.csv"), table.to_csv())?;
            print!("{}", table.render());
            if table.incomplete {
                bail!("ablation stopped early: budget exhausted");
            }
        }
        Command::Gradcheck => {
            let report = emocue_core::training::gradient_check_suite()?;
            print!("{}", report.render());
            if !report.all_pass {
                bail!("gradient check failed");
            }
        }
        Command::Report { run } => {
            let dir = run.clone().unwrap_or_else(|| cfg.paths.out_dir.clone());
            print!("{}", summarize_run_dir(&dir)?);
        }
    }
    Ok(())
}

fn gather_pseudo_labels(
    cfg: &RunConfig,
    pool: &DatasetManifest,
    responses: Option<&Path>,
    simulate_noise: Option<f64>,
) -> Result<Vec<PseudoLabel>> {
    match (responses, simulate_noise) {
        (Some(_), Some(_)) => bail!("--responses and --simulate-noise are mutually exclusive"),
        (None, None) => bail!("--pool requires --responses or --simulate-noise"),
        (Some(dir), None) => {
            let mut labels = Vec::new();
            for record in &pool.records {
                let path = dir.join(format!("{}.txt", record.sample_id));
                let resp = parse_response(&path)
                    .with_context(|| format!("parsing response {}", path.display()))?;
                labels.push(select_pseudo_label_with_threshold(
                    &resp,
                    cfg.weaksup.margin_threshold,
                ));
            }
            Ok(labels)
        }
        (None, Some(rate)) => {
            let truth: Vec<_> = pool
                .labeled()
                .map(|(r, l)| (r.sample_id.clone(), l))
                .collect();
            if truth.len() != pool.records.len() {
                bail!("--simulate-noise needs ground-truth labels on every pool record");
            }
            Ok(simulate_pseudo_labels(&truth, rate, cfg.seed)?)
        }
    }
}

fn summarize_run_dir(dir: &Path) -> Result<String> {
    if !dir.is_dir() {
        bail!("run directory {} does not exist", dir.display());
    }
    let mut out = format!("run directory: {}\n", dir.display());
    let mut found = 0usize;
    for stage in [
        "pretrain_keypoint",
        "pretrain_visual",
        "pretrain_text",
        "finetune_full",
    ] {
        let path = dir.join(format!("{stage}.jsonl"));
        if !path.is_file() {
            continue;
        }
        found += 1;
        let text = fs::read_to_string(&path)?;
        let mut best: Option<(u64, f64)> = None;
        let mut epochs = 0usize;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line)
                .with_context(|| format!("parsing {}", path.display()))?;
            epochs += 1;
            let epoch = v["epoch"].as_u64().unwrap_or(0);
            let val = v["val_accuracy"].as_f64().unwrap_or(0.0);
            if best.map_or(true, |(_, b)| val > b) {
                best = Some((epoch, val));
            }
        }
        match best {
            Some((epoch, val)) => {
                let _ = writeln!(
                    out,
                    "{stage}: {epochs} epochs, best val_accuracy {val:.4} at epoch {epoch}"
                );
            }
            None => {
                let _ = writeln!(out, "{stage}: report present but empty");
            }
        }
    }
    for file in ["metrics.txt", "ablation.csv"] {
        let path = dir.join(file);
        if path.is_file() {
            found += 1;
            let _ = writeln!(out, "--- {file} ---");
            out.push_str(&fs::read_to_string(&path)?);
        }
    }
    let ckpts: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ckpt"))
        .collect();
    if !ckpts.is_empty() {
        found += 1;
        let mut sorted = ckpts;
        sorted.sort();
        let _ = writeln!(out, "checkpoints: {}", sorted.join(", "));
    }
    if found == 0 {
        let _ = writeln!(out, "no recognized artifacts found");
    }
    Ok(out)
}
