//! One binary, subcommand per pipeline stage:
//! generate data, cluster, train, evaluate, sweep thresholds, probe
//! robustness, run leave-one-cluster-out, render saliency overlays, and
//! print the cost model.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use cdira_core::checkpoint::{self, Checkpoint};
use cdira_core::config::{RunConfig, LOSS_WEIGHTS_NOTE, SCHEMA};
use cdira_core::data::{self, Dataset, Split};
use cdira_core::degrade::DegradeKind;
use cdira_core::error::{CdiraError, Result};
use cdira_core::eval::{self, RouteMode};
use cdira_core::flops::flops_estimate;
use cdira_core::loco::{self, LocoVariant, SizeGroup};
use cdira_core::model::ModelParams;
use cdira_core::train::{self, PipelineConfig};

#[derive(Parser)]
#[command(
    name = "cdira",
    version,
    about = "Dual-path image classifier with dynamic ROI routing and adversarial domain suppression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (manifest.csv + PPM images).
    GenData {
        /// Preset name (default, paper, small) or config file path.
        #[arg(long, default_value = "default")]
        config: String,
        /// Output directory (env CDIRA_OUT overrides).
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Warm up the backbone and fit pseudo-domain labels only.
    Cluster {
        #[arg(long, default_value = "default")]
        config: String,
        /// Dataset directory from gen-data; omitted = regenerate from config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run the full training pipeline; writes checkpoint.ck, history.jsonl,
    /// domains.csv.
    Train {
        #[arg(long, default_value = "default")]
        config: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Evaluate a checkpoint on the test split at one threshold.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Override the config embedded in the checkpoint.
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f32>,
        /// Routing mode: confidence (gate on c_g >= tau) or routing-head
        /// (gate on p_roi >= 0.5).
        #[arg(long, default_value = "confidence")]
        mode: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Accept a config whose hash differs from the checkpoint's.
        #[arg(long)]
        force: bool,
        /// Also run the single-image latency benchmark (median of N runs).
        #[arg(long)]
        latency: bool,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Sweep the routing threshold; writes tau_sweep.csv and tau_sweep.png.
    TauSweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Inclusive grid start:end:step.
        #[arg(long, default_value = "0.1:0.9:0.1")]
        grid: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Accuracy under blur / jpeg / lowlight / occlusion at rising severity.
    Robustness {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma list from {blur, jpeg, lowlight, occlusion}.
        #[arg(long, default_value = "blur,jpeg,lowlight,occlusion")]
        kinds: String,
        /// Comma list of severities (0 = clean).
        #[arg(long, default_value = "0,1,2,3,4")]
        severities: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Leave-one-cluster-out retraining over one size group.
    Loco {
        #[arg(long, default_value = "default")]
        config: String,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Cluster size group: large, middle, or small.
        #[arg(long, default_value = "small")]
        group: String,
        /// Comma list of training seeds.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Saliency overlays for the first N test images.
    Visualize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Print the FLOPs and parameter accounting for a config.
    Flops {
        #[arg(long, default_value = "default")]
        config: String,
    },
}

fn config_help_table() -> String {
    let mut out = String::from("Config keys (key = default, [protocol value where one exists]):\n");
    for doc in SCHEMA {
        out.push_str(&format!("  {} = {}", doc.key, doc.default));
        if let Some(p) = doc.paper {
            out.push_str(&format!("  [protocol: {p}]"));
        }
        out.push_str(&format!("\n      {}\n", doc.help));
    }
    out.push_str(&format!("\n{LOSS_WEIGHTS_NOTE}\n"));
    out.push_str("\nPresets: default, paper, small. --config accepts a preset name or a file.\n");
    out
}

fn main() -> ExitCode {
    let table = config_help_table();
    let command = Cli::command().after_help(table);
    let matches = match command.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            // help/version requests are successes; anything else is usage
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// CDIRA_OUT overrides any --out value.
fn resolve_out(flag: PathBuf) -> Result<PathBuf> {
    let dir = match std::env::var_os("CDIRA_OUT") {
        Some(v) => PathBuf::from(v),
        None => flag,
    };
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn load_config(name: &str, seed: Option<u64>, threads: Option<usize>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(name)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Load an exported dataset or synthesize one from the config.
fn load_or_generate(data: &Option<PathBuf>, cfg: &RunConfig) -> Result<Dataset> {
    match data {
        Some(dir) => data::import_dataset(dir),
        None => {
            let mut ds = data::generate_dataset(&cfg.synth_spec())?;
            data::stratified_split(
                &mut ds,
                (cfg.split_train, cfg.split_val, cfg.split_test),
                cfg.seed,
            )?;
            Ok(ds)
        }
    }
}

fn write_domains_csv(
    path: &Path,
    dataset: &Dataset,
    domains: &[usize],
    config_hash: u32,
) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# config_hash=0x{config_hash:08x}\n"));
    out.push_str("sample_id,split,domain_label\n");
    for (i, s) in dataset.samples.iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", s.id, s.split.tag(), domains[i]));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Rebuild the model and run config from a checkpoint (or an override).
fn load_model(
    ckpt: &Path,
    config_override: &Option<String>,
    force: bool,
) -> Result<(ModelParams, Checkpoint, RunConfig)> {
    let ck = checkpoint::load_checkpoint(ckpt)?;
    let cfg = match config_override {
        Some(name) => {
            let cfg = RunConfig::load(name)?;
            checkpoint::check_config_hash(&ck, cfg.hash(), force)?;
            cfg
        }
        None => RunConfig::parse_text(&ck.config_text)?,
    };
    let model = ck.into_model(cfg.backbone_config(), cfg.head_config(cfg.n_classes))?;
    Ok((model, ck, cfg))
}

fn parse_grid(grid: &str) -> Result<Vec<f32>> {
    let parts: Vec<&str> = grid.split(':').collect();
    if parts.len() != 3 {
        return Err(CdiraError::invalid(format!(
            "grid must be start:end:step, got {grid:?}"
        )));
    }
    let start: f32 = parts[0].parse().map_err(|_| CdiraError::invalid("bad grid start"))?;
    let end: f32 = parts[1].parse().map_err(|_| CdiraError::invalid("bad grid end"))?;
    let step: f32 = parts[2].parse().map_err(|_| CdiraError::invalid("bad grid step"))?;
    if step <= 0.0 || end < start {
        return Err(CdiraError::invalid("grid needs step > 0 and end >= start"));
    }
    let mut out = Vec::new();
    let mut i = 0u32;
    loop {
        let v = start + step * i as f32;
        if v > end + step * 0.5 {
            break;
        }
        out.push(v.min(end));
        i += 1;
    }
    Ok(out)
}

fn parse_usize_list(text: &str) -> Result<Vec<u64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| CdiraError::invalid(format!("bad integer {s:?}")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let cfg = load_config(&config, seed, None)?;
            let out = resolve_out(out)?;
            let mut ds = data::generate_dataset(&cfg.synth_spec())?;
            data::stratified_split(
                &mut ds,
                (cfg.split_train, cfg.split_val, cfg.split_test),
                cfg.seed,
            )?;
            data::export_dataset(&ds, &out)?;
            println!(
                "wrote {} samples ({} classes, {}x{}) to {}",
                ds.samples.len(),
                ds.n_classes,
                ds.image_size,
                ds.image_size,
                out.display()
            );
            Ok(())
        }
        Command::Cluster {
            config,
            data,
            out,
            seed,
            threads,
        } => {
            let cfg = load_config(&config, seed, threads)?;
            let out = resolve_out(out)?;
            let ds = load_or_generate(&data, &cfg)?;
            let pipeline = cfg.pipeline_config(ds.n_classes);

            // warm-up only, then fit the cluster model
            let mut warm_cfg = PipelineConfig {
                backbone: pipeline.backbone.clone(),
                heads: pipeline.heads.clone(),
                train: pipeline.train.clone(),
                cluster_candidates: pipeline.cluster_candidates.clone(),
                cluster_sample_size: pipeline.cluster_sample_size,
            };
            warm_cfg.train.max_epochs = 0;
            let outcome = train::train_pipeline(&ds, &warm_cfg)?;
            let cluster_model = outcome.cluster.as_ref().expect("cluster model fitted");
            write_domains_csv(&out.join("domains.csv"), &ds, &outcome.pseudo_domains, cfg.hash())?;
            let ck = Checkpoint::from_model(
                &outcome.model,
                outcome.cluster.clone(),
                cfg.warmup_epochs as u32,
                cfg.seed,
                cfg.hash(),
                cfg.canonical_text(),
            );
            checkpoint::save_checkpoint(&out.join("cluster.ck"), &ck)?;
            println!(
                "selected K* = {} (silhouettes: {:?})",
                cluster_model.k_star, cluster_model.silhouette_by_k
            );
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            threads,
        } => {
            let cfg = load_config(&config, seed, threads)?;
            let out = resolve_out(out)?;
            let ds = load_or_generate(&data, &cfg)?;
            let pipeline = cfg.pipeline_config(ds.n_classes);
            let outcome = train::train_pipeline(&ds, &pipeline)?;
            std::fs::write(
                out.join("history.jsonl"),
                train::history_to_jsonl(&outcome.history),
            )?;
            write_domains_csv(&out.join("domains.csv"), &ds, &outcome.pseudo_domains, cfg.hash())?;
            let ck = Checkpoint::from_model(
                &outcome.model,
                outcome.cluster.clone(),
                outcome.best_epoch as u32,
                cfg.seed,
                cfg.hash(),
                cfg.canonical_text(),
            );
            checkpoint::save_checkpoint(&out.join("checkpoint.ck"), &ck)?;
            let last = outcome.history.last();
            println!(
                "trained to epoch {} (best {}), val_accuracy {:.4}{}",
                outcome.history.len(),
                outcome.best_epoch,
                last.map_or(0.0, |r| r.val_accuracy),
                if outcome.diverged { " [DIVERGED]" } else { "" }
            );
            Ok(())
        }
        Command::Eval {
            ckpt,
            config,
            data,
            tau,
            mode,
            out,
            force,
            latency,
            threads,
        } => {
            let (model, _ck, mut cfg) = load_model(&ckpt, &config, force)?;
            if let Some(t) = threads {
                cfg.threads = t;
            }
            let out = resolve_out(out)?;
            let ds = load_or_generate(&data, &cfg)?;
            let tau = tau.unwrap_or(cfg.tau);
            let mode = RouteMode::from_tag(&mode)?;
            let n_domains = model.domain.map_or(0, |d| d.n_domains);
            let fl = flops_estimate(&model.backbone_cfg, &model.head_cfg, n_domains);
            let test_idx = ds.split_indices(Split::Test);
            let records =
                eval::eval_dataset(&model, &fl, &ds, &test_idx, tau, mode, cfg.threads)?;
            let preds: Vec<usize> = records.iter().map(|r| r.pred).collect();
            let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
            let report = eval::metrics(&preds, &labels, ds.n_classes)?;
            let (usage, per_class) = eval::classwise_roi_usage(&records, ds.n_classes);

            let mut text = format!("# config_hash=0x{:08x}\n", cfg.hash());
            text.push_str("metric,value\n");
            text.push_str(&format!("accuracy,{:.6}\n", report.accuracy));
            text.push_str(&format!("macro_precision,{:.6}\n", report.macro_precision));
            text.push_str(&format!("macro_recall,{:.6}\n", report.macro_recall));
            text.push_str(&format!("macro_f1,{:.6}\n", report.macro_f1));
            text.push_str(&format!("roi_usage,{:.6}\n", usage));
            std::fs::write(out.join("metrics.csv"), text)?;

            let mut cw = format!("# config_hash=0x{:08x}\n", cfg.hash());
            cw.push_str("class,roi_usage,support\n");
            for (c, u) in per_class.iter().enumerate() {
                cw.push_str(&format!("{},{:.6},{}\n", c, u, report.per_class[c].support));
            }
            std::fs::write(out.join("class_usage.csv"), cw)?;

            println!(
                "accuracy {:.4}  macro_f1 {:.4}  roi_usage {:.4}  (tau {}, mode {})",
                report.accuracy,
                report.macro_f1,
                usage,
                tau,
                mode.tag()
            );
            if latency {
                let image = ds.image_tensor(test_idx[0]);
                let median = eval::latency_benchmark(&model, &fl, &image, tau, 100, 10)?;
                println!("median single-image latency: {:.3} ms (informational)", median * 1e3);
            }
            Ok(())
        }
        Command::TauSweep {
            ckpt,
            data,
            grid,
            out,
            force,
            threads,
        } => {
            let (model, _ck, mut cfg) = load_model(&ckpt, &None, force)?;
            if let Some(t) = threads {
                cfg.threads = t;
            }
            let out = resolve_out(out)?;
            let ds = load_or_generate(&data, &cfg)?;
            let grid = parse_grid(&grid)?;
            let n_domains = model.domain.map_or(0, |d| d.n_domains);
            let fl = flops_estimate(&model.backbone_cfg, &model.head_cfg, n_domains);
            let test_idx = ds.split_indices(Split::Test);
            let outputs = eval::collect_sweep_outputs(&model, &ds, &test_idx, cfg.threads)?;
            let rows = eval::tau_sweep_rows(&outputs, &grid, ds.n_classes, &fl)?;
            eval::write_tau_sweep_csv(&out.join("tau_sweep.csv"), &rows, cfg.hash())?;
            eval::plot_tau_sweep(&out.join("tau_sweep.png"), &rows)?;
            for r in &rows {
                println!(
                    "tau {:.2}: f1 {:.4}, usage {:.4}, expected flops {:.0}",
                    r.tau, r.macro_f1, r.usage, r.expected_flops
                );
            }
            Ok(())
        }
        Command::Robustness {
            ckpt,
            data,
            kinds,
            severities,
            out,
            seed,
            threads,
        } => {
            let (model, ck, mut cfg) = load_model(&ckpt, &None, false)?;
            if let Some(t) = threads {
                cfg.threads = t;
            }
            let out = resolve_out(out)?;
            let ds = load_or_generate(&data, &cfg)?;
            let kinds: Vec<DegradeKind> = kinds
                .split(',')
                .map(|k| DegradeKind::from_tag(k.trim()))
                .collect::<Result<_>>()?;
            let severities: Vec<u32> = parse_usize_list(&severities)?
                .into_iter()
                .map(|v| v as u32)
                .collect();
            let n_domains = model.domain.map_or(0, |d| d.n_domains);
            let fl = flops_estimate(&model.backbone_cfg, &model.head_cfg, n_domains);
            let test_idx = ds.split_indices(Split::Test);
            let rows = eval::robustness_eval(
                &model,
                &fl,
                &ds,
                &test_idx,
                &kinds,
                &severities,
                cfg.tau,
                RouteMode::Confidence,
                seed.unwrap_or(ck.seed),
                cfg.threads,
            )?;
            eval::write_robustness_csv(&out.join("robustness.csv"), &rows, cfg.hash())?;
            eval::plot_robustness(&out.join("robustness.png"), &rows)?;
            for r in &rows {
                println!(
                    "{} severity {}: accuracy {:.4}, f1 {:.4}",
                    r.kind.tag(),
                    r.severity,
                    r.accuracy,
                    r.macro_f1
                );
            }
            Ok(())
        }
        Command::Loco {
            config,
            data,
            group,
            seeds,
            out,
            threads,
        } => {
            let cfg = load_config(&config, None, threads)?;
            let out = resolve_out(out)?;
            let ds = load_or_generate(&data, &cfg)?;
            let group = SizeGroup::from_tag(&group)?;
            let seeds = parse_usize_list(&seeds)?;
            let pipeline = cfg.pipeline_config(ds.n_classes);

            // fit pseudo-domains once on the full dataset
            let mut warm_cfg = PipelineConfig {
                backbone: pipeline.backbone.clone(),
                heads: pipeline.heads.clone(),
                train: pipeline.train.clone(),
                cluster_candidates: pipeline.cluster_candidates.clone(),
                cluster_sample_size: pipeline.cluster_sample_size,
            };
            warm_cfg.train.max_epochs = 0;
            let outcome = train::train_pipeline(&ds, &warm_cfg)?;
            let k_star = outcome.cluster.as_ref().expect("cluster model").k_star;

            let rows = loco::loco_eval(
                &ds,
                &outcome.pseudo_domains,
                k_star,
                group,
                &LocoVariant::standard_pair(),
                &seeds,
                &pipeline,
            )?;
            loco::write_loco_csv(&out.join("loco.csv"), &rows, cfg.hash())?;
            for r in &rows {
                println!(
                    "cluster {} ({}) variant {} seed {}: accuracy {:.4} over {} samples",
                    r.cluster_id,
                    r.group.tag(),
                    r.variant,
                    r.seed,
                    r.accuracy,
                    r.n_eval
                );
            }
            Ok(())
        }
        Command::Visualize {
            ckpt,
            data,
            count,
            out,
        } => {
            let (model, _ck, cfg) = load_model(&ckpt, &None, false)?;
            let out = resolve_out(out)?;
            let ds = load_or_generate(&data, &cfg)?;
            let test_idx = ds.split_indices(Split::Test);
            for &idx in test_idx.iter().take(count) {
                let image = ds.image_tensor(idx);
                let id = ds.samples[idx].id;
                eval::saliency_overlay(&model, &image, &out.join(format!("overlay_{id:06}.png")))?;
                // raw saliency map, grayscale
                let mut tape = cdira_core::autodiff::Tape::new();
                let (f, _) = cdira_core::model::forward_trunk(&mut tape, &model, &image)?;
                let sal = cdira_core::model::saliency(tape.value(f));
                let gray = eval::saliency_grayscale(&sal, ds.image_size);
                cdira_core::imageio::write_png(&out.join(format!("saliency_{id:06}.png")), &gray)?;
            }
            println!("wrote {} overlays to {}", count.min(test_idx.len()), out.display());
            Ok(())
        }
        Command::Flops { config } => {
            let cfg = load_config(&config, None, None)?;
            let backbone = cfg.backbone_config();
            let heads = cfg.head_config(cfg.n_classes);
            let fl = flops_estimate(&backbone, &heads, 0);
            println!("global_path_flops: {}", fl.global_path);
            println!("roi_extra_flops:   {}", fl.roi_extra);
            println!("params:            {} (domain head excluded; it never runs at inference)", fl.params);
            Ok(())
        }
    }
}
