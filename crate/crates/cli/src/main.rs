//! Command-line surface: dataset generation, training, evaluation,
//! fusion-kind comparison, analysis exports, and the gradient checker.
//!
//! All machine-readable output is CSV; human summaries go to stdout. Every
//! run is deterministic for a fixed seed; the only environment input is the
//! opt-in THREADS variable for parallel eval/generation.

use clap::{Parser, Subcommand};
use layerfuse::analysis::{self, ProjectionSource};
use layerfuse::fusion::FusionKind;
use layerfuse::model::ModelConfig;
use layerfuse::parallel::{configure_threads_from_env, ExecMode};
use layerfuse::persistence::{
    load_checkpoint, load_dataset, save_checkpoint, CheckpointMeta, RunConfig,
};
use layerfuse::sample::GroundingSample;
use layerfuse::synthgen::{self, DatasetHeader, SceneSpec};
use layerfuse::train::{self, GradCheckConfig};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

#[derive(Parser)]
#[command(name = "layerfuse", version, about = "Grounding with encoder-layer fusion")]
struct Cli {
    /// Seed override; wins over the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory override; wins over the config file.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Run config file (flat key=value lines, # comments).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single key=value config override; repeatable, applied after the
    /// config file. Keys match the config file keys exactly.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic grounding dataset (JSONL).
    Generate {
        /// Scene spec as JSON; defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes metrics.csv and model.ckpt to the out dir.
    Train,
    /// Score a checkpoint on a dataset; writes per-sample rows as CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path (default: <out-dir>/eval.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a (fusion kind x seed) matrix and tabulate IoU@0.5.
    Compare {
        /// Comma-separated fusion kinds; all seven when omitted.
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<String>,
        /// Comma-separated seeds; the config seed when omitted.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Model diagnostics on a trained checkpoint.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
    /// Finite-difference gradient audit over every fusion kind.
    Gradcheck {
        /// Max relative error allowed per component.
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
    },
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Mean layer-attention profiles for IoU>0 vs IoU=0 regions.
    Attention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path (default: <out-dir>/attention.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// 2-D PCA of one sample's region representations.
    Pca {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sample to project (default: lowest id in the dataset).
        #[arg(long)]
        sample_id: Option<u64>,
        /// Representation source: "fused" or a stack index 0..=L.
        #[arg(long, default_value = "fused")]
        source: String,
        /// Output CSV path (default: <out-dir>/pca.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Nearest-neighbor margin of the ground truth, top layer vs fused.
    Margin {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path (default: <out-dir>/margins.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    configure_threads_from_env();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

type AnyError = Box<dyn std::error::Error>;

/// Config file first, then --set pairs, then the dedicated flags.
fn run_config(cli: &Cli) -> Result<RunConfig, AnyError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
    }
    for pair in &cli.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| format!("--set expects KEY=VALUE, got {pair:?}"))?;
        cfg.apply_kv(key.trim(), value.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn check_compat(model: &ModelConfig, header: &DatasetHeader, what: &str) -> Result<(), AnyError> {
    let enc = &model.encoder;
    let (dv, df) = (header.vocab.len(), header.spec.feature_dim());
    if enc.vocab_size != dv || enc.region_feature_dim != df {
        return Err(format!(
            "model/{what} dataset mismatch: model expects vocab_size={}, \
             region_feature_dim={}; dataset provides vocab_size={dv}, feature_dim={df} \
             (grammar v{})",
            enc.vocab_size, enc.region_feature_dim, header.grammar_version
        )
        .into());
    }
    Ok(())
}

fn load_split(path: &Path, model: &ModelConfig, what: &str)
    -> Result<Vec<GroundingSample>, AnyError> {
    let (header, samples) = load_dataset(path)?;
    check_compat(model, &header, what)?;
    Ok(samples)
}

fn write_out(path: &Path, contents: &str) -> Result<(), AnyError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, contents)?;
    Ok(())
}

/// Default location for a subcommand artifact: --out if given, else the
/// --out-dir (or cwd) plus a fixed file name.
fn out_path(out: Option<PathBuf>, out_dir: &Option<PathBuf>, name: &str) -> PathBuf {
    out.unwrap_or_else(|| out_dir.clone().unwrap_or_else(|| PathBuf::from(".")).join(name))
}

fn run(cli: Cli) -> Result<(), AnyError> {
    match &cli.command {
        Command::Generate { spec, count, out } => {
            let scene_spec = match spec {
                Some(path) => serde_json::from_str::<SceneSpec>(&std::fs::read_to_string(path)?)?,
                None => SceneSpec::default(),
            };
            let seed = cli.seed.unwrap_or(0);
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            synthgen::generate_dataset(&scene_spec, *count, seed, out)?;
            println!("wrote {count} samples to {} (seed {seed})", out.display());
        }

        Command::Train => {
            let cfg = run_config(&cli)?;
            let train_set = load_split(&cfg.train_data, &cfg.model, "train")?;
            let val_set = load_split(&cfg.val_data, &cfg.model, "val")?;
            let outcome = train::train(&cfg, &train_set, &val_set)?;

            std::fs::create_dir_all(&cfg.out_dir)?;
            let metrics_path = cfg.out_dir.join("metrics.csv");
            write_out(&metrics_path, &train::metrics_csv(&outcome.metrics))?;
            let ckpt_path = cfg.out_dir.join("model.ckpt");
            let meta = CheckpointMeta {
                model: cfg.model.clone(),
                seed: cfg.seed,
                step: outcome.steps,
            };
            save_checkpoint(&outcome.params, &meta, &ckpt_path)?;

            let last = outcome.metrics.last().expect("metrics never empty");
            println!(
                "trained {} for {} epochs ({} steps): val_iou05={}",
                cfg.model.fusion,
                cfg.epochs,
                outcome.steps,
                last.val_iou05
            );
            println!("wrote {} and {}", metrics_path.display(), ckpt_path.display());
        }

        Command::Eval { checkpoint, data, out } => {
            let (params, meta) = load_checkpoint(checkpoint)?;
            let samples = load_split(data, &meta.model, "eval")?;
            let outcome = train::evaluate(&meta.model, &params, &samples, ExecMode::default())?;
            let path = out_path(out.clone(), &cli.out_dir, "eval.csv");
            write_out(&path, &train::eval_csv(&outcome.rows))?;
            println!(
                "iou05={} over {} samples ({} fusion, step {}); wrote {}",
                outcome.iou05,
                outcome.rows.len(),
                meta.model.fusion,
                meta.step,
                path.display()
            );
        }

        Command::Compare { kinds, seeds } => {
            let base = run_config(&cli)?;
            let kinds: Vec<FusionKind> = if kinds.is_empty() {
                FusionKind::ALL.to_vec()
            } else {
                kinds
                    .iter()
                    .map(|k| FusionKind::from_str(k))
                    .collect::<Result<_, _>>()?
            };
            let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds.clone() };
            let train_set = load_split(&base.train_data, &base.model, "train")?;
            let val_set = load_split(&base.val_data, &base.model, "val")?;
            let test_set = match &base.test_data {
                Some(p) => Some(load_split(p, &base.model, "test")?),
                None => None,
            };
            let outcome = train::compare(
                &base,
                &kinds,
                &seeds,
                &train_set,
                &val_set,
                test_set.as_deref(),
                ExecMode::default(),
            )?;
            std::fs::create_dir_all(&base.out_dir)?;
            let path = base.out_dir.join("compare.csv");
            write_out(&path, &train::compare_csv(&outcome))?;
            for s in &outcome.summaries {
                let test = match (s.mean_test, s.std_test) {
                    (Some(m), Some(sd)) => format!(", test {m:.4} +/- {sd:.4}"),
                    _ => String::new(),
                };
                println!(
                    "{}: val {:.4} +/- {:.4}{} (extra params +{})",
                    s.kind, s.mean_val, s.std_val, test, s.extra_params
                );
            }
            println!("wrote {}", path.display());
        }

        Command::Analyze { what } => run_analyze(&cli, what)?,

        Command::Gradcheck { threshold } => {
            let rows = train::gradcheck_suite(&GradCheckConfig::default())?;
            let mut failures = 0usize;
            for row in &rows {
                let ok = row.max_err < *threshold;
                failures += usize::from(!ok);
                println!(
                    "{:<24} max_rel_err={:.3e} {}",
                    row.component,
                    row.max_err,
                    if ok { "ok" } else { "FAIL" }
                );
            }
            if failures > 0 {
                return Err(format!(
                    "{failures} of {} gradient components exceeded threshold {threshold}",
                    rows.len()
                )
                .into());
            }
            println!("all {} components under {threshold}", rows.len());
        }
    }
    Ok(())
}

fn run_analyze(cli: &Cli, what: &AnalyzeCommand) -> Result<(), AnyError> {
    match what {
        AnalyzeCommand::Attention { checkpoint, data, out } => {
            let (params, meta) = load_checkpoint(checkpoint)?;
            let samples = load_split(data, &meta.model, "analysis")?;
            let (over, dis) = analysis::attention_group_profile(
                &meta.model,
                &params,
                &samples,
                ExecMode::default(),
            )?;
            let path = out_path(out.clone(), &cli.out_dir, "attention.csv");
            write_out(&path, &analysis::attention_profile_csv(&[&over, &dis]))?;
            println!("{}", analysis::profile_observation(&over, &dis));
            println!("wrote {}", path.display());
        }

        AnalyzeCommand::Pca { checkpoint, data, sample_id, source, out } => {
            let (params, meta) = load_checkpoint(checkpoint)?;
            let samples = load_split(data, &meta.model, "analysis")?;
            let sample = match sample_id {
                Some(id) => samples
                    .iter()
                    .find(|s| s.id == *id)
                    .ok_or_else(|| format!("no sample with id {id} in {}", data.display()))?,
                None => samples
                    .iter()
                    .min_by_key(|s| s.id)
                    .ok_or("dataset has no samples")?,
            };
            let source = parse_source(source, meta.model.encoder.layers)?;
            let projection =
                analysis::pca_project_regions(&meta.model, &params, sample, source)?;
            let path = out_path(out.clone(), &cli.out_dir, "pca.csv");
            write_out(&path, &analysis::projection_csv(&projection))?;
            let (e1, e2) = projection.explained_variance;
            println!(
                "sample {}: {} regions, explained variance {:.4} + {:.4}; wrote {}",
                sample.id,
                projection.points.len(),
                e1,
                e2,
                path.display()
            );
        }

        AnalyzeCommand::Margin { checkpoint, data, out } => {
            let (params, meta) = load_checkpoint(checkpoint)?;
            let samples = load_split(data, &meta.model, "analysis")?;
            let rows = analysis::margins(&meta.model, &params, &samples, ExecMode::default())?;
            let path = out_path(out.clone(), &cli.out_dir, "margins.csv");
            write_out(&path, &analysis::margins_csv(&rows))?;
            let n = rows.len() as f64;
            let mean_top: f64 = rows.iter().map(|r| r.margin_top).sum::<f64>() / n;
            let mean_fused: f64 = rows.iter().map(|r| r.margin_fused).sum::<f64>() / n;
            println!(
                "mean margin over {} samples: top-layer {:.4}, fused {:.4}; wrote {}",
                rows.len(),
                mean_top,
                mean_fused,
                path.display()
            );
        }
    }
    Ok(())
}

fn parse_source(s: &str, layers: usize) -> Result<ProjectionSource, AnyError> {
    if s == "fused" {
        return Ok(ProjectionSource::Fused);
    }
    let idx: usize = s
        .parse()
        .map_err(|_| format!("--source must be \"fused\" or a stack index, got {s:?}"))?;
    if idx > layers {
        return Err(format!("--source index {idx} outside stack 0..={layers}").into());
    }
    Ok(ProjectionSource::Layer(idx))
}
