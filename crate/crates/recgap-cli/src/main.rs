//! `recgap` — batch front door for the evaluation toolkit.
//!
//! Subcommands: `ingest`, `train`, `eval-offline`, `eval-online`,
//! `simulate`, `experiment`, `report`. Every run that writes files also
//! writes a resolved-config manifest next to them; re-running a manifest
//! reproduces the outputs byte for byte, regardless of `--threads`.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use config::RunConfig;
use recgap::data::{compute_popularity, InteractionLog};
use recgap::experiment::{
    msr_report, read_results_csv, run_simulated_experiment, write_results_csv, ExperimentGrid,
    SimulatedExperimentConfig,
};
use recgap::models::{load_model, save_model, ModelSpec, RecModel};
use recgap::offline::{evaluate, ColdStartPolicy, MetricConfig, Validation};
use recgap::online::{ictr, read_recommendation_log, write_recommendation_log};
use recgap::sim::{run_live_phase, SimModelSpec, World, WorldConfig};

#[derive(Parser)]
#[command(name = "recgap", version, about = "Offline/online recommender evaluation toolkit")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores; the
    /// RECGAP_THREADS environment variable is the fallback). Results are
    /// identical for any thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and index an interaction CSV; print stats, optionally write
    /// the normalized log.
    Ingest {
        /// Interaction CSV (`user_id,item_id,timestamp`).
        #[arg(long)]
        log: PathBuf,
        /// Write the normalized log here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model on a log and save it.
    Train {
        #[arg(long)]
        log: PathBuf,
        /// Model spec, e.g. `mf-knn f=16 reg=0.05 alpha=10 iters=3 m=100`,
        /// `mf-foldin f=8 reg=0.1`, `popularity`, `random`.
        #[arg(long)]
        spec: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output model file (JSON container).
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute one offline recall value for a saved model.
    EvalOffline {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Cross-validation split: `loo` or `lloo`.
        #[arg(long)]
        val: String,
        /// Popularity-penalization strength.
        #[arg(long, default_value_t = 0.0)]
        beta: f64,
        #[arg(long)]
        k: usize,
        /// `include_with_fallback` or `skip`.
        #[arg(long, default_value = "include_with_fallback")]
        cold_start: String,
        /// Include per-user contributions in the JSON.
        #[arg(long)]
        per_user: bool,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute implicit CTR from a recommendation log and a click log.
    EvalOnline {
        /// Recommendation CSV (`timestamp,user_id,item_ids`).
        #[arg(long)]
        recs: PathBuf,
        /// Interaction CSV holding the clicks.
        #[arg(long)]
        log: PathBuf,
        /// Attribution window, seconds.
        #[arg(long, default_value_t = 600)]
        d: i64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a world, serve an A/B split live, and emit its logs.
    Simulate {
        /// `key = value` config file; flags override.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full offline-vs-online model-selection experiment.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute the selection report and plot data from a results CSV.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}

fn run(cli: Cli) -> Result<()> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Ingest { log, out } => cmd_ingest(&log, out.as_deref()),
        Command::Train {
            log,
            spec,
            seed,
            out,
        } => cmd_train(&log, &spec, seed, &out),
        Command::EvalOffline {
            log,
            model,
            val,
            beta,
            k,
            cold_start,
            per_user,
            out,
        } => cmd_eval_offline(&log, &model, &val, beta, k, &cold_start, per_user, out.as_deref()),
        Command::EvalOnline { recs, log, d, out } => cmd_eval_online(&recs, &log, d, out.as_deref()),
        Command::Simulate { config, seed, out } => cmd_simulate(config.as_deref(), seed, &out),
        Command::Experiment { config, seed, out } => cmd_experiment(config.as_deref(), seed, &out),
        Command::Report { results, out } => cmd_report(&results, &out),
    }
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let from_env = std::env::var("RECGAP_THREADS")
        .ok()
        .map(|v| v.parse::<usize>())
        .transpose()
        .context("RECGAP_THREADS must be an integer")?;
    if let Some(threads) = flag.or(from_env) {
        if threads < 1 {
            bail!("--threads must be >= 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("thread pool already initialized")?;
    }
    Ok(())
}

/// All or nothing: write to a temp file in the target directory, then
/// rename. A failed run never leaves a partial output behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(dir) => tempfile::NamedTempFile::new_in(dir),
        None => tempfile::NamedTempFile::new_in("."),
    }
    .context("cannot create temporary file")?;
    tmp.write_all(bytes)?;
    tmp.persist(path)
        .with_context(|| format!("cannot write `{}`", path.display()))?;
    Ok(())
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, bytes),
        None => {
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

fn cmd_ingest(log_path: &Path, out: Option<&Path>) -> Result<()> {
    let log = InteractionLog::ingest_path(log_path)
        .with_context(|| format!("cannot ingest log `{}`", log_path.display()))?;
    if let Some(out) = out {
        let mut bytes = Vec::new();
        log.write_csv(&mut bytes)?;
        write_atomic(out, &bytes)?;
        let mut manifest = RunConfig::default();
        manifest.set("command", "ingest".to_string());
        manifest.set("log", log_path.display().to_string());
        write_manifest_for(out, &manifest)?;
    }
    let stats = serde_json::json!({
        "n_interactions": log.n_interactions(),
        "n_users": log.n_users(),
        "n_items": log.n_items(),
        "t_max": log.max_timestamp(),
    });
    println!("{stats}");
    Ok(())
}

fn cmd_train(log_path: &Path, spec_text: &str, seed: u64, out: &Path) -> Result<()> {
    let log = InteractionLog::ingest_path(log_path)
        .with_context(|| format!("cannot ingest log `{}`", log_path.display()))?;
    let spec = ModelSpec::parse(spec_text)?;
    let model = spec.train(&log, seed)?;
    let mut bytes = Vec::new();
    save_model(&model, &mut bytes)?;
    write_atomic(out, &bytes)?;

    let mut manifest = RunConfig::default();
    manifest.set("command", "train".to_string());
    manifest.set("log", log_path.display().to_string());
    manifest.set("spec", spec_text.to_string());
    manifest.set("seed", seed.to_string());
    write_manifest_for(out, &manifest)?;
    println!(
        "{}",
        serde_json::json!({
            "kind": model.metadata().kind,
            "items": model.catalog().len(),
            "out": out.display().to_string(),
        })
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval_offline(
    log_path: &Path,
    model_path: &Path,
    val: &str,
    beta: f64,
    k: usize,
    cold_start: &str,
    per_user: bool,
    out: Option<&Path>,
) -> Result<()> {
    let log = InteractionLog::ingest_path(log_path)
        .with_context(|| format!("cannot ingest log `{}`", log_path.display()))?;
    let model = load_model(fs::File::open(model_path).with_context(|| {
        format!("cannot open model `{}`", model_path.display())
    })?)?;
    let val = match val {
        "loo" => Validation::Loo,
        "lloo" => Validation::Lloo,
        other => bail!("unknown --val `{other}` (expected loo or lloo)"),
    };
    let cold_start = match cold_start {
        "include_with_fallback" => ColdStartPolicy::IncludeWithFallback,
        "skip" => ColdStartPolicy::Skip,
        other => bail!("unknown --cold-start `{other}`"),
    };
    let config = MetricConfig {
        val,
        beta,
        k,
        cold_start,
    };
    let pop = compute_popularity(&log);
    let result = evaluate(&log, &model, &config, Some(&pop))?;
    let json = result.to_json(&log, per_user);
    emit(out, format!("{json}\n").as_bytes())
}

fn cmd_eval_online(recs_path: &Path, log_path: &Path, d: i64, out: Option<&Path>) -> Result<()> {
    let recs = read_recommendation_log(
        fs::File::open(recs_path)
            .with_context(|| format!("cannot open recs `{}`", recs_path.display()))?,
    )?;
    let log = InteractionLog::ingest_path(log_path)
        .with_context(|| format!("cannot ingest log `{}`", log_path.display()))?;
    let result = ictr(&recs, &log, d)?;
    emit(out, format!("{}\n", result.to_json()).as_bytes())
}

fn world_from_config(cfg: &RunConfig) -> Result<WorldConfig> {
    let default = WorldConfig::default();
    Ok(WorldConfig {
        n_users: cfg.get_usize("users", default.n_users)?,
        n_items: cfg.get_usize("items", default.n_items)?,
        latent_dim: cfg.get_usize("latent_dim", default.latent_dim)?,
        zipf_exponent: cfg.get_f64("zipf_exponent", default.zipf_exponent)?,
        click_sharpness: cfg.get_f64("click_sharpness", default.click_sharpness)?,
        click_threshold: cfg.get_f64("click_threshold", default.click_threshold)?,
        position_decay: cfg.get_f64("position_decay", default.position_decay)?,
        session_rate: cfg.get_f64("session_rate", default.session_rate)?,
        exposures_per_session: cfg
            .get_usize("exposures_per_session", default.exposures_per_session)?,
        horizon: cfg.get_i64("horizon_seconds", default.horizon)?,
        seed: cfg.get_u64("seed", default.seed)?,
    })
}

fn model_specs_from_config(cfg: &RunConfig) -> Result<Vec<SimModelSpec>> {
    match cfg.get("models") {
        None => Ok(recgap::experiment::default_model_lineup()),
        Some(text) => text
            .split(';')
            .map(|s| SimModelSpec::parse(s.trim()).map_err(Into::into))
            .collect(),
    }
}

fn resolved_world_manifest(cfg: &mut RunConfig, world: &WorldConfig, specs: &[SimModelSpec]) {
    cfg.set("users", world.n_users.to_string());
    cfg.set("items", world.n_items.to_string());
    cfg.set("latent_dim", world.latent_dim.to_string());
    cfg.set("zipf_exponent", world.zipf_exponent.to_string());
    cfg.set("click_sharpness", world.click_sharpness.to_string());
    cfg.set("click_threshold", world.click_threshold.to_string());
    cfg.set("position_decay", world.position_decay.to_string());
    cfg.set("session_rate", world.session_rate.to_string());
    cfg.set(
        "exposures_per_session",
        world.exposures_per_session.to_string(),
    );
    cfg.set("horizon_seconds", world.horizon.to_string());
    cfg.set("seed", world.seed.to_string());
    let specs_text: Vec<String> = specs.iter().map(|s| s.label()).collect();
    cfg.set("models", specs_text.join("; "));
}

fn cmd_simulate(config_path: Option<&Path>, seed: Option<u64>, out_dir: &Path) -> Result<()> {
    let mut cfg = match config_path {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.set("seed", seed.to_string());
    }
    let world_cfg = world_from_config(&cfg)?;
    let specs = model_specs_from_config(&cfg)?;
    let retrain_every = cfg.get_i64("retrain_every_seconds", 6 * 3600)?;
    let serve_k = cfg.get_usize("serve_k", 10)?;

    let world = World::new(world_cfg.clone())?;
    let history = world.generate_history()?;
    let outcome = run_live_phase(&world, &history, &specs, retrain_every, serve_k)?;

    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create `{}`", out_dir.display()))?;

    let mut history_bytes = Vec::new();
    history.write_csv(&mut history_bytes)?;
    write_atomic(&out_dir.join("history.csv"), &history_bytes)?;

    let mut clicks_bytes = Vec::new();
    writeln!(clicks_bytes, "user_id,item_id,timestamp")?;
    for click in &outcome.clicks {
        writeln!(clicks_bytes, "{},{},{}", click.user, click.item, click.timestamp)?;
    }
    write_atomic(&out_dir.join("live_clicks.csv"), &clicks_bytes)?;

    for idx in 0..outcome.model_labels.len() {
        let events = outcome.events_for_model(idx);
        let mut bytes = Vec::new();
        write_recommendation_log(&events, &mut bytes)?;
        write_atomic(&out_dir.join(format!("recs_model{idx}.csv")), &bytes)?;
    }

    let run_manifest = serde_json::json!({
        "world": world_cfg,
        "models": outcome.model_labels,
        "retrain_every_seconds": retrain_every,
        "serve_k": serve_k,
        "retrain_instants": outcome.retrain_instants,
        "span": outcome.span,
        "n_recommendations": outcome.recommendations.len(),
        "n_clicks": outcome.clicks.len(),
    });
    write_atomic(
        &out_dir.join("run_manifest.json"),
        serde_json::to_string_pretty(&run_manifest)?.as_bytes(),
    )?;

    let mut manifest = cfg.clone();
    manifest.set("command", "simulate".to_string());
    manifest.set("retrain_every_seconds", retrain_every.to_string());
    manifest.set("serve_k", serve_k.to_string());
    resolved_world_manifest(&mut manifest, &world_cfg, &specs);
    write_atomic(&out_dir.join("manifest.cfg"), manifest.manifest().as_bytes())?;

    println!(
        "{}",
        serde_json::json!({
            "out": out_dir.display().to_string(),
            "history_interactions": history.n_interactions(),
            "recommendations": outcome.recommendations.len(),
            "live_clicks": outcome.clicks.len(),
        })
    );
    Ok(())
}

fn grid_from_config(cfg: &RunConfig) -> Result<ExperimentGrid> {
    let default = ExperimentGrid::default();
    let k_values = match cfg.get("k_values") {
        None => default.k_values,
        Some(text) => text
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .context("k_values must be comma-separated integers")?,
    };
    let beta_values = match cfg.get("beta_values") {
        None => default.beta_values,
        Some(text) => text
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .context("beta_values must be comma-separated reals")?,
    };
    let val_values = match cfg.get("val_values") {
        None => default.val_values,
        Some(text) => text
            .split(',')
            .map(|t| match t.trim() {
                "loo" => Ok(Validation::Loo),
                "lloo" => Ok(Validation::Lloo),
                other => bail!("unknown val `{other}`"),
            })
            .collect::<Result<_>>()?,
    };
    Ok(ExperimentGrid {
        k_values,
        beta_values,
        val_values,
    })
}

fn cmd_experiment(config_path: Option<&Path>, seed: Option<u64>, out_dir: &Path) -> Result<()> {
    let mut cfg = match config_path {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.set("seed", seed.to_string());
    }
    let world = world_from_config(&cfg)?;
    let specs = model_specs_from_config(&cfg)?;
    let defaults = SimulatedExperimentConfig::default();
    let experiment = SimulatedExperimentConfig {
        world: world.clone(),
        n_datasets: cfg.get_usize("datasets", defaults.n_datasets)?,
        model_specs: specs.clone(),
        retrain_every: cfg.get_i64("retrain_every_seconds", defaults.retrain_every)?,
        serve_k: cfg.get_usize("serve_k", defaults.serve_k)?,
        ictr_window: cfg.get_i64("ictr_window", defaults.ictr_window)?,
        seed: cfg.get_u64("seed", defaults.seed)?,
    };
    let grid = grid_from_config(&cfg)?;

    let results = run_simulated_experiment(&experiment, &grid)?;
    let report = msr_report(&results)?;

    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create `{}`", out_dir.display()))?;
    let mut results_bytes = Vec::new();
    write_results_csv(&results, &mut results_bytes)?;
    write_atomic(&out_dir.join("results.csv"), &results_bytes)?;
    write_atomic(
        &out_dir.join("msr_report.json"),
        serde_json::to_string_pretty(&report.to_json(true))?.as_bytes(),
    )?;
    let mut plot_bytes = Vec::new();
    report.write_plot_csv(&mut plot_bytes)?;
    write_atomic(&out_dir.join("plot_msr.csv"), &plot_bytes)?;

    let mut manifest = cfg.clone();
    manifest.set("command", "experiment".to_string());
    manifest.set("datasets", experiment.n_datasets.to_string());
    manifest.set("retrain_every_seconds", experiment.retrain_every.to_string());
    manifest.set("serve_k", experiment.serve_k.to_string());
    manifest.set("ictr_window", experiment.ictr_window.to_string());
    resolved_world_manifest(&mut manifest, &world, &specs);
    manifest.set("seed", experiment.seed.to_string());
    write_atomic(&out_dir.join("manifest.cfg"), manifest.manifest().as_bytes())?;

    let (best_val, best_beta) = report.best_config();
    println!(
        "{}",
        serde_json::json!({
            "out": out_dir.display().to_string(),
            "n_cells": report.n_cells,
            "best_val": best_val.as_str(),
            "best_beta": best_beta,
            "best_msr": report.msr(best_val, best_beta),
        })
    );
    Ok(())
}

fn cmd_report(results_path: &Path, out_dir: &Path) -> Result<()> {
    let file = fs::File::open(results_path)
        .with_context(|| format!("cannot open results `{}`", results_path.display()))?;
    let results = read_results_csv(std::io::BufReader::new(file))?;
    let report = msr_report(&results)?;

    fs::create_dir_all(out_dir)?;
    write_atomic(
        &out_dir.join("msr_report.json"),
        serde_json::to_string_pretty(&report.to_json(true))?.as_bytes(),
    )?;
    let mut plot_bytes = Vec::new();
    report.write_plot_csv(&mut plot_bytes)?;
    write_atomic(&out_dir.join("plot_msr.csv"), &plot_bytes)?;

    let mut manifest = RunConfig::default();
    manifest.set("command", "report".to_string());
    manifest.set("results", results_path.display().to_string());
    write_atomic(&out_dir.join("manifest.cfg"), manifest.manifest().as_bytes())?;

    let (best_val, best_beta) = report.best_config();
    println!(
        "{}",
        serde_json::json!({
            "out": out_dir.display().to_string(),
            "best_val": best_val.as_str(),
            "best_beta": best_beta,
            "best_msr": report.msr(best_val, best_beta),
        })
    );
    Ok(())
}

fn write_manifest_for(output: &Path, manifest: &RunConfig) -> Result<()> {
    let mut path = output.as_os_str().to_owned();
    path.push(".manifest.cfg");
    write_atomic(Path::new(&path), manifest.manifest().as_bytes())
}
