use std::path::{Path, PathBuf};

use adaptive_unfold::harness::{
    evaluate_agent, generate_datasets, load_checkpoint, read_datasets, run_sbl_baselines, save_checkpoint,
    train_agent, write_datasets, write_metrics_csv, write_train_log, zero_pad_eval, CheckpointMeta, Datasets,
    ExperimentConfig, MetricsRow,
};
use adaptive_unfold::environment::ActionMap;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

/// Off-grid SBL channel estimation with a DDPG-driven adaptive-depth unfolding.
#[derive(Debug, Parser)]
#[command(name = "adaptive-unfold", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON experiment config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `data_seed` (generate, run-sbl, zero-pad-eval) or
    /// `train_seed` (train, blackbox).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Dataset directory (default: `<out>/data`).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to evaluate (default: `<out>/checkpoint.bin`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the default config (every key, documented values) as JSON.
    Defaults {
        /// Destination file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate train/val/test datasets.
    Generate(Common),
    /// Run the off-grid and standard SBL baselines over the SNR sweep.
    RunSbl(Common),
    /// Train the unfolding agent.
    Train(Common),
    /// Evaluate a trained agent (ε sweep, fixed depths, rays, SNR).
    Evaluate(WithCheckpoint),
    /// Train and evaluate the black-box baseline under the same budget.
    Blackbox(Common),
    /// Evaluate a trained agent on a smaller system through zero padding.
    ZeroPadEval(WithCheckpoint),
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Defaults { out } => {
            let text = ExperimentConfig::default().to_json();
            match out {
                Some(path) => std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?,
                None => println!("{text}"),
            }
        }
        Command::Generate(c) => {
            let cfg = load_config(&c, SeedRole::Data)?;
            let data = generate_datasets(&cfg)?;
            let dir = data_dir(&c);
            write_datasets(&data, &dir)?;
            write_config(&c.out, &cfg)?;
            eprintln!(
                "wrote {} train / {} val / {} test samples to {}",
                data.train.len(),
                data.val.len(),
                data.test.len(),
                dir.display()
            );
        }
        Command::RunSbl(c) => {
            let cfg = load_config(&c, SeedRole::Data)?;
            let data = load_data(&c)?;
            let model = data.test.sensing_model()?;
            let runs = run_sbl_baselines(&cfg, &model, &data.test)?;
            let rows: Vec<MetricsRow> = runs.into_iter().map(|r| r.row).collect();
            emit(&c.out, "sbl.csv", &rows)?;
        }
        Command::Train(c) => {
            let cfg = load_config(&c, SeedRole::Train)?;
            train(&c, &cfg, cfg.action.clone(), "checkpoint.bin", "train_log.csv")?;
        }
        Command::Evaluate(w) => {
            let (agent, meta, data) = load_trained(&w)?;
            let model = data.test.sensing_model()?;
            let eval = evaluate_agent(&meta.config, &meta.action, &agent, &model, &data.test, "ddpg")?;
            emit(&w.common.out, "eval.csv", &eval.rows())?;
        }
        Command::Blackbox(c) => {
            let cfg = load_config(&c, SeedRole::Train)?;
            let (agent, data) = train(&c, &cfg, cfg.blackbox_action.clone(), "blackbox.bin", "blackbox_log.csv")?;
            let model = data.test.sensing_model()?;
            let eval = evaluate_agent(&cfg, &cfg.blackbox_action, &agent, &model, &data.test, "blackbox")?;
            emit(&c.out, "blackbox.csv", &eval.rows())?;
        }
        Command::ZeroPadEval(w) => {
            let (agent, meta, data) = load_trained(&w)?;
            let mut cfg = meta.config;
            if let Some(path) = &w.common.config {
                // only the smaller system is taken from the given config
                cfg.zero_pad = ExperimentConfig::load(path)?.zero_pad;
            }
            if let Some(seed) = w.common.seed {
                cfg.data_seed = seed;
            }
            cfg.validate()?;
            let runs = zero_pad_eval(&cfg, &meta.action, &agent, &data.test)?;
            let rows: Vec<MetricsRow> = runs.into_iter().map(|r| r.row).collect();
            emit(&w.common.out, "zero_pad.csv", &rows)?;
        }
    }
    Ok(())
}

enum SeedRole {
    Data,
    Train,
}

fn load_config(c: &Common, role: SeedRole) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        match role {
            SeedRole::Data => cfg.data_seed = seed,
            SeedRole::Train => cfg.train_seed = seed,
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn data_dir(c: &Common) -> PathBuf {
    c.data.clone().unwrap_or_else(|| c.out.join("data"))
}

fn load_data(c: &Common) -> Result<Datasets> {
    let dir = data_dir(c);
    if !dir.exists() {
        bail!("no datasets in {} (run `generate` first)", dir.display());
    }
    read_datasets(&dir).with_context(|| format!("reading datasets from {}", dir.display()))
}

fn write_config(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("config.json");
    std::fs::write(&path, cfg.to_json() + "\n").with_context(|| format!("writing {}", path.display()))
}

fn emit(out: &Path, name: &str, rows: &[MetricsRow]) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(name);
    write_metrics_csv(&path, rows)?;
    for r in rows {
        eprintln!(
            "{:<20} {:>8}={:<6} {:>8.2} dB  layers {:>5.2}",
            r.scheme, r.sweep_var, r.sweep_value, r.nmse_db, r.mean_layers
        );
    }
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn train(
    c: &Common,
    cfg: &ExperimentConfig,
    action: ActionMap,
    checkpoint: &str,
    log: &str,
) -> Result<(adaptive_unfold::ddpg::DdpgAgent, Datasets)> {
    let data = load_data(c)?;
    let model = data.train.sensing_model()?;
    let outcome = train_agent(cfg, &action, &model, &data.train, &data.val, &mut |s| eprintln!("{s}"))?;
    std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    let meta = CheckpointMeta {
        config: cfg.clone(),
        action,
        best_episode: outcome.best_episode,
        best_val_nmse_db: outcome.best_val_nmse_db,
    };
    save_checkpoint(&c.out.join(checkpoint), &outcome.agent, &meta)?;
    write_train_log(&c.out.join(log), &outcome.log)?;
    eprintln!(
        "best validation {:.2} dB at episode {}; wrote {}",
        outcome.best_val_nmse_db,
        outcome.best_episode + 1,
        c.out.join(checkpoint).display()
    );
    Ok((outcome.agent, data))
}

fn load_trained(w: &WithCheckpoint) -> Result<(adaptive_unfold::ddpg::DdpgAgent, CheckpointMeta, Datasets)> {
    let path = w.checkpoint.clone().unwrap_or_else(|| w.common.out.join("checkpoint.bin"));
    let (agent, meta) = load_checkpoint(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let data = load_data(&w.common)?;
    Ok((agent, meta, data))
}
