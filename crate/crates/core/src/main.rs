use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedsct::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use fedsct::compare::{compare_strategies, table_strategies};
use fedsct::config::ExperimentConfig;
use fedsct::dataset::{load_preprocessed, preprocess_dataset, write_raw_dataset};
use fedsct::federation::{
    prepare_cohort, prepare_data, run_experiment, unseen_cases, CentreEval, ExperimentData, ModelBundle,
};
use fedsct::inference::evaluate_cases;
use fedsct::logs::{strategies_csv, strategies_table, write_run_logs};
use fedsct::metrics::summarize;
use fedsct::phantom::generate_centre;
use fedsct::{Error, Result};

#[derive(Parser)]
#[command(name = "fedsct", version, about = "Federated MRI-to-synthetic-CT simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom cohorts of a configuration and write them to disk.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Preprocess a generated dataset.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Take preprocessing settings from this configuration instead of the manifest.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a federated experiment and write its logs and final checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Preprocessed dataset; generated in memory when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on one centre's evaluation patients.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        centre: String,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Repeat every aggregation strategy and tabulate best rounds and MAE.
    CompareStrategies {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Comma-separated strategy labels to keep, e.g. `FedAvg,FedAvg+FedProx`.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
    },
}

fn load_data(config: &ExperimentConfig, data: Option<&Path>) -> Result<ExperimentData> {
    match data {
        Some(d) => load_preprocessed(d),
        None => prepare_data(config),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn train(config: &Path, data: Option<&Path>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let data = load_data(&cfg, data)?;
    let out = run_experiment(&cfg, &data)?;
    write_run_logs(&cfg.output_dir, &out)?;
    let ckpt = Checkpoint {
        config: cfg.clone(),
        params: out.server.global.clone(),
        rng_cursor: cfg.federation.rounds as u64,
        round_index: out.server.round_index as u64,
    };
    let path = cfg.output_dir.join("final.ckpt");
    save_checkpoint(&path, &ckpt)?;
    let best = out.best();
    println!(
        "{}: best round {} with unseen median MAE {:.2} HU; final round MAE {:.2} HU",
        best.strategy,
        best.round_index,
        best.unseen.median_mae(),
        out.records.last().expect("round 0 is always recorded").unseen.median_mae()
    );
    println!("wrote {}", cfg.output_dir.display());
    Ok(())
}

fn evaluate(checkpoint: &Path, centre: &str, data: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let cfg = &ckpt.config;
    let centre_data = match data {
        Some(d) => {
            let all = load_preprocessed(d)?;
            std::iter::once(all.unseen)
                .chain(all.centres)
                .find(|c| c.centre_id == centre)
        }
        None => cfg
            .centres
            .iter()
            .chain(std::iter::once(&cfg.unseen))
            .find(|s| s.centre_id == centre)
            .map(|s| prepare_cohort(&generate_centre(s, cfg.seed)?, cfg))
            .transpose()?,
    }
    .ok_or_else(|| Error::config("centre", format!("no centre `{centre}` in the checkpoint's configuration")))?;
    let cases = if centre == cfg.unseen.centre_id {
        unseen_cases(&centre_data, cfg.training.max_unseen_patients)
    } else {
        let cap = cfg.training.max_validation_patients.unwrap_or(usize::MAX);
        centre_data.validation.iter().take(cap).cloned().collect()
    };
    let mut bundle = ModelBundle::new(cfg.paradigm, &cfg.model, 0)?;
    bundle.unflatten(&ckpt.params)?;
    let patients = evaluate_cases(&bundle, cfg.paradigm, &cases, &cfg.metrics)?;
    let eval = CentreEval {
        centre_id: centre.to_string(),
        summary: summarize(&patients)?,
        patients,
    };
    println!("{}", serde_json::to_string_pretty(&eval).expect("metrics serialize"));
    Ok(())
}

fn compare(config: &Path, repeats: usize, only: &[String]) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let strategies: Vec<_> = table_strategies()
        .into_iter()
        .filter(|s| only.is_empty() || only.contains(&s.label()))
        .collect();
    if strategies.is_empty() {
        return Err(Error::config("only", format!("no strategy matches {only:?}")));
    }
    if repeats == 0 {
        return Err(Error::config("repeats", "must be at least 1"));
    }
    let mut failed = None;
    let rows = compare_strategies(&cfg, &strategies, repeats, |r, s, out| {
        let dir = cfg.output_dir.join("compare").join(s.label()).join(format!("repeat_{}", r + 1));
        if let Err(e) = write_run_logs(&dir, out) {
            failed.get_or_insert(e);
        }
        eprintln!(
            "repeat {} {}: best round {} MAE {:.2} HU",
            r + 1,
            s.label(),
            out.best().round_index,
            out.best().unseen.median_mae()
        );
    })?;
    if let Some(e) = failed {
        return Err(e);
    }
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    write_text(&cfg.output_dir.join("strategies.csv"), &strategies_csv(&rows)?)?;
    print!("{}", strategies_table(&rows));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let m = write_raw_dataset(&out, &cfg)?;
            let n: usize = m.centres.iter().map(|c| c.patients.len()).sum();
            println!("wrote {n} patients from {} centres to {}", m.centres.len(), out.display());
            Ok(())
        }
        Command::Preprocess { input, out, config } => {
            let cfg = config.as_deref().map(ExperimentConfig::load).transpose()?;
            let m = preprocess_dataset(&input, &out, cfg.as_ref().map(|c| &c.preprocess))?;
            println!("preprocessed {} centres into {}", m.centres.len(), out.display());
            Ok(())
        }
        Command::Train { config, data } => train(&config, data.as_deref()),
        Command::Evaluate { checkpoint, centre, data } => evaluate(&checkpoint, &centre, data.as_deref()),
        Command::CompareStrategies { config, repeats, only } => compare(&config, repeats, &only),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
