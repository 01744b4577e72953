//! Plot-ready run artefacts: `rounds.csv`, `summary.json` and the strategy table.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::federation::{ExperimentOutcome, RoundRecord};
use crate::metrics::CohortSummary;

pub const ROUNDS_HEADER: [&str; 6] = ["round_index", "centre_id", "mae", "ssim", "psnr", "loss"];

fn num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, "csv", e.to_string())
}

/// One row per (round, centre): cohort medians and the client's mean local
/// loss (empty for round 0 and for the unseen centre).
pub fn rounds_csv(records: &[RoundRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let p = Path::new("rounds.csv");
    w.write_record(ROUNDS_HEADER).map_err(|e| csv_err(p, e))?;
    for r in records {
        for v in r.validation.iter().chain(std::iter::once(&r.unseen)) {
            let loss = r
                .client_loss
                .iter()
                .find(|c| c.centre_id == v.centre_id)
                .map_or(String::new(), |c| num(c.loss));
            w.write_record([
                r.round_index.to_string(),
                v.centre_id.clone(),
                num(v.summary.mae.median),
                num(v.summary.ssim.median),
                num(v.summary.psnr.median),
                loss,
            ])
            .map_err(|e| csv_err(p, e))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[derive(Serialize)]
struct RoundSummary<'a> {
    round_index: usize,
    unseen: &'a CohortSummary,
}

#[derive(Serialize)]
struct Summary<'a> {
    strategy: &'a str,
    unseen_centre: &'a str,
    best_round: usize,
    best: &'a RoundRecord,
    rounds: Vec<RoundSummary<'a>>,
}

pub fn summary_json(outcome: &ExperimentOutcome) -> String {
    let best = outcome.best();
    let s = Summary {
        strategy: &best.strategy,
        unseen_centre: &best.unseen.centre_id,
        best_round: best.round_index,
        best,
        rounds: outcome
            .records
            .iter()
            .map(|r| RoundSummary {
                round_index: r.round_index,
                unseen: &r.unseen.summary,
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&s).expect("summary serializes");
    text.push('\n');
    text
}

/// Write `rounds.csv` and `summary.json` into `dir`.
pub fn write_run_logs(dir: &Path, outcome: &ExperimentOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("rounds.csv", rounds_csv(&outcome.records)?)?;
    write("summary.json", summary_json(outcome))
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-repeat best rounds and MAEs of one strategy.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrategyRow {
    pub strategy: String,
    pub rounds: Vec<usize>,
    pub maes: Vec<f64>,
}

impl StrategyRow {
    pub fn round_stats(&self) -> (f64, f64) {
        mean_std(&self.rounds.iter().map(|&r| r as f64).collect::<Vec<_>>())
    }

    pub fn mae_stats(&self) -> (f64, f64) {
        mean_std(&self.maes)
    }
}

/// The strategy table: one row per strategy, one column per experiment
/// for rounds and MAE, then mean and standard deviation of each.
pub fn strategies_csv(rows: &[StrategyRow]) -> Result<String> {
    let repeats = rows.iter().map(|r| r.rounds.len()).max().unwrap_or(0);
    let p = Path::new("strategies.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["strategy".to_string()];
    header.extend((1..=repeats).map(|i| format!("round_{i}")));
    header.extend(["round_mean".into(), "round_std".into()]);
    header.extend((1..=repeats).map(|i| format!("mae_{i}")));
    header.extend(["mae_mean".into(), "mae_std".into()]);
    w.write_record(&header).map_err(|e| csv_err(p, e))?;
    for r in rows {
        if r.rounds.len() != repeats || r.maes.len() != repeats {
            return Err(Error::InvalidInput(format!("strategy {} has a ragged row", r.strategy)));
        }
        let (rm, rs) = r.round_stats();
        let (mm, ms) = r.mae_stats();
        let mut rec = vec![r.strategy.clone()];
        rec.extend(r.rounds.iter().map(|v| v.to_string()));
        rec.extend([num(rm), num(rs)]);
        rec.extend(r.maes.iter().map(|&v| num(v)));
        rec.extend([num(mm), num(ms)]);
        w.write_record(&rec).map_err(|e| csv_err(p, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Human-readable `mean ± std` table.
pub fn strategies_table(rows: &[StrategyRow]) -> String {
    let mut out = format!("{:<28} {:>16} {:>20}\n", "Strategy", "Round", "MAE [HU]");
    for r in rows {
        let (rm, rs) = r.round_stats();
        let (mm, ms) = r.mae_stats();
        out.push_str(&format!(
            "{:<28} {:>16} {:>20}\n",
            r.strategy,
            format!("{rm:.1} ± {rs:.1}"),
            format!("{mm:.1} ± {ms:.1}")
        ));
    }
    out
}
