//! All six aggregation strategies over repeated seeds on a reduced cohort,
//! tabulated as best round and MAE, mean ± std.
//!
//! `cargo run --release --example compare_strategies -- [repeats] [rounds]`

use fedsct::compare::{compare_strategies, table_strategies};
use fedsct::config::ExperimentConfig;
use fedsct::logs::{strategies_csv, strategies_table};
use fedsct::model::UNetConfig;
use fedsct::preprocess::PreprocessConfig;

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> fedsct::Result<()> {
    let mut cfg = ExperimentConfig::desk();
    for c in cfg.centres.iter_mut().chain(std::iter::once(&mut cfg.unseen)) {
        c.fov_mm = 32.0;
    }
    cfg.preprocess = PreprocessConfig::for_target(32);
    cfg.model = UNetConfig::tiny(32);
    cfg.federation.rounds = arg(2, 6);
    cfg.training.max_validation_patients = Some(0);
    let rows = compare_strategies(&cfg, &table_strategies(), arg(1, 3), |r, s, out| {
        eprintln!("repeat {} {:<22} best round {}", r + 1, s.label(), out.best().round_index);
    })?;
    print!("{}", strategies_table(&rows));
    print!("{}", strategies_csv(&rows)?);
    Ok(())
}
