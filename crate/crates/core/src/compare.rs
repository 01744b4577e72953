//! Repeated runs of several aggregation strategies on shared data.

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::federation::{prepare_data, run_experiment, BaseStrategy, ExperimentOutcome, StrategyConfig};
use crate::logs::StrategyRow;
use crate::seed::derive_seed;

/// The six strategies of the published comparison, in table order.
pub fn table_strategies() -> Vec<StrategyConfig> {
    let avg = StrategyConfig::fedavg();
    let with_base = |base| StrategyConfig { base, ..avg };
    vec![
        avg,
        with_base(BaseStrategy::fedavgm_default()),
        with_base(BaseStrategy::fedyogi_default()),
        avg.with_fedbn(),
        avg.with_prox(3.0).with_fedbn(),
        avg.with_prox(3.0),
    ]
}

/// Master seed of repeat `r`; it drives both data generation and training.
pub fn repeat_seed(master: u64, r: usize) -> u64 {
    derive_seed(master, "repeat", &[r as u64])
}

/// Run every strategy `repeats` times. All strategies of one repeat share
/// that repeat's data. `on_run` sees each finished run.
pub fn compare_strategies(
    config: &ExperimentConfig,
    strategies: &[StrategyConfig],
    repeats: usize,
    mut on_run: impl FnMut(usize, &StrategyConfig, &ExperimentOutcome),
) -> Result<Vec<StrategyRow>> {
    let mut rows: Vec<StrategyRow> = strategies
        .iter()
        .map(|s| StrategyRow {
            strategy: s.label(),
            rounds: Vec::new(),
            maes: Vec::new(),
        })
        .collect();
    for r in 0..repeats {
        let mut cfg = config.clone();
        cfg.seed = repeat_seed(config.seed, r);
        let data = prepare_data(&cfg)?;
        for (s, row) in strategies.iter().zip(rows.iter_mut()) {
            let run_cfg = cfg.clone().with_strategy(*s);
            let out = run_experiment(&run_cfg, &data)?;
            row.rounds.push(out.best().round_index);
            row.maes.push(out.best().unseen.median_mae());
            on_run(r, s, &out);
        }
    }
    Ok(rows)
}
