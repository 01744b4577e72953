//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Set `FEDSCT_ACCEPTANCE_SKIP_DESK=1` to skip the two desk-scale
//! experiments (criteria 8 and 9) while iterating.

mod common;

use std::time::Instant;

use common::criteria::{self, Outcome};
use fedsct::compare::repeat_seed;
use fedsct::config::ExperimentConfig;
use fedsct::federation::{prepare_data, run_experiment, ExperimentOutcome, StrategyConfig, TrainingParadigm};
use fedsct::logs::{strategies_csv, strategies_table, StrategyRow};

const DESK_BUDGET_S: f64 = 15.0 * 60.0;
const MAX_MAE_RATIO: f64 = 0.5;
const REPEATS: usize = 5;
const PARADIGM_WINS_NEEDED: usize = 4;

fn report(n: usize, name: &str, o: &Outcome) {
    println!("{} criterion {n:>2} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn row(label: &str) -> StrategyRow {
    StrategyRow {
        strategy: label.to_string(),
        rounds: Vec::new(),
        maes: Vec::new(),
    }
}

fn push(row: &mut StrategyRow, out: &ExperimentOutcome) {
    row.rounds.push(out.best().round_index);
    row.maes.push(out.best().unseen.median_mae());
}

fn desk() -> (Outcome, Outcome) {
    let cfg = ExperimentConfig::desk();
    let start = Instant::now();
    let data = prepare_data(&cfg).unwrap();
    let main = run_experiment(&cfg, &data).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let r0 = main.records[0].unseen.median_mae();
    let best = main.best();
    let ratio = best.unseen.median_mae() / r0;
    eprintln!(
        "  desk run: round-0 MAE {r0:.1} HU, best round {} MAE {:.1} HU, {secs:.0} s",
        best.round_index,
        best.unseen.median_mae()
    );

    let mut rm2d = row("Random Multi-2D");
    let mut m2d = row("Multi-2D");
    let mut fedavg = row("FedAvg");
    let mut wins = 0;
    for r in 0..REPEATS {
        let mut base = cfg.clone();
        base.seed = repeat_seed(cfg.seed, r);
        base.training.max_validation_patients = Some(0);
        let data = prepare_data(&base).unwrap();
        let a = run_experiment(&base, &data).unwrap();
        let b = run_experiment(
            &ExperimentConfig {
                paradigm: TrainingParadigm::Multi2D,
                ..base.clone()
            },
            &data,
        )
        .unwrap();
        let c = run_experiment(&base.clone().with_strategy(StrategyConfig::fedavg()), &data).unwrap();
        if a.best().unseen.median_mae() <= b.best().unseen.median_mae() {
            wins += 1;
        }
        for (row, out) in [(&mut rm2d, &a), (&mut m2d, &b), (&mut fedavg, &c)] {
            push(row, out);
        }
        eprintln!(
            "  repeat {}: RM2D+FedProx round {} MAE {:.1}; M2D+FedProx round {} MAE {:.1}; \
             RM2D FedAvg round {} MAE {:.1}",
            r + 1,
            a.best().round_index,
            a.best().unseen.median_mae(),
            b.best().round_index,
            b.best().unseen.median_mae(),
            c.best().round_index,
            c.best().unseen.median_mae()
        );
    }
    let c8 = Outcome {
        pass: ratio <= MAX_MAE_RATIO && secs < DESK_BUDGET_S && wins >= PARADIGM_WINS_NEEDED,
        detail: format!(
            "best/round-0 unseen MAE {ratio:.3} (<= {MAX_MAE_RATIO}) in {secs:.0} s (< {DESK_BUDGET_S:.0} s); \
             Random Multi-2D <= Multi-2D in {wins}/{REPEATS} repeats (need {PARADIGM_WINS_NEEDED}); \
             mean MAE {:.1} vs {:.1} HU",
            rm2d.mae_stats().0,
            m2d.mae_stats().0
        ),
    };

    let mut prox = rm2d.clone();
    prox.strategy = "FedAvg+FedProx".into();
    let table = [fedavg, prox];
    print!("{}", strategies_table(&table));
    print!("{}", strategies_csv(&table).unwrap());
    let (avg_round, _) = table[0].round_stats();
    let (prox_round, _) = table[1].round_stats();
    let c9 = Outcome {
        pass: prox_round <= avg_round,
        detail: format!("mean best round FedAvg+FedProx {prox_round:.1} vs FedAvg {avg_round:.1} over {REPEATS} repeats"),
    };
    (c8, c9)
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; they do not apply here.
    let start = Instant::now();
    let mut all = true;
    let mut emit = |n: usize, name: &str, o: Outcome| {
        report(n, name, &o);
        all &= o.pass;
    };
    emit(1, "gradients", criteria::gradients());
    emit(2, "aggregation", criteria::aggregation());
    emit(3, "FedProx reduction", criteria::prox_reduction());
    emit(4, "FedBN filtering", criteria::fedbn_filtering());
    emit(5, "voting and metrics", criteria::metrics_voting());
    emit(6, "preprocessing", criteria::preprocessing());
    emit(7, "structure", criteria::structure());
    if std::env::var("FEDSCT_ACCEPTANCE_SKIP_DESK").is_ok_and(|v| v == "1") {
        println!("SKIP criterion  8 (desk experiment)");
        println!("SKIP criterion  9 (strategy comparison)");
    } else {
        let (c8, c9) = desk();
        emit(8, "desk experiment", c8);
        emit(9, "strategy comparison", c9);
    }
    emit(10, "determinism", criteria::determinism());
    println!("acceptance finished in {:.0} s", start.elapsed().as_secs_f64());
    if !all {
        std::process::exit(1);
    }
}
