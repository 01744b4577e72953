//! The desk-scale federated experiment: per-round unseen-centre metrics,
//! logs and a final checkpoint.
//!
//! `cargo run --release --example federated_run -- [rounds]`

use fedsct::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use fedsct::config::ExperimentConfig;
use fedsct::federation::{prepare_data, run_experiment};
use fedsct::logs::write_run_logs;

fn main() -> fedsct::Result<()> {
    let mut cfg = ExperimentConfig::desk();
    if let Some(r) = std::env::args().nth(1) {
        cfg.federation.rounds = r.parse().map_err(|_| fedsct::Error::config("rounds", "not a number"))?;
    }
    cfg.output_dir = std::env::temp_dir().join("fedsct-desk");
    let data = prepare_data(&cfg)?;
    let out = run_experiment(&cfg, &data)?;
    for r in &out.records {
        let loss = r.client_loss.iter().map(|c| c.loss).sum::<f64>() / r.client_loss.len().max(1) as f64;
        println!(
            "round {:>2}: unseen MAE {:7.1} HU (IQR {:.1} to {:.1}), SSIM {:.3}, mean client loss {loss:.1}",
            r.round_index,
            r.unseen.summary.mae.median,
            r.unseen.summary.mae.q1,
            r.unseen.summary.mae.q3,
            r.unseen.summary.ssim.median
        );
    }
    println!("best round {}", out.best().round_index);
    write_run_logs(&cfg.output_dir, &out)?;
    let path = cfg.output_dir.join("final.ckpt");
    let ckpt = Checkpoint {
        config: cfg.clone(),
        params: out.server.global.clone(),
        rng_cursor: cfg.federation.rounds as u64,
        round_index: out.server.round_index as u64,
    };
    save_checkpoint(&path, &ckpt)?;
    assert_eq!(load_checkpoint(&path)?, ckpt);
    println!("logs and checkpoint in {}", cfg.output_dir.display());
    Ok(())
}
