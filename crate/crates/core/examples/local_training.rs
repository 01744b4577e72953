//! One client's local round at increasing proximal strength: the data loss
//! and the distance travelled from the received model.

use fedsct::config::ExperimentConfig;
use fedsct::federation::{
    initial_server, local_train, prepare_cohort, training_records, Client, LocalObjective, LocalTrainConfig,
    ModelBundle,
};
use fedsct::model::UNetConfig;
use fedsct::nn::AdamConfig;
use fedsct::phantom::generate_centre;
use fedsct::preprocess::PreprocessConfig;

fn main() -> fedsct::Result<()> {
    let mut cfg = ExperimentConfig::desk();
    cfg.centres[0].fov_mm = 32.0;
    cfg.preprocess = PreprocessConfig::for_target(32);
    cfg.model = UNetConfig::tiny(32);
    let centre = prepare_cohort(&generate_centre(&cfg.centres[0], cfg.seed)?, &cfg)?;
    let server = initial_server(&cfg)?;
    for mu in [0.0, 3.0, 1e3, 1e6] {
        let mut model = ModelBundle::new(cfg.paradigm, &cfg.model, 0)?;
        model.unflatten(&server.global)?;
        let mut client = Client {
            client_id: 0,
            centre_id: centre.centre_id.clone(),
            records: training_records(&centre.train, cfg.paradigm)?,
            validation: Vec::new(),
            model,
        };
        let local = LocalTrainConfig {
            paradigm: cfg.paradigm,
            adam: AdamConfig { lr: cfg.training.lr, ..AdamConfig::default() },
            batch_size: cfg.training.batch_size,
            epochs: 1,
            augment: cfg.training.augment,
            objective: LocalObjective::from_mu(mu),
        };
        let out = local_train(&mut client, &server.global, &local, 1)?;
        let drift: f64 = out
            .update
            .params
            .entries()
            .iter()
            .zip(server.global.entries())
            .filter(|(a, _)| a.tag.is_trainable())
            .flat_map(|(a, b)| a.value.data().iter().zip(b.value.data()).map(|(x, y)| ((x - y) as f64).powi(2)))
            .sum::<f64>()
            .sqrt();
        println!(
            "mu {mu:>9}: {} steps over n_k = {}, mean L1 {:.1} HU, |w - w_t| = {drift:.4}",
            out.steps, out.update.n_k, out.mean_loss
        );
    }
    Ok(())
}
