//! Small experiments that finish in seconds.

use fedsct::config::ExperimentConfig;
use fedsct::federation::{
    broadcast, initial_server, local_train, training_records, Client, ExperimentData, LocalObjective,
    LocalTrainConfig, ModelBundle,
};
use fedsct::model::{NamedParameterSet, UNetConfig};
use fedsct::nn::AdamConfig;
use fedsct::preprocess::PreprocessConfig;
use fedsct::seed::derive_seed;

/// 32 mm phantoms resampled to 16³, five patients per centre.
pub fn small_config(rounds: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    for c in cfg.centres.iter_mut().chain(std::iter::once(&mut cfg.unseen)) {
        c.fov_mm = 32.0;
        c.n_patients = 5;
    }
    cfg.preprocess = PreprocessConfig::for_target(16);
    cfg.model = UNetConfig::tiny(16);
    cfg.federation.rounds = rounds;
    cfg
}

/// The round loop written out directly, with an explicit local objective and
/// no evaluation. Returns the global model after the last round.
pub fn manual_run(cfg: &ExperimentConfig, data: &ExperimentData, objective: LocalObjective) -> NamedParameterSet<f32> {
    let mut server = initial_server(cfg).unwrap();
    let mut init = ModelBundle::new(cfg.paradigm, &cfg.model, 0).unwrap();
    init.unflatten(&server.global).unwrap();
    let mut clients: Vec<Client> = data
        .centres
        .iter()
        .enumerate()
        .map(|(i, c)| Client {
            client_id: i,
            centre_id: c.centre_id.clone(),
            records: training_records(&c.train, cfg.paradigm).unwrap(),
            validation: Vec::new(),
            model: init.clone(),
        })
        .collect();
    let local = LocalTrainConfig {
        paradigm: cfg.paradigm,
        adam: AdamConfig {
            lr: cfg.training.lr,
            ..AdamConfig::default()
        },
        batch_size: cfg.training.batch_size,
        epochs: cfg.federation.local_epochs,
        augment: cfg.training.augment,
        objective,
    };
    for round in 0..cfg.federation.rounds {
        let payload = broadcast(&server, cfg.federation.strategy.fedbn);
        let updates: Vec<_> = clients
            .iter_mut()
            .map(|c| {
                let seed = derive_seed(cfg.seed, "client", &[c.client_id as u64, round as u64]);
                local_train(c, &payload, &local, seed).unwrap().update
            })
            .collect();
        server.aggregate(&updates, &cfg.federation.strategy).unwrap();
    }
    server.global
}
