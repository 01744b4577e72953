//! Cross-silo federation: local training, server aggregation and the round
//! protocol.

pub mod client;
pub mod experiment;
pub mod strategy;

pub use client::{
    local_train, training_records, Client, EvalCase, LocalObjective, LocalResult, LocalTrainConfig, ModelBundle,
    TrainingParadigm,
};
pub use experiment::{
    best_round, initial_server, prepare_cohort, prepare_data, run_experiment, unseen_cases, CentreData, CentreEval,
    ClientLoss, ExperimentData, ExperimentOutcome, FederationConfig, RoundRecord,
};
pub use strategy::{
    aggregate_fedavg, aggregate_fedavgm, aggregate_fedyogi, broadcast, BaseStrategy, ClientUpdate, ServerState,
    StrategyConfig,
};
