//! The synchronous round protocol.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::inference::evaluate_cases;
use crate::metrics::{summarize, CohortSummary, PatientMetrics};
use crate::nn::AdamConfig;
use crate::phantom::{generate_centre, CentreSpec, Cohort};
use crate::preprocess::preprocess_pair;
use crate::seed::derive_seed;

use super::client::{local_train, training_records, Client, EvalCase, LocalObjective, LocalTrainConfig, ModelBundle};
use super::strategy::{broadcast, ServerState, StrategyConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    /// Number of clients; must equal the number of training centres.
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub strategy: StrategyConfig,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            clients: 4,
            rounds: 30,
            local_epochs: 1,
            strategy: StrategyConfig::fedavg().with_prox(3.0),
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients < 2 {
            return Err(Error::config("federation.clients", "need at least 2 clients"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("federation.local_epochs", "must be at least 1"));
        }
        self.strategy.validate()
    }
}

/// Metrics of the global model on one centre's evaluation patients.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CentreEval {
    pub centre_id: String,
    pub patients: Vec<PatientMetrics>,
    pub summary: CohortSummary,
}

impl CentreEval {
    fn new(centre_id: &str, patients: Vec<PatientMetrics>) -> Result<Self> {
        Ok(CentreEval {
            centre_id: centre_id.to_string(),
            summary: summarize(&patients)?,
            patients,
        })
    }

    pub fn median_mae(&self) -> f64 {
        self.summary.mae.median
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClientLoss {
    pub centre_id: String,
    pub loss: f64,
    pub steps: usize,
    pub n_k: usize,
}

/// One evaluated round; round 0 is the initialized model before training.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round_index: usize,
    pub strategy: String,
    pub client_loss: Vec<ClientLoss>,
    pub validation: Vec<CentreEval>,
    pub unseen: CentreEval,
}

/// Preprocessed patients of one centre, split for federation.
#[derive(Clone, Debug)]
pub struct CentreData {
    pub centre_id: String,
    pub train: Vec<EvalCase>,
    pub validation: Vec<EvalCase>,
    pub test: Vec<EvalCase>,
}

#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub centres: Vec<CentreData>,
    pub unseen: CentreData,
}

/// Preprocess every patient of `cohort`.
pub fn prepare_cohort(cohort: &Cohort, config: &ExperimentConfig) -> Result<CentreData> {
    let cases = cohort
        .patients
        .par_iter()
        .map(|p| {
            let pre = preprocess_pair(&p.mri, &p.ct, &p.mask, &config.preprocess)?;
            for w in &pre.warnings {
                log::warn!("{}: {w}", p.patient_id);
            }
            Ok(EvalCase::from_preprocessed(&p.patient_id, &pre))
        })
        .collect::<Result<Vec<_>>>()?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| cases[i].clone()).collect::<Vec<_>>();
    Ok(CentreData {
        centre_id: cohort.spec.centre_id.clone(),
        train: pick(&cohort.split.train),
        validation: pick(&cohort.split.validation),
        test: pick(&cohort.split.test),
    })
}

/// Generate and preprocess the training centres and the unseen centre.
pub fn prepare_data(config: &ExperimentConfig) -> Result<ExperimentData> {
    let build = |spec: &CentreSpec| prepare_cohort(&generate_centre(spec, config.seed)?, config);
    Ok(ExperimentData {
        centres: config.centres.iter().map(build).collect::<Result<_>>()?,
        unseen: build(&config.unseen)?,
    })
}

fn capped(cases: &[EvalCase], cap: Option<usize>) -> &[EvalCase] {
    &cases[..cap.map_or(cases.len(), |c| c.min(cases.len()))]
}

/// Patients the server scores the global model on: the whole unseen centre
/// (test split first), capped by configuration.
pub fn unseen_cases(data: &CentreData, cap: Option<usize>) -> Vec<EvalCase> {
    let mut all: Vec<EvalCase> = data
        .test
        .iter()
        .chain(&data.validation)
        .chain(&data.train)
        .cloned()
        .collect();
    all.truncate(cap.unwrap_or(usize::MAX));
    all
}

/// Everything a finished experiment produced.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub records: Vec<RoundRecord>,
    pub server: ServerState<f32>,
    /// Index into `records` with the lowest unseen-centre median MAE
    /// (earliest on ties).
    pub best_round: usize,
}

impl ExperimentOutcome {
    pub fn best(&self) -> &RoundRecord {
        &self.records[self.best_round]
    }
}

pub fn best_round(records: &[RoundRecord]) -> usize {
    let mut best = 0;
    for (i, r) in records.iter().enumerate() {
        if r.unseen.median_mae() < records[best].unseen.median_mae() {
            best = i;
        }
    }
    best
}

fn evaluate_round(
    round_index: usize,
    server: &ServerState<f32>,
    config: &ExperimentConfig,
    clients: &[Client],
    unseen_id: &str,
    unseen: &[EvalCase],
    client_loss: Vec<ClientLoss>,
) -> Result<RoundRecord> {
    let mut bundle = ModelBundle::new(config.paradigm, &config.model, 0)?;
    bundle.unflatten(&server.global)?;
    let validation = clients
        .iter()
        .filter(|c| !c.validation.is_empty())
        .map(|c| CentreEval::new(&c.centre_id, evaluate_cases(&bundle, config.paradigm, &c.validation, &config.metrics)?))
        .collect::<Result<Vec<_>>>()?;
    let unseen = CentreEval::new(unseen_id, evaluate_cases(&bundle, config.paradigm, unseen, &config.metrics)?)?;
    log::info!(
        "round {round_index}: unseen {unseen_id} median MAE {:.2} HU",
        unseen.median_mae()
    );
    Ok(RoundRecord {
        round_index,
        strategy: config.federation.strategy.label(),
        client_loss,
        validation,
        unseen,
    })
}

pub fn initial_server(config: &ExperimentConfig) -> Result<ServerState<f32>> {
    let bundle = ModelBundle::new(config.paradigm, &config.model, derive_seed(config.seed, "init", &[]))?;
    Ok(ServerState::new(bundle.flatten(), &config.federation.strategy))
}

/// Run `config.federation.rounds` rounds, evaluating the global model after
/// initialization and after every aggregation.
pub fn run_experiment(config: &ExperimentConfig, data: &ExperimentData) -> Result<ExperimentOutcome> {
    config.validate()?;
    if data.centres.len() != config.federation.clients {
        return Err(Error::config(
            "federation.clients",
            format!("{} configured, {} centres supplied", config.federation.clients, data.centres.len()),
        ));
    }
    let mut server = initial_server(config)?;
    let init = ModelBundle::new(config.paradigm, &config.model, 0).and_then(|mut b| {
        b.unflatten(&server.global)?;
        Ok(b)
    })?;
    let mut clients = data
        .centres
        .iter()
        .enumerate()
        .map(|(i, c)| {
            Ok(Client {
                client_id: i,
                centre_id: c.centre_id.clone(),
                records: training_records(&c.train, config.paradigm)?,
                validation: capped(&c.validation, config.training.max_validation_patients).to_vec(),
                model: init.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let unseen = unseen_cases(&data.unseen, config.training.max_unseen_patients);
    if unseen.is_empty() {
        return Err(Error::config("training.max_unseen_patients", "no unseen-centre patients to evaluate"));
    }
    let local = LocalTrainConfig {
        paradigm: config.paradigm,
        adam: AdamConfig {
            lr: config.training.lr,
            ..AdamConfig::default()
        },
        batch_size: config.training.batch_size,
        epochs: config.federation.local_epochs,
        augment: config.training.augment,
        objective: LocalObjective::from_mu(config.federation.strategy.prox_mu),
    };
    let uid = data.unseen.centre_id.as_str();
    let mut records = vec![evaluate_round(0, &server, config, &clients, uid, &unseen, Vec::new())?];
    for round in 0..config.federation.rounds {
        let payload = broadcast(&server, config.federation.strategy.fedbn);
        let results = clients
            .par_iter_mut()
            .map(|c| {
                let seed = derive_seed(config.seed, "client", &[c.client_id as u64, round as u64]);
                local_train(c, &payload, &local, seed).map_err(|e| Error::Client {
                    round: round + 1,
                    client: c.centre_id.clone(),
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let losses = clients
            .iter()
            .zip(&results)
            .map(|(c, r)| ClientLoss {
                centre_id: c.centre_id.clone(),
                loss: r.mean_loss,
                steps: r.steps,
                n_k: r.update.n_k,
            })
            .collect();
        let updates: Vec<_> = results.into_iter().map(|r| r.update).collect();
        server.aggregate(&updates, &config.federation.strategy)?;
        records.push(evaluate_round(round + 1, &server, config, &clients, uid, &unseen, losses)?);
    }
    Ok(ExperimentOutcome {
        best_round: best_round(&records),
        records,
        server,
    })
}
