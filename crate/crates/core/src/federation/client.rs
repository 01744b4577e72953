//! Client-side state and local training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{volume_from_hu, HU_MAX, HU_MIN};
use crate::model::{NamedParameterSet, UNet, UNetConfig};
use crate::nn::{adam_step, l1_loss, prox_penalty, AdamConfig, AdamState, Mode};
use crate::preprocess::Preprocessed;
use crate::seed::derive_seed;
use crate::slicing::{self, AugmentPipeline, Batch, Paradigm, SliceRecord};
use crate::tensor::Tensor;
use crate::volume::{Plane, Volume};

use super::strategy::ClientUpdate;

/// How a client's model(s) are trained and later queried.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TrainingParadigm {
    #[serde(rename = "random-multi-2d")]
    RandomMulti2D,
    #[serde(rename = "multi-2d")]
    Multi2D,
    /// One model per plane; parameter names carry a `axial.` / `coronal.` /
    /// `sagittal.` prefix.
    #[serde(rename = "2d-plus")]
    TwoDPlus,
    #[serde(rename = "2d-patches")]
    Patches2D {
        patch_size: usize,
        patches_per_slice: usize,
    },
}

impl TrainingParadigm {
    pub fn name(&self) -> &'static str {
        match self {
            TrainingParadigm::RandomMulti2D => "random-multi-2d",
            TrainingParadigm::Multi2D => "multi-2d",
            TrainingParadigm::TwoDPlus => "2d-plus",
            TrainingParadigm::Patches2D { .. } => "2d-patches",
        }
    }

    /// Batch layouts, one per model.
    pub fn batch_paradigms(&self) -> Vec<(Option<Plane>, Paradigm)> {
        match *self {
            TrainingParadigm::RandomMulti2D => vec![(None, Paradigm::RandomMulti2D)],
            TrainingParadigm::Multi2D => vec![(None, Paradigm::Multi2D)],
            TrainingParadigm::TwoDPlus => Plane::ALL
                .iter()
                .map(|&p| (Some(p), Paradigm::TwoDPlus(p)))
                .collect(),
            TrainingParadigm::Patches2D {
                patch_size,
                patches_per_slice,
            } => vec![(
                None,
                Paradigm::Patches2D {
                    patch_size,
                    patches_per_slice,
                },
            )],
        }
    }

    /// Planes whose slices the client needs for training.
    pub fn training_planes(&self) -> &'static [Plane] {
        match self {
            TrainingParadigm::Patches2D { .. } => &[Plane::Axial],
            _ => &Plane::ALL,
        }
    }

    /// Input extent the model sees for volumes of side `slice_size`.
    pub fn model_input_size(&self, slice_size: usize) -> usize {
        match *self {
            TrainingParadigm::Patches2D { patch_size, .. } => patch_size,
            _ => slice_size,
        }
    }
}

/// The model(s) of one paradigm, exchanged as a single parameter set.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    models: Vec<(Option<Plane>, UNet<f32>)>,
}

fn prefix(plane: Option<Plane>) -> String {
    plane.map(|p| format!("{}.", p.name())).unwrap_or_default()
}

impl ModelBundle {
    pub fn new(paradigm: TrainingParadigm, config: &UNetConfig, seed: u64) -> Result<Self> {
        let models = paradigm
            .batch_paradigms()
            .into_iter()
            .enumerate()
            .map(|(i, (plane, _))| {
                let s = if i == 0 { seed } else { derive_seed(seed, "plane-model", &[i as u64]) };
                Ok((plane, UNet::new(config.clone(), s)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelBundle { models })
    }

    pub fn config(&self) -> &UNetConfig {
        self.models[0].1.config()
    }

    /// The single model, or the one dedicated to `plane`.
    pub fn model_for(&mut self, plane: Plane) -> &mut UNet<f32> {
        let i = self
            .models
            .iter()
            .position(|(p, _)| p.is_none() || *p == Some(plane))
            .expect("bundle covers every plane");
        &mut self.models[i].1
    }

    pub fn flatten(&self) -> NamedParameterSet<f32> {
        let mut out = NamedParameterSet::new(Vec::new()).expect("empty set");
        for (plane, m) in &self.models {
            out.extend(m.flatten().with_prefix(&prefix(*plane)))
                .expect("plane prefixes keep names unique");
        }
        out
    }

    /// Overwrite every entry named in `set`; entries absent from `set` keep
    /// their local values.
    pub fn load_entries(&mut self, set: &NamedParameterSet<f32>) -> Result<()> {
        let mut covered = 0;
        for (plane, m) in &mut self.models {
            let part = match plane {
                Some(_) => set.strip_prefix(&prefix(*plane)),
                None => set.clone(),
            };
            covered += part.len();
            m.load_entries(&part)?;
        }
        if covered != set.len() {
            return Err(Error::Schema {
                name: set.names().next().unwrap_or_default().to_string(),
                reason: "entries without a matching plane model".into(),
            });
        }
        Ok(())
    }

    /// Replace every parameter; `set` must match the bundle's schema exactly.
    pub fn unflatten(&mut self, set: &NamedParameterSet<f32>) -> Result<()> {
        self.flatten().check_same_schema(set)?;
        self.load_entries(set)
    }

    fn parts_mut(&mut self) -> impl Iterator<Item = &mut UNet<f32>> {
        self.models.iter_mut().map(|(_, m)| m)
    }
}

/// A preprocessed patient ready for inference and scoring.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub patient_id: String,
    /// Normalized MRI.
    pub mri: Volume,
    /// Ground-truth CT in HU.
    pub ct: Volume,
    pub mask: Volume,
}

impl EvalCase {
    pub fn from_preprocessed(patient_id: &str, p: &Preprocessed) -> Self {
        EvalCase {
            patient_id: patient_id.to_string(),
            mri: p.mri.clone(),
            ct: p.ct.clone(),
            mask: p.mask.clone(),
        }
    }
}

/// One silo: its training slices, validation patients and local model.
#[derive(Clone, Debug)]
pub struct Client {
    pub client_id: usize,
    pub centre_id: String,
    pub records: Vec<SliceRecord>,
    pub validation: Vec<EvalCase>,
    pub model: ModelBundle,
}

/// Training slices of `cases` for `paradigm`, CT rescaled to [0, 1].
pub fn training_records(cases: &[EvalCase], paradigm: TrainingParadigm) -> Result<Vec<SliceRecord>> {
    let mut out = Vec::new();
    for c in cases {
        let ct = volume_from_hu(&c.ct);
        for &plane in paradigm.training_planes() {
            out.extend(slicing::extract_slices(&c.patient_id, &c.mri, &ct, plane)?);
        }
    }
    Ok(out)
}

/// Factor taking the L1 loss on normalized targets to HU.
///
/// The data term is measured in HU so the proximal coefficient keeps the
/// scale it has against an HU-valued loss; Adam itself is invariant to it.
pub const LOSS_SCALE: f64 = HU_MAX - HU_MIN;

/// The local objective minimized by each client.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LocalObjective {
    /// L1 reconstruction loss (HU) only.
    Plain,
    /// L1 plus `(mu / 2) ||w − w_t||²` against the received model.
    Proximal { mu: f64 },
}

impl LocalObjective {
    pub fn from_mu(mu: f64) -> Self {
        if mu > 0.0 {
            LocalObjective::Proximal { mu }
        } else {
            LocalObjective::Plain
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalTrainConfig {
    pub paradigm: TrainingParadigm,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub augment: AugmentPipeline,
    pub objective: LocalObjective,
}

/// Outcome of one client's local round.
#[derive(Clone, Debug)]
pub struct LocalResult {
    pub update: ClientUpdate<f32>,
    pub steps: usize,
    /// Mean L1 data loss over all optimizer steps, in HU.
    pub mean_loss: f64,
}

fn gather_batch(
    records: &[SliceRecord],
    batch: &Batch,
    crop: Option<usize>,
    augment: AugmentPipeline,
    seed: u64,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = &records[batch[0].record];
    let (h, w) = match crop {
        Some(p) => (p, p),
        None => (first.height(), first.width()),
    };
    let mut mri = Vec::with_capacity(batch.len() * h * w);
    let mut ct = Vec::with_capacity(batch.len() * h * w);
    for (i, item) in batch.iter().enumerate() {
        let rec = &records[item.record];
        let rec = if augment == AugmentPipeline::None {
            std::borrow::Cow::Borrowed(rec)
        } else {
            std::borrow::Cow::Owned(slicing::augment(rec, augment, derive_seed(seed, "item", &[i as u64])))
        };
        match item.origin {
            Some((r0, c0)) => {
                let rw = rec.width();
                for r in r0..r0 + h {
                    mri.extend_from_slice(&rec.mri_slice.data()[r * rw + c0..r * rw + c0 + w]);
                    ct.extend_from_slice(&rec.ct_slice.data()[r * rw + c0..r * rw + c0 + w]);
                }
            }
            None => {
                if rec.height() != h || rec.width() != w {
                    return Err(Error::Shape(format!(
                        "batch mixes {}x{} and {h}x{w} slices",
                        rec.height(),
                        rec.width()
                    )));
                }
                mri.extend_from_slice(rec.mri_slice.data());
                ct.extend_from_slice(rec.ct_slice.data());
            }
        }
    }
    let shape = [batch.len(), 1, h, w];
    Ok((Tensor::from_vec(&shape, mri)?, Tensor::from_vec(&shape, ct)?))
}

/// Load `received`, then run `epochs` of Adam on the local objective.
///
/// Under FedBN `received` lacks the batch-norm entries, which therefore keep
/// their local values. Adam moments start fresh each call.
pub fn local_train(
    client: &mut Client,
    received: &NamedParameterSet<f32>,
    cfg: &LocalTrainConfig,
    seed: u64,
) -> Result<LocalResult> {
    if client.records.is_empty() {
        return Err(Error::InvalidInput(format!(
            "client {} has no training slices",
            client.centre_id
        )));
    }
    client.model.load_entries(received)?;
    let crop = match cfg.paradigm {
        TrainingParadigm::Patches2D { patch_size, .. } => Some(patch_size),
        _ => None,
    };
    let mu = match cfg.objective {
        LocalObjective::Plain => None,
        LocalObjective::Proximal { mu } => Some(mu as f32),
    };
    let layouts = cfg.paradigm.batch_paradigms();
    let mut steps = 0usize;
    let mut loss_sum = 0.0f64;
    let mut n_k = 0usize;
    for (m_idx, ((_, layout), model)) in layouts.iter().zip(client.model.parts_mut()).enumerate() {
        let anchor: Vec<Vec<f32>> = model
            .trainable_mut()
            .iter()
            .map(|p| p.value.data().to_vec())
            .collect();
        let mut states: Vec<AdamState<f32>> =
            model.trainable_mut().iter().map(|p| AdamState::for_param(p)).collect();
        for epoch in 0..cfg.epochs {
            let epoch_seed = derive_seed(seed, "local-epoch", &[m_idx as u64, epoch as u64]);
            let batches = slicing::make_epoch_batches(&client.records, *layout, cfg.batch_size, epoch_seed)?;
            if epoch == 0 {
                n_k += batches.iter().map(Vec::len).sum::<usize>();
            }
            for (b_idx, batch) in batches.iter().enumerate() {
                let aug_seed = derive_seed(epoch_seed, "augment-batch", &[b_idx as u64]);
                let (x, y) = gather_batch(&client.records, batch, crop, cfg.augment, aug_seed)?;
                let pred = model.forward(&x, Mode::Train)?;
                let (loss, grad) = l1_loss(&pred, &y)?;
                let loss = loss as f64 * LOSS_SCALE;
                let grad = grad.map(|g| g * LOSS_SCALE as f32);
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss at epoch {epoch}, batch {b_idx}"
                    )));
                }
                model.zero_grad();
                model.backward(&grad)?;
                let mut params = model.trainable_mut();
                if let Some(mu) = mu {
                    for (p, w_t) in params.iter_mut().zip(&anchor) {
                        let (_, g) = prox_penalty(p.value.data(), w_t, mu)?;
                        for (a, b) in p.grad.data_mut().iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                }
                for (p, s) in params.iter_mut().zip(states.iter_mut()) {
                    adam_step(p, s, &cfg.adam)?;
                }
                loss_sum += loss;
                steps += 1;
            }
        }
    }
    Ok(LocalResult {
        update: ClientUpdate {
            client_id: client.client_id,
            params: client.model.flatten(),
            n_k,
        },
        steps,
        mean_loss: loss_sum / steps.max(1) as f64,
    })
}
