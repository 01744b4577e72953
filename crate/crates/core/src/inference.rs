//! Whole-volume synthesis: slice-wise prediction, reconstruction and fusion.

use rayon::prelude::*;

use crate::error::Result;
use crate::federation::{EvalCase, ModelBundle, TrainingParadigm};
use crate::metrics::{evaluate_patient, volume_to_hu, MetricConfig, PatientMetrics};
use crate::nn::Mode;
use crate::preprocess::apply_mask;
use crate::slicing::{self, PatchPrediction};
use crate::tensor::Tensor;
use crate::volume::{Modality, Plane, Volume};

const INFER_BATCH: usize = 32;

fn predict_images(model: &mut crate::model::UNet<f32>, images: &[Vec<f32>], h: usize, w: usize) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFER_BATCH) {
        let data: Vec<f32> = chunk.iter().flat_map(|s| s.iter().copied()).collect();
        let x = Tensor::from_vec(&[chunk.len(), 1, h, w], data)?;
        let y = model.forward(&x, Mode::Eval)?;
        out.extend(y.data().chunks(h * w).map(<[f32]>::to_vec));
    }
    Ok(out)
}

/// Predict every slice normal to `plane` and stack the results (normalized).
pub fn predict_plane(bundle: &mut ModelBundle, mri: &Volume, plane: Plane) -> Result<Volume> {
    let (h, w) = slicing::slice_shape(mri.dims, plane);
    let slices = slicing::extract_plane(mri, plane)?;
    let preds = predict_images(bundle.model_for(plane), &slices, h, w)?;
    let indexed: Vec<(usize, &[f32])> = preds.iter().enumerate().map(|(i, p)| (i, p.as_slice())).collect();
    let mut v = slicing::reconstruct_volume(&indexed, plane, mri)?;
    v.modality = Modality::Ct;
    Ok(v)
}

/// Axial predictions tiled from overlapping patches and merged by averaging.
pub fn predict_patches(bundle: &mut ModelBundle, mri: &Volume, patch: usize) -> Result<Volume> {
    let plane = Plane::Axial;
    let (h, w) = slicing::slice_shape(mri.dims, plane);
    let rows = slicing::tile_origins(h, patch);
    let cols = slicing::tile_origins(w, patch);
    let origins: Vec<(usize, usize)> = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
    let model = bundle.model_for(plane);
    let mut merged = Vec::new();
    for slice in slicing::extract_plane(mri, plane)? {
        let crops: Vec<Vec<f32>> = origins
            .iter()
            .map(|&(r0, c0)| {
                (r0..r0 + patch)
                    .flat_map(|r| slice[r * w + c0..r * w + c0 + patch].iter().copied())
                    .collect()
            })
            .collect();
        let preds = predict_images(model, &crops, patch, patch)?;
        let patches: Vec<PatchPrediction> = origins
            .iter()
            .zip(preds)
            .map(|(&origin, data)| PatchPrediction {
                origin,
                size: patch,
                data,
            })
            .collect();
        merged.push(slicing::overlap_average(h, w, &patches)?);
    }
    let indexed: Vec<(usize, &[f32])> = merged.iter().enumerate().map(|(i, p)| (i, p.as_slice())).collect();
    let mut v = slicing::reconstruct_volume(&indexed, plane, mri)?;
    v.modality = Modality::Ct;
    Ok(v)
}

/// Synthetic CT in HU, with the body-mask exterior set to air.
///
/// Slice paradigms are predicted along all three planes, converted to HU
/// and fused by the voxelwise median; patches are merged on axial slices.
pub fn synthesize_ct(bundle: &mut ModelBundle, paradigm: TrainingParadigm, mri: &Volume, mask: &Volume) -> Result<Volume> {
    let sct = match paradigm {
        TrainingParadigm::Patches2D { patch_size, .. } => volume_to_hu(&predict_patches(bundle, mri, patch_size)?).0,
        _ => {
            let [ax, cor, sag] = Plane::ALL.map(|p| predict_plane(bundle, mri, p).map(|v| volume_to_hu(&v).0));
            slicing::median_vote(&ax?, &cor?, &sag?)?
        }
    };
    apply_mask(&sct, mask, Modality::Ct)
}

/// Per-patient metrics of `bundle` over `cases`, in input order.
pub fn evaluate_cases(
    bundle: &ModelBundle,
    paradigm: TrainingParadigm,
    cases: &[EvalCase],
    cfg: &MetricConfig,
) -> Result<Vec<PatientMetrics>> {
    cases
        .par_iter()
        .map(|c| {
            let mut local = bundle.clone();
            let sct = synthesize_ct(&mut local, paradigm, &c.mri, &c.mask)?;
            evaluate_patient(&c.patient_id, &c.ct, &sct, &c.mask, cfg)
        })
        .collect()
}
