//! Train briefly, then synthesize a CT for an unseen patient by median
//! voting over the three planes and score it.

use fedsct::config::ExperimentConfig;
use fedsct::federation::{prepare_data, run_experiment, ModelBundle};
use fedsct::inference::{predict_plane, synthesize_ct};
use fedsct::metrics::{evaluate_patient, volume_to_hu};
use fedsct::model::UNetConfig;
use fedsct::preprocess::PreprocessConfig;
use fedsct::volume::Plane;

fn main() -> fedsct::Result<()> {
    let mut cfg = ExperimentConfig::desk();
    for c in cfg.centres.iter_mut().chain(std::iter::once(&mut cfg.unseen)) {
        c.fov_mm = 32.0;
    }
    cfg.preprocess = PreprocessConfig::for_target(32);
    cfg.model = UNetConfig::tiny(32);
    cfg.federation.rounds = 3;
    let data = prepare_data(&cfg)?;
    let out = run_experiment(&cfg, &data)?;
    let mut bundle = ModelBundle::new(cfg.paradigm, &cfg.model, 0)?;
    bundle.unflatten(&out.server.global)?;
    let case = &data.unseen.test[0];
    for plane in Plane::ALL {
        let (hu, _) = volume_to_hu(&predict_plane(&mut bundle, &case.mri, plane)?);
        let m = evaluate_patient(&case.patient_id, &case.ct, &hu, &case.mask, &cfg.metrics)?;
        println!("{:<9} only: MAE {:.1} HU", plane.name(), m.mae);
    }
    let sct = synthesize_ct(&mut bundle, cfg.paradigm, &case.mri, &case.mask)?;
    let m = evaluate_patient(&case.patient_id, &case.ct, &sct, &case.mask, &cfg.metrics)?;
    println!("median vote: MAE {:.1} HU, SSIM {:.3}, PSNR {:.2} dB", m.mae, m.ssim, m.psnr);
    Ok(())
}
