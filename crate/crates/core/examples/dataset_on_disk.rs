//! Write a raw cohort, preprocess it on disk and load it back for training.

use fedsct::config::ExperimentConfig;
use fedsct::dataset::{load_preprocessed, preprocess_dataset, write_raw_dataset};
use fedsct::model::UNetConfig;
use fedsct::preprocess::PreprocessConfig;

fn main() -> fedsct::Result<()> {
    let mut cfg = ExperimentConfig::desk();
    for c in cfg.centres.iter_mut().chain(std::iter::once(&mut cfg.unseen)) {
        c.fov_mm = 32.0;
    }
    cfg.preprocess = PreprocessConfig::for_target(32);
    cfg.model = UNetConfig::tiny(32);
    let root = std::env::temp_dir().join("fedsct-dataset");
    let (raw, pre) = (root.join("raw"), root.join("pre"));
    let m = write_raw_dataset(&raw, &cfg)?;
    for c in &m.centres {
        println!("{} ({:?}): {} patients, train {:?}", c.spec.centre_id, c.role, c.patients.len(), c.split.train);
    }
    preprocess_dataset(&raw, &pre, None)?;
    let data = load_preprocessed(&pre)?;
    for c in data.centres.iter().chain(std::iter::once(&data.unseen)) {
        println!(
            "{}: {} train / {} validation / {} test, volumes {:?}",
            c.centre_id,
            c.train.len(),
            c.validation.len(),
            c.test.len(),
            c.train[0].mri.dims
        );
    }
    println!("dataset under {}", root.display());
    Ok(())
}
