//! On-disk cohorts: `manifest.json` plus one raw/json volume pair per image.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/<centre>/<patient>_mri.{raw,json}
//! <dir>/<centre>/<patient>_ct.{raw,json}
//! <dir>/<centre>/<patient>_mask.{raw,json}
//! <dir>/<centre>/<patient>_bias.{raw,json}   (preprocessed only)
//! ```

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::federation::{CentreData, EvalCase, ExperimentData};
use crate::phantom::{generate_centre, CentreSpec, Split};
use crate::preprocess::{preprocess_pair, PreprocessConfig};
use crate::volume::{read_volume, write_volume, Volume};

const FORMAT: &str = "fedsct-dataset";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Raw,
    Preprocessed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Unseen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CentreEntry {
    pub spec: CentreSpec,
    pub role: Role,
    pub split: Split,
    pub patients: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub stage: Stage,
    pub seed: u64,
    pub preprocess: PreprocessConfig,
    pub centres: Vec<CentreEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, "manifest", e.to_string()))?;
        if m.format != FORMAT {
            return Err(Error::format(&path, "format", format!("unexpected `{}`", m.format)));
        }
        if m.version != FORMAT_VERSION {
            return Err(Error::format(&path, "version", format!("unsupported {}", m.version)));
        }
        Ok(m)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn stem(dir: &Path, centre: &str, patient: &str, kind: &str) -> PathBuf {
    dir.join(centre).join(format!("{patient}_{kind}"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_patient(dir: &Path, centre: &str, patient: &str, vols: &[(&str, &Volume)]) -> Result<()> {
    let mask_ref = format!("{patient}_mask");
    for (kind, vol) in vols {
        let mref = (*kind != "mask").then_some(mask_ref.as_str());
        write_volume(&stem(dir, centre, patient, kind), vol, mref)?;
    }
    Ok(())
}

fn read_kind(dir: &Path, centre: &str, patient: &str, kind: &str) -> Result<Volume> {
    read_volume(&stem(dir, centre, patient, kind)).map(|(v, _)| v)
}

/// Generate every centre of `config` and write the raw images to `dir`.
pub fn write_raw_dataset(dir: &Path, config: &ExperimentConfig) -> Result<Manifest> {
    config.validate()?;
    let mut centres = Vec::new();
    let specs = config
        .centres
        .iter()
        .map(|s| (s, Role::Train))
        .chain(std::iter::once((&config.unseen, Role::Unseen)));
    for (spec, role) in specs {
        let cohort = generate_centre(spec, config.seed)?;
        create_dir(&dir.join(&spec.centre_id))?;
        cohort.patients.par_iter().try_for_each(|p| {
            write_patient(
                dir,
                &spec.centre_id,
                &p.patient_id,
                &[("mri", &p.mri), ("ct", &p.ct), ("mask", &p.mask)],
            )
        })?;
        centres.push(CentreEntry {
            spec: spec.clone(),
            role,
            split: cohort.split,
            patients: cohort.patients.iter().map(|p| p.patient_id.clone()).collect(),
        });
    }
    let m = Manifest {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        stage: Stage::Raw,
        seed: config.seed,
        preprocess: config.preprocess.clone(),
        centres,
    };
    m.write(dir)?;
    Ok(m)
}

/// Preprocess a raw dataset into `output`, using `cfg` or the settings
/// recorded in the manifest.
pub fn preprocess_dataset(input: &Path, output: &Path, cfg: Option<&PreprocessConfig>) -> Result<Manifest> {
    let mut m = Manifest::read(input)?;
    if m.stage != Stage::Raw {
        return Err(Error::InvalidInput(format!("{} is already preprocessed", input.display())));
    }
    if let Some(c) = cfg {
        m.preprocess = c.clone();
    }
    m.preprocess.validate()?;
    for c in &m.centres {
        let id = &c.spec.centre_id;
        create_dir(&output.join(id))?;
        c.patients.par_iter().try_for_each(|p| {
            let mri = read_kind(input, id, p, "mri")?;
            let ct = read_kind(input, id, p, "ct")?;
            let mask = read_kind(input, id, p, "mask")?;
            let pre = preprocess_pair(&mri, &ct, &mask, &m.preprocess)?;
            for w in &pre.warnings {
                log::warn!("{p}: {w}");
            }
            write_patient(
                output,
                id,
                p,
                &[("mri", &pre.mri), ("ct", &pre.ct), ("mask", &pre.mask), ("bias", &pre.bias_field)],
            )
        })?;
    }
    m.stage = Stage::Preprocessed;
    m.write(output)?;
    Ok(m)
}

/// Load a preprocessed dataset in the form the federation consumes.
pub fn load_preprocessed(dir: &Path) -> Result<ExperimentData> {
    let m = Manifest::read(dir)?;
    if m.stage != Stage::Preprocessed {
        return Err(Error::InvalidInput(format!("{} holds raw images; run preprocess first", dir.display())));
    }
    let load_centre = |c: &CentreEntry| -> Result<CentreData> {
        let id = &c.spec.centre_id;
        let cases = c
            .patients
            .par_iter()
            .map(|p| {
                Ok(EvalCase {
                    patient_id: p.clone(),
                    mri: read_kind(dir, id, p, "mri")?,
                    ct: read_kind(dir, id, p, "ct")?,
                    mask: read_kind(dir, id, p, "mask")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pick = |idx: &[usize]| -> Result<Vec<EvalCase>> {
            idx.iter()
                .map(|&i| {
                    cases.get(i).cloned().ok_or_else(|| {
                        Error::format(dir.join("manifest.json"), "split", format!("index {i} out of range for {id}"))
                    })
                })
                .collect()
        };
        Ok(CentreData {
            centre_id: id.clone(),
            train: pick(&c.split.train)?,
            validation: pick(&c.split.validation)?,
            test: pick(&c.split.test)?,
        })
    };
    let mut centres = Vec::new();
    let mut unseen = None;
    for c in &m.centres {
        match c.role {
            Role::Train => centres.push(load_centre(c)?),
            Role::Unseen if unseen.is_none() => unseen = Some(load_centre(c)?),
            Role::Unseen => {
                return Err(Error::format(dir.join("manifest.json"), "centres", "more than one unseen centre"))
            }
        }
    }
    let unseen =
        unseen.ok_or_else(|| Error::format(dir.join("manifest.json"), "centres", "no unseen centre"))?;
    Ok(ExperimentData { centres, unseen })
}
