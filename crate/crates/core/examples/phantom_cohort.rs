//! Generate one simulated centre and describe its patients.
//!
//! `cargo run --release --example phantom_cohort -- C`

use fedsct::phantom::{generate_centre, CentreSpec};
use fedsct::volume::write_volume;

fn main() -> fedsct::Result<()> {
    let id = std::env::args().nth(1).unwrap_or_else(|| "A".into());
    let spec = CentreSpec::preset(&id)
        .ok_or_else(|| fedsct::Error::config("centre", format!("no preset `{id}`")))?
        .with_patients(5);
    let cohort = generate_centre(&spec, 0)?;
    println!("centre {id}: dims {:?}, split {:?}", spec.dims(), cohort.split);
    for p in &cohort.patients {
        let body = p.mask.data.iter().filter(|&&m| m > 0.5).count();
        let (lo, hi) = p.true_bias.min_max();
        println!(
            "  {}: {body} body voxels, bias field in [{lo:.3}, {hi:.3}], CT range {:?}",
            p.patient_id,
            p.ct.min_max()
        );
    }
    let dir = std::env::temp_dir().join(format!("fedsct-phantom-{id}"));
    std::fs::create_dir_all(&dir).map_err(|e| fedsct::Error::io(&dir, e))?;
    let first = &cohort.patients[0];
    write_volume(&dir.join("mri"), &first.mri, Some("mask"))?;
    write_volume(&dir.join("ct"), &first.ct, Some("mask"))?;
    write_volume(&dir.join("mask"), &first.mask, None)?;
    println!("wrote {} volumes to {}", first.patient_id, dir.display());
    Ok(())
}
