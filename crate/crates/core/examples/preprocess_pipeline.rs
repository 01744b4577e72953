//! Bias correction, resampling, cropping, padding and normalization of one
//! phantom, with the correction scored against the known clean image.

use fedsct::phantom::{generate_phantom, CentreSpec};
use fedsct::preprocess::{bias_correct, preprocess_pair, PreprocessConfig};
use fedsct::volume::Volume;

fn masked_mae(a: &Volume, b: &Volume, mask: &Volume) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..a.data.len() {
        if mask.data[i] > 0.5 {
            sum += (a.data[i] - b.data[i]).abs() as f64;
            n += 1;
        }
    }
    sum / n as f64
}

fn main() -> fedsct::Result<()> {
    let spec = CentreSpec::preset("C").expect("preset");
    let p = generate_phantom(7, &spec)?;
    let cfg = PreprocessConfig::for_target(64);
    let (corrected, _) = bias_correct(&p.mri, &p.mask, &cfg)?;
    println!(
        "masked MAE to the clean MRI: {:.4} before, {:.4} after bias correction",
        masked_mae(&p.mri, &p.clean_mri, &p.mask),
        masked_mae(&corrected, &p.clean_mri, &p.mask)
    );
    let pre = preprocess_pair(&p.mri, &p.ct, &p.mask, &cfg)?;
    println!("input {:?} at {:?} mm -> output {:?}", p.mri.dims, p.mri.spacing, pre.mri.dims);
    println!("MRI range {:?}, CT range {:?}", pre.mri.min_max(), pre.ct.min_max());
    for w in &pre.warnings {
        println!("warning: {w}");
    }
    Ok(())
}
