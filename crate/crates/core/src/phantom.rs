//! Procedural paired MRI/CT head phantoms for simulated centres.
//!
//! A head is a set of randomized nested ellipsoids (scalp, skull, grey and
//! white matter, CSF ventricles, a sinus air cavity and a neck). CT is a
//! per-tissue HU lookup; MRI is a per-tissue T1-like mapping multiplied by a
//! smooth bias field plus Gaussian noise. Each centre perturbs this recipe along
//! one heterogeneity axis: field of view, slice thickness, contrast, bias.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};
use crate::volume::{Modality, Volume};

pub const CT_MIN_HU: f32 = -1000.0;
pub const CT_MAX_HU: f32 = 3000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum Tissue {
    Background = 0,
    Scalp = 1,
    Skull = 2,
    Grey = 3,
    White = 4,
    Csf = 5,
    Air = 6,
}

impl Tissue {
    fn t1(self) -> f64 {
        match self {
            Tissue::Background | Tissue::Air => 0.0,
            Tissue::Scalp => 0.85,
            Tissue::Skull => 0.08,
            Tissue::Grey => 0.5,
            Tissue::White => 0.65,
            Tissue::Csf => 0.2,
        }
    }

    fn hu(self, skull_hu: f64) -> f64 {
        match self {
            Tissue::Background | Tissue::Air => -1000.0,
            Tissue::Scalp => 40.0,
            Tissue::Skull => skull_hu,
            Tissue::Grey => 38.0,
            Tissue::White => 28.0,
            Tissue::Csf => 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CentreSpec {
    pub centre_id: String,
    pub n_patients: usize,
    /// Standard deviation of additive MRI noise, normalized-intensity units.
    pub noise_sigma: f64,
    /// Standard deviation scale of the log bias field.
    pub bias_amplitude: f64,
    /// Spatial scale of the bias field; larger is smoother.
    pub bias_smoothness: f64,
    /// Fraction of inferior axial slices removed from the field of view.
    pub fov_cut_fraction: f64,
    pub ct_slice_thickness_factor: usize,
    pub contrast_gain: f64,
    pub contrast_offset: f64,
    /// Voxel size in mm per storage axis.
    pub voxel_size: [f64; 3],
    /// Cubic field of view in mm.
    #[serde(default = "default_fov")]
    pub fov_mm: f64,
}

fn default_fov() -> f64 {
    64.0
}

/// Patient counts of the five real cohorts (A–E) the presets imitate.
pub const PAPER_PATIENT_COUNTS: [(&str, usize); 5] =
    [("A", 15), ("B", 14), ("C", 21), ("D", 29), ("E", 23)];

impl CentreSpec {
    /// Presets imitating centres A–D (federated) and E (unseen), at desk size.
    pub fn preset(id: &str) -> Option<Self> {
        let base = CentreSpec {
            centre_id: id.to_string(),
            n_patients: 5,
            noise_sigma: 0.015,
            bias_amplitude: 0.1,
            bias_smoothness: 1.0,
            fov_cut_fraction: 0.0,
            ct_slice_thickness_factor: 1,
            contrast_gain: 1.0,
            contrast_offset: 0.0,
            voxel_size: [1.0; 3],
            fov_mm: 64.0,
        };
        let spec = match id {
            // Field of view limited to the level of the mouth.
            "A" => CentreSpec {
                fov_cut_fraction: 0.2,
                noise_sigma: 0.02,
                bias_amplitude: 0.12,
                ..base
            },
            // Thick CT slices and a distinct MRI contrast.
            "B" => CentreSpec {
                ct_slice_thickness_factor: 3,
                contrast_gain: 0.8,
                contrast_offset: 0.06,
                noise_sigma: 0.03,
                ..base
            },
            // Strong bias field, finer cranio-caudal sampling.
            "C" => CentreSpec {
                bias_amplitude: 0.3,
                bias_smoothness: 0.8,
                voxel_size: [0.8, 1.0, 1.0],
                contrast_gain: 1.1,
                contrast_offset: -0.02,
                ..base
            },
            "D" => CentreSpec {
                bias_amplitude: 0.06,
                noise_sigma: 0.012,
                fov_cut_fraction: 0.05,
                ..base
            },
            "E" => CentreSpec {
                bias_amplitude: 0.15,
                fov_cut_fraction: 0.1,
                ct_slice_thickness_factor: 2,
                contrast_gain: 0.92,
                contrast_offset: 0.03,
                ..base
            },
            _ => return None,
        };
        Some(spec)
    }

    pub fn with_patients(mut self, n: usize) -> Self {
        self.n_patients = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let f = |name: &str| format!("centre {}.{name}", self.centre_id);
        if self.centre_id.is_empty() {
            return Err(Error::config("centre.centre_id", "must not be empty"));
        }
        if self.n_patients < 5 {
            return Err(Error::config(
                f("n_patients"),
                format!("{} < 5 (2 validation + 2 test + at least 1 training)", self.n_patients),
            ));
        }
        let non_negative = [
            ("noise_sigma", self.noise_sigma),
            ("bias_amplitude", self.bias_amplitude),
            ("contrast_offset_magnitude", self.contrast_offset.abs()),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(f(name), format!("must be finite and >= 0, got {v}")));
            }
        }
        let positive = [
            ("bias_smoothness", self.bias_smoothness),
            ("contrast_gain", self.contrast_gain),
            ("fov_mm", self.fov_mm),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(f(name), format!("must be finite and > 0, got {v}")));
            }
        }
        if !(0.0..0.5).contains(&self.fov_cut_fraction) {
            return Err(Error::config(
                f("fov_cut_fraction"),
                format!("must lie in [0, 0.5), got {}", self.fov_cut_fraction),
            ));
        }
        if self.ct_slice_thickness_factor == 0 {
            return Err(Error::config(f("ct_slice_thickness_factor"), "must be >= 1"));
        }
        for (a, v) in self.voxel_size.iter().enumerate() {
            if !(v.is_finite() && *v > 0.0) {
                return Err(Error::config(f(&format!("voxel_size[{a}]")), "must be finite and > 0"));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.voxel_size
            .map(|v| ((self.fov_mm / v).round() as usize).max(1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomPair {
    pub patient_id: String,
    pub mri: Volume,
    pub ct: Volume,
    pub mask: Volume,
    pub true_bias: Volume,
    /// Noise-free, bias-free MRI tissue mapping.
    pub clean_mri: Volume,
    pub labels: Volume,
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    centre: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    /// Squared normalized radius of `p` (already rotated into head frame).
    #[inline]
    fn r2(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| {
                let d = (p[a] - self.centre[a]) / self.semi[a];
                d * d
            })
            .sum()
    }
}

struct Anatomy {
    head: Ellipsoid,
    neck: Ellipsoid,
    skull_outer: f64,
    skull_inner: f64,
    white: Ellipsoid,
    ventricles: [Ellipsoid; 2],
    sinus: Ellipsoid,
    yaw: f64,
    skull_hu: f64,
}

impl Anatomy {
    fn sample<R: Rng>(rng: &mut R) -> Self {
        let s = rng.gen_range(0.9..1.05);
        let c = [
            rng.gen_range(-0.03..0.08),
            rng.gen_range(-0.04..0.04),
            rng.gen_range(-0.03..0.03),
        ];
        let head = Ellipsoid {
            centre: c,
            semi: [0.78 * s, 0.86 * s, 0.70 * s],
        };
        let vs = rng.gen_range(0.7..1.3);
        let vent = |side: f64| Ellipsoid {
            centre: [c[0] + 0.05 * s, c[1], c[2] + side * 0.12 * s],
            semi: [0.12 * s * vs, 0.2 * s * vs, 0.06 * s * vs],
        };
        let ss = rng.gen_range(0.6..1.2);
        Anatomy {
            head,
            neck: Ellipsoid {
                centre: [c[0] - 0.85, c[1] - 0.1, c[2]],
                semi: [0.4, 0.38 * s, 0.34 * s],
            },
            skull_outer: rng.gen_range(0.91..0.94),
            skull_inner: rng.gen_range(0.80..0.85),
            white: Ellipsoid {
                centre: [c[0] + 0.08 * s, c[1], c[2]],
                semi: [0.42 * s, 0.5 * s, 0.42 * s],
            },
            ventricles: [vent(-1.0), vent(1.0)],
            sinus: Ellipsoid {
                centre: [c[0] - 0.42 * s, c[1] + 0.42 * s, c[2]],
                semi: [0.12 * s * ss, 0.12 * s * ss, 0.18 * s * ss],
            },
            yaw: rng.gen_range(-8f64..8.0).to_radians(),
            skull_hu: rng.gen_range(900.0..1300.0),
        }
    }

    fn tissue(&self, u: [f64; 3]) -> Tissue {
        // Yaw about the cranio-caudal axis, around the head centre.
        let (sn, cs) = self.yaw.sin_cos();
        let dy = u[1] - self.head.centre[1];
        let dx = u[2] - self.head.centre[2];
        let p = [
            u[0],
            self.head.centre[1] + cs * dy - sn * dx,
            self.head.centre[2] + sn * dy + cs * dx,
        ];
        let rh = self.head.r2(p);
        if rh > 1.0 {
            return if self.neck.r2(p) <= 1.0 && p[0] < self.head.centre[0] {
                Tissue::Scalp
            } else {
                Tissue::Background
            };
        }
        if self.sinus.r2(p) <= 1.0 {
            return Tissue::Air;
        }
        if rh > self.skull_outer * self.skull_outer {
            return Tissue::Scalp;
        }
        if rh > self.skull_inner * self.skull_inner {
            return Tissue::Skull;
        }
        if self.ventricles.iter().any(|v| v.r2(p) <= 1.0) {
            return Tissue::Csf;
        }
        if self.white.r2(p) <= 1.0 {
            return Tissue::White;
        }
        Tissue::Grey
    }
}

/// Log of a smooth random field: a few low-frequency cosines.
struct BiasField {
    terms: Vec<([f64; 3], f64, f64)>,
    scale: f64,
}

impl BiasField {
    fn sample<R: Rng>(rng: &mut R, amplitude: f64) -> Self {
        let n = 4;
        let terms: Vec<_> = (0..n)
            .map(|_| {
                let k = [
                    rng.gen_range(-0.6..0.6),
                    rng.gen_range(-0.6..0.6),
                    rng.gen_range(-0.6..0.6),
                ];
                let a = rng.gen_range(0.5..1.0);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                (k, a, phase)
            })
            .collect();
        let norm = terms.iter().map(|t| t.1 * t.1).sum::<f64>().sqrt();
        BiasField {
            terms,
            // Unit-variance combination of the cosines, scaled to `amplitude`.
            scale: amplitude * std::f64::consts::SQRT_2 / norm,
        }
    }

    fn log_at(&self, u: [f64; 3], smoothness: f64) -> f64 {
        if self.scale == 0.0 {
            return 0.0;
        }
        let s: f64 = self
            .terms
            .iter()
            .map(|(k, a, ph)| {
                let dot = k[0] * u[0] + k[1] * u[1] + k[2] * u[2];
                a * (std::f64::consts::PI * dot / smoothness + ph).cos()
            })
            .sum();
        self.scale * s
    }
}

/// Generate one phantom pair; a pure function of `(seed, spec)`.
pub fn generate_phantom(seed: u64, spec: &CentreSpec) -> Result<PhantomPair> {
    spec.validate()?;
    let dims = spec.dims();
    let spacing = spec.voxel_size;
    let n: usize = dims.iter().product();
    let mut rng = rng_for(seed, "phantom", &[]);
    let anatomy = Anatomy::sample(&mut rng);
    let field = BiasField::sample(&mut rng, spec.bias_amplitude);

    let coord = |i: usize, a: usize| -> f64 {
        let half = dims[a] as f64 * spacing[a] / 2.0;
        ((i as f64 + 0.5) * spacing[a] - half) / half
    };
    let cut = (spec.fov_cut_fraction * dims[0] as f64).round() as usize;

    let mut labels = vec![Tissue::Background; n];
    let mut log_bias = vec![0.0f64; n];
    for i in 0..dims[0] {
        let z = coord(i, 0);
        for j in 0..dims[1] {
            let y = coord(j, 1);
            for k in 0..dims[2] {
                let x = coord(k, 2);
                let idx = (i * dims[1] + j) * dims[2] + k;
                log_bias[idx] = field.log_at([z, y, x], spec.bias_smoothness);
                if i >= cut {
                    labels[idx] = anatomy.tissue([z, y, x]);
                }
            }
        }
    }

    // Normalize the field to geometric mean 1 inside the head.
    let inside: Vec<usize> = (0..n).filter(|&i| labels[i] != Tissue::Background).collect();
    if !inside.is_empty() {
        let mean = inside.iter().map(|&i| log_bias[i]).sum::<f64>() / inside.len() as f64;
        log_bias.iter_mut().for_each(|v| *v -= mean);
    }

    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
    let mut mask = vec![0.0f32; n];
    let mut clean = vec![0.0f32; n];
    let mut mri = vec![0.0f32; n];
    let mut bias = vec![1.0f32; n];
    let mut ct = vec![CT_MIN_HU; n];
    for idx in 0..n {
        bias[idx] = log_bias[idx].exp() as f32;
        let t = labels[idx];
        if t == Tissue::Background {
            continue;
        }
        mask[idx] = 1.0;
        let c = if t == Tissue::Air {
            0.0
        } else {
            (spec.contrast_gain * t.t1() + spec.contrast_offset).max(0.0)
        };
        clean[idx] = c as f32;
        let eps = if spec.noise_sigma > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        mri[idx] = (c * bias[idx] as f64 + eps).max(0.0) as f32;
        ct[idx] = t.hu(anatomy.skull_hu) as f32;
    }

    if spec.ct_slice_thickness_factor > 1 {
        thick_slice_average(&mut ct, dims, spec.ct_slice_thickness_factor);
        for idx in 0..n {
            if mask[idx] == 0.0 {
                ct[idx] = CT_MIN_HU;
            }
        }
    }
    ct.iter_mut().for_each(|v| *v = v.clamp(CT_MIN_HU, CT_MAX_HU));

    let mk = |m: Modality, data: Vec<f32>| Volume::from_data(dims, spacing, m, data);
    Ok(PhantomPair {
        patient_id: String::new(),
        mri: mk(Modality::Mri, mri)?,
        ct: mk(Modality::Ct, ct)?,
        mask: mk(Modality::Mask, mask)?,
        true_bias: mk(Modality::Field, bias)?,
        clean_mri: mk(Modality::Mri, clean)?,
        labels: mk(Modality::Labels, labels.iter().map(|&t| t as u8 as f32).collect())?,
    })
}

/// Replace each group of `factor` axial slices by its mean slice.
fn thick_slice_average(data: &mut [f32], dims: [usize; 3], factor: usize) {
    let plane = dims[1] * dims[2];
    let mut start = 0;
    while start < dims[0] {
        let end = (start + factor).min(dims[0]);
        let count = (end - start) as f64;
        for p in 0..plane {
            let mean = (start..end).map(|i| data[i * plane + p] as f64).sum::<f64>() / count;
            for i in start..end {
                data[i * plane + p] = mean as f32;
            }
        }
        start = end;
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Cohort {
    pub spec: CentreSpec,
    pub patients: Vec<PhantomPair>,
    pub split: Split,
}

pub fn patient_seed(master_seed: u64, centre_id: &str, index: usize) -> u64 {
    derive_seed(master_seed, &format!("centre:{centre_id}"), &[index as u64])
}

/// Seeded 2 / 2 / rest split of `n` patient indices.
pub fn split_patients(n: usize, master_seed: u64, centre_id: &str) -> Result<Split> {
    if n < 5 {
        return Err(Error::config(
            format!("centre {centre_id}.n_patients"),
            format!("{n} < 5"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_for(master_seed, &format!("split:{centre_id}"), &[]);
    rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
    let mut validation = order[..2].to_vec();
    let mut test = order[2..4].to_vec();
    let mut train = order[4..].to_vec();
    validation.sort_unstable();
    test.sort_unstable();
    train.sort_unstable();
    Ok(Split {
        train,
        validation,
        test,
    })
}

pub fn generate_centre(spec: &CentreSpec, master_seed: u64) -> Result<Cohort> {
    spec.validate()?;
    let split = split_patients(spec.n_patients, master_seed, &spec.centre_id)?;
    let patients = (0..spec.n_patients)
        .into_par_iter()
        .map(|i| {
            let mut p = generate_phantom(patient_seed(master_seed, &spec.centre_id, i), spec)?;
            p.patient_id = format!("{}-{i:03}", spec.centre_id);
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort {
        spec: spec.clone(),
        patients,
        split,
    })
}
