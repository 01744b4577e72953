//! Image-similarity metrics in Hounsfield units.

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::volume::{Modality, Volume};

pub const HU_MIN: f64 = -1000.0;
pub const HU_MAX: f64 = 3000.0;
const HU_SPAN: f64 = HU_MAX - HU_MIN;

/// Normalized model intensity in [0, 1] → HU in [−1000, 3000].
#[inline]
pub fn to_hu(x: f64) -> f64 {
    HU_MIN + HU_SPAN * x
}

#[inline]
pub fn from_hu(h: f64) -> f64 {
    (h - HU_MIN) / HU_SPAN
}

/// Convert a normalized volume to HU, clamping out-of-range inputs.
///
/// Returns the converted volume and the number of clamped voxels.
pub fn volume_to_hu(v: &Volume) -> (Volume, usize) {
    let mut clamped = 0;
    let data = v
        .data
        .iter()
        .map(|&x| {
            let x = x as f64;
            let c = x.clamp(0.0, 1.0);
            if c != x {
                clamped += 1;
            }
            to_hu(c) as f32
        })
        .collect();
    (v.with_data(Modality::Ct, data), clamped)
}

pub fn volume_from_hu(v: &Volume) -> Volume {
    let data = v.data.iter().map(|&h| from_hu(h as f64) as f32).collect();
    v.with_data(Modality::Ct, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicy {
    BodyMask,
    FullVolume,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    pub k1: f64,
    pub k2: f64,
    /// SSIM dynamic range `L` in HU.
    pub dynamic_range: f64,
    /// SSIM window extent per axis.
    pub window: usize,
    /// PSNR peak value in HU.
    pub max_ct: f64,
    pub mask_policy: MaskPolicy,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            k1: 0.01,
            k2: 0.03,
            dynamic_range: HU_SPAN,
            window: 7,
            max_ct: HU_SPAN,
            mask_policy: MaskPolicy::BodyMask,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("metrics.k1", self.k1),
            ("metrics.k2", self.k2),
            ("metrics.dynamic_range", self.dynamic_range),
            ("metrics.max_ct", self.max_ct),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(name, format!("must be finite and > 0, got {v}")));
            }
        }
        if self.window == 0 {
            return Err(Error::config("metrics.window", "must be positive"));
        }
        Ok(())
    }
}

fn region<'a>(
    ct: &'a Volume,
    sct: &'a Volume,
    mask: Option<&'a Volume>,
    policy: MaskPolicy,
    op: &str,
) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    ct.check_same_grid(sct, op)?;
    let mask = match policy {
        MaskPolicy::BodyMask => {
            let m = mask.ok_or_else(|| {
                Error::InvalidInput(format!("{op}: body-mask policy needs a mask"))
            })?;
            ct.check_same_grid(m, op)?;
            Some(m)
        }
        MaskPolicy::FullVolume => None,
    };
    let any = match mask {
        Some(m) => m.data.iter().any(|&v| v > 0.5),
        None => !ct.is_empty(),
    };
    if !any {
        return Err(Error::InvalidInput(format!("{op}: empty region")));
    }
    Ok((0..ct.len())
        .filter(move |&i| mask.map_or(true, |m| m.data[i] > 0.5))
        .map(move |i| (ct.data[i] as f64, sct.data[i] as f64)))
}

/// Mean absolute error over the policy's voxel set.
pub fn mae(ct: &Volume, sct: &Volume, mask: Option<&Volume>, policy: MaskPolicy) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, b) in region(ct, sct, mask, policy, "mae")? {
        sum += (a - b).abs();
        n += 1;
    }
    Ok(sum / n as f64)
}

/// `10 log10(max_ct² / MSE)`; identical inputs give `+inf`.
pub fn psnr(ct: &Volume, sct: &Volume, mask: Option<&Volume>, cfg: &MetricConfig) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, b) in region(ct, sct, mask, cfg.mask_policy, "psnr")? {
        sum += (a - b) * (a - b);
        n += 1;
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (cfg.max_ct * cfg.max_ct / mse).log10())
}

/// Sums over every valid window position along one axis.
fn box_sum_axis(data: &[f64], dims: [usize; 3], axis: usize, w: usize) -> (Vec<f64>, [usize; 3]) {
    let mut out_dims = dims;
    out_dims[axis] = dims[axis] + 1 - w;
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let n_in = dims[axis];
    let n_out = out_dims[axis];
    let mut out = vec![0.0; outer * n_out * inner];
    for o in 0..outer {
        for i in 0..n_out {
            let dst = (o * n_out + i) * inner;
            for t in 0..w {
                let src = (o * n_in + i + t) * inner;
                for p in 0..inner {
                    out[dst + p] += data[src + p];
                }
            }
        }
    }
    (out, out_dims)
}

fn window_sums(data: Vec<f64>, dims: [usize; 3], win: [usize; 3]) -> Vec<f64> {
    let mut cur = data;
    let mut d = dims;
    for axis in 0..3 {
        let (next, nd) = box_sum_axis(&cur, d, axis, win[axis]);
        cur = next;
        d = nd;
    }
    cur
}

/// Window extents used by [`ssim`]: axes of extent 1 get a singleton window.
pub fn ssim_window(dims: [usize; 3], window: usize) -> Result<[usize; 3]> {
    let mut win = [window; 3];
    for a in 0..3 {
        if dims[a] == 1 {
            win[a] = 1;
        } else if dims[a] < window {
            return Err(Error::InvalidInput(format!(
                "ssim: window {window} exceeds extent {} on axis {a}",
                dims[a]
            )));
        }
    }
    Ok(win)
}

/// Mean SSIM over all valid local uniform windows.
///
/// Window statistics use population (1/N) moments.
pub fn ssim(ct: &Volume, sct: &Volume, cfg: &MetricConfig) -> Result<f64> {
    ct.check_same_grid(sct, "ssim")?;
    if !(cfg.dynamic_range > 0.0) {
        return Err(Error::InvalidInput("ssim: dynamic range must be positive".into()));
    }
    let win = ssim_window(ct.dims, cfg.window)?;
    let x: Vec<f64> = ct.data.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = sct.data.iter().map(|&v| v as f64).collect();
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let sx = window_sums(x.clone(), ct.dims, win);
    let sy = window_sums(y.clone(), ct.dims, win);
    let sxx = window_sums(sq(&x, &x), ct.dims, win);
    let syy = window_sums(sq(&y, &y), ct.dims, win);
    let sxy = window_sums(sq(&x, &y), ct.dims, win);
    let n = (win[0] * win[1] * win[2]) as f64;
    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);
    let mut total = 0.0;
    for i in 0..sx.len() {
        let mx = sx[i] / n;
        let my = sy[i] / n;
        let vx = sxx[i] / n - mx * mx;
        let vy = syy[i] / n - my * my;
        let cxy = sxy[i] / n - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
            / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / sx.len() as f64)
}

fn finite_or_null<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PatientMetrics {
    pub patient_id: String,
    pub mae: f64,
    pub ssim: f64,
    /// `+inf` for a perfect prediction; serialized as `null`.
    #[serde(serialize_with = "finite_or_null")]
    pub psnr: f64,
}

pub fn evaluate_patient(
    patient_id: &str,
    ct: &Volume,
    sct: &Volume,
    mask: &Volume,
    cfg: &MetricConfig,
) -> Result<PatientMetrics> {
    Ok(PatientMetrics {
        patient_id: patient_id.to_string(),
        mae: mae(ct, sct, Some(mask), cfg.mask_policy)?,
        ssim: ssim(ct, sct, cfg)?,
        psnr: psnr(ct, sct, Some(mask), cfg)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Quartiles {
    #[serde(serialize_with = "finite_or_null")]
    pub median: f64,
    #[serde(serialize_with = "finite_or_null")]
    pub q1: f64,
    #[serde(serialize_with = "finite_or_null")]
    pub q3: f64,
}

/// Linear-interpolation quantile of ascending `sorted` at `p ∈ [0, 1]`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi || sorted[lo] == sorted[hi] {
        return sorted[lo];
    }
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quartiles(values: &[f64]) -> Result<Quartiles> {
    if values.is_empty() {
        return Err(Error::InvalidInput("quartiles of an empty set".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    Ok(Quartiles {
        median: quantile_sorted(&v, 0.5),
        q1: quantile_sorted(&v, 0.25),
        q3: quantile_sorted(&v, 0.75),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CohortSummary {
    pub n: usize,
    pub mae: Quartiles,
    pub ssim: Quartiles,
    pub psnr: Quartiles,
}

pub fn summarize(cohort: &[PatientMetrics]) -> Result<CohortSummary> {
    let col = |f: fn(&PatientMetrics) -> f64| cohort.iter().map(f).collect::<Vec<_>>();
    Ok(CohortSummary {
        n: cohort.len(),
        mae: quartiles(&col(|m| m.mae))?,
        ssim: quartiles(&col(|m| m.ssim))?,
        psnr: quartiles(&col(|m| m.psnr))?,
    })
}
