//! Per-centre preprocessing: bias correction, orientation, resampling,
//! crop / resize / pad, masking and min-max normalization.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Modality, Volume, STANDARD_ORIENTATION};

pub const PAD_CT: f32 = -1000.0;
pub const PAD_MRI: f32 = 0.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_dim: usize,
    pub crop_dims: [usize; 3],
    pub target_voxel: f64,
    pub pad_ct: f32,
    pub pad_mri: f32,
    pub bias_poly_degree: usize,
    pub bias_iters: usize,
}

impl PreprocessConfig {
    /// Configuration for a cubic target of `target_dim` voxels per axis, with
    /// the 328 × 256 × 328 crop scaled proportionally and rounded to even.
    pub fn for_target(target_dim: usize) -> Self {
        let scale = |c: usize| {
            let v = (c as f64 * target_dim as f64 / 256.0 / 2.0).round() as usize * 2;
            v.max(target_dim)
        };
        PreprocessConfig {
            target_dim,
            crop_dims: [scale(328), scale(256), scale(328)],
            target_voxel: 1.0,
            pad_ct: PAD_CT,
            pad_mri: PAD_MRI,
            bias_poly_degree: 3,
            bias_iters: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_dim == 0 {
            return Err(Error::config("preprocess.target_dim", "must be positive"));
        }
        for (a, &c) in self.crop_dims.iter().enumerate() {
            if c < self.target_dim {
                return Err(Error::config(
                    format!("preprocess.crop_dims[{a}]"),
                    format!("{c} is smaller than target_dim {}", self.target_dim),
                ));
            }
        }
        if !(self.target_voxel.is_finite() && self.target_voxel > 0.0) {
            return Err(Error::config("preprocess.target_voxel", "must be finite and > 0"));
        }
        if self.pad_ct != PAD_CT {
            return Err(Error::config("preprocess.pad_ct", format!("must be {PAD_CT}")));
        }
        if self.pad_mri != PAD_MRI {
            return Err(Error::config("preprocess.pad_mri", format!("must be {PAD_MRI}")));
        }
        if self.bias_poly_degree == 0 || self.bias_poly_degree > 6 {
            return Err(Error::config("preprocess.bias_poly_degree", "must lie in 1..=6"));
        }
        Ok(())
    }

    fn pad_value(&self, modality: Modality) -> f32 {
        match modality {
            Modality::Ct => self.pad_ct,
            Modality::Mri => self.pad_mri,
            other => other.background(),
        }
    }
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self::for_target(64)
    }
}

fn monomials(degree: usize) -> Vec<[u32; 3]> {
    let d = degree as u32;
    let mut out = Vec::new();
    for p in 0..=d {
        for q in 0..=d - p {
            for r in 0..=d - p - q {
                if p + q + r > 0 {
                    out.push([p, q, r]);
                }
            }
        }
    }
    out
}

fn eval_basis(exps: &[[u32; 3]], u: [f64; 3], out: &mut [f64]) {
    for (o, e) in out.iter_mut().zip(exps) {
        *o = u[0].powi(e[0] as i32) * u[1].powi(e[1] as i32) * u[2].powi(e[2] as i32);
    }
}

fn normalized_coord(i: usize, n: usize) -> f64 {
    2.0 * (i as f64 + 0.5) / n as f64 - 1.0
}

/// Simplified bias-field correction.
///
/// Fits a polynomial log field of total degree `bias_poly_degree` to the log
/// intensity differences between neighbouring masked voxels. Pairs that
/// straddle a tissue boundary are rejected by an iteratively reweighted
/// residual threshold, so no tissue classification is needed. The field is
/// centred to geometric mean 1 over the mask. Returns `(corrected, field)`.
pub fn bias_correct(mri: &Volume, mask: &Volume, cfg: &PreprocessConfig) -> Result<(Volume, Volume)> {
    mri.check_same_grid(mask, "bias_correct")?;
    if mri.data.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidInput("bias_correct: MRI must be finite and nonnegative".into()));
    }
    let in_mask: Vec<usize> = (0..mask.len()).filter(|&i| mask.data[i] > 0.5).collect();
    if in_mask.is_empty() {
        return Err(Error::InvalidInput("bias_correct: mask is empty".into()));
    }
    let mean_int = in_mask.iter().map(|&i| mri.data[i] as f64).sum::<f64>() / in_mask.len() as f64;
    let threshold = 0.1 * mean_int;
    let dims = mri.dims;
    let usable = |idx: usize| mask.data[idx] > 0.5 && mri.data[idx] as f64 > threshold;
    let coords = |idx: usize| -> [f64; 3] {
        let k = idx % dims[2];
        let j = (idx / dims[2]) % dims[1];
        let i = idx / (dims[1] * dims[2]);
        [
            normalized_coord(i, dims[0]),
            normalized_coord(j, dims[1]),
            normalized_coord(k, dims[2]),
        ]
    };
    let exps = monomials(cfg.bias_poly_degree);
    let nb = exps.len();

    // Neighbour pairs along each axis, subsampled on large grids.
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let step = (mri.len() * 3 / MAX_BIAS_PAIRS).max(1);
    let mut counter = 0usize;
    for &idx in &in_mask {
        let k = [idx / strides[0], (idx / strides[1]) % dims[1], idx % dims[2]];
        for a in 0..3 {
            if k[a] + 1 >= dims[a] {
                continue;
            }
            let nbr = idx + strides[a];
            if !(usable(idx) && usable(nbr)) {
                continue;
            }
            counter += 1;
            if counter % step == 0 {
                pairs.push((idx, nbr));
            }
        }
    }

    let mut coef = vec![0.0f64; nb];
    if pairs.len() > 4 * nb {
        let mut rows = vec![0.0f64; pairs.len() * nb];
        let mut targets = Vec::with_capacity(pairs.len());
        let mut weights = Vec::with_capacity(pairs.len());
        let mut b0 = vec![0.0; nb];
        let mut b1 = vec![0.0; nb];
        for (r, &(p, q)) in pairs.iter().enumerate() {
            eval_basis(&exps, coords(p), &mut b0);
            eval_basis(&exps, coords(q), &mut b1);
            for j in 0..nb {
                rows[r * nb + j] = b1[j] - b0[j];
            }
            let (ip, iq) = (mri.data[p] as f64, mri.data[q] as f64);
            targets.push(iq.ln() - ip.ln());
            // Log-domain noise variance scales as 1 / intensity².
            weights.push((ip.min(iq) / mean_int).powi(2).min(1.0));
        }
        let mut cutoff = f64::INFINITY;
        for _ in 0..cfg.bias_iters.max(1) {
            let mut ata = DMatrix::<f64>::zeros(nb, nb);
            let mut atb = DVector::<f64>::zeros(nb);
            for (r, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
                let row = &rows[r * nb..(r + 1) * nb];
                let pred: f64 = row.iter().zip(&coef).map(|(x, c)| x * c).sum();
                if (t - pred).abs() > cutoff {
                    continue;
                }
                for a in 0..nb {
                    let wa = w * row[a];
                    atb[a] += wa * t;
                    for b in a..nb {
                        ata[(a, b)] += wa * row[b];
                    }
                }
            }
            for a in 0..nb {
                for b in 0..a {
                    ata[(a, b)] = ata[(b, a)];
                }
            }
            let ridge = 1e-9 * (0..nb).map(|a| ata[(a, a)]).sum::<f64>() / nb as f64;
            for a in 0..nb {
                ata[(a, a)] += ridge.max(1e-15);
            }
            match ata.cholesky() {
                Some(ch) => coef.copy_from_slice(ch.solve(&atb).as_slice()),
                None => break,
            }
            let mut resid: Vec<f64> = targets
                .iter()
                .enumerate()
                .map(|(r, &t)| {
                    let row = &rows[r * nb..(r + 1) * nb];
                    (t - row.iter().zip(&coef).map(|(x, c)| x * c).sum::<f64>()).abs()
                })
                .collect();
            let mid = resid.len() / 2;
            let mad = *resid
                .select_nth_unstable_by(mid, |a, b| a.total_cmp(b))
                .1;
            cutoff = (3.0 * 1.4826 * mad).clamp(1e-12, 0.2);
        }
    }

    let mut log_field = vec![0.0f64; mri.len()];
    let mut b = vec![0.0; nb];
    for (idx, lf) in log_field.iter_mut().enumerate() {
        eval_basis(&exps, coords(idx), &mut b);
        *lf = b.iter().zip(&coef).map(|(x, c)| x * c).sum();
    }
    let centre = in_mask.iter().map(|&i| log_field[i]).sum::<f64>() / in_mask.len() as f64;
    let field: Vec<f32> = log_field.iter().map(|v| (v - centre).exp() as f32).collect();
    let corrected: Vec<f32> = mri
        .data
        .iter()
        .zip(&field)
        .map(|(&v, &f)| (v as f64 / f as f64) as f32)
        .collect();
    Ok((
        mri.with_data(Modality::Mri, corrected),
        mri.with_data(Modality::Field, field),
    ))
}

const MAX_BIAS_PAIRS: usize = 600_000;

fn is_categorical(m: Modality) -> bool {
    matches!(m, Modality::Mask | Modality::Labels)
}

/// Resample along every axis with one source coordinate map per axis.
///
/// Output voxel `i` on axis `a` reads source coordinate `(i + 0.5) * scale[a] - 0.5`.
fn resample(vol: &Volume, new_dims: [usize; 3], scale: [f64; 3], nearest: bool) -> Vec<f32> {
    let mut data: Vec<f64> = vol.data.iter().map(|&v| v as f64).collect();
    let mut dims = vol.dims;
    for axis in 0..3 {
        if new_dims[axis] == dims[axis] && scale[axis] == 1.0 {
            continue;
        }
        let n_old = dims[axis];
        let n_new = new_dims[axis];
        let taps: Vec<(usize, usize, f64)> = (0..n_new)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale[axis] - 0.5).clamp(0.0, (n_old - 1) as f64);
                if nearest {
                    let j = (s + 0.5).floor().min((n_old - 1) as f64) as usize;
                    (j, j, 0.0)
                } else {
                    let j0 = s.floor() as usize;
                    let j1 = (j0 + 1).min(n_old - 1);
                    (j0, j1, s - j0 as f64)
                }
            })
            .collect();
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let mut out = vec![0.0f64; outer * n_new * inner];
        for o in 0..outer {
            for (i, &(j0, j1, t)) in taps.iter().enumerate() {
                let src0 = (o * n_old + j0) * inner;
                let src1 = (o * n_old + j1) * inner;
                let dst = (o * n_new + i) * inner;
                for p in 0..inner {
                    let a = data[src0 + p];
                    out[dst + p] = if t == 0.0 { a } else { a + t * (data[src1 + p] - a) };
                }
            }
        }
        data = out;
        dims[axis] = n_new;
    }
    data.into_iter().map(|v| v as f32).collect()
}

/// Resample to cubic voxels of `target_voxel` mm: trilinear for intensities,
/// nearest-neighbour for masks and labels.
pub fn resample_to_isotropic(vol: &Volume, target_voxel: f64) -> Result<Volume> {
    if !(target_voxel.is_finite() && target_voxel > 0.0) {
        return Err(Error::InvalidInput(format!("target voxel {target_voxel} mm")));
    }
    for (a, s) in vol.spacing.iter().enumerate() {
        if !(s.is_finite() && *s > 0.0) {
            return Err(Error::InvalidInput(format!("degenerate spacing {s} on axis {a}")));
        }
    }
    if vol.spacing.iter().all(|&s| s == target_voxel) {
        return Ok(vol.clone());
    }
    let new_dims: [usize; 3] = std::array::from_fn(|a| {
        ((vol.dims[a] as f64 * vol.spacing[a] / target_voxel).round() as usize).max(1)
    });
    let scale: [f64; 3] = std::array::from_fn(|a| target_voxel / vol.spacing[a]);
    let data = resample(vol, new_dims, scale, is_categorical(vol.modality));
    Ok(Volume {
        dims: new_dims,
        spacing: [target_voxel; 3],
        modality: vol.modality,
        orientation: vol.orientation,
        data,
    })
}

/// Permute and flip storage axes into (axial, coronal, sagittal) order.
pub fn orient_standardize(vol: &Volume) -> Result<Volume> {
    if vol.is_standard_orientation() {
        return Ok(vol.clone());
    }
    // src_axis[p] = storage axis carrying plane p.
    let mut src_axis = [usize::MAX; 3];
    for (a, o) in vol.orientation.iter().enumerate() {
        let p = o.normal.axis();
        if src_axis[p] != usize::MAX {
            return Err(Error::InvalidInput(format!(
                "orientation repeats the {} axis",
                o.normal.name()
            )));
        }
        src_axis[p] = a;
    }
    let dims: [usize; 3] = std::array::from_fn(|p| vol.dims[src_axis[p]]);
    let spacing: [f64; 3] = std::array::from_fn(|p| vol.spacing[src_axis[p]]);
    let mut data = vec![0.0f32; vol.len()];
    let mut old = [0usize; 3];
    for n0 in 0..dims[0] {
        for n1 in 0..dims[1] {
            for n2 in 0..dims[2] {
                for (p, &n) in [n0, n1, n2].iter().enumerate() {
                    let a = src_axis[p];
                    old[a] = if vol.orientation[a].flipped {
                        vol.dims[a] - 1 - n
                    } else {
                        n
                    };
                }
                data[(n0 * dims[1] + n1) * dims[2] + n2] = vol.get(old[0], old[1], old[2]);
            }
        }
    }
    Ok(Volume {
        dims,
        spacing,
        modality: vol.modality,
        orientation: STANDARD_ORIENTATION,
        data,
    })
}

/// Centre crop (to `crop_dims`) and aspect-preserving resize when any extent
/// exceeds the target, then symmetric padding up to `target_dim³`.
pub fn crop_resize_pad(vol: &Volume, cfg: &PreprocessConfig, modality: Modality) -> Result<Volume> {
    cfg.validate()?;
    let t = cfg.target_dim;
    let mut cur = vol.clone();
    if cur.dims.iter().any(|&d| d > t) {
        let crop: [usize; 3] = std::array::from_fn(|a| cur.dims[a].min(cfg.crop_dims[a]));
        if crop != cur.dims {
            let start: [usize; 3] = std::array::from_fn(|a| (cur.dims[a] - crop[a]) / 2);
            let mut data = Vec::with_capacity(crop.iter().product());
            for i in 0..crop[0] {
                for j in 0..crop[1] {
                    let row = cur.index(start[0] + i, start[1] + j, start[2]);
                    data.extend_from_slice(&cur.data[row..row + crop[2]]);
                }
            }
            cur = Volume {
                dims: crop,
                data,
                ..cur
            };
        }
        let max = *cur.dims.iter().max().expect("three axes");
        if max > t {
            let factor = t as f64 / max as f64;
            let new_dims: [usize; 3] =
                std::array::from_fn(|a| ((cur.dims[a] as f64 * factor).round() as usize).clamp(1, t));
            let scale: [f64; 3] = std::array::from_fn(|a| cur.dims[a] as f64 / new_dims[a] as f64);
            let data = resample(&cur, new_dims, scale, is_categorical(modality));
            let spacing = std::array::from_fn(|a| cur.spacing[a] * scale[a]);
            cur = Volume {
                dims: new_dims,
                spacing,
                data,
                ..cur
            };
        }
    }
    if cur.dims.iter().any(|&d| d < t) {
        let pad = cfg.pad_value(modality);
        let before: [usize; 3] = std::array::from_fn(|a| (t - cur.dims[a]) / 2);
        let mut out = Volume {
            dims: [t; 3],
            spacing: cur.spacing,
            modality: cur.modality,
            orientation: cur.orientation,
            data: vec![pad; t * t * t],
        };
        for i in 0..cur.dims[0] {
            for j in 0..cur.dims[1] {
                let src = cur.index(i, j, 0);
                let dst = out.index(before[0] + i, before[1] + j, before[2]);
                out.data[dst..dst + cur.dims[2]].copy_from_slice(&cur.data[src..src + cur.dims[2]]);
            }
        }
        cur = out;
    }
    debug_assert_eq!(cur.dims, [t; 3]);
    Ok(cur)
}

/// Affine map of the intensity range onto [0, 1].
///
/// A constant volume maps to zeros and yields a warning.
pub fn minmax_normalize(vol: &Volume) -> (Volume, Option<String>) {
    let (lo, hi) = vol.min_max();
    if !(hi > lo) {
        let msg = format!("constant volume (value {lo}) normalized to zeros");
        warn!("{msg}");
        return (vol.with_data(vol.modality, vec![0.0; vol.len()]), Some(msg));
    }
    let (lo, hi) = (lo as f64, hi as f64);
    let span = hi - lo;
    let data = vol
        .data
        .iter()
        .map(|&v| ((v as f64 - lo) / span) as f32)
        .collect();
    (vol.with_data(vol.modality, data), None)
}

/// Set voxels outside the mask to the modality's background constant.
pub fn apply_mask(vol: &Volume, mask: &Volume, modality: Modality) -> Result<Volume> {
    vol.check_same_grid(mask, "apply_mask")?;
    let bg = modality.background();
    let data = vol
        .data
        .iter()
        .zip(&mask.data)
        .map(|(&v, &m)| if m > 0.5 { v } else { bg })
        .collect();
    Ok(vol.with_data(vol.modality, data))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessed {
    pub mri: Volume,
    pub ct: Volume,
    pub mask: Volume,
    /// Estimated multiplicative field on the output grid; padding holds 0.
    pub bias_field: Volume,
    pub warnings: Vec<String>,
}

fn geometry(vol: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    let v = orient_standardize(vol)?;
    let v = resample_to_isotropic(&v, cfg.target_voxel)?;
    crop_resize_pad(&v, cfg, vol.modality)
}

/// Full per-patient pipeline: bias correction (MRI), geometry, masking and
/// min-max normalization (MRI).
pub fn preprocess_pair(mri: &Volume, ct: &Volume, mask: &Volume, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    cfg.validate()?;
    mri.check_same_grid(ct, "preprocess")?;
    mri.check_same_grid(mask, "preprocess")?;
    let (corrected, field) = bias_correct(mri, mask, cfg)?;
    let mask_g = geometry(mask, cfg)?;
    let mri_g = apply_mask(&geometry(&corrected, cfg)?, &mask_g, Modality::Mri)?;
    let mut ct_g = apply_mask(&geometry(ct, cfg)?, &mask_g, Modality::Ct)?;
    ct_g.data.iter_mut().for_each(|v| *v = v.clamp(-1000.0, 3000.0));
    let (mri_n, warning) = minmax_normalize(&mri_g);
    Ok(Preprocessed {
        mri: mri_n,
        ct: ct_g,
        mask: mask_g,
        bias_field: geometry(&field, cfg)?,
        warnings: warning.into_iter().collect(),
    })
}
