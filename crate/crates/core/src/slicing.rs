//! Slice extraction, epoch batching for the training paradigms, in-plane
//! augmentation, and the volume reconstruction / voting used at inference.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;
use crate::volume::{Plane, Volume};

/// In-plane `(height, width)` of slices normal to `plane`.
pub fn slice_shape(dims: [usize; 3], plane: Plane) -> (usize, usize) {
    match plane {
        Plane::Axial => (dims[1], dims[2]),
        Plane::Coronal => (dims[0], dims[2]),
        Plane::Sagittal => (dims[0], dims[1]),
    }
}

#[inline]
fn voxel_index(dims: [usize; 3], plane: Plane, s: usize, r: usize, c: usize) -> usize {
    let (i, j, k) = match plane {
        Plane::Axial => (s, r, c),
        Plane::Coronal => (r, s, c),
        Plane::Sagittal => (r, c, s),
    };
    (i * dims[1] + j) * dims[2] + k
}

fn check_standard(vol: &Volume) -> Result<()> {
    if !vol.is_standard_orientation() {
        return Err(Error::InvalidInput(
            "slicing requires a volume in standard orientation".into(),
        ));
    }
    Ok(())
}

/// Every slice of `vol` normal to `plane`, in index order.
pub fn extract_plane(vol: &Volume, plane: Plane) -> Result<Vec<Vec<f32>>> {
    check_standard(vol)?;
    let (h, w) = slice_shape(vol.dims, plane);
    Ok((0..vol.dims[plane.axis()])
        .map(|s| {
            let mut out = Vec::with_capacity(h * w);
            for r in 0..h {
                for c in 0..w {
                    out.push(vol.data[voxel_index(vol.dims, plane, s, r, c)]);
                }
            }
            out
        })
        .collect())
}

/// Inverse of [`extract_plane`]: write `(index, slice)` pairs into a volume
/// shaped like `like`. Indices must be complete and duplicate-free.
pub fn reconstruct_volume(slices: &[(usize, &[f32])], plane: Plane, like: &Volume) -> Result<Volume> {
    check_standard(like)?;
    let n = like.dims[plane.axis()];
    let (h, w) = slice_shape(like.dims, plane);
    let mut seen = vec![false; n];
    let mut out = like.clone();
    for &(s, data) in slices {
        if s >= n {
            return Err(Error::InvalidInput(format!(
                "{} slice index {s} out of range 0..{n}",
                plane.name()
            )));
        }
        if std::mem::replace(&mut seen[s], true) {
            return Err(Error::InvalidInput(format!(
                "duplicate {} slice index {s}",
                plane.name()
            )));
        }
        if data.len() != h * w {
            return Err(Error::Shape(format!(
                "{} slice {s} has {} pixels, expected {h}x{w}",
                plane.name(),
                data.len()
            )));
        }
        for r in 0..h {
            for c in 0..w {
                out.data[voxel_index(like.dims, plane, s, r, c)] = data[r * w + c];
            }
        }
    }
    if let Some(missing) = seen.iter().position(|&v| !v) {
        return Err(Error::InvalidInput(format!(
            "missing {} slice index {missing}",
            plane.name()
        )));
    }
    Ok(out)
}

/// A paired, co-registered training slice in model space.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    pub patient_id: Arc<str>,
    pub plane: Plane,
    pub slice_index: usize,
    /// `[1, H, W]` normalized MRI.
    pub mri_slice: Tensor<f32>,
    /// `[1, H, W]` CT target.
    pub ct_slice: Tensor<f32>,
}

impl SliceRecord {
    pub fn height(&self) -> usize {
        self.mri_slice.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.mri_slice.shape()[2]
    }
}

/// Paired slices of `mri` and `ct` normal to `plane`.
pub fn extract_slices(patient_id: &str, mri: &Volume, ct: &Volume, plane: Plane) -> Result<Vec<SliceRecord>> {
    mri.check_same_grid(ct, "extract_slices")?;
    let (h, w) = slice_shape(mri.dims, plane);
    let id: Arc<str> = Arc::from(patient_id);
    let m = extract_plane(mri, plane)?;
    let c = extract_plane(ct, plane)?;
    m.into_iter()
        .zip(c)
        .enumerate()
        .map(|(s, (ms, cs))| {
            Ok(SliceRecord {
                patient_id: id.clone(),
                plane,
                slice_index: s,
                mri_slice: Tensor::from_vec(&[1, h, w], ms)?,
                ct_slice: Tensor::from_vec(&[1, h, w], cs)?,
            })
        })
        .collect()
}

/// Batch layout of one training epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Paradigm {
    /// All three planes pooled and shuffled globally.
    RandomMulti2D,
    /// All three planes in fixed plane order, slices in index order.
    Multi2D,
    /// One plane only, shuffled; one such model per plane.
    TwoDPlus(Plane),
    /// Random square crops of axial slices, shuffled.
    Patches2D {
        patch_size: usize,
        patches_per_slice: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub record: usize,
    /// Top-left `(row, col)` of the crop for patch paradigms.
    pub origin: Option<(usize, usize)>,
}

pub type Batch = Vec<BatchItem>;

/// Order one epoch of `records` into batches of at most `batch_size`.
///
/// Every eligible record (or every `(record, patch)` draw) appears exactly
/// once; the final batch may be short.
pub fn make_epoch_batches(
    records: &[SliceRecord],
    paradigm: Paradigm,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    let mut rng = rng_for(seed, "epoch", &[]);
    let mut items: Vec<BatchItem> = match paradigm {
        Paradigm::RandomMulti2D => {
            let mut v: Vec<_> = (0..records.len()).map(whole).collect();
            v.shuffle(&mut rng);
            v
        }
        Paradigm::Multi2D => {
            let mut v: Vec<usize> = (0..records.len()).collect();
            v.sort_by_key(|&i| records[i].plane);
            v.into_iter().map(whole).collect()
        }
        Paradigm::TwoDPlus(plane) => {
            let mut v: Vec<_> = (0..records.len())
                .filter(|&i| records[i].plane == plane)
                .map(whole)
                .collect();
            v.shuffle(&mut rng);
            v
        }
        Paradigm::Patches2D {
            patch_size,
            patches_per_slice,
        } => {
            let mut v = Vec::new();
            for (i, r) in records.iter().enumerate() {
                if r.plane != Plane::Axial {
                    continue;
                }
                if patch_size == 0 || patch_size > r.height() || patch_size > r.width() {
                    return Err(Error::InvalidInput(format!(
                        "patch size {patch_size} does not fit a {}x{} slice",
                        r.height(),
                        r.width()
                    )));
                }
                for _ in 0..patches_per_slice {
                    let row = rng.gen_range(0..=r.height() - patch_size);
                    let col = rng.gen_range(0..=r.width() - patch_size);
                    v.push(BatchItem {
                        record: i,
                        origin: Some((row, col)),
                    });
                }
            }
            v.shuffle(&mut rng);
            v
        }
    };
    if items.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no training records eligible for {paradigm:?}"
        )));
    }
    let mut batches = Vec::with_capacity(items.len().div_ceil(batch_size));
    while !items.is_empty() {
        let rest = items.split_off(items.len().min(batch_size));
        batches.push(std::mem::replace(&mut items, rest));
    }
    Ok(batches)
}

fn whole(record: usize) -> BatchItem {
    BatchItem {
        record,
        origin: None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentPipeline {
    None,
    /// Flip and a fixed ±10° in-plane rotation.
    Minimal,
    /// Flip, a random in-plane rotation in [−10°, 10°] and a fixed 5% shift.
    Extended,
}

pub const AUGMENT_ANGLE_DEG: f64 = 10.0;
pub const AUGMENT_SHIFT_FRACTION: f64 = 0.05;

/// A 2D rigid transform applied identically to both slices of a pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SliceTransform {
    pub flip: bool,
    pub angle_deg: f64,
    /// `(rows, cols)` shift in pixels.
    pub shift: (f64, f64),
}

impl SliceTransform {
    pub const IDENTITY: SliceTransform = SliceTransform {
        flip: false,
        angle_deg: 0.0,
        shift: (0.0, 0.0),
    };

    pub fn sample<R: Rng>(pipeline: AugmentPipeline, h: usize, w: usize, rng: &mut R) -> Self {
        let flip = rng.gen_bool(0.5);
        match pipeline {
            AugmentPipeline::None => Self::IDENTITY,
            AugmentPipeline::Minimal => {
                let angle_deg = if rng.gen_bool(0.5) {
                    if rng.gen_bool(0.5) {
                        AUGMENT_ANGLE_DEG
                    } else {
                        -AUGMENT_ANGLE_DEG
                    }
                } else {
                    0.0
                };
                SliceTransform {
                    flip,
                    angle_deg,
                    shift: (0.0, 0.0),
                }
            }
            AugmentPipeline::Extended => {
                let angle_deg = rng.gen_range(-AUGMENT_ANGLE_DEG..=AUGMENT_ANGLE_DEG);
                let sign = |r: &mut R| if r.gen_bool(0.5) { 1.0 } else { -1.0 };
                let shift = if rng.gen_bool(0.5) {
                    (
                        sign(rng) * (AUGMENT_SHIFT_FRACTION * h as f64).round(),
                        sign(rng) * (AUGMENT_SHIFT_FRACTION * w as f64).round(),
                    )
                } else {
                    (0.0, 0.0)
                };
                SliceTransform {
                    flip,
                    angle_deg,
                    shift,
                }
            }
        }
    }

    /// Resample an `h×w` image through the transform (bilinear, `pad` outside).
    pub fn apply(&self, img: &[f32], h: usize, w: usize, pad: f32) -> Vec<f32> {
        let (sn, cs) = self.angle_deg.to_radians().sin_cos();
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let mut out = vec![pad; h * w];
        for r in 0..h {
            for c in 0..w {
                // Inverse map: undo shift, undo rotation, undo flip.
                let y = r as f64 - self.shift.0 - cy;
                let x = c as f64 - self.shift.1 - cx;
                let sy = cs * y + sn * x + cy;
                let mut sx = -sn * y + cs * x + cx;
                if self.flip {
                    sx = (w as f64 - 1.0) - sx;
                }
                out[r * w + c] = bilinear(img, h, w, sy, sx, pad);
            }
        }
        out
    }
}

fn bilinear(img: &[f32], h: usize, w: usize, y: f64, x: f64, pad: f32) -> f32 {
    const TOL: f64 = 1e-9;
    if y < -TOL || x < -TOL || y > h as f64 - 1.0 + TOL || x > w as f64 - 1.0 + TOL {
        return pad;
    }
    let y = y.clamp(0.0, h as f64 - 1.0);
    let x = x.clamp(0.0, w as f64 - 1.0);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| img[yy * w + xx] as f64;
    if ty == 0.0 && tx == 0.0 {
        return img[y0 * w + x0];
    }
    let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
    let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
    (top * (1.0 - ty) + bot * ty) as f32
}

/// Normalized-space background for both modalities (0 MRI, −1000 HU CT).
pub const AUGMENT_PAD: f32 = 0.0;

/// Apply one random transform of `pipeline`, drawn from `seed`, to both slices.
pub fn augment(record: &SliceRecord, pipeline: AugmentPipeline, seed: u64) -> SliceRecord {
    let (h, w) = (record.height(), record.width());
    let mut rng = rng_for(seed, "augment", &[]);
    let t = SliceTransform::sample(pipeline, h, w, &mut rng);
    transform_record(record, &t)
}

pub fn transform_record(record: &SliceRecord, t: &SliceTransform) -> SliceRecord {
    if *t == SliceTransform::IDENTITY {
        return record.clone();
    }
    let (h, w) = (record.height(), record.width());
    let m = t.apply(record.mri_slice.data(), h, w, AUGMENT_PAD);
    let c = t.apply(record.ct_slice.data(), h, w, AUGMENT_PAD);
    SliceRecord {
        mri_slice: Tensor::from_vec(&[1, h, w], m).expect("shape preserved"),
        ct_slice: Tensor::from_vec(&[1, h, w], c).expect("shape preserved"),
        ..record.clone()
    }
}

#[inline]
pub fn median3(a: f32, b: f32, c: f32) -> f32 {
    a.max(b).min(a.min(b).max(c))
}

/// Per-voxel median of three plane-wise reconstructions.
pub fn median_vote(ax: &Volume, cor: &Volume, sag: &Volume) -> Result<Volume> {
    ax.check_same_grid(cor, "median_vote")?;
    ax.check_same_grid(sag, "median_vote")?;
    let data = ax
        .data
        .iter()
        .zip(&cor.data)
        .zip(&sag.data)
        .map(|((&a, &b), &c)| median3(a, b, c))
        .collect();
    Ok(ax.with_data(ax.modality, data))
}

/// A square patch prediction placed at `origin` in an `h×w` image.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPrediction {
    pub origin: (usize, usize),
    pub size: usize,
    pub data: Vec<f32>,
}

/// Pixel-wise mean of overlapping patch predictions.
pub fn overlap_average(h: usize, w: usize, patches: &[PatchPrediction]) -> Result<Vec<f32>> {
    let mut sum = vec![0.0f64; h * w];
    let mut count = vec![0u32; h * w];
    for p in patches {
        if p.origin.0 + p.size > h || p.origin.1 + p.size > w || p.data.len() != p.size * p.size {
            return Err(Error::Shape(format!(
                "patch of size {} at {:?} does not fit a {h}x{w} image",
                p.size, p.origin
            )));
        }
        for r in 0..p.size {
            for c in 0..p.size {
                let idx = (p.origin.0 + r) * w + p.origin.1 + c;
                sum[idx] += p.data[r * p.size + c] as f64;
                count[idx] += 1;
            }
        }
    }
    if let Some(idx) = count.iter().position(|&n| n == 0) {
        return Err(Error::InvalidInput(format!(
            "pixel ({}, {}) is not covered by any patch",
            idx / w,
            idx % w
        )));
    }
    Ok(sum
        .iter()
        .zip(&count)
        .map(|(&s, &n)| (s / n as f64) as f32)
        .collect())
}

/// Patch origins along one axis of length `n` covering it with stride `size / 2`.
pub fn tile_origins(n: usize, size: usize) -> Vec<usize> {
    let stride = (size / 2).max(1);
    let mut v: Vec<usize> = (0..=n.saturating_sub(size)).step_by(stride).collect();
    if *v.last().expect("at least one origin") + size < n {
        v.push(n - size);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Modality;

    fn ramp(dims: [usize; 3]) -> Volume {
        let n = dims.iter().product();
        Volume::from_data(dims, [1.0; 3], Modality::Mri, (0..n).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn roundtrip_every_plane() {
        let v = ramp([4, 5, 6]);
        for plane in Plane::ALL {
            let slices = extract_plane(&v, plane).unwrap();
            assert_eq!(slices.len(), v.dims[plane.axis()]);
            let pairs: Vec<_> = slices.iter().enumerate().map(|(i, s)| (i, s.as_slice())).collect();
            let like = Volume::filled(v.dims, v.spacing, v.modality, 0.0);
            assert_eq!(reconstruct_volume(&pairs, plane, &like).unwrap(), v);
        }
    }

    #[test]
    fn reconstruction_rejects_missing_and_duplicate() {
        let v = ramp([3, 3, 3]);
        let s = extract_plane(&v, Plane::Axial).unwrap();
        let dup = [(0, s[0].as_slice()), (0, s[0].as_slice()), (2, s[2].as_slice())];
        assert!(reconstruct_volume(&dup, Plane::Axial, &v).unwrap_err().to_string().contains("duplicate"));
        let missing = [(0, s[0].as_slice()), (2, s[2].as_slice())];
        assert!(reconstruct_volume(&missing, Plane::Axial, &v).unwrap_err().to_string().contains("missing"));
    }

    fn records(n_patients: usize, s: usize) -> Vec<SliceRecord> {
        let mut out = Vec::new();
        for p in 0..n_patients {
            let v = ramp([s, s, s]);
            for plane in Plane::ALL {
                out.extend(extract_slices(&format!("p{p}"), &v, &v, plane).unwrap());
            }
        }
        out
    }

    #[test]
    fn batches_are_a_permutation() {
        let recs = records(2, 4);
        for paradigm in [Paradigm::RandomMulti2D, Paradigm::Multi2D] {
            let b = make_epoch_batches(&recs, paradigm, 5, 1).unwrap();
            assert!(b[..b.len() - 1].iter().all(|x| x.len() == 5));
            let mut seen: Vec<_> = b.iter().flatten().map(|i| i.record).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..recs.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn random_multi2d_is_seeded() {
        let recs = records(1, 4);
        let a = make_epoch_batches(&recs, Paradigm::RandomMulti2D, 32, 1).unwrap();
        assert_eq!(a, make_epoch_batches(&recs, Paradigm::RandomMulti2D, 32, 1).unwrap());
        assert_ne!(a, make_epoch_batches(&recs, Paradigm::RandomMulti2D, 32, 2).unwrap());
    }

    #[test]
    fn multi2d_keeps_plane_order() {
        let recs = records(2, 3);
        let b = make_epoch_batches(&recs, Paradigm::Multi2D, 4, 0).unwrap();
        let planes: Vec<_> = b.iter().flatten().map(|i| recs[i.record].plane).collect();
        assert!(planes.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn two_d_plus_restricts_plane() {
        let recs = records(1, 4);
        let b = make_epoch_batches(&recs, Paradigm::TwoDPlus(Plane::Coronal), 32, 0).unwrap();
        assert_eq!(b.iter().flatten().count(), 4);
        assert!(b.iter().flatten().all(|i| recs[i.record].plane == Plane::Coronal));
    }

    #[test]
    fn patch_origins_stay_inside() {
        let recs = records(1, 8);
        let p = Paradigm::Patches2D {
            patch_size: 3,
            patches_per_slice: 4,
        };
        for seed in 0..20 {
            let b = make_epoch_batches(&recs, p, 7, seed).unwrap();
            assert_eq!(b.iter().flatten().count(), 8 * 4);
            for item in b.iter().flatten() {
                let (r, c) = item.origin.unwrap();
                assert!(r + 3 <= 8 && c + 3 <= 8);
            }
        }
    }

    #[test]
    fn flip_twice_and_zero_rotation_are_identity() {
        let img: Vec<f32> = (0..20).map(|v| v as f32).collect();
        let flip = SliceTransform {
            flip: true,
            ..SliceTransform::IDENTITY
        };
        assert_eq!(flip.apply(&flip.apply(&img, 4, 5, 0.0), 4, 5, 0.0), img);
        let zero = SliceTransform {
            angle_deg: 0.0,
            ..SliceTransform::IDENTITY
        };
        assert_eq!(zero.apply(&img, 4, 5, 0.0), img);
    }

    #[test]
    fn augment_preserves_pairing_and_shape() {
        let v = ramp([6, 6, 6]);
        let rec = extract_slices("p", &v, &v, Plane::Axial).unwrap().remove(3);
        for seed in 0..30 {
            for pipe in [AugmentPipeline::Minimal, AugmentPipeline::Extended] {
                let a = augment(&rec, pipe, seed);
                assert_eq!(a.mri_slice.shape(), rec.mri_slice.shape());
                assert_eq!(a.mri_slice, a.ct_slice);
            }
        }
    }

    #[test]
    fn median_examples() {
        assert_eq!(median3(100.0, -1000.0, 50.0), 50.0);
        let a = Volume::filled([1, 1, 2], [1.0; 3], Modality::Ct, 3.0);
        assert_eq!(median_vote(&a, &a, &a).unwrap(), a);
        let b = Volume::filled([1, 2, 1], [1.0; 3], Modality::Ct, 3.0);
        assert!(median_vote(&a, &a, &b).is_err());
    }

    #[test]
    fn overlap_average_examples() {
        let full = PatchPrediction {
            origin: (0, 0),
            size: 2,
            data: vec![1.0, 2.0, 3.0, 4.0],
        };
        assert_eq!(overlap_average(2, 2, &[full.clone()]).unwrap(), full.data);
        let c = |o| PatchPrediction {
            origin: (0, o),
            size: 2,
            data: vec![5.0; 4],
        };
        assert_eq!(overlap_average(2, 3, &[c(0), c(1)]).unwrap(), vec![5.0; 6]);
        let err = overlap_average(2, 4, &[c(0)]).unwrap_err();
        assert!(err.to_string().contains("(0, 2)"), "{err}");
    }

    #[test]
    fn tiles_cover_axis() {
        assert_eq!(tile_origins(64, 32), vec![0, 16, 32]);
        assert_eq!(tile_origins(10, 4), vec![0, 2, 4, 6]);
        assert_eq!(tile_origins(9, 4), vec![0, 2, 4, 5]);
        assert_eq!(tile_origins(4, 4), vec![0]);
    }
}
