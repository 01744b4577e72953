//! Naive reference implementations, written without the library's helpers.

use fedsct::federation::ClientUpdate;
use fedsct::model::{NamedParameterSet, NamedTensor};
use fedsct::nn::{LayerTag, TagKind};
use fedsct::slicing::PatchPrediction;
use fedsct::tensor::Tensor;
use fedsct::volume::Volume;
use rand::Rng;

/// A small mixed schema: conv weight and bias, BN affine and running stats.
pub fn schema() -> Vec<(&'static str, TagKind, Vec<usize>)> {
    vec![
        ("conv0.weight", TagKind::ConvWeight, vec![2, 1, 3, 3]),
        ("conv0.bias", TagKind::ConvBias, vec![2]),
        ("bn1.gamma", TagKind::BnGamma, vec![2]),
        ("bn1.beta", TagKind::BnBeta, vec![2]),
        ("bn1.running_mean", TagKind::BnRunningMean, vec![2]),
        ("bn1.running_var", TagKind::BnRunningVar, vec![2]),
    ]
}

pub fn random_set<R: Rng>(rng: &mut R) -> NamedParameterSet<f64> {
    let entries = schema()
        .into_iter()
        .enumerate()
        .map(|(i, (name, kind, shape))| {
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| match kind {
                    TagKind::BnRunningVar => rng.gen_range(0.1..2.0),
                    _ => rng.gen_range(-1.0..1.0),
                })
                .collect();
            NamedTensor {
                name: name.to_string(),
                tag: LayerTag::new(kind, i as u32),
                value: Tensor::from_vec(&shape, data).unwrap(),
            }
        })
        .collect();
    NamedParameterSet::new(entries).unwrap()
}

pub fn random_updates<R: Rng>(k: usize, rng: &mut R) -> Vec<ClientUpdate<f64>> {
    (0..k)
        .map(|client_id| ClientUpdate {
            client_id,
            params: random_set(rng),
            n_k: rng.gen_range(1..500),
        })
        .collect()
}

/// `Σ_k (n_k / n) w_k`, clients in ascending id order, one scalar at a time.
pub fn brute_fedavg(updates: &[ClientUpdate<f64>]) -> Vec<Vec<f64>> {
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);
    let mut n = 0usize;
    for u in updates {
        n += u.n_k;
    }
    let entries = updates[0].params.entries().len();
    let mut out = Vec::new();
    for e in 0..entries {
        let len = updates[0].params.entries()[e].value.len();
        let mut vals = Vec::new();
        for j in 0..len {
            let mut s = 0.0f64;
            for &i in &order {
                let u = &updates[i];
                s += (u.n_k as f64 / n as f64) * u.params.entries()[e].value.data()[j];
            }
            vals.push(s);
        }
        out.push(vals);
    }
    out
}

/// Two FedYogi server steps on one scalar, unrolled by hand from
/// `m0 = 0`, `v0 = τ²`.
pub fn yogi_two_rounds(w0: f64, avg1: f64, avg2: f64, eta: f64, b1: f64, b2: f64, tau: f64) -> (f64, f64) {
    let sgn = |x: f64| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let m0 = 0.0;
    let v0 = tau * tau;

    let d1 = avg1 - w0;
    let m1 = b1 * m0 + (1.0 - b1) * d1;
    let v1 = v0 - (1.0 - b2) * d1 * d1 * sgn(v0 - d1 * d1);
    let w1 = w0 + eta * m1 / (v1.sqrt() + tau);

    let d2 = avg2 - w1;
    let m2 = b1 * m1 + (1.0 - b1) * d2;
    let v2 = v1 - (1.0 - b2) * d2 * d2 * sgn(v1 - d2 * d2);
    let w2 = w1 + eta * m2 / (v2.sqrt() + tau);
    (w1, w2)
}

pub fn naive_mae(ct: &Volume, sct: &Volume, mask: &Volume) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for i in 0..ct.data.len() {
        if mask.data[i] > 0.5 {
            s += (ct.data[i] as f64 - sct.data[i] as f64).abs();
            n += 1.0;
        }
    }
    s / n
}

pub fn naive_psnr(ct: &Volume, sct: &Volume, mask: &Volume, max: f64) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for i in 0..ct.data.len() {
        if mask.data[i] > 0.5 {
            s += (ct.data[i] as f64 - sct.data[i] as f64).powi(2);
            n += 1.0;
        }
    }
    20.0 * max.log10() - 10.0 * (s / n).log10()
}

/// Mean SSIM over every full `w³` window with two-pass population moments.
pub fn naive_ssim(x: &Volume, y: &Volume, w: usize, k1: f64, k2: f64, l: f64) -> f64 {
    let [d0, d1, d2] = x.dims;
    let c1 = (k1 * l) * (k1 * l);
    let c2 = (k2 * l) * (k2 * l);
    let at = |v: &Volume, i: usize, j: usize, k: usize| v.data[(i * d1 + j) * d2 + k] as f64;
    let (mut total, mut count) = (0.0, 0.0);
    for i in 0..=d0 - w {
        for j in 0..=d1 - w {
            for k in 0..=d2 - w {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for a in 0..w {
                    for b in 0..w {
                        for c in 0..w {
                            xs.push(at(x, i + a, j + b, k + c));
                            ys.push(at(y, i + a, j + b, k + c));
                        }
                    }
                }
                let n = xs.len() as f64;
                let mx = xs.iter().sum::<f64>() / n;
                let my = ys.iter().sum::<f64>() / n;
                let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
                let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
                let cxy = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
                total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
    }
    total / count
}

pub fn naive_median3(a: f32, b: f32, c: f32) -> f32 {
    let mut v = [a, b, c];
    v.sort_by(|p, q| p.partial_cmp(q).unwrap());
    v[1]
}

/// Per pixel: the mean of every patch value that lands on it.
pub fn naive_overlap(h: usize, w: usize, patches: &[PatchPrediction]) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let mut vals = Vec::new();
            for p in patches {
                let (r0, c0) = p.origin;
                if r >= r0 && r < r0 + p.size && c >= c0 && c < c0 + p.size {
                    vals.push(p.data[(r - r0) * p.size + (c - c0)] as f64);
                }
            }
            out.push(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    out
}
