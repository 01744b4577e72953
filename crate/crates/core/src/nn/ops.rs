//! Forward and backward rules for the layer set.
//!
//! Every function here is pure: callers own any cached activations and pass
//! them back to the matching `*_backward`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const KERNELS: [usize; 3] = [1, 3, 7];

fn check_conv_shapes<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<([usize; 4], usize, usize)> {
    let [n, c, h, w] = input.dims4()?;
    let [f, wc, kh, kw] = weight.dims4().map_err(|_| {
        Error::Shape(format!(
            "conv2d weight must be [F, C, k, k], got {:?}",
            weight.shape()
        ))
    })?;
    if kh != kw {
        return Err(Error::Shape(format!(
            "conv2d kernel axis: non-square kernel {kh}x{kw}"
        )));
    }
    if !KERNELS.contains(&kh) {
        return Err(Error::Shape(format!(
            "conv2d kernel axis: unsupported kernel size {kh}"
        )));
    }
    if wc != c {
        return Err(Error::Shape(format!(
            "conv2d channel axis: input has {c} channels, weight expects {wc}"
        )));
    }
    if bias.shape() != [f] {
        return Err(Error::Shape(format!(
            "conv2d filter axis: bias shape {:?} does not match {f} filters",
            bias.shape()
        )));
    }
    if h < kh {
        return Err(Error::Shape(format!(
            "conv2d height axis: extent {h} smaller than kernel {kh}"
        )));
    }
    if w < kh {
        return Err(Error::Shape(format!(
            "conv2d width axis: extent {w} smaller than kernel {kh}"
        )));
    }
    Ok(([n, c, h, w], f, kh))
}

/// Unfold one `[C, H, W]` image into `[C*k*k, H*W]` columns with zero same-padding.
fn im2col<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let p = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let src = &img[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - p as isize;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let off = kx as isize - p as isize;
                    // dst[x] = srow[x + off] where in range
                    let lo = (-off).max(0) as usize;
                    let hi = (w as isize - off).min(w as isize).max(0) as usize;
                    dst[..lo.min(w)].fill(T::zero());
                    if lo < hi {
                        dst[lo..hi].copy_from_slice(
                            &srow[(lo as isize + off) as usize..(hi as isize + off) as usize],
                        );
                    }
                    if hi < w {
                        dst[hi..].fill(T::zero());
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into a `[C, H, W]` image.
fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, k: usize, img: &mut [T]) {
    let p = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let dst = &mut img[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - p as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let off = kx as isize - p as isize;
                    let lo = (-off).max(0) as usize;
                    let hi = (w as isize - off).min(w as isize).max(0) as usize;
                    let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    for x in lo..hi {
                        drow[(x as isize + off) as usize] += row[y * w + x];
                    }
                }
            }
        }
    }
}

/// Stride-1 same-padded 2D convolution.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let ([n, c, h, w], f, k) = check_conv_shapes(input, weight, bias)?;
    let hw = h * w;
    let ckk = c * k * k;
    let mut out = vec![T::zero(); n * f * hw];
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); ckk * hw] };
    for i in 0..n {
        let img = &input.data()[i * c * hw..(i + 1) * c * hw];
        let dst = &mut out[i * f * hw..(i + 1) * f * hw];
        for (fi, row) in dst.chunks_mut(hw).enumerate() {
            row.fill(bias.data()[fi]);
        }
        let cols: &[T] = if k == 1 {
            img
        } else {
            im2col(img, c, h, w, k, &mut col);
            &col
        };
        T::gemm(f, ckk, hw, T::one(), weight.data(), false, cols, false, T::one(), dst);
    }
    Tensor::from_vec(&[n, f, h, w], out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let [n, c, h, w] = input.dims4()?;
    let [f, _, k, _] = weight.dims4()?;
    if grad_out.shape() != [n, f, h, w] {
        return Err(Error::Shape(format!(
            "conv2d backward: gradient shape {:?} does not match output [{n}, {f}, {h}, {w}]",
            grad_out.shape()
        )));
    }
    let hw = h * w;
    let ckk = c * k * k;
    let mut gw = vec![T::zero(); f * ckk];
    let mut gb = vec![T::zero(); f];
    let mut gin = vec![T::zero(); n * c * hw];
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); ckk * hw] };
    let mut gcol = vec![T::zero(); ckk * hw];
    for i in 0..n {
        let img = &input.data()[i * c * hw..(i + 1) * c * hw];
        let go = &grad_out.data()[i * f * hw..(i + 1) * f * hw];
        for (fi, row) in go.chunks(hw).enumerate() {
            gb[fi] += row.iter().copied().sum::<T>();
        }
        let cols: &[T] = if k == 1 {
            img
        } else {
            im2col(img, c, h, w, k, &mut col);
            &col
        };
        // gW[F, CKK] += gout[F, HW] * cols^T
        T::gemm(f, hw, ckk, T::one(), go, false, cols, true, T::one(), &mut gw);
        // gcol[CKK, HW] = W^T * gout
        let gi = &mut gin[i * c * hw..(i + 1) * c * hw];
        if k == 1 {
            T::gemm(ckk, f, hw, T::one(), weight.data(), true, go, false, T::zero(), gi);
        } else {
            T::gemm(ckk, f, hw, T::one(), weight.data(), true, go, false, T::zero(), &mut gcol);
            col2im(&gcol, c, h, w, k, gi);
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(&[n, c, h, w], gin)?,
        weight: Tensor::from_vec(weight.shape(), gw)?,
        bias: Tensor::from_vec(&[f], gb)?,
    })
}

/// Values saved by a train-mode batch-norm forward.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

pub struct BnTrainOutput<T> {
    pub output: Tensor<T>,
    pub cache: BnCache<T>,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance, used for the running estimate.
    pub batch_var: Vec<T>,
}

fn check_bn<T: Scalar>(input: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<[usize; 4]> {
    let dims = input.dims4()?;
    let c = dims[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!(
            "batchnorm channel axis: input has {c} channels, gamma {:?}, beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(dims)
}

pub fn batchnorm2d_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<BnTrainOutput<T>> {
    let [n, c, h, w] = check_bn(input, gamma, beta)?;
    let hw = h * w;
    let count = n * hw;
    let cnt = T::from_f64(count as f64);
    let x = input.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut s = T::zero();
        for i in 0..n {
            s += x[(i * c + ci) * hw..][..hw].iter().copied().sum::<T>();
        }
        let m = s / cnt;
        let mut sq = T::zero();
        for i in 0..n {
            for &v in &x[(i * c + ci) * hw..][..hw] {
                let d = v - m;
                sq += d * d;
            }
        }
        mean[ci] = m;
        var[ci] = sq / cnt;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for ci in 0..c {
            let base = (i * c + ci) * hw;
            let (m, is, g, b) = (mean[ci], inv_std[ci], gamma.data()[ci], beta.data()[ci]);
            for j in base..base + hw {
                let xh = (x[j] - m) * is;
                xhat[j] = xh;
                out[j] = g * xh + b;
            }
        }
    }
    let unbiased = if count > 1 {
        let scale = cnt / T::from_f64((count - 1) as f64);
        var.iter().map(|&v| v * scale).collect()
    } else {
        var.clone()
    };
    Ok(BnTrainOutput {
        output: Tensor::from_vec(input.shape(), out)?,
        cache: BnCache {
            normalized: Tensor::from_vec(input.shape(), xhat)?,
            inv_std,
        },
        batch_mean: mean,
        batch_var: unbiased,
    })
}

pub fn batchnorm2d_eval<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = check_bn(input, gamma, beta)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(Error::Shape(
            "batchnorm channel axis: running statistics do not match the input".into(),
        ));
    }
    let hw = h * w;
    let mut out = input.data().to_vec();
    for i in 0..n {
        for ci in 0..c {
            let is = T::one() / (running_var.data()[ci] + eps).sqrt();
            let scale = gamma.data()[ci] * is;
            let shift = beta.data()[ci] - running_mean.data()[ci] * scale;
            for v in &mut out[(i * c + ci) * hw..][..hw] {
                *v = *v * scale + shift;
            }
        }
    }
    Tensor::from_vec(input.shape(), out)
}

pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batchnorm2d_backward<T: Scalar>(
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<BnGrads<T>> {
    cache.normalized.check_same_shape(grad_out, "batchnorm backward")?;
    let [n, c, h, w] = grad_out.dims4()?;
    let hw = h * w;
    let cnt = T::from_f64((n * hw) as f64);
    let gy = grad_out.data();
    let xh = cache.normalized.data();
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for i in 0..n {
        for ci in 0..c {
            let base = (i * c + ci) * hw;
            for j in base..base + hw {
                gbeta[ci] += gy[j];
                ggamma[ci] += gy[j] * xh[j];
            }
        }
    }
    let mut gin = vec![T::zero(); gy.len()];
    for i in 0..n {
        for ci in 0..c {
            let base = (i * c + ci) * hw;
            let g = gamma.data()[ci];
            let k = g * cache.inv_std[ci] / cnt;
            let (sb, sg) = (gbeta[ci], ggamma[ci]);
            for j in base..base + hw {
                gin[j] = k * (cnt * gy[j] - sb - xh[j] * sg);
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::from_vec(grad_out.shape(), gin)?,
        gamma: Tensor::from_vec(&[c], ggamma)?,
        beta: Tensor::from_vec(&[c], gbeta)?,
    })
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Backward through ReLU given its forward output.
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    output.check_same_shape(grad_out, "relu backward")?;
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(output.shape(), data)
}

/// 2×2 stride-2 max-pool. Returns the pooled tensor and, per output element,
/// the flat input index of the selected maximum (first in scan order on ties).
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let [n, c, h, w] = input.dims4()?;
    if h % 2 != 0 {
        return Err(Error::Shape(format!("maxpool height axis: odd extent {h}")));
    }
    if w % 2 != 0 {
        return Err(Error::Shape(format!("maxpool width axis: odd extent {w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let cands = [
                    base + 2 * y * w + 2 * xo,
                    base + 2 * y * w + 2 * xo + 1,
                    base + (2 * y + 1) * w + 2 * xo,
                    base + (2 * y + 1) * w + 2 * xo + 1,
                ];
                let mut best = cands[0];
                for &j in &cands[1..] {
                    if x[j] > x[best] {
                        best = j;
                    }
                }
                out.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, oh, ow], out)?, idx))
}

pub fn maxpool2d_backward<T: Scalar>(
    indices: &[u32],
    grad_out: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if indices.len() != grad_out.len() {
        return Err(Error::Shape(
            "maxpool backward: index count does not match gradient".into(),
        ));
    }
    let mut gin = Tensor::zeros(input_shape);
    let g = gin.data_mut();
    for (&i, &v) in indices.iter().zip(grad_out.data()) {
        g[i as usize] += v;
    }
    Ok(gin)
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2d_nearest<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let x = input.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
            let drow = &mut dst[y * ow..(y + 1) * ow];
            for (xo, d) in drow.iter_mut().enumerate() {
                *d = srow[xo / 2];
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

pub fn upsample2d_nearest_backward<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, oh, ow] = grad_out.dims4()?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(Error::Shape(format!(
            "upsample backward: odd gradient extents {oh}x{ow}"
        )));
    }
    let (h, w) = (oh / 2, ow / 2);
    let g = grad_out.data();
    let mut out = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / 2) * w + x / 2] += src[y * ow + x];
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], out)
}
