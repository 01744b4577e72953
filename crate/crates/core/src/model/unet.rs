//! Residual U-Net for slice-wise MRI→CT translation.
//!
//! Layout, for `depth = D` pooling levels with `c_l = base * 2^l` filters:
//!
//! ```text
//! stem       7×7 conv-BN-ReLU, 1 → c_0
//! enc[l]     blocks_per_level residual blocks at c_l, then 2×2 max-pool
//! down[l]    3×3 conv-BN-ReLU, c_l → c_{l+1}          (after pooling)
//! bottleneck bottleneck_blocks residual blocks at c_D
//! up[l]      ×2 nearest upsample, 3×3 conv-BN-ReLU, c_{l+1} → c_l
//! fuse[l]    concat(up, enc skip) then 3×3 conv-BN-ReLU, 2c_l → c_l
//! dec[l]     blocks_per_level residual blocks at c_l
//! head       1×1 conv, c_0 → 1
//! ```
//!
//! Convolution census: `2 + 3D + 2·blocks·2D + 2·bottleneck`, which gives 34
//! for the [`UNetConfig::paper`] preset when counting the stem and the head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::{NamedParameterSet, NamedTensor};
use crate::nn::layers::{ParamMuts, ParamRefs};
use crate::nn::ops;
use crate::nn::{Conv2d, ConvBnRelu, LayerCounter, Mode, Module, Parameter, ResidualBlock, TagKind};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Square input extent in pixels.
    pub input_size: usize,
    /// Number of pool / upsample levels.
    pub depth: usize,
    pub base_channels: usize,
    pub stem_kernel: usize,
    pub blocks_per_level: usize,
    pub bottleneck_blocks: usize,
}

impl UNetConfig {
    /// Reconstruction of the published 34-convolution network on 256×256 slices.
    pub fn paper() -> Self {
        UNetConfig {
            input_size: 256,
            depth: 4,
            base_channels: 32,
            stem_kernel: 7,
            blocks_per_level: 1,
            bottleneck_blocks: 2,
        }
    }

    pub fn desk() -> Self {
        UNetConfig {
            input_size: 64,
            depth: 3,
            base_channels: 8,
            stem_kernel: 7,
            blocks_per_level: 1,
            bottleneck_blocks: 1,
        }
    }

    /// Smallest network used for end-to-end desk experiments.
    pub fn tiny(input_size: usize) -> Self {
        UNetConfig {
            input_size,
            depth: 2,
            base_channels: 4,
            stem_kernel: 7,
            blocks_per_level: 1,
            bottleneck_blocks: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("model.depth", "must be at least 1"));
        }
        if self.base_channels == 0 {
            return Err(Error::config("model.base_channels", "must be positive"));
        }
        if ![1, 3, 7].contains(&self.stem_kernel) {
            return Err(Error::config("model.stem_kernel", "must be 1, 3 or 7"));
        }
        let div = 1usize << self.depth;
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(Error::config(
                "model.input_size",
                format!(
                    "{} is not divisible by 2^depth = {div}",
                    self.input_size
                ),
            ));
        }
        // Deepest feature map must still fit a 3×3 kernel.
        if self.input_size / div < 3 && self.bottleneck_blocks > 0 {
            return Err(Error::config(
                "model.input_size",
                format!("bottleneck extent {} is below the 3×3 kernel", self.input_size / div),
            ));
        }
        Ok(())
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Convolution count implied by the layout.
    pub fn expected_conv_count(&self) -> usize {
        2 + 3 * self.depth + 4 * self.blocks_per_level * self.depth + 2 * self.bottleneck_blocks
    }
}

/// One convolution as seen by the structural census.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvInfo {
    pub name: String,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug)]
pub struct UNet<T> {
    config: UNetConfig,
    stem: ConvBnRelu<T>,
    enc: Vec<Vec<ResidualBlock<T>>>,
    down: Vec<ConvBnRelu<T>>,
    bottleneck: Vec<ResidualBlock<T>>,
    up: Vec<ConvBnRelu<T>>,
    fuse: Vec<ConvBnRelu<T>>,
    dec: Vec<Vec<ResidualBlock<T>>>,
    head: Conv2d<T>,
    pool_cache: Vec<(Vec<u32>, Vec<usize>)>,
}

fn blocks_forward<T: Scalar>(
    blocks: &mut [ResidualBlock<T>],
    mut x: Tensor<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    for b in blocks.iter_mut() {
        x = b.forward(&x, mode)?;
    }
    Ok(x)
}

fn blocks_backward<T: Scalar>(blocks: &mut [ResidualBlock<T>], mut g: Tensor<T>) -> Result<Tensor<T>> {
    for b in blocks.iter_mut().rev() {
        g = b.backward(&g)?;
    }
    Ok(g)
}

impl<T: Scalar> UNet<T> {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ctr = LayerCounter::default();
        let c = |l| config.level_channels(l);
        let d = config.depth;

        let stem = ConvBnRelu::new(1, c(0), config.stem_kernel, &mut ctr, &mut rng);
        let mut enc = Vec::with_capacity(d);
        let mut down = Vec::with_capacity(d);
        for l in 0..d {
            enc.push(
                (0..config.blocks_per_level)
                    .map(|_| ResidualBlock::new(c(l), &mut ctr, &mut rng))
                    .collect(),
            );
            down.push(ConvBnRelu::new(c(l), c(l + 1), 3, &mut ctr, &mut rng));
        }
        let bottleneck = (0..config.bottleneck_blocks)
            .map(|_| ResidualBlock::new(c(d), &mut ctr, &mut rng))
            .collect();
        // Decoder modules are stored by level but built deepest-first.
        let mut up = Vec::with_capacity(d);
        let mut fuse = Vec::with_capacity(d);
        let mut dec = Vec::with_capacity(d);
        for l in (0..d).rev() {
            up.push(ConvBnRelu::new(c(l + 1), c(l), 3, &mut ctr, &mut rng));
            fuse.push(ConvBnRelu::new(2 * c(l), c(l), 3, &mut ctr, &mut rng));
            dec.push(
                (0..config.blocks_per_level)
                    .map(|_| ResidualBlock::new(c(l), &mut ctr, &mut rng))
                    .collect::<Vec<_>>(),
            );
        }
        up.reverse();
        fuse.reverse();
        dec.reverse();
        let head = Conv2d::new(c(0), 1, 1, &mut ctr, &mut rng);
        Ok(UNet {
            config,
            stem,
            enc,
            down,
            bottleneck,
            up,
            fuse,
            dec,
            head,
            pool_cache: Vec::new(),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let [_, c, h, w] = batch.dims4()?;
        let s = self.config.input_size;
        if c != 1 {
            return Err(Error::Shape(format!("unet channel axis: expected 1, got {c}")));
        }
        if h != s || w != s {
            return Err(Error::Shape(format!(
                "unet spatial axes: expected {s}x{s}, got {h}x{w}"
            )));
        }
        let d = self.config.depth;
        let mut x = self.stem.forward(batch, mode)?;
        let mut skips = Vec::with_capacity(d);
        self.pool_cache.clear();
        for l in 0..d {
            x = blocks_forward(&mut self.enc[l], x, mode)?;
            let (pooled, idx) = ops::maxpool2d(&x)?;
            if mode == Mode::Train {
                self.pool_cache.push((idx, x.shape().to_vec()));
            }
            skips.push(x);
            x = self.down[l].forward(&pooled, mode)?;
        }
        x = blocks_forward(&mut self.bottleneck, x, mode)?;
        for l in (0..d).rev() {
            let u = ops::upsample2d_nearest(&x)?;
            let u = self.up[l].forward(&u, mode)?;
            let cat = Tensor::concat_channels(&u, &skips[l])?;
            x = self.fuse[l].forward(&cat, mode)?;
            x = blocks_forward(&mut self.dec[l], x, mode)?;
        }
        self.head.forward(&x, mode)
    }

    /// Backward from the gradient of the last train-mode output; returns the
    /// gradient with respect to the input batch.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.config.depth;
        if self.pool_cache.len() != d {
            return Err(Error::InvalidInput(
                "unet: backward called without a train-mode forward".into(),
            ));
        }
        let mut g = self.head.backward(grad)?;
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; d];
        for l in 0..d {
            g = blocks_backward(&mut self.dec[l], g)?;
            g = self.fuse[l].backward(&g)?;
            let (gu, gs) = g.split_channels(self.config.level_channels(l))?;
            skip_grads[l] = Some(gs);
            let gu = self.up[l].backward(&gu)?;
            g = ops::upsample2d_nearest_backward(&gu)?;
        }
        g = blocks_backward(&mut self.bottleneck, g)?;
        let caches = std::mem::take(&mut self.pool_cache);
        for l in (0..d).rev() {
            g = self.down[l].backward(&g)?;
            let (idx, shape) = &caches[l];
            g = ops::maxpool2d_backward(idx, &g, shape)?;
            g.add_assign(skip_grads[l].as_ref().expect("skip gradient"))?;
            g = blocks_backward(&mut self.enc[l], g)?;
        }
        self.stem.backward(&g)
    }

    pub fn params(&self) -> ParamRefs<'_, T> {
        let mut out = Vec::new();
        self.stem.collect_params("stem", &mut out);
        for l in 0..self.config.depth {
            for (i, b) in self.enc[l].iter().enumerate() {
                b.collect_params(&format!("enc{l}.block{i}"), &mut out);
            }
            self.down[l].collect_params(&format!("down{l}"), &mut out);
        }
        for (i, b) in self.bottleneck.iter().enumerate() {
            b.collect_params(&format!("bottleneck.block{i}"), &mut out);
        }
        for l in (0..self.config.depth).rev() {
            self.up[l].collect_params(&format!("up{l}"), &mut out);
            self.fuse[l].collect_params(&format!("fuse{l}"), &mut out);
            for (i, b) in self.dec[l].iter().enumerate() {
                b.collect_params(&format!("dec{l}.block{i}"), &mut out);
            }
        }
        self.head.collect_params("head", &mut out);
        out
    }

    pub fn params_mut(&mut self) -> ParamMuts<'_, T> {
        let mut out = Vec::new();
        self.stem.collect_params_mut("stem", &mut out);
        let d = self.config.depth;
        for (l, (blocks, down)) in self.enc.iter_mut().zip(self.down.iter_mut()).enumerate() {
            for (i, b) in blocks.iter_mut().enumerate() {
                b.collect_params_mut(&format!("enc{l}.block{i}"), &mut out);
            }
            down.collect_params_mut(&format!("down{l}"), &mut out);
        }
        for (i, b) in self.bottleneck.iter_mut().enumerate() {
            b.collect_params_mut(&format!("bottleneck.block{i}"), &mut out);
        }
        let mut dec_parts: Vec<_> = self
            .up
            .iter_mut()
            .zip(self.fuse.iter_mut())
            .zip(self.dec.iter_mut())
            .enumerate()
            .collect();
        dec_parts.reverse();
        debug_assert_eq!(dec_parts.len(), d);
        for (l, ((up, fuse), blocks)) in dec_parts {
            up.collect_params_mut(&format!("up{l}"), &mut out);
            fuse.collect_params_mut(&format!("fuse{l}"), &mut out);
            for (i, b) in blocks.iter_mut().enumerate() {
                b.collect_params_mut(&format!("dec{l}.block{i}"), &mut out);
            }
        }
        self.head.collect_params_mut("head", &mut out);
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Trainable parameters (everything except running statistics).
    pub fn trainable_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.params_mut()
            .into_iter()
            .map(|(_, p)| p)
            .filter(|p| p.tag.is_trainable())
            .collect()
    }

    /// Structural census: every convolution in the built graph, in order.
    pub fn conv_census(&self) -> Vec<ConvInfo> {
        self.params()
            .into_iter()
            .filter(|(_, p)| p.tag.kind == TagKind::ConvWeight)
            .map(|(name, p)| {
                let s = p.value.shape();
                ConvInfo {
                    name: name.trim_end_matches(".weight").to_string(),
                    kernel: s[2],
                    in_channels: s[1],
                    out_channels: s[0],
                }
            })
            .collect()
    }

    pub fn conv_count(&self) -> usize {
        let blocks = |v: &[ResidualBlock<T>]| v.iter().map(|b| b.conv_count()).sum::<usize>();
        self.stem.conv_count()
            + self.enc.iter().map(|v| blocks(v)).sum::<usize>()
            + self.down.iter().map(|m| m.conv_count()).sum::<usize>()
            + blocks(&self.bottleneck)
            + self.up.iter().map(|m| m.conv_count()).sum::<usize>()
            + self.fuse.iter().map(|m| m.conv_count()).sum::<usize>()
            + self.dec.iter().map(|v| blocks(v)).sum::<usize>()
            + self.head.conv_count()
    }

    pub fn flatten(&self) -> NamedParameterSet<T> {
        let entries = self
            .params()
            .into_iter()
            .map(|(name, p)| NamedTensor {
                name,
                tag: p.tag,
                value: p.value.clone(),
            })
            .collect();
        NamedParameterSet::new(entries).expect("model parameter names are unique")
    }

    /// Replace every parameter from `set`, which must match the model exactly.
    pub fn unflatten(&mut self, set: &NamedParameterSet<T>) -> Result<()> {
        self.flatten().check_same_schema(set)?;
        for ((_, p), e) in self.params_mut().into_iter().zip(set.entries()) {
            p.value = e.value.clone();
        }
        Ok(())
    }

    /// Overwrite the named subset of parameters, leaving the rest in place.
    pub fn load_entries(&mut self, set: &NamedParameterSet<T>) -> Result<()> {
        let mut params = self.params_mut();
        // Validate everything before touching any value.
        let mut targets = Vec::with_capacity(set.len());
        for e in set.entries() {
            let pos = params
                .iter()
                .position(|(n, _)| *n == e.name)
                .ok_or_else(|| Error::Schema {
                    name: e.name.clone(),
                    reason: "no such parameter in the model".into(),
                })?;
            let p = &params[pos].1;
            if p.value.shape() != e.value.shape() {
                return Err(Error::Schema {
                    name: e.name.clone(),
                    reason: format!("shape {:?} vs {:?}", p.value.shape(), e.value.shape()),
                });
            }
            if p.tag != e.tag {
                return Err(Error::Schema {
                    name: e.name.clone(),
                    reason: "layer tag differs".into(),
                });
            }
            targets.push(pos);
        }
        for (pos, e) in targets.into_iter().zip(set.entries()) {
            params[pos].1.value = e.value.clone();
        }
        Ok(())
    }
}
