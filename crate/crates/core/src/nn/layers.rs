//! Stateful layers: each keeps what its backward pass needs from the last
//! train-mode forward.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::ops::{self, BnCache};
use crate::nn::param::{LayerTag, Parameter, TagKind};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub type ParamRefs<'a, T> = Vec<(String, &'a Parameter<T>)>;
pub type ParamMuts<'a, T> = Vec<(String, &'a mut Parameter<T>)>;

pub trait Module<T: Scalar> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;

    /// Propagate `grad` (with respect to the last train-mode output) back to
    /// the input, accumulating parameter gradients on the way.
    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>>;

    fn collect_params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>);

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a, T>);

    fn conv_count(&self) -> usize;
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn missing_cache(layer: &str) -> Error {
    Error::InvalidInput(format!("{layer}: backward called without a train-mode forward"))
}

/// Hands out consecutive layer ordinals during construction.
#[derive(Debug, Default)]
pub struct LayerCounter(u32);

impl LayerCounter {
    pub fn next(&mut self) -> u32 {
        let i = self.0;
        self.0 += 1;
        i
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// Kaiming-uniform (fan-in, ReLU gain) weights; bias uniform in ±1/sqrt(fan_in).
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        counter: &mut LayerCounter,
        rng: &mut R,
    ) -> Self {
        let idx = counter.next();
        let fan_in = (in_ch * kernel * kernel) as f64;
        let wb = (6.0 / fan_in).sqrt();
        let bb = 1.0 / fan_in.sqrt();
        let n = out_ch * in_ch * kernel * kernel;
        let w: Vec<T> = (0..n).map(|_| T::from_f64(rng.gen_range(-wb..wb))).collect();
        let b: Vec<T> = (0..out_ch).map(|_| T::from_f64(rng.gen_range(-bb..bb))).collect();
        Conv2d {
            weight: Parameter::new(
                Tensor::from_vec(&[out_ch, in_ch, kernel, kernel], w).expect("weight shape"),
                LayerTag::new(TagKind::ConvWeight, idx),
            ),
            bias: Parameter::new(
                Tensor::from_vec(&[out_ch], b).expect("bias shape"),
                LayerTag::new(TagKind::ConvBias, idx),
            ),
            input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = ops::conv2d(x, &self.weight.value, &self.bias.value)?;
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| missing_cache("conv2d"))?;
        let g = ops::conv2d_backward(&x, &self.weight.value, grad)?;
        self.weight.grad.add_assign(&g.weight)?;
        self.bias.grad.add_assign(&g.bias)?;
        Ok(g.input)
    }

    fn collect_params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a, T>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }

    fn conv_count(&self) -> usize {
        1
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Parameter<T>,
    pub running_var: Parameter<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize, counter: &mut LayerCounter) -> Self {
        let idx = counter.next();
        let p = |v: f64, kind| {
            Parameter::new(
                Tensor::full(&[channels], T::from_f64(v)),
                LayerTag::new(kind, idx),
            )
        };
        BatchNorm2d {
            gamma: p(1.0, TagKind::BnGamma),
            beta: p(0.0, TagKind::BnBeta),
            running_mean: p(0.0, TagKind::BnRunningMean),
            running_var: p(1.0, TagKind::BnRunningVar),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let eps = T::from_f64(self.eps);
        match mode {
            Mode::Eval => ops::batchnorm2d_eval(
                x,
                &self.gamma.value,
                &self.beta.value,
                &self.running_mean.value,
                &self.running_var.value,
                eps,
            ),
            Mode::Train => {
                let out = ops::batchnorm2d_train(x, &self.gamma.value, &self.beta.value, eps)?;
                let m = T::from_f64(self.momentum);
                let keep = T::one() - m;
                for (r, &b) in self.running_mean.value.data_mut().iter_mut().zip(&out.batch_mean) {
                    *r = keep * *r + m * b;
                }
                for (r, &b) in self.running_var.value.data_mut().iter_mut().zip(&out.batch_var) {
                    *r = keep * *r + m * b;
                }
                self.cache = Some(out.cache);
                Ok(out.output)
            }
        }
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("batchnorm2d"))?;
        let g = ops::batchnorm2d_backward(&cache, &self.gamma.value, grad)?;
        self.gamma.grad.add_assign(&g.gamma)?;
        self.beta.grad.add_assign(&g.beta)?;
        Ok(g.input)
    }

    fn collect_params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
        out.push((join(prefix, "running_mean"), &self.running_mean));
        out.push((join(prefix, "running_var"), &self.running_var));
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a, T>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }

    fn conv_count(&self) -> usize {
        0
    }
}

/// Convolution → batch norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    output: Option<Tensor<T>>,
}

impl<T: Scalar> ConvBnRelu<T> {
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        counter: &mut LayerCounter,
        rng: &mut R,
    ) -> Self {
        let conv = Conv2d::new(in_ch, out_ch, kernel, counter, rng);
        let bn = BatchNorm2d::new(out_ch, counter);
        ConvBnRelu {
            conv,
            bn,
            output: None,
        }
    }
}

impl<T: Scalar> Module<T> for ConvBnRelu<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.conv.forward(x, mode)?;
        let y = self.bn.forward(&y, mode)?;
        let y = ops::relu(&y);
        self.output = (mode == Mode::Train).then(|| y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.output.take().ok_or_else(|| missing_cache("relu"))?;
        let g = ops::relu_backward(&out, grad)?;
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }

    fn collect_params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        self.conv.collect_params(&join(prefix, "conv"), out);
        self.bn.collect_params(&join(prefix, "bn"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a, T>) {
        self.conv.collect_params_mut(&join(prefix, "conv"), out);
        self.bn.collect_params_mut(&join(prefix, "bn"), out);
    }

    fn conv_count(&self) -> usize {
        1
    }
}

/// Two 3×3 conv-BN-ReLU units with an identity shortcut around them.
#[derive(Clone, Debug)]
pub struct ResidualBlock<T> {
    pub first: ConvBnRelu<T>,
    pub second: ConvBnRelu<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new<R: Rng>(channels: usize, counter: &mut LayerCounter, rng: &mut R) -> Self {
        ResidualBlock {
            first: ConvBnRelu::new(channels, channels, 3, counter, rng),
            second: ConvBnRelu::new(channels, channels, 3, counter, rng),
        }
    }
}

impl<T: Scalar> Module<T> for ResidualBlock<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.first.forward(x, mode)?;
        let mut y = self.second.forward(&y, mode)?;
        y.add_assign(x)?;
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.second.backward(grad)?;
        let mut g = self.first.backward(&g)?;
        g.add_assign(grad)?;
        Ok(g)
    }

    fn collect_params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        self.first.collect_params(&join(prefix, "unit1"), out);
        self.second.collect_params(&join(prefix, "unit2"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a, T>) {
        self.first.collect_params_mut(&join(prefix, "unit1"), out);
        self.second.collect_params_mut(&join(prefix, "unit2"), out);
    }

    fn conv_count(&self) -> usize {
        2
    }
}
