//! Central finite differences against the hand-written backward passes, in f64.
//! Each case returns the worst relative error over its seeds.

use fedsct::model::{UNet, UNetConfig};
use fedsct::nn::layers::ParamMuts;
use fedsct::nn::{l1_loss, ops, BatchNorm2d, Conv2d, ConvBnRelu, LayerCounter, Mode, Module, ResidualBlock};
use fedsct::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small enough that no ReLU or pooling kink falls inside ±H on these seeds.
pub const H: f64 = 1e-7;
pub const LAYER_TOL: f64 = 1e-6;
pub const NET_TOL: f64 = 1e-4;
pub const SEEDS: u64 = 20;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// `‖a − n‖ / max(‖a‖ + ‖n‖, 1)`: relative for large gradients, absolute
/// for vanishing ones such as a conv bias feeding batch norm.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / (norm(analytic) + norm(numeric)).max(1.0)
}

/// Anything with a train-mode forward/backward and parameters.
trait Differentiable {
    fn fwd(&mut self, x: &Tensor<f64>) -> Tensor<f64>;
    fn bwd(&mut self, g: &Tensor<f64>) -> Tensor<f64>;
    fn params(&mut self) -> ParamMuts<'_, f64>;
}

struct AsModule<M>(M);

impl<M: Module<f64>> Differentiable for AsModule<M> {
    fn fwd(&mut self, x: &Tensor<f64>) -> Tensor<f64> {
        self.0.forward(x, Mode::Train).unwrap()
    }
    fn bwd(&mut self, g: &Tensor<f64>) -> Tensor<f64> {
        self.0.backward(g).unwrap()
    }
    fn params(&mut self) -> ParamMuts<'_, f64> {
        let mut out = Vec::new();
        self.0.collect_params_mut("", &mut out);
        out
    }
}

impl Differentiable for UNet<f64> {
    fn fwd(&mut self, x: &Tensor<f64>) -> Tensor<f64> {
        self.forward(x, Mode::Train).unwrap()
    }
    fn bwd(&mut self, g: &Tensor<f64>) -> Tensor<f64> {
        self.backward(g).unwrap()
    }
    fn params(&mut self) -> ParamMuts<'_, f64> {
        self.params_mut()
    }
}

/// Worst relative error over the input and every trainable parameter tensor.
fn check<D: Differentiable>(net: &mut D, x: &Tensor<f64>, rng: &mut ChaCha8Rng) -> f64 {
    let y = net.fwd(x);
    let r = random(y.shape(), rng);
    for (_, p) in net.params() {
        p.zero_grad();
    }
    let gx = net.bwd(&r);
    let mut worst = 0.0f64;

    let mut xp = x.clone();
    let mut num = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + H;
        let up = dot(&net.fwd(&xp), &r);
        xp.data_mut()[i] = orig - H;
        let down = dot(&net.fwd(&xp), &r);
        xp.data_mut()[i] = orig;
        num.push((up - down) / (2.0 * H));
    }
    worst = worst.max(rel_err(gx.data(), &num));

    let count = net.params().len();
    for k in 0..count {
        let (analytic, len, trainable) = {
            let ps = net.params();
            let p = &ps[k].1;
            (p.grad.data().to_vec(), p.value.len(), p.tag.is_trainable())
        };
        if !trainable {
            continue;
        }
        let mut num = Vec::with_capacity(len);
        for i in 0..len {
            let orig = net.params()[k].1.value.data()[i];
            net.params()[k].1.value.data_mut()[i] = orig + H;
            let up = dot(&net.fwd(x), &r);
            net.params()[k].1.value.data_mut()[i] = orig - H;
            let down = dot(&net.fwd(x), &r);
            net.params()[k].1.value.data_mut()[i] = orig;
            num.push((up - down) / (2.0 * H));
        }
        let e = rel_err(&analytic, &num);
        assert!(e.is_finite());
        worst = worst.max(e);
    }
    worst
}

fn over_seeds(mut case: impl FnMut(&mut ChaCha8Rng) -> f64) -> f64 {
    (0..SEEDS)
        .map(|seed| case(&mut ChaCha8Rng::seed_from_u64(seed)))
        .fold(0.0, f64::max)
}

pub fn conv2d(k: usize) -> f64 {
    over_seeds(|rng| {
        let mut m = AsModule(Conv2d::<f64>::new(2, 3, k, &mut LayerCounter::default(), rng));
        let x = random(&[2, 2, 9, 8], rng);
        check(&mut m, &x, rng)
    })
}

pub fn batchnorm() -> f64 {
    over_seeds(|rng| {
        let mut bn = BatchNorm2d::<f64>::new(3, &mut LayerCounter::default());
        for v in bn.gamma.value.data_mut() {
            *v = rng.gen_range(0.5..1.5);
        }
        for v in bn.beta.value.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let x = random(&[3, 3, 4, 4], rng);
        check(&mut AsModule(bn), &x, rng)
    })
}

pub fn conv_bn_relu() -> f64 {
    over_seeds(|rng| {
        let mut m = AsModule(ConvBnRelu::<f64>::new(2, 3, 3, &mut LayerCounter::default(), rng));
        let x = random(&[2, 2, 5, 5], rng);
        check(&mut m, &x, rng)
    })
}

pub fn residual_block() -> f64 {
    over_seeds(|rng| {
        let mut m = AsModule(ResidualBlock::<f64>::new(2, &mut LayerCounter::default(), rng));
        let x = random(&[2, 2, 5, 5], rng);
        check(&mut m, &x, rng)
    })
}

/// Stateless ops through a closure-based check on the input gradient.
fn check_op(
    x: &Tensor<f64>,
    f: impl Fn(&Tensor<f64>) -> Tensor<f64>,
    df: impl Fn(&Tensor<f64>, &Tensor<f64>) -> Tensor<f64>,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let y = f(x);
    let r = random(y.shape(), rng);
    let g = df(x, &r);
    let mut xp = x.clone();
    let num: Vec<f64> = (0..x.len())
        .map(|i| {
            let orig = xp.data()[i];
            xp.data_mut()[i] = orig + H;
            let up = dot(&f(&xp), &r);
            xp.data_mut()[i] = orig - H;
            let down = dot(&f(&xp), &r);
            xp.data_mut()[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect();
    rel_err(g.data(), &num)
}

pub fn maxpool() -> f64 {
    over_seeds(|rng| {
        let x = random(&[2, 2, 6, 4], rng);
        check_op(
            &x,
            |x| ops::maxpool2d(x).unwrap().0,
            |x, g| {
                let (_, idx) = ops::maxpool2d(x).unwrap();
                ops::maxpool2d_backward(&idx, g, x.shape()).unwrap()
            },
            rng,
        )
    })
}

pub fn upsample() -> f64 {
    over_seeds(|rng| {
        let x = random(&[2, 2, 3, 4], rng);
        check_op(
            &x,
            |x| ops::upsample2d_nearest(x).unwrap(),
            |_, g| ops::upsample2d_nearest_backward(g).unwrap(),
            rng,
        )
    })
}

pub fn relu() -> f64 {
    over_seeds(|rng| {
        let x = random(&[2, 3, 4, 4], rng);
        check_op(&x, ops::relu, |x, g| ops::relu_backward(&ops::relu(x), g).unwrap(), rng)
    })
}

pub fn l1() -> f64 {
    over_seeds(|rng| {
        let p = random(&[2, 1, 4, 4], rng);
        let t = random(&[2, 1, 4, 4], rng);
        let (_, g) = l1_loss(&p, &t).unwrap();
        let mut pp = p.clone();
        let num: Vec<f64> = (0..p.len())
            .map(|i| {
                let orig = pp.data()[i];
                pp.data_mut()[i] = orig + H;
                let up = l1_loss(&pp, &t).unwrap().0;
                pp.data_mut()[i] = orig - H;
                let down = l1_loss(&pp, &t).unwrap().0;
                pp.data_mut()[i] = orig;
                (up - down) / (2.0 * H)
            })
            .collect();
        rel_err(g.data(), &num)
    })
}

fn micro() -> UNetConfig {
    UNetConfig {
        input_size: 8,
        depth: 1,
        base_channels: 2,
        stem_kernel: 3,
        blocks_per_level: 1,
        bottleneck_blocks: 1,
    }
}

pub fn micro_unet() -> f64 {
    over_seeds(|rng| {
        let mut net = UNet::<f64>::new(micro(), rng.gen()).unwrap();
        let x = random(&[2, 1, 8, 8], rng);
        check(&mut net, &x, rng)
    })
}

/// Two levels and a 7×7 stem on a 12×12 input, one seed.
pub fn two_level_unet() -> f64 {
    let cfg = UNetConfig {
        input_size: 12,
        depth: 2,
        stem_kernel: 7,
        ..micro()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut net = UNet::<f64>::new(cfg, 5).unwrap();
    let x = random(&[2, 1, 12, 12], &mut rng);
    check(&mut net, &x, &mut rng)
}

/// Every case with its tolerance.
pub fn all_cases() -> Vec<(&'static str, f64, f64)> {
    vec![
        ("conv 1x1", conv2d(1), LAYER_TOL),
        ("conv 3x3", conv2d(3), LAYER_TOL),
        ("conv 7x7", conv2d(7), LAYER_TOL),
        ("batchnorm", batchnorm(), LAYER_TOL),
        ("conv-bn-relu", conv_bn_relu(), LAYER_TOL),
        ("residual block", residual_block(), LAYER_TOL),
        ("maxpool", maxpool(), LAYER_TOL),
        ("upsample", upsample(), LAYER_TOL),
        ("relu", relu(), LAYER_TOL),
        ("l1 loss", l1(), LAYER_TOL),
        ("micro unet", micro_unet(), NET_TOL),
        ("two-level unet", two_level_unet(), NET_TOL),
    ]
}
