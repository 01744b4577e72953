//! Measurements behind the acceptance report. Each returns whether the
//! criterion holds and a one-line account of what was measured.

use std::time::Instant;

use fedsct::checkpoint::Checkpoint;
use fedsct::config::ExperimentConfig;
use fedsct::federation::{
    aggregate_fedavg, aggregate_fedavgm, aggregate_fedyogi, broadcast, initial_server, prepare_data, run_experiment,
    BaseStrategy, ClientUpdate, LocalObjective, ServerState, StrategyConfig,
};
use fedsct::logs::{rounds_csv, summary_json};
use fedsct::metrics::{mae, psnr, ssim, MaskPolicy, MetricConfig};
use fedsct::model::{NamedParameterSet, NamedTensor, UNet, UNetConfig};
use fedsct::nn::{LayerTag, Mode, TagKind};
use fedsct::phantom::{generate_phantom, CentreSpec};
use fedsct::preprocess::{
    bias_correct, crop_resize_pad, orient_standardize, preprocess_pair, resample_to_isotropic, PreprocessConfig,
};
use fedsct::slicing::{median_vote, overlap_average, tile_origins, PatchPrediction};
use fedsct::tensor::{Scalar, Tensor};
use fedsct::volume::{Modality, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad, oracles, runs};

pub const METRIC_TOL: f64 = 1e-10;
pub const YOGI_TOL: f64 = 1e-12;
pub const GRAD_BUDGET_S: f64 = 120.0;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

pub fn bits<T: Scalar>(set: &NamedParameterSet<T>) -> Vec<u64> {
    set.entries()
        .iter()
        .flat_map(|e| e.value.data().iter().map(|v| v.as_f64().to_bits()))
        .collect()
}

fn values(set: &NamedParameterSet<f64>) -> Vec<Vec<f64>> {
    set.entries().iter().map(|e| e.value.data().to_vec()).collect()
}

pub fn gradients() -> Outcome {
    let start = Instant::now();
    let cases = grad::all_cases();
    let secs = start.elapsed().as_secs_f64();
    let failing: Vec<String> = cases
        .iter()
        .filter(|(_, e, tol)| !(e < tol))
        .map(|(n, e, _)| format!("{n} {e:.1e}"))
        .collect();
    let worst = |net: bool| {
        cases
            .iter()
            .filter(|(_, _, tol)| (*tol == grad::NET_TOL) == net)
            .map(|(_, e, _)| *e)
            .fold(0.0, f64::max)
    };
    Outcome::new(
        failing.is_empty() && secs < GRAD_BUDGET_S,
        format!(
            "worst layer {:.1e} (< {:.0e}), worst network {:.1e} (< {:.0e}), {secs:.1} s (< {GRAD_BUDGET_S} s){}",
            worst(false),
            grad::LAYER_TOL,
            worst(true),
            grad::NET_TOL,
            if failing.is_empty() { String::new() } else { format!("; failing: {}", failing.join(", ")) }
        ),
    )
}

pub fn aggregation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut fedavg_ok = true;
    let mut avgm_ok = true;
    for k in [2, 4, 8] {
        for _ in 0..25 {
            let mut updates = oracles::random_updates(k, &mut rng);
            updates.reverse();
            let got = aggregate_fedavg(&updates).unwrap();
            fedavg_ok &= values(&got) == oracles::brute_fedavg(&updates);

            let global = oracles::random_set(&mut rng);
            let strategy = StrategyConfig {
                base: BaseStrategy::FedAvgM { beta: 0.0, eta_s: 1.0 },
                ..StrategyConfig::fedavg()
            };
            let mut state = ServerState::new(global, &strategy);
            aggregate_fedavgm(&updates, &mut state, 0.0, 1.0).unwrap();
            avgm_ok &= bits(&state.global) == bits(&got);
        }
    }
    let (eta, b1, b2, tau) = (0.03, 0.6, 0.6, 0.01);
    let mut yogi_err = 0.0f64;
    for _ in 0..50 {
        let w0: f64 = rng.gen_range(-1.0..1.0);
        let avg1: f64 = rng.gen_range(-1.0..1.0);
        let avg2: f64 = rng.gen_range(-1.0..1.0);
        let scalar = |v: f64| {
            NamedParameterSet::new(vec![NamedTensor {
                name: "w".into(),
                tag: LayerTag::new(TagKind::ConvWeight, 0),
                value: Tensor::from_vec(&[1], vec![v]).unwrap(),
            }])
            .unwrap()
        };
        let strategy = StrategyConfig {
            base: BaseStrategy::FedYogi { eta, eta_l: 1e-4, beta1: b1, beta2: b2, tau },
            ..StrategyConfig::fedavg()
        };
        let mut state = ServerState::new(scalar(w0), &strategy);
        let (w1, w2) = oracles::yogi_two_rounds(w0, avg1, avg2, eta, b1, b2, tau);
        for (avg, want) in [(avg1, w1), (avg2, w2)] {
            let u = ClientUpdate { client_id: 0, params: scalar(avg), n_k: 3 };
            aggregate_fedyogi(&[u], &mut state, eta, b1, b2, tau).unwrap();
            yogi_err = yogi_err.max((state.global.entries()[0].value.data()[0] - want).abs());
        }
    }
    Outcome::new(
        fedavg_ok && avgm_ok && yogi_err < YOGI_TOL,
        format!(
            "FedAvg == brute force for K in {{2,4,8}}: {fedavg_ok}; FedAvgM(0, 1) bit-identical: {avgm_ok}; \
             FedYogi two-round error {yogi_err:.1e} (< {YOGI_TOL:.0e})"
        ),
    )
}

pub fn prox_reduction() -> Outcome {
    let cfg = runs::small_config(3).with_strategy(StrategyConfig::fedavg().with_prox(0.0));
    let data = prepare_data(&cfg).unwrap();
    let harness = run_experiment(&cfg, &data).unwrap().server.global;
    let plain = runs::manual_run(&cfg, &data, LocalObjective::Plain);
    let prox0 = runs::manual_run(&cfg, &data, LocalObjective::Proximal { mu: 0.0 });
    let same = bits(&plain) == bits(&prox0);
    let harness_same = bits(&harness) == bits(&plain);
    Outcome::new(
        same && harness_same,
        format!(
            "3 rounds, {} parameters: proximal(mu=0) vs plain bit-identical: {same}; \
             harness vs plain bit-identical: {harness_same}",
            plain.numel()
        ),
    )
}

pub fn fedbn_filtering() -> Outcome {
    let cfg = runs::small_config(1).with_strategy(StrategyConfig::fedavg().with_fedbn());
    let server = initial_server(&cfg).unwrap();
    let bn_total = server.global.entries().iter().filter(|e| e.tag.is_batch_norm()).count();
    let payload_bn = broadcast(&server, true).entries().iter().filter(|e| e.tag.is_batch_norm()).count();
    let data = prepare_data(&cfg).unwrap();
    let out = run_experiment(&cfg, &data).unwrap();
    let after = &out.server.global;
    let server_bn = after.entries().iter().filter(|e| e.tag.is_batch_norm()).count();
    let moved = after
        .entries()
        .iter()
        .zip(server.global.entries())
        .filter(|(a, b)| a.tag.is_batch_norm() && a.value != b.value)
        .count();
    Outcome::new(
        payload_bn == 0 && server_bn == bn_total && bn_total > 0 && moved > 0,
        format!(
            "payload BN entries {payload_bn}; server BN entries {server_bn} of {bn_total}, \
             {moved} updated by aggregation"
        ),
    )
}

fn random_volume(rng: &mut ChaCha8Rng, dims: [usize; 3], lo: f32, hi: f32, modality: Modality) -> Volume {
    let n = dims.iter().product();
    Volume::from_data(dims, [1.0; 3], modality, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn metrics_voting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = MetricConfig {
        window: 3,
        ..MetricConfig::default()
    };
    let mut worst = 0.0f64;
    let mut vote_ok = true;
    for _ in 0..20 {
        let ct = random_volume(&mut rng, [8; 3], -1000.0, 3000.0, Modality::Ct);
        let sct = random_volume(&mut rng, [8; 3], -1000.0, 3000.0, Modality::Ct);
        let mut mask = random_volume(&mut rng, [8; 3], 0.0, 1.0, Modality::Mask);
        mask.data.iter_mut().for_each(|v| *v = if *v > 0.3 { 1.0 } else { 0.0 });
        let m = mae(&ct, &sct, Some(&mask), MaskPolicy::BodyMask).unwrap();
        let p = psnr(&ct, &sct, Some(&mask), &cfg).unwrap();
        let s = ssim(&ct, &sct, &cfg).unwrap();
        worst = worst
            .max((m - oracles::naive_mae(&ct, &sct, &mask)).abs())
            .max((p - oracles::naive_psnr(&ct, &sct, &mask, cfg.max_ct)).abs())
            .max((s - oracles::naive_ssim(&ct, &sct, cfg.window, cfg.k1, cfg.k2, cfg.dynamic_range)).abs());

        let third = random_volume(&mut rng, [8; 3], -1000.0, 3000.0, Modality::Ct);
        let voted = median_vote(&ct, &sct, &third).unwrap();
        for i in 0..voted.data.len() {
            let want = oracles::naive_median3(ct.data[i], sct.data[i], third.data[i]);
            worst = worst.max((voted.data[i] as f64 - want as f64).abs());
        }

        let size = 4;
        let patches: Vec<PatchPrediction> = tile_origins(8, size)
            .into_iter()
            .flat_map(|r| tile_origins(8, size).into_iter().map(move |c| (r, c)))
            .map(|origin| PatchPrediction {
                origin,
                size,
                data: (0..size * size).map(|_| rng.gen_range(0.0..1.0)).collect(),
            })
            .collect();
        let got = overlap_average(8, 8, &patches).unwrap();
        for (g, w) in got.iter().zip(oracles::naive_overlap(8, 8, &patches)) {
            // The library rounds its f64 mean to f32 once.
            worst = worst.max((*g as f64 - (w as f32) as f64).abs());
        }
        vote_ok &= voted.dims == [8; 3];
    }
    let x = random_volume(&mut rng, [8; 3], -1000.0, 3000.0, Modality::Ct);
    let self_ssim = ssim(&x, &x, &cfg).unwrap();
    let zeros = Volume::filled([8; 3], [1.0; 3], Modality::Ct, 0.0);
    let tens = Volume::filled([8; 3], [1.0; 3], Modality::Ct, 10.0);
    let p40 = psnr(
        &zeros,
        &tens,
        None,
        &MetricConfig {
            max_ct: 1000.0,
            mask_policy: MaskPolicy::FullVolume,
            ..MetricConfig::default()
        },
    )
    .unwrap();
    Outcome::new(
        worst < METRIC_TOL && vote_ok && self_ssim == 1.0 && p40 == 40.0,
        format!(
            "worst deviation from naive oracles {worst:.1e} (< {METRIC_TOL:.0e}); SSIM(x, x) = {self_ssim}; \
             PSNR(MAX 1000, MSE 100) = {p40} dB"
        ),
    )
}

fn presets(fov: f64) -> Vec<CentreSpec> {
    ["A", "B", "C", "D", "E"]
        .iter()
        .map(|id| CentreSpec {
            fov_mm: fov,
            ..CentreSpec::preset(id).unwrap()
        })
        .collect()
}

fn masked_mae(a: &Volume, b: &Volume, mask: &Volume) -> f64 {
    oracles::naive_mae(a, b, mask)
}

pub fn preprocessing() -> Outcome {
    // Target extents below, equal to and above the 32 mm phantoms.
    let mut shapes_ok = true;
    for t in [16, 32, 48] {
        let cfg = PreprocessConfig::for_target(t);
        for (i, spec) in presets(32.0).iter().enumerate() {
            let p = generate_phantom(i as u64, spec).unwrap();
            let pre = preprocess_pair(&p.mri, &p.ct, &p.mask, &cfg).unwrap();
            shapes_ok &= [&pre.mri, &pre.ct, &pre.mask, &pre.bias_field].iter().all(|v| v.dims == [t; 3]);
        }
    }

    let mut pads_ok = true;
    let mut padded = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = PreprocessConfig::for_target(32);
    for (i, spec) in presets(24.0).iter().enumerate() {
        let p = generate_phantom(10 + i as u64, spec).unwrap();
        let inner = resample_to_isotropic(&orient_standardize(&p.ct).unwrap(), cfg.target_voxel).unwrap().dims;
        let before: [usize; 3] = std::array::from_fn(|a| (32 - inner[a]) / 2);
        let inside = |i: usize, j: usize, k: usize| {
            let ijk = [i, j, k];
            (0..3).all(|a| ijk[a] >= before[a] && ijk[a] < before[a] + inner[a])
        };
        let pre = preprocess_pair(&p.mri, &p.ct, &p.mask, &cfg).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                for k in 0..32 {
                    if !inside(i, j, k) {
                        padded += 1;
                        pads_ok &= pre.ct.get(i, j, k) == -1000.0 && pre.mri.get(i, j, k) == 0.0;
                    }
                }
            }
        }
        // Direct check with values that can never equal a pad constant.
        for (modality, lo, hi, pad) in [(Modality::Ct, -500.0, 500.0, -1000.0), (Modality::Mri, 0.1, 1.0, 0.0)] {
            let dims = [10 + i, 13, 16 - i];
            let v = random_volume(&mut rng, dims, lo, hi, modality);
            let out = crop_resize_pad(&v, &PreprocessConfig::for_target(16), modality).unwrap();
            let b: [usize; 3] = std::array::from_fn(|a| (16 - dims[a]) / 2);
            for i in 0..16 {
                for j in 0..16 {
                    for k in 0..16 {
                        let src = [i, j, k];
                        let inner = (0..3).all(|a| src[a] >= b[a] && src[a] < b[a] + dims[a]);
                        let want = if inner { v.get(i - b[0], j - b[1], k - b[2]) } else { pad };
                        pads_ok &= out.get(i, j, k) == want;
                    }
                }
            }
        }
    }

    let mut improved = 0;
    let mut worst_ratio = 0.0f64;
    let bias_cfg = PreprocessConfig::default();
    let specs = presets(32.0);
    for seed in 0..20u64 {
        let spec = &specs[seed as usize % specs.len()];
        let p = generate_phantom(100 + seed, spec).unwrap();
        let (corrected, _) = bias_correct(&p.mri, &p.mask, &bias_cfg).unwrap();
        let before = masked_mae(&p.mri, &p.clean_mri, &p.mask);
        let after = masked_mae(&corrected, &p.clean_mri, &p.mask);
        if after < before {
            improved += 1;
        }
        worst_ratio = worst_ratio.max(after / before);
    }
    Outcome::new(
        shapes_ok && pads_ok && padded > 0 && improved == 20,
        format!(
            "target³ shapes: {shapes_ok}; pad constants over {padded} pipeline voxels plus direct checks: {pads_ok}; \
             bias correction reduced masked MAE on {improved}/20 phantoms (worst after/before {worst_ratio:.3})"
        ),
    )
}

pub fn structure() -> Outcome {
    let mut net = UNet::<f32>::new(UNetConfig::paper(), 0).unwrap();
    let census = net.conv_census().len();
    let x = Tensor::<f32>::zeros(&[1, 1, 256, 256]);
    let y = net.forward(&x, Mode::Eval).unwrap();
    Outcome::new(
        census == 34 && net.conv_count() == 34 && y.shape() == [1, 1, 256, 256],
        format!("census {census} convolutions; 256x256 input gives output {:?}", y.shape()),
    )
}

/// Logs and checkpoint bytes of one run.
pub fn run_artefacts(cfg: &ExperimentConfig) -> (String, String, Vec<u8>) {
    let data = prepare_data(cfg).unwrap();
    let out = run_experiment(cfg, &data).unwrap();
    let ckpt = Checkpoint {
        config: cfg.clone(),
        params: out.server.global.clone(),
        rng_cursor: cfg.federation.rounds as u64,
        round_index: out.server.round_index as u64,
    };
    (rounds_csv(&out.records).unwrap(), summary_json(&out), ckpt.to_bytes())
}

pub fn determinism() -> Outcome {
    let text = runs::small_config(2).to_toml_string();
    let a = run_artefacts(&ExperimentConfig::from_toml_str(&text).unwrap());
    let b = run_artefacts(&ExperimentConfig::from_toml_str(&text).unwrap());
    let yogi = runs::small_config(2).with_strategy(StrategyConfig {
        base: BaseStrategy::fedyogi_default(),
        ..StrategyConfig::fedavg().with_fedbn()
    });
    let c = run_artefacts(&yogi);
    let d = run_artefacts(&yogi);
    let same = a == b && c == d;
    Outcome::new(
        same && a.2 != c.2,
        format!(
            "two configurations run twice each: rounds.csv, summary.json and checkpoint bytes identical: {same} \
             ({} checkpoint bytes)",
            a.2.len()
        ),
    )
}
