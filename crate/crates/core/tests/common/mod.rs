#![allow(dead_code)]

use std::collections::HashSet;

use advseg::dataset::LabeledSample;
use advseg::model::{
    build_model, images_to_tensor, Head, Heads, Model, ModelConfig, Partition, StageConfig, SupervisorConfig,
};
use advseg::nn::Pass;
use advseg::scenegen::{generate_samples, GenerationPlan};
use advseg::schema::{DomainTag, IGNORE_INDEX, NUM_CLASSES};
use advseg::training::{
    accumulate_gradients, alternating_batches, classification_loss, compute_losses, segmentation_loss, train_step,
    AblationMode, Batch, LossBundle, Routing, TrainConfig, TrainState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small but structurally complete model.
pub fn toy_config(side: usize) -> ModelConfig {
    let stage = |channels| StageConfig { channels, stride: 2, atrous_rate: 1 };
    ModelConfig {
        input_resolution: [side, side],
        backbone: vec![stage(4), stage(8), stage(8), stage(8)],
        low_level_stage: 1,
        low_level_channels: 4,
        aspp_rates: vec![1, 2],
        aspp_channels: 8,
        decoder_channels: 8,
        supervisor: SupervisorConfig { conv_channels: 4, fc_widths: vec![16, 8], ..SupervisorConfig::default() },
        ..ModelConfig::default()
    }
}

pub fn toy_train_config(mode: AblationMode, seed: u64) -> TrainConfig {
    TrainConfig { mode, seed, batch_size: 2, iterations: 10, model: toy_config(32), ..TrainConfig::default() }
}

pub fn real_set(count: usize, seed: u64) -> Vec<LabeledSample> {
    generate_samples(&GenerationPlan::standard(count, seed, [32, 32])).unwrap()
}

pub fn synth_set(count: usize, seed: u64) -> Vec<LabeledSample> {
    generate_samples(&GenerationPlan::adverse(count, seed, [32, 32])).unwrap()
}

pub fn batch(samples: &[LabeledSample]) -> Batch<'_> {
    Batch { domain: samples[0].domain, samples: samples.iter().collect() }
}

/// Every scalar gradient of one partition.
pub fn grads(model: &Model<f64>, p: Partition) -> Vec<f64> {
    let mut out = Vec::new();
    model.visit_partition(p, &mut |_, param| out.extend_from_slice(&param.grad));
    out
}

pub fn set_param(model: &mut Model<f64>, p: Partition, path: &str, index: usize, value: f64) {
    model.visit_partition_mut(p, &mut |name, param| {
        if name == path {
            param.value[index] = value;
        }
    });
}

pub fn get_param(model: &Model<f64>, p: Partition, path: &str, index: usize) -> f64 {
    let mut v = f64::NAN;
    model.visit_partition(p, &mut |name, param| {
        if name == path {
            v = param.value[index];
        }
    });
    v
}

/// `n` (path, index) pairs drawn uniformly over the partition's scalars.
pub fn sample_coordinates(model: &Model<f64>, p: Partition, n: usize, rng: &mut ChaCha8Rng) -> Vec<(String, usize)> {
    let mut sizes = Vec::new();
    model.visit_partition(p, &mut |name, param| sizes.push((name.to_string(), param.len())));
    let total: usize = sizes.iter().map(|s| s.1).sum();
    (0..n)
        .map(|_| {
            let mut k = rng.random_range(0..total);
            for (name, len) in &sizes {
                if k < *len {
                    return (name.clone(), k);
                }
                k -= len;
            }
            unreachable!()
        })
        .collect()
}

#[derive(Debug)]
pub struct GradCheck {
    pub partition: Partition,
    pub path: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

/// Compares backprop gradients of `l_total` with central differences for
/// `per_partition` random parameters of every partition. Batch statistics
/// are used throughout and running statistics stay untouched.
pub fn finite_difference_check(
    model_seed: u64,
    data_seed: u64,
    per_partition: usize,
    alpha: f64,
    beta: f64,
) -> Vec<GradCheck> {
    let mut model: Model<f64> = build_model(&toy_config(32), model_seed).unwrap();
    let samples = synth_set(3, data_seed);
    let b = batch(&samples);
    let routing = Routing::for_step(AblationMode::AlternatingWeatherTimeAware, b.domain);
    assert!(!routing.freeze_dcnn);
    accumulate_gradients(&mut model, &b, routing, alpha, beta, Pass::Probe).unwrap();
    let analytic = model.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(model_seed ^ 0xfd);
    let mut out = Vec::new();
    for p in Partition::ALL {
        for (path, index) in sample_coordinates(&model, p, per_partition, &mut rng) {
            let mut g = f64::NAN;
            analytic.visit_partition(p, &mut |name, param| {
                if name == path {
                    g = param.grad[index];
                }
            });
            let w = get_param(&model, p, &path, index);
            let h = 1e-6 * w.abs().max(1.0);
            let mut loss_at = |v: f64| {
                set_param(&mut model, p, &path, index, v);
                compute_losses(&mut model, &b, routing.heads, alpha, beta, Pass::Probe).unwrap().l_total
            };
            let numeric = (loss_at(w + h) - loss_at(w - h)) / (2.0 * h);
            set_param(&mut model, p, &path, index, w);
            out.push(GradCheck { partition: p, path, index, analytic: g, numeric });
        }
    }
    out
}

/// IoU per class from explicit pixel-index sets.
pub fn brute_force_iou(pred: &[u8], gt: &[u8]) -> Vec<Option<f64>> {
    (0..NUM_CLASSES as u8)
        .map(|c| {
            let valid = |i: &usize| gt[*i] != IGNORE_INDEX;
            let a: HashSet<usize> = (0..gt.len()).filter(valid).filter(|&i| gt[i] == c).collect();
            let b: HashSet<usize> = (0..gt.len()).filter(valid).filter(|&i| pred[i] == c).collect();
            let union = a.union(&b).count();
            (union > 0).then(|| a.intersection(&b).count() as f64 / union as f64)
        })
        .collect()
}

pub fn brute_force_miou(pred: &[u8], gt: &[u8]) -> Option<f64> {
    let defined: Vec<f64> = brute_force_iou(pred, gt).into_iter().flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

fn nonzero(v: &[f64]) -> bool {
    v.iter().any(|&g| g != 0.0)
}

fn all_zero(v: &[f64]) -> bool {
    v.iter().all(|&g| g == 0.0)
}

/// Backpropagates the segmentation loss alone and checks that it reaches the
/// DCNN, ASPP and decoder but neither head. A second, numerical route checks
/// that perturbing the heads leaves `l_seg` bit-identical.
pub fn check_segmentation_routing(model_seed: u64, data_seed: u64) -> Result<(), String> {
    let mut model: Model<f64> = build_model(&toy_config(32), model_seed).unwrap();
    let samples = synth_set(2, data_seed);
    let b = batch(&samples);
    model.zero_grad();
    let out = model.forward(&images_to_tensor(&b.samples), Heads::ALL, Pass::Probe).unwrap();
    let masks: Vec<&[u8]> = b.samples.iter().map(|s| s.mask.data.as_slice()).collect();
    let (_, d) = segmentation_loss(&out.seg_logits, &masks).unwrap();
    let g = model.backward_segmentation(&d);
    model.backward_dcnn(&g);
    for p in [Partition::WasHead, Partition::TasHead] {
        if !all_zero(&grads(&model, p)) {
            return Err(format!("l_seg reached {p}"));
        }
    }
    for p in [Partition::Dcnn, Partition::EncoderRest, Partition::Decoder] {
        if !nonzero(&grads(&model, p)) {
            return Err(format!("l_seg did not reach {p}"));
        }
    }
    let before = compute_losses(&mut model, &b, Heads::NONE, 1.0, 1.0, Pass::Probe).unwrap().l_seg;
    for p in [Partition::WasHead, Partition::TasHead] {
        model.visit_partition_mut(p, &mut |_, q| q.value.iter_mut().for_each(|v| *v += 0.5));
    }
    let after = compute_losses(&mut model, &b, Heads::ALL, 1.0, 1.0, Pass::Probe).unwrap().l_seg;
    if before != after {
        return Err(format!("head weights changed l_seg: {before} vs {after}"));
    }
    Ok(())
}

/// Backpropagates one supervisor loss alone: it must reach its own head and
/// at least one DCNN parameter, and nothing in ASPP, decoder or the other
/// head. Numerically, scaling ASPP and decoder weights must not move it.
pub fn check_supervisor_routing(head: Head, model_seed: u64, data_seed: u64) -> Result<(), String> {
    let mut model: Model<f64> = build_model(&toy_config(32), model_seed).unwrap();
    let samples = synth_set(3, data_seed);
    let b = batch(&samples);
    model.zero_grad();
    let out = model.forward(&images_to_tensor(&b.samples), Heads::ALL, Pass::Probe).unwrap();
    let (logits, labels, own, other): (_, Vec<usize>, _, _) = match head {
        Head::Weather => (
            out.weather_logits.unwrap(),
            b.samples.iter().map(|s| s.weather.index()).collect(),
            Partition::WasHead,
            Partition::TasHead,
        ),
        Head::Time => (
            out.time_logits.unwrap(),
            b.samples.iter().map(|s| s.time.index()).collect(),
            Partition::TasHead,
            Partition::WasHead,
        ),
    };
    let (_, d) = classification_loss(&logits, &labels);
    let d_high = model.backward_supervisor(head, &d);
    let mut g = model.zero_dcnn_grad(b.samples.len());
    g.add_high(&d_high);
    model.backward_dcnn(&g);
    for p in [Partition::EncoderRest, Partition::Decoder, other] {
        if !all_zero(&grads(&model, p)) {
            return Err(format!("{head:?} loss reached {p}"));
        }
    }
    for p in [Partition::Dcnn, own] {
        if !nonzero(&grads(&model, p)) {
            return Err(format!("{head:?} loss did not reach {p}"));
        }
    }
    let pick = |l: LossBundle| if head == Head::Weather { l.l_was } else { l.l_tas };
    let before = pick(compute_losses(&mut model, &b, Heads::ALL, 1.0, 1.0, Pass::Probe).unwrap());
    for p in [Partition::EncoderRest, Partition::Decoder] {
        model.visit_partition_mut(p, &mut |_, q| q.value.iter_mut().for_each(|v| *v *= 1.5));
    }
    let after = pick(compute_losses(&mut model, &b, Heads::ALL, 1.0, 1.0, Pass::Probe).unwrap());
    if before != after {
        return Err(format!("ASPP/decoder weights changed the {head:?} loss"));
    }
    Ok(())
}

#[derive(Debug, Default)]
pub struct FreezeStats {
    pub real_steps: usize,
    pub real_dcnn_changed: usize,
    pub synth_steps: usize,
    pub synth_dcnn_changed: usize,
    /// Steps per domain on which both heads changed.
    pub real_heads_changed: usize,
    pub synth_heads_changed: usize,
}

/// Runs `steps` alternating full-model steps, hashing parameters around each.
pub fn freeze_stats(steps: usize, seed: u64) -> FreezeStats {
    let config = toy_train_config(AblationMode::AlternatingWeatherTimeAware, seed);
    let real = real_set(6, seed + 31);
    let synth = synth_set(6, seed + 32);
    let mut state = TrainState::new(build_model(&config.model, config.seed).unwrap());
    let stream = alternating_batches(&real, &synth, config.batch_size, config.seed).unwrap();
    let head_hashes = |m: &Model<f32>| [Partition::WasHead, Partition::TasHead].map(|p| m.partition_hash(p));
    let mut stats = FreezeStats::default();
    for (t, b) in stream.take(steps).enumerate() {
        let dcnn = state.model.partition_hash(Partition::Dcnn);
        let heads = head_hashes(&state.model);
        train_step(&mut state, &b, &config, t as u64, steps as u64).unwrap();
        let dcnn_changed = (state.model.partition_hash(Partition::Dcnn) != dcnn) as usize;
        let after = head_hashes(&state.model);
        let heads_changed = (heads[0] != after[0] && heads[1] != after[1]) as usize;
        match b.domain {
            DomainTag::StandardReal => {
                stats.real_steps += 1;
                stats.real_dcnn_changed += dcnn_changed;
                stats.real_heads_changed += heads_changed;
            }
            DomainTag::AdverseSynthetic => {
                stats.synth_steps += 1;
                stats.synth_dcnn_changed += dcnn_changed;
                stats.synth_heads_changed += heads_changed;
            }
        }
    }
    stats
}
