//! Synthetic-aware training: loss assembly, per-loss gradient routing,
//! alternating real / synthetic batch schedule with the DCNN frozen on real
//! batches, SGD with poly decay, ablation modes, checkpoints and resume.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabeledSample;
use crate::model::{build_model, images_to_tensor, Checkpoint, Head, Heads, Model, ModelConfig, ModelError, Partition};
use crate::nn::{Pass, Scalar, Tensor};
use crate::schema::{DomainTag, IGNORE_INDEX};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("every pixel in the batch is Ignore")]
    AllPixelsIgnored,
    #[error("invalid training config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("I/O on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("metrics log {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("non-finite loss at iteration {0}")]
    NonFinite(u64),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

/// The six training regimens, in ablation-table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationMode {
    ScratchSynthOnly,
    ScratchRealOnly,
    ScratchRealThenFinetuneSynth,
    AlternatingNoSupervisors,
    AlternatingWeatherAware,
    AlternatingWeatherTimeAware,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] = [
        AblationMode::ScratchSynthOnly,
        AblationMode::ScratchRealOnly,
        AblationMode::ScratchRealThenFinetuneSynth,
        AblationMode::AlternatingNoSupervisors,
        AblationMode::AlternatingWeatherAware,
        AblationMode::AlternatingWeatherTimeAware,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::ScratchSynthOnly => "ScratchSynthOnly",
            AblationMode::ScratchRealOnly => "ScratchRealOnly",
            AblationMode::ScratchRealThenFinetuneSynth => "ScratchRealThenFinetuneSynth",
            AblationMode::AlternatingNoSupervisors => "AlternatingNoSupervisors",
            AblationMode::AlternatingWeatherAware => "AlternatingWeatherAware",
            AblationMode::AlternatingWeatherTimeAware => "AlternatingWeatherTimeAware",
        }
    }

    /// Supervisor heads trained in this mode.
    pub fn heads(self) -> Heads {
        match self {
            AblationMode::AlternatingWeatherAware => Heads { weather: true, time: false },
            AblationMode::AlternatingWeatherTimeAware => Heads::ALL,
            _ => Heads::NONE,
        }
    }

    pub fn is_alternating(self) -> bool {
        matches!(
            self,
            AblationMode::AlternatingNoSupervisors
                | AblationMode::AlternatingWeatherAware
                | AblationMode::AlternatingWeatherTimeAware
        )
    }

    pub fn uses_real(self) -> bool {
        self != AblationMode::ScratchSynthOnly
    }

    pub fn uses_synth(self) -> bool {
        self != AblationMode::ScratchRealOnly
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| TrainError::Config { field: "mode".into(), reason: format!("unknown ablation mode {s:?}") })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { base_lr: 0.007, momentum: 0.9, weight_decay: 5e-4, poly_power: 0.9 }
    }
}

impl OptimizerConfig {
    /// `base_lr · (1 − iter / max_iter)^power`.
    pub fn lr_at(&self, iter: u64, max_iter: u64) -> f64 {
        if max_iter == 0 {
            return self.base_lr;
        }
        let frac = 1.0 - (iter as f64 / max_iter as f64).min(1.0);
        self.base_lr * frac.powf(self.poly_power)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub mode: AblationMode,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Share of `iterations` spent fine-tuning on synthetic data in
    /// [`AblationMode::ScratchRealThenFinetuneSynth`].
    pub finetune_fraction: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1e-5,
            beta: 1e-5,
            batch_size: 4,
            iterations: 2000,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            mode: AblationMode::AlternatingWeatherTimeAware,
            checkpoint_every: 0,
            finetune_fraction: 0.25,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field: &str, reason: &str| Err(TrainError::Config { field: field.into(), reason: reason.into() });
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha", "must be finite and non-negative");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta", "must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.iterations == 0 {
            return bad("iterations", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.finetune_fraction) {
            return bad("finetune_fraction", "must lie in [0, 1]");
        }
        let o = &self.optimizer;
        if !(o.base_lr >= 0.0 && o.momentum >= 0.0 && o.weight_decay >= 0.0 && o.poly_power >= 0.0) {
            return bad("optimizer", "values must be non-negative");
        }
        self.model.validate().map_err(|e| TrainError::Config { field: format!("model.{}", e.field), reason: e.reason })
    }

    /// Steps of the real-data phase before synthetic fine-tuning.
    pub fn pretrain_steps(&self) -> u64 {
        if self.mode == AblationMode::ScratchRealThenFinetuneSynth {
            self.iterations - (self.iterations as f64 * self.finetune_fraction).round() as u64
        } else {
            self.iterations
        }
    }
}

/// Per-step losses. `l_total = l_seg + α·l_was + β·l_tas`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_seg: f64,
    pub l_was: f64,
    pub l_tas: f64,
    pub l_total: f64,
}

impl LossBundle {
    pub fn new(l_seg: f64, l_was: f64, l_tas: f64, alpha: f64, beta: f64) -> Self {
        LossBundle { l_seg, l_was, l_tas, l_total: l_seg + alpha * l_was + beta * l_tas }
    }
}

/// Mean softmax cross-entropy over non-Ignore pixels and its logit gradient.
/// `masks` holds one row-major `H×W` mask per batch item.
pub fn segmentation_loss<T: Scalar>(logits: &Tensor<T>, masks: &[&[u8]]) -> Result<(f64, Tensor<T>), TrainError> {
    let [n, c, h, w] = logits.shape;
    let hw = h * w;
    assert_eq!(masks.len(), n);
    let count: usize = masks.iter().map(|m| m.iter().filter(|&&v| v != IGNORE_INDEX).count()).sum();
    if count == 0 {
        return Err(TrainError::AllPixelsIgnored);
    }
    let inv = 1.0 / count as f64;
    let mut grad = Tensor::zeros(logits.shape);
    let mut loss = 0.0;
    let mut probs = vec![0.0f64; c];
    for b in 0..n {
        let item = logits.item(b);
        let g = &mut grad.data[b * c * hw..(b + 1) * c * hw];
        for i in 0..hw {
            let label = masks[b][i];
            if label == IGNORE_INDEX {
                continue;
            }
            let max = (0..c).map(|k| item[k * hw + i].to_f64().unwrap()).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (k, p) in probs.iter_mut().enumerate() {
                *p = (item[k * hw + i].to_f64().unwrap() - max).exp();
                z += *p;
            }
            loss += z.ln() + max - item[label as usize * hw + i].to_f64().unwrap();
            for (k, p) in probs.iter().enumerate() {
                let target = if k == label as usize { 1.0 } else { 0.0 };
                g[k * hw + i] = T::from_f64_lossy((p / z - target) * inv);
            }
        }
    }
    Ok((loss * inv, grad))
}

/// Mean softmax cross-entropy of `B×K×1×1` logits against class indices.
pub fn classification_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (f64, Tensor<T>) {
    let [n, k, _, _] = logits.shape;
    assert_eq!(labels.len(), n);
    let inv = 1.0 / n as f64;
    let mut grad = Tensor::zeros(logits.shape);
    let mut loss = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.item(b).iter().map(|v| v.to_f64().unwrap()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += z.ln() + max - row[label];
        for j in 0..k {
            let target = if j == label { 1.0 } else { 0.0 };
            grad.data[b * k + j] = T::from_f64_lossy(((row[j] - max).exp() / z - target) * inv);
        }
    }
    (loss * inv, grad)
}

/// A batch drawn from one domain.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub domain: DomainTag,
    pub samples: Vec<&'a LabeledSample>,
}

impl Batch<'_> {
    fn masks(&self) -> Vec<&[u8]> {
        self.samples.iter().map(|s| s.mask.data.as_slice()).collect()
    }

    fn weather_labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.weather.index()).collect()
    }

    fn time_labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.time.index()).collect()
    }
}

/// Endless per-epoch shuffled index stream over one source.
#[derive(Debug, Clone)]
struct Cycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycler {
    fn new(len: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Cycler { order, pos: 0, rng }
    }

    fn take(&mut self, n: usize) -> Vec<usize> {
        (0..n)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Deterministic batch stream: strict real / synthetic alternation starting
/// with real, or a single source.
#[derive(Debug, Clone)]
pub struct BatchStream<'a> {
    sources: Vec<(DomainTag, &'a [LabeledSample], Cycler)>,
    batch_size: usize,
    step: usize,
}

const REAL_STREAM: u64 = 11;
const SYNTH_STREAM: u64 = 12;
const FINETUNE_STREAM: u64 = 13;

pub fn alternating_batches<'a>(
    real: &'a [LabeledSample],
    synth: &'a [LabeledSample],
    batch_size: usize,
    seed: u64,
) -> Result<BatchStream<'a>, TrainError> {
    if real.is_empty() {
        return Err(TrainError::EmptyDataset("real".into()));
    }
    if synth.is_empty() {
        return Err(TrainError::EmptyDataset("synth".into()));
    }
    Ok(BatchStream {
        sources: vec![
            (DomainTag::StandardReal, real, Cycler::new(real.len(), seed, REAL_STREAM)),
            (DomainTag::AdverseSynthetic, synth, Cycler::new(synth.len(), seed, SYNTH_STREAM)),
        ],
        batch_size,
        step: 0,
    })
}

/// Batches from one source, tagged with `domain`.
pub fn single_source_batches<'a>(
    source: &'a [LabeledSample],
    domain: DomainTag,
    name: &str,
    batch_size: usize,
    seed: u64,
    stream: u64,
) -> Result<BatchStream<'a>, TrainError> {
    if source.is_empty() {
        return Err(TrainError::EmptyDataset(name.into()));
    }
    Ok(BatchStream { sources: vec![(domain, source, Cycler::new(source.len(), seed, stream))], batch_size, step: 0 })
}

impl<'a> Iterator for BatchStream<'a> {
    type Item = Batch<'a>;

    fn next(&mut self) -> Option<Batch<'a>> {
        let k = self.step % self.sources.len();
        self.step += 1;
        let (domain, data, cycler) = &mut self.sources[k];
        let samples = cycler.take(self.batch_size).into_iter().map(|i| &data[i]).collect();
        Some(Batch { domain: *domain, samples })
    }
}

/// Forward pass plus losses for one batch. Supervisor terms are zero (and the
/// heads are not run) unless `heads` selects them.
pub fn compute_losses<T: Scalar>(
    model: &mut Model<T>,
    batch: &Batch<'_>,
    heads: Heads,
    alpha: f64,
    beta: f64,
    pass: Pass,
) -> Result<LossBundle, TrainError> {
    Ok(forward_losses(model, batch, heads, alpha, beta, pass)?.0)
}

struct LossGrads<T> {
    seg: Tensor<T>,
    was: Option<Tensor<T>>,
    tas: Option<Tensor<T>>,
}

fn forward_losses<T: Scalar>(
    model: &mut Model<T>,
    batch: &Batch<'_>,
    heads: Heads,
    alpha: f64,
    beta: f64,
    pass: Pass,
) -> Result<(LossBundle, LossGrads<T>), TrainError> {
    let images = images_to_tensor(&batch.samples);
    let out = model.forward(&images, heads, pass)?;
    let (l_seg, seg) = segmentation_loss(&out.seg_logits, &batch.masks())?;
    let (l_was, was) = match &out.weather_logits {
        Some(l) => {
            let (v, g) = classification_loss(l, &batch.weather_labels());
            (v, Some(g))
        }
        None => (0.0, None),
    };
    let (l_tas, tas) = match &out.time_logits {
        Some(l) => {
            let (v, g) = classification_loss(l, &batch.time_labels());
            (v, Some(g))
        }
        None => (0.0, None),
    };
    Ok((LossBundle::new(l_seg, l_was, l_tas, alpha, beta), LossGrads { seg, was, tas }))
}

/// Which partitions receive gradients / updates in one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Routing {
    pub heads: Heads,
    pub freeze_dcnn: bool,
}

impl Routing {
    pub fn for_step(mode: AblationMode, domain: DomainTag) -> Self {
        Routing { heads: mode.heads(), freeze_dcnn: mode.is_alternating() && domain == DomainTag::StandardReal }
    }

    pub fn updates(&self, p: Partition) -> bool {
        match p {
            Partition::Dcnn => !self.freeze_dcnn,
            Partition::EncoderRest | Partition::Decoder => true,
            Partition::WasHead => self.heads.weather,
            Partition::TasHead => self.heads.time,
        }
    }
}

/// Zeroes gradients, runs the forward pass and routes every loss:
/// the segmentation loss reaches decoder, ASPP and (unless frozen) the DCNN;
/// each supervisor loss, scaled by its weight, reaches its own head and
/// (unless frozen) the DCNN. Heads never see the segmentation loss and
/// decoder / ASPP never see supervisor losses.
pub fn accumulate_gradients<T: Scalar>(
    model: &mut Model<T>,
    batch: &Batch<'_>,
    routing: Routing,
    alpha: f64,
    beta: f64,
    pass: Pass,
) -> Result<LossBundle, TrainError> {
    model.zero_grad();
    let (losses, grads) = forward_losses(model, batch, routing.heads, alpha, beta, pass)?;
    let mut dcnn = model.backward_segmentation(&grads.seg);
    for (head, grad, weight) in [(Head::Weather, grads.was, alpha), (Head::Time, grads.tas, beta)] {
        if let Some(mut g) = grad {
            g.scale(T::from_f64_lossy(weight));
            let d = model.backward_supervisor(head, &g);
            dcnn.add_high(&d);
        }
    }
    if !routing.freeze_dcnn {
        model.backward_dcnn(&dcnn);
    }
    Ok(losses)
}

/// Model plus optimizer state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model<f32>,
    pub momentum: BTreeMap<String, Vec<f32>>,
    pub iteration: u64,
}

impl TrainState {
    pub fn new(model: Model<f32>) -> Self {
        TrainState { model, momentum: BTreeMap::new(), iteration: 0 }
    }

    /// SGD with momentum and L2 weight decay on the routed partitions only;
    /// skipped partitions keep parameters and momentum untouched.
    fn sgd(&mut self, routing: Routing, opt: &OptimizerConfig, lr: f64) {
        let lr = lr as f32;
        let mu = opt.momentum as f32;
        let wd = opt.weight_decay as f32;
        for p in Partition::ALL.into_iter().filter(|&p| routing.updates(p)) {
            let momentum = &mut self.momentum;
            self.model.visit_partition_mut(p, &mut |path, param| {
                let v = momentum.entry(path.to_string()).or_insert_with(|| vec![0.0; param.len()]);
                for ((w, g), m) in param.value.iter_mut().zip(&param.grad).zip(v.iter_mut()) {
                    *m = mu * *m + *g + wd * *w;
                    *w -= lr * *m;
                }
            });
        }
    }
}

/// One log row per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub iter: u64,
    pub domain: DomainTag,
    pub l_seg: f64,
    pub l_was: f64,
    pub l_tas: f64,
    pub l_total: f64,
    pub lr: f64,
}

/// One optimizer step on `batch` with learning rate for step `lr_iter` of
/// `lr_horizon`. Increments the iteration counter.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch<'_>,
    config: &TrainConfig,
    lr_iter: u64,
    lr_horizon: u64,
) -> Result<StepLog, TrainError> {
    let routing = Routing::for_step(config.mode, batch.domain);
    let losses = accumulate_gradients(&mut state.model, batch, routing, config.alpha, config.beta, Pass::Train)?;
    if !losses.l_total.is_finite() {
        return Err(TrainError::NonFinite(state.iteration));
    }
    let lr = config.optimizer.lr_at(lr_iter, lr_horizon);
    state.sgd(routing, &config.optimizer, lr);
    let log = StepLog {
        iter: state.iteration,
        domain: batch.domain,
        l_seg: losses.l_seg,
        l_was: losses.l_was,
        l_tas: losses.l_tas,
        l_total: losses.l_total,
        lr,
    };
    state.iteration += 1;
    Ok(log)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct ResumeInfo {
    train_config: TrainConfig,
    real_len: usize,
    synth_len: usize,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: Vec<StepLog>,
    /// Iteration the run resumed from, if any.
    pub resumed_from: Option<u64>,
}

/// Where a run keeps its files.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn checkpoint(&self, iter: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("step_{iter:06}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("final.ckpt")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    /// Latest periodic checkpoint on disk.
    pub fn latest_checkpoint(&self) -> Option<(u64, PathBuf)> {
        let entries = std::fs::read_dir(self.root.join("checkpoints")).ok()?;
        entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                let iter = name.strip_prefix("step_")?.strip_suffix(".ckpt")?.parse().ok()?;
                Some((iter, e.path()))
            })
            .max_by_key(|(iter, _)| *iter)
    }
}

fn state_checkpoint(state: &TrainState, info: &ResumeInfo) -> Checkpoint {
    let mut ckpt = state.model.to_checkpoint(state.iteration);
    ckpt.momentum = state.momentum.clone();
    ckpt.train_state = Some(serde_json::to_value(info).expect("serializable"));
    ckpt
}

fn write_metrics(path: &Path, rows: &[StepLog]) -> Result<(), TrainError> {
    let csv_err = |source| TrainError::Csv { path: path.display().to_string(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

fn read_metrics(path: &Path) -> Result<Vec<StepLog>, TrainError> {
    let csv_err = |source| TrainError::Csv { path: path.display().to_string(), source };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Runs `config.iterations` steps under the configured mode.
///
/// With a run directory, periodic checkpoints go to `checkpoints/`, the last
/// state to `final.ckpt` and the per-step log to `metrics.csv`. With
/// `resume`, the final or else newest periodic checkpoint written by an
/// identical config and data is restored and the batch stream is replayed up
/// to it, so the remaining steps match an uninterrupted run bit for bit.
pub fn train(
    config: &TrainConfig,
    real: &[LabeledSample],
    synth: &[LabeledSample],
    run_dir: Option<&RunDir>,
    resume: bool,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mode = config.mode;
    let real_in = if mode.uses_real() { real } else { &[] };
    let synth_in = if mode.uses_synth() { synth } else { &[] };
    let mut first = if mode.is_alternating() {
        alternating_batches(real_in, synth_in, config.batch_size, config.seed)?
    } else if mode.uses_real() {
        single_source_batches(real_in, DomainTag::StandardReal, "real", config.batch_size, config.seed, REAL_STREAM)?
    } else {
        single_source_batches(
            synth_in,
            DomainTag::AdverseSynthetic,
            "synth",
            config.batch_size,
            config.seed,
            SYNTH_STREAM,
        )?
    };
    let pretrain = config.pretrain_steps();
    let mut second = if pretrain < config.iterations {
        Some(single_source_batches(
            synth_in,
            DomainTag::AdverseSynthetic,
            "synth",
            config.batch_size,
            config.seed,
            FINETUNE_STREAM,
        )?)
    } else {
        None
    };

    let info = ResumeInfo { train_config: config.clone(), real_len: real_in.len(), synth_len: synth_in.len() };
    let mut state = TrainState::new(build_model(&config.model, config.seed).map_err(ModelError::from)?);
    let mut log = Vec::new();
    let mut resumed_from = None;
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir.root.join("checkpoints")).map_err(io_err(&dir.root))?;
        if resume {
            let mut candidates = Vec::new();
            if dir.final_checkpoint().is_file() {
                candidates.push(dir.final_checkpoint());
            }
            candidates.extend(dir.latest_checkpoint().map(|(_, path)| path));
            for path in candidates {
                let ckpt = Checkpoint::load(&path)?;
                let stored: Option<ResumeInfo> = ckpt.train_state.clone().and_then(|v| serde_json::from_value(v).ok());
                if stored.as_ref() != Some(&info) || ckpt.iteration > config.iterations {
                    continue;
                }
                state.model.load_checkpoint(&ckpt)?;
                state.momentum = ckpt.momentum.clone();
                state.iteration = ckpt.iteration;
                resumed_from = Some(ckpt.iteration);
                if dir.metrics().exists() {
                    log = read_metrics(&dir.metrics())?;
                    log.retain(|r| r.iter < ckpt.iteration);
                }
                break;
            }
        }
    }

    for t in 0..config.iterations {
        let in_pretrain = t < pretrain;
        let batch = if in_pretrain { first.next() } else { second.as_mut().and_then(|s| s.next()) }
            .expect("batch streams are endless");
        if t < state.iteration {
            continue;
        }
        if t == pretrain && t > 0 {
            // Fine-tuning starts with a fresh optimizer.
            state.momentum.clear();
        }
        let (lr_iter, horizon) = if in_pretrain { (t, pretrain) } else { (t - pretrain, config.iterations - pretrain) };
        log.push(train_step(&mut state, &batch, config, lr_iter, horizon)?);
        if let Some(dir) = run_dir {
            if config.checkpoint_every > 0 && state.iteration % config.checkpoint_every == 0 {
                state_checkpoint(&state, &info).save(&dir.checkpoint(state.iteration))?;
                write_metrics(&dir.metrics(), &log)?;
            }
        }
    }

    if let Some(dir) = run_dir {
        state_checkpoint(&state, &info).save(&dir.final_checkpoint())?;
        write_metrics(&dir.metrics(), &log)?;
    }
    Ok(TrainOutcome { model: state.model, log, resumed_from })
}

/// Continues optimization of a checkpointed model on one dataset: no
/// freezing, no supervisors, fresh optimizer and learning-rate schedule.
pub fn fine_tune(
    checkpoint: &Checkpoint,
    dataset: &[LabeledSample],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let mut model = build_model(&config.model, config.seed).map_err(ModelError::from)?;
    model.load_checkpoint(checkpoint)?;
    let mut state = TrainState::new(model);
    let mut log = Vec::new();
    if config.iterations == 0 {
        return Ok(TrainOutcome { model: state.model, log, resumed_from: None });
    }
    let domain = dataset.first().map_or(DomainTag::AdverseSynthetic, |s| s.domain);
    let stream = single_source_batches(dataset, domain, "fine-tune", config.batch_size, config.seed, FINETUNE_STREAM)?;
    let cfg = TrainConfig { mode: AblationMode::ScratchSynthOnly, ..config.clone() };
    for (t, batch) in stream.take(config.iterations as usize).enumerate() {
        log.push(train_step(&mut state, &batch, &cfg, t as u64, config.iterations)?);
    }
    Ok(TrainOutcome { model: state.model, log, resumed_from: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Image, Mask};
    use crate::schema::{TimeOfDay, WeatherCondition};

    fn toy_sample(id: usize, domain: DomainTag) -> LabeledSample {
        let mut image = Image::new(4, 4);
        image.data.iter_mut().enumerate().for_each(|(i, v)| *v = ((i * 7 + id) % 11) as f32 / 11.0);
        LabeledSample {
            id: format!("t{id}"),
            image,
            mask: Mask::filled(4, 4, (id % 10) as u8),
            weather: WeatherCondition::Normal,
            time: TimeOfDay::Day,
            domain,
        }
    }

    #[test]
    fn eq1_arithmetic() {
        let l = LossBundle::new(1.0, 2.0, 3.0, 1e-5, 1e-5);
        assert!((l.l_total - 1.00005).abs() <= 1e-12 * 1.00005);
        assert_eq!(LossBundle::new(0.7, 5.0, 9.0, 0.0, 0.0).l_total, 0.7);
    }

    #[test]
    fn uniform_logits_give_ln_ten() {
        let logits = Tensor::<f64>::zeros([2, 10, 3, 3]);
        let masks: Vec<Vec<u8>> = vec![(0..9).collect(), vec![3, 255, 3, 3, 9, 9, 0, 1, 2]];
        let refs: Vec<&[u8]> = masks.iter().map(|m| m.as_slice()).collect();
        let (loss, grad) = segmentation_loss(&logits, &refs).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        // Ignore pixels carry no gradient.
        assert!((0..10).all(|k| grad.data[9 * 10 + k * 9 + 1] == 0.0));
        let all_ignored = [IGNORE_INDEX; 9];
        assert!(matches!(
            segmentation_loss(&Tensor::<f64>::zeros([1, 10, 3, 3]), &[&all_ignored]),
            Err(TrainError::AllPixelsIgnored)
        ));
    }

    #[test]
    fn classification_loss_matches_hand_computation() {
        let logits = Tensor::from_vec([1, 2, 1, 1], vec![0.0f64, 2.0f64.ln()]);
        let (loss, grad) = classification_loss(&logits, &[0]);
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        assert!((grad.data[0] - (1.0 / 3.0 - 1.0)).abs() < 1e-12);
        assert!((grad.data[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn alternation_and_cycling() {
        let real: Vec<_> = (0..5).map(|i| toy_sample(i, DomainTag::StandardReal)).collect();
        let synth: Vec<_> = (0..2).map(|i| toy_sample(10 + i, DomainTag::AdverseSynthetic)).collect();
        let domains: Vec<_> = alternating_batches(&real, &synth, 1, 3).unwrap().take(4).map(|b| b.domain).collect();
        assert_eq!(
            domains,
            [
                DomainTag::StandardReal,
                DomainTag::AdverseSynthetic,
                DomainTag::StandardReal,
                DomainTag::AdverseSynthetic
            ]
        );
        let synth_ids: Vec<_> = alternating_batches(&real, &synth, 1, 3)
            .unwrap()
            .take(12)
            .filter(|b| b.domain == DomainTag::AdverseSynthetic)
            .map(|b| b.samples[0].id.clone())
            .collect();
        assert_eq!(synth_ids.len(), 6);
        for pair in synth_ids.chunks(2) {
            assert_ne!(pair[0], pair[1], "each pass covers both samples: {synth_ids:?}");
        }
        assert!(matches!(alternating_batches(&[], &synth, 1, 0), Err(TrainError::EmptyDataset(s)) if s == "real"));
        assert!(matches!(alternating_batches(&real, &[], 1, 0), Err(TrainError::EmptyDataset(s)) if s == "synth"));
    }

    #[test]
    fn poly_schedule() {
        let o = OptimizerConfig::default();
        assert_eq!(o.lr_at(0, 100), 0.007);
        assert!((o.lr_at(50, 100) - 0.007 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert_eq!(o.lr_at(100, 100), 0.0);
    }

    #[test]
    fn modes_parse_and_route() {
        for m in AblationMode::ALL {
            assert_eq!(m.as_str().parse::<AblationMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        let r = Routing::for_step(AblationMode::AlternatingWeatherAware, DomainTag::StandardReal);
        assert!(r.freeze_dcnn && r.updates(Partition::WasHead) && !r.updates(Partition::TasHead));
        let r = Routing::for_step(AblationMode::ScratchRealOnly, DomainTag::StandardReal);
        assert!(!r.freeze_dcnn && !r.updates(Partition::WasHead));
        let cfg =
            TrainConfig { mode: AblationMode::ScratchRealThenFinetuneSynth, iterations: 2000, ..Default::default() };
        assert_eq!(cfg.pretrain_steps(), 1500);
    }

    #[test]
    fn config_json_defaults() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"mode": "ScratchRealOnly", "seed": 4}"#).unwrap();
        assert_eq!(cfg.alpha, 1e-5);
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.iterations, 2000);
        assert_eq!(cfg.optimizer.base_lr, 0.007);
        let bad = TrainConfig { batch_size: 0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(TrainError::Config { field, .. }) if field == "batch_size"));
    }
}
