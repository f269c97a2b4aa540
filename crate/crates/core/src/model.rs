//! The segmentation network: an atrous residual backbone (the DCNN), an
//! ASPP encoder tail, a decoder fusing low-level features, and the weather /
//! time-of-day supervisor heads that read the DCNN output.
//!
//! Parameters are grouped into five [`Partition`]s. The forward pass caches
//! activations; the backward pass is split into segmentation, supervisor and
//! DCNN stages so that a trainer decides which upstream gradients reach the
//! backbone.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabeledSample;
use crate::nn::{
    broadcast_spatial, broadcast_spatial_backward, concat_channels, global_avg_pool, global_avg_pool_backward, join,
    resize_bilinear, resize_bilinear_backward, split_channels, BatchNorm2d, Conv2d, ConvBnRelu, ConvSpec, Linear,
    Module, Param, Pass, Relu, Scalar, Tensor,
};
use crate::schema::{NUM_CLASSES, NUM_TIMES, NUM_WEATHER};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid model config field `{field}`: {reason}")]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

fn config_err(field: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError { field: field.into(), reason: reason.into() }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("expected input of shape {expected:?}, got {got:?}")]
    Shape { expected: [usize; 4], got: [usize; 4] },
    #[error("unknown partition {0:?}")]
    UnknownPartition(String),
    #[error("checkpoint does not match the model: {0}")]
    CheckpointMismatch(String),
    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),
    #[error("checkpoint I/O on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    pub stride: usize,
    pub atrous_rate: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisorConfig {
    pub conv_channels: usize,
    pub fc_widths: Vec<usize>,
    pub num_weather: usize,
    pub num_time: usize,
    pub atrous_rate: usize,
    pub padding: usize,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        SupervisorConfig {
            conv_channels: 8,
            fc_widths: vec![256, 64],
            num_weather: NUM_WEATHER,
            num_time: NUM_TIMES,
            atrous_rate: 2,
            padding: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// `[height, width]` of input images.
    pub input_resolution: [usize; 2],
    pub num_classes: usize,
    pub backbone: Vec<StageConfig>,
    /// Backbone stage whose output feeds the decoder's low-level branch.
    pub low_level_stage: usize,
    pub low_level_channels: usize,
    pub aspp_rates: Vec<usize>,
    pub aspp_channels: usize,
    pub decoder_channels: usize,
    pub supervisor: SupervisorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let stage = |channels| StageConfig { channels, stride: 2, atrous_rate: 1 };
        ModelConfig {
            input_resolution: [64, 64],
            num_classes: NUM_CLASSES,
            backbone: vec![stage(8), stage(16), stage(32), stage(48)],
            low_level_stage: 1,
            low_level_channels: 8,
            aspp_rates: vec![1, 2, 3],
            aspp_channels: 32,
            decoder_channels: 32,
            supervisor: SupervisorConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn with_resolution(mut self, height: usize, width: usize) -> Self {
        self.input_resolution = [height, width];
        self
    }

    pub fn output_stride(&self) -> usize {
        self.backbone.iter().map(|s| s.stride).product()
    }

    /// Spatial size of the DCNN output.
    pub fn feature_size(&self) -> (usize, usize) {
        let os = self.output_stride();
        (self.input_resolution[0] / os, self.input_resolution[1] / os)
    }

    /// Spatial size of the low-level features.
    pub fn low_level_size(&self) -> (usize, usize) {
        let s: usize = self.backbone[..=self.low_level_stage].iter().map(|s| s.stride).product();
        (self.input_resolution[0] / s, self.input_resolution[1] / s)
    }

    fn head_conv(&self, in_channels: usize) -> ConvSpec {
        ConvSpec {
            in_channels,
            out_channels: self.supervisor.conv_channels,
            kernel: 3,
            stride: 1,
            padding: self.supervisor.padding,
            dilation: self.supervisor.atrous_rate,
        }
    }

    /// Width of the flattened supervisor input.
    pub fn flatten_width(&self) -> usize {
        let (h, w) = self.feature_size();
        let c = self.backbone.last().map_or(0, |s| s.channels);
        let first = self.head_conv(c);
        let (h1, w1) = first.output_size(h, w);
        let (h2, w2) = self.head_conv(self.supervisor.conv_channels).output_size(h1, w1);
        self.supervisor.conv_channels * h2 * w2
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let [h, w] = self.input_resolution;
        if h == 0 || w == 0 {
            return Err(config_err("input_resolution", "must be positive"));
        }
        if self.num_classes != NUM_CLASSES {
            return Err(config_err("num_classes", format!("must be {NUM_CLASSES}")));
        }
        if self.backbone.is_empty() {
            return Err(config_err("backbone", "needs at least one stage"));
        }
        for (i, s) in self.backbone.iter().enumerate() {
            if s.channels == 0 {
                return Err(config_err(format!("backbone[{i}].channels"), "must be positive"));
            }
            if !(1..=2).contains(&s.stride) {
                return Err(config_err(format!("backbone[{i}].stride"), "must be 1 or 2"));
            }
            if s.atrous_rate == 0 {
                return Err(config_err(format!("backbone[{i}].atrous_rate"), "must be positive"));
            }
        }
        let os = self.output_stride();
        if h % os != 0 || w % os != 0 {
            return Err(config_err("backbone", format!("total stride {os} does not divide {h}x{w}")));
        }
        if self.low_level_stage >= self.backbone.len() {
            return Err(config_err("low_level_stage", "past the last backbone stage"));
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
            return Err(config_err("aspp_rates", "needs at least one positive rate"));
        }
        for (field, v) in [
            ("low_level_channels", self.low_level_channels),
            ("aspp_channels", self.aspp_channels),
            ("decoder_channels", self.decoder_channels),
            ("supervisor.conv_channels", self.supervisor.conv_channels),
            ("supervisor.atrous_rate", self.supervisor.atrous_rate),
        ] {
            if v == 0 {
                return Err(config_err(field, "must be positive"));
            }
        }
        if self.supervisor.fc_widths.len() != 2 {
            return Err(config_err("supervisor.fc_widths", "needs exactly two hidden widths"));
        }
        if let Some(i) = self.supervisor.fc_widths.iter().position(|&v| v == 0) {
            return Err(config_err(format!("supervisor.fc_widths[{i}]"), "must be positive"));
        }
        if self.supervisor.num_weather != NUM_WEATHER {
            return Err(config_err("supervisor.num_weather", format!("must be {NUM_WEATHER}")));
        }
        if self.supervisor.num_time != NUM_TIMES {
            return Err(config_err("supervisor.num_time", format!("must be {NUM_TIMES}")));
        }
        if self.flatten_width() == 0 {
            return Err(config_err("supervisor", "head convolutions leave no spatial extent"));
        }
        Ok(())
    }
}

/// Parameter groups that the training rules address separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Partition {
    #[serde(rename = "DCNN")]
    Dcnn,
    EncoderRest,
    Decoder,
    #[serde(rename = "WASHead")]
    WasHead,
    #[serde(rename = "TASHead")]
    TasHead,
}

impl Partition {
    pub const ALL: [Partition; 5] =
        [Partition::Dcnn, Partition::EncoderRest, Partition::Decoder, Partition::WasHead, Partition::TasHead];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Dcnn => "DCNN",
            Partition::EncoderRest => "EncoderRest",
            Partition::Decoder => "Decoder",
            Partition::WasHead => "WASHead",
            Partition::TasHead => "TASHead",
        }
    }

    /// Leading path component of this partition's parameters.
    fn prefix(self) -> &'static str {
        match self {
            Partition::Dcnn => "dcnn",
            Partition::EncoderRest => "aspp",
            Partition::Decoder => "decoder",
            Partition::WasHead => "was",
            Partition::TasHead => "tas",
        }
    }

    /// Partition owning a parameter path.
    pub fn of_path(path: &str) -> Option<Partition> {
        let head = path.split('.').next()?;
        Partition::ALL.into_iter().find(|p| p.prefix() == head)
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partition {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Partition::ALL.into_iter().find(|p| p.as_str() == s).ok_or_else(|| ModelError::UnknownPartition(s.to_string()))
    }
}

/// Supervisor head selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Weather,
    Time,
}

/// Which supervisor heads a forward pass evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Heads {
    pub weather: bool,
    pub time: bool,
}

impl Heads {
    pub const NONE: Heads = Heads { weather: false, time: false };
    pub const ALL: Heads = Heads { weather: true, time: true };
}

impl From<bool> for Heads {
    fn from(with_supervisors: bool) -> Self {
        if with_supervisors {
            Heads::ALL
        } else {
            Heads::NONE
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutputs<T> {
    /// `B×10×H×W`.
    pub seg_logits: Tensor<T>,
    /// `B×4×1×1` when the weather head ran.
    pub weather_logits: Option<Tensor<T>>,
    /// `B×2×1×1` when the time head ran.
    pub time_logits: Option<Tensor<T>>,
    pub dcnn_features: Tensor<T>,
}

/// Upstream gradients arriving at the two DCNN outputs.
#[derive(Debug, Clone)]
pub struct DcnnGrad<T> {
    pub high: Tensor<T>,
    pub low: Tensor<T>,
}

impl<T: Scalar> DcnnGrad<T> {
    pub fn add_high(&mut self, g: &Tensor<T>) {
        self.high.add_assign(g);
    }
}

/// `relu(bn(conv_b(relu(bn(conv_a(x))))) + shortcut(x))`.
#[derive(Debug, Clone)]
struct ResidualStage<T> {
    a: ConvBnRelu<T>,
    conv_b: Conv2d<T>,
    bn_b: BatchNorm2d<T>,
    shortcut: Option<(Conv2d<T>, BatchNorm2d<T>)>,
    relu: Relu,
}

impl<T: Scalar> ResidualStage<T> {
    fn new(in_channels: usize, cfg: StageConfig, rng: &mut ChaCha8Rng) -> Self {
        let r = cfg.atrous_rate;
        let spec_a = ConvSpec {
            in_channels,
            out_channels: cfg.channels,
            kernel: 3,
            stride: cfg.stride,
            padding: r,
            dilation: r,
        };
        let spec_b = ConvSpec { in_channels: cfg.channels, stride: 1, ..spec_a };
        let a = ConvBnRelu::new(spec_a, rng);
        let conv_b = Conv2d::new(spec_b, false, 1.0, rng);
        let shortcut = (in_channels != cfg.channels || cfg.stride != 1).then(|| {
            let spec = ConvSpec { kernel: 1, padding: 0, dilation: 1, ..spec_a };
            (Conv2d::new(spec, false, 1.0, rng), BatchNorm2d::new(cfg.channels))
        });
        ResidualStage { a, conv_b, bn_b: BatchNorm2d::new(cfg.channels), shortcut, relu: Relu::default() }
    }

    fn forward(&mut self, x: &Tensor<T>, pass: Pass) -> Tensor<T> {
        let y = self.a.forward(x, pass);
        let y = self.conv_b.forward(&y, pass);
        let mut y = self.bn_b.forward(&y, pass);
        match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(x, pass);
                y.add_assign(&bn.forward(&s, pass));
            }
            None => y.add_assign(x),
        }
        self.relu.forward(y, pass)
    }

    fn backward(&mut self, dy: &Tensor<T>, input_grad: bool) -> Option<Tensor<T>> {
        let d = self.relu.backward(dy);
        let dm = self.bn_b.backward(&d);
        let dm = self.conv_b.backward(&dm, true).unwrap();
        let dx_main = self.a.backward(&dm, input_grad);
        let dx_short = match &mut self.shortcut {
            Some((conv, bn)) => {
                let ds = bn.backward(&d);
                conv.backward(&ds, input_grad)
            }
            None => input_grad.then_some(d),
        };
        match (dx_main, dx_short) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                Some(a)
            }
            _ => None,
        }
    }
}

impl<T: Scalar> Module<T> for ResidualStage<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.a.visit_params(&join(prefix, "a"), f);
        self.conv_b.visit_params(&join(prefix, "conv_b"), f);
        self.bn_b.visit_params(&join(prefix, "bn_b"), f);
        if let Some((conv, bn)) = &self.shortcut {
            conv.visit_params(&join(prefix, "shortcut.conv"), f);
            bn.visit_params(&join(prefix, "shortcut.bn"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.a.visit_params_mut(&join(prefix, "a"), f);
        self.conv_b.visit_params_mut(&join(prefix, "conv_b"), f);
        self.bn_b.visit_params_mut(&join(prefix, "bn_b"), f);
        if let Some((conv, bn)) = &mut self.shortcut {
            conv.visit_params_mut(&join(prefix, "shortcut.conv"), f);
            bn.visit_params_mut(&join(prefix, "shortcut.bn"), f);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Vec<T>)) {
        self.a.visit_buffers(&join(prefix, "a"), f);
        self.bn_b.visit_buffers(&join(prefix, "bn_b"), f);
        if let Some((_, bn)) = &self.shortcut {
            bn.visit_buffers(&join(prefix, "shortcut.bn"), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<T>)) {
        self.a.visit_buffers_mut(&join(prefix, "a"), f);
        self.bn_b.visit_buffers_mut(&join(prefix, "bn_b"), f);
        if let Some((_, bn)) = &mut self.shortcut {
            bn.visit_buffers_mut(&join(prefix, "shortcut.bn"), f);
        }
    }
}

#[derive(Debug, Clone)]
struct Backbone<T> {
    stages: Vec<ResidualStage<T>>,
    low_level_stage: usize,
}

impl<T: Scalar> Backbone<T> {
    /// Returns `(high, low)` features.
    fn forward(&mut self, x: &Tensor<T>, pass: Pass) -> (Tensor<T>, Tensor<T>) {
        let mut y = self.stages[0].forward(x, pass);
        let mut low = None;
        if self.low_level_stage == 0 {
            low = Some(y.clone());
        }
        for i in 1..self.stages.len() {
            y = self.stages[i].forward(&y, pass);
            if i == self.low_level_stage {
                low = Some(y.clone());
            }
        }
        (y, low.expect("low-level stage index validated"))
    }

    fn backward(&mut self, grad: &DcnnGrad<T>) {
        let mut g = grad.high.clone();
        for i in (0..self.stages.len()).rev() {
            if i == self.low_level_stage {
                g.add_assign(&grad.low);
            }
            match self.stages[i].backward(&g, i > 0) {
                Some(next) => g = next,
                None => break,
            }
        }
    }
}

impl<T: Scalar> Module<T> for Backbone<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit_params(&join(prefix, &format!("stage{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_params_mut(&join(prefix, &format!("stage{i}")), f);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Vec<T>)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit_buffers(&join(prefix, &format!("stage{i}")), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_buffers_mut(&join(prefix, &format!("stage{i}")), f);
        }
    }
}

/// Parallel atrous branches plus an image-pooling branch, projected back to
/// `aspp_channels`.
#[derive(Debug, Clone)]
struct Aspp<T> {
    branches: Vec<ConvBnRelu<T>>,
    pool_conv: Conv2d<T>,
    pool_relu: Relu,
    project: ConvBnRelu<T>,
    in_hw: (usize, usize),
}

impl<T: Scalar> Aspp<T> {
    fn new(in_channels: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let out = cfg.aspp_channels;
        let branches = cfg
            .aspp_rates
            .iter()
            .map(|&r| {
                let spec = if r == 1 {
                    ConvSpec { in_channels, out_channels: out, kernel: 1, stride: 1, padding: 0, dilation: 1 }
                } else {
                    ConvSpec { in_channels, out_channels: out, kernel: 3, stride: 1, padding: r, dilation: r }
                };
                ConvBnRelu::new(spec, rng)
            })
            .collect();
        let pool_spec = ConvSpec { in_channels, out_channels: out, kernel: 1, stride: 1, padding: 0, dilation: 1 };
        let pool_conv = Conv2d::new(pool_spec, true, 1.0, rng);
        let proj_in = out * (cfg.aspp_rates.len() + 1);
        let project = ConvBnRelu::new(
            ConvSpec { in_channels: proj_in, out_channels: out, kernel: 1, stride: 1, padding: 0, dilation: 1 },
            rng,
        );
        Aspp { branches, pool_conv, pool_relu: Relu::default(), project, in_hw: (0, 0) }
    }

    fn forward(&mut self, x: &Tensor<T>, pass: Pass) -> Tensor<T> {
        let (h, w) = x.spatial();
        self.in_hw = (h, w);
        let mut outs: Vec<Tensor<T>> = self.branches.iter_mut().map(|b| b.forward(x, pass)).collect();
        let pooled = self.pool_conv.forward(&global_avg_pool(x), pass);
        let pooled = self.pool_relu.forward(pooled, pass);
        outs.push(broadcast_spatial(&pooled, h, w));
        let refs: Vec<&Tensor<T>> = outs.iter().collect();
        self.project.forward(&concat_channels(&refs), pass)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (h, w) = self.in_hw;
        let d = self.project.backward(dy, true).unwrap();
        let c = self.pool_conv.spec.out_channels;
        let parts = split_channels(&d, &vec![c; self.branches.len() + 1]);
        let mut dx: Option<Tensor<T>> = None;
        for (branch, g) in self.branches.iter_mut().zip(&parts) {
            let gx = branch.backward(g, true).unwrap();
            match dx.as_mut() {
                Some(acc) => acc.add_assign(&gx),
                None => dx = Some(gx),
            }
        }
        let gp = broadcast_spatial_backward(&parts[self.branches.len()]);
        let gp = self.pool_relu.backward(&gp);
        let gp = self.pool_conv.backward(&gp, true).unwrap();
        let mut dx = dx.unwrap();
        dx.add_assign(&global_avg_pool_backward(&gp, h, w));
        dx
    }
}

impl<T: Scalar> Module<T> for Aspp<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, b) in self.branches.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("branch{i}")), f);
        }
        self.pool_conv.visit_params(&join(prefix, "pool_conv"), f);
        self.project.visit_params(&join(prefix, "project"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("branch{i}")), f);
        }
        self.pool_conv.visit_params_mut(&join(prefix, "pool_conv"), f);
        self.project.visit_params_mut(&join(prefix, "project"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Vec<T>)) {
        for (i, b) in self.branches.iter().enumerate() {
            b.visit_buffers(&join(prefix, &format!("branch{i}")), f);
        }
        self.project.visit_buffers(&join(prefix, "project"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<T>)) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_buffers_mut(&join(prefix, &format!("branch{i}")), f);
        }
        self.project.visit_buffers_mut(&join(prefix, "project"), f);
    }
}

#[derive(Debug, Clone)]
struct Decoder<T> {
    low_proj: ConvBnRelu<T>,
    fuse: ConvBnRelu<T>,
    classifier: Conv2d<T>,
    high_hw: (usize, usize),
    low_hw: (usize, usize),
    out_hw: (usize, usize),
}

impl<T: Scalar> Decoder<T> {
    fn new(low_in: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let low_proj = ConvBnRelu::new(
            ConvSpec {
                in_channels: low_in,
                out_channels: cfg.low_level_channels,
                kernel: 1,
                stride: 1,
                padding: 0,
                dilation: 1,
            },
            rng,
        );
        let fuse = ConvBnRelu::new(
            ConvSpec {
                in_channels: cfg.aspp_channels + cfg.low_level_channels,
                out_channels: cfg.decoder_channels,
                kernel: 3,
                stride: 1,
                padding: 1,
                dilation: 1,
            },
            rng,
        );
        let classifier = Conv2d::new(
            ConvSpec {
                in_channels: cfg.decoder_channels,
                out_channels: cfg.num_classes,
                kernel: 1,
                stride: 1,
                padding: 0,
                dilation: 1,
            },
            true,
            0.5f64.sqrt(),
            rng,
        );
        Decoder { low_proj, fuse, classifier, high_hw: (0, 0), low_hw: (0, 0), out_hw: (0, 0) }
    }

    fn forward(&mut self, high: &Tensor<T>, low: &Tensor<T>, out_hw: (usize, usize), pass: Pass) -> Tensor<T> {
        self.high_hw = high.spatial();
        self.low_hw = low.spatial();
        self.out_hw = out_hw;
        let (lh, lw) = self.low_hw;
        let up = resize_bilinear(high, lh, lw);
        let lp = self.low_proj.forward(low, pass);
        let fused = self.fuse.forward(&concat_channels(&[&up, &lp]), pass);
        let logits = self.classifier.forward(&fused, pass);
        resize_bilinear(&logits, out_hw.0, out_hw.1)
    }

    /// Returns gradients for the ASPP output and the low-level features.
    fn backward(&mut self, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let (lh, lw) = self.low_hw;
        let d = resize_bilinear_backward(dy, lh, lw);
        let d = self.classifier.backward(&d, true).unwrap();
        let d = self.fuse.backward(&d, true).unwrap();
        let c_up = d.channels() - self.low_proj.conv.spec.out_channels;
        let parts = split_channels(&d, &[c_up, self.low_proj.conv.spec.out_channels]);
        let d_high = resize_bilinear_backward(&parts[0], self.high_hw.0, self.high_hw.1);
        let d_low = self.low_proj.backward(&parts[1], true).unwrap();
        (d_high, d_low)
    }
}

impl<T: Scalar> Module<T> for Decoder<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.low_proj.visit_params(&join(prefix, "low_proj"), f);
        self.fuse.visit_params(&join(prefix, "fuse"), f);
        self.classifier.visit_params(&join(prefix, "classifier"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.low_proj.visit_params_mut(&join(prefix, "low_proj"), f);
        self.fuse.visit_params_mut(&join(prefix, "fuse"), f);
        self.classifier.visit_params_mut(&join(prefix, "classifier"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Vec<T>)) {
        self.low_proj.visit_buffers(&join(prefix, "low_proj"), f);
        self.fuse.visit_buffers(&join(prefix, "fuse"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<T>)) {
        self.low_proj.visit_buffers_mut(&join(prefix, "low_proj"), f);
        self.fuse.visit_buffers_mut(&join(prefix, "fuse"), f);
    }
}

/// Two atrous conv-BN-ReLU blocks, flatten, three fully connected layers.
#[derive(Debug, Clone)]
struct Supervisor<T> {
    conv1: ConvBnRelu<T>,
    conv2: ConvBnRelu<T>,
    fc1: Linear<T>,
    relu1: Relu,
    fc2: Linear<T>,
    relu2: Relu,
    fc3: Linear<T>,
    conv_shape: [usize; 4],
}

impl<T: Scalar> Supervisor<T> {
    fn new(in_channels: usize, outputs: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let conv1 = ConvBnRelu::new(cfg.head_conv(in_channels), rng);
        let conv2 = ConvBnRelu::new(cfg.head_conv(cfg.supervisor.conv_channels), rng);
        let [w1, w2] = [cfg.supervisor.fc_widths[0], cfg.supervisor.fc_widths[1]];
        Supervisor {
            conv1,
            conv2,
            fc1: Linear::new(cfg.flatten_width(), w1, 1.0, rng),
            relu1: Relu::default(),
            fc2: Linear::new(w1, w2, 1.0, rng),
            relu2: Relu::default(),
            fc3: Linear::new(w2, outputs, 0.5f64.sqrt(), rng),
            conv_shape: [0; 4],
        }
    }

    fn forward(&mut self, x: &Tensor<T>, pass: Pass) -> Tensor<T> {
        let y = self.conv1.forward(x, pass);
        let y = self.conv2.forward(&y, pass);
        self.conv_shape = y.shape;
        let y = self.fc1.forward(&y.flatten(), pass);
        let y = self.relu1.forward(y, pass);
        let y = self.fc2.forward(&y, pass);
        let y = self.relu2.forward(y, pass);
        self.fc3.forward(&y, pass)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let d = self.fc3.backward(dy);
        let d = self.relu2.backward(&d);
        let d = self.fc2.backward(&d);
        let d = self.relu1.backward(&d);
        let d = self.fc1.backward(&d).reshape(self.conv_shape);
        let d = self.conv2.backward(&d, true).unwrap();
        self.conv1.backward(&d, true).unwrap()
    }
}

impl<T: Scalar> Module<T> for Supervisor<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
        self.fc3.visit_params(&join(prefix, "fc3"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_params_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_params_mut(&join(prefix, "conv2"), f);
        self.fc1.visit_params_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_params_mut(&join(prefix, "fc2"), f);
        self.fc3.visit_params_mut(&join(prefix, "fc3"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Vec<T>)) {
        self.conv1.visit_buffers(&join(prefix, "conv1"), f);
        self.conv2.visit_buffers(&join(prefix, "conv2"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<T>)) {
        self.conv1.visit_buffers_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_buffers_mut(&join(prefix, "conv2"), f);
    }
}

/// The full network. `T = f32` for training; `f64` builds are used for
/// finite-difference checks and start from the same initial values.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    backbone: Backbone<T>,
    aspp: Aspp<T>,
    decoder: Decoder<T>,
    was: Supervisor<T>,
    tas: Supervisor<T>,
}

/// Builds a model with seeded initialization. Each partition draws from its
/// own random stream, so head configuration never perturbs the backbone.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>, ConfigError> {
    config.validate()?;
    let stream = |k: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k);
        rng
    };
    let mut rng = stream(1);
    let mut stages = Vec::new();
    let mut in_ch = 3;
    for &s in &config.backbone {
        stages.push(ResidualStage::new(in_ch, s, &mut rng));
        in_ch = s.channels;
    }
    let low_ch = config.backbone[config.low_level_stage].channels;
    let aspp = Aspp::new(in_ch, config, &mut stream(2));
    let decoder = Decoder::new(low_ch, config, &mut stream(3));
    let was = Supervisor::new(in_ch, config.supervisor.num_weather, config, &mut stream(4));
    let tas = Supervisor::new(in_ch, config.supervisor.num_time, config, &mut stream(5));
    Ok(Model {
        config: config.clone(),
        backbone: Backbone { stages, low_level_stage: config.low_level_stage },
        aspp,
        decoder,
        was,
        tas,
    })
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn forward(
        &mut self,
        images: &Tensor<T>,
        heads: impl Into<Heads>,
        pass: Pass,
    ) -> Result<ForwardOutputs<T>, ModelError> {
        let heads = heads.into();
        let [h, w] = self.config.input_resolution;
        let expected = [images.batch(), 3, h, w];
        if images.shape != expected || images.batch() == 0 {
            return Err(ModelError::Shape { expected, got: images.shape });
        }
        let (high, low) = self.backbone.forward(images, pass);
        let enc = self.aspp.forward(&high, pass);
        let seg_logits = self.decoder.forward(&enc, &low, (h, w), pass);
        let weather_logits = heads
            .weather
            .then(|| self.was.forward(&high, pass).reshape([images.batch(), self.config.supervisor.num_weather, 1, 1]));
        let time_logits = heads
            .time
            .then(|| self.tas.forward(&high, pass).reshape([images.batch(), self.config.supervisor.num_time, 1, 1]));
        Ok(ForwardOutputs { seg_logits, weather_logits, time_logits, dcnn_features: high })
    }

    /// Pushes a segmentation-logit gradient through decoder and ASPP,
    /// accumulating their parameter gradients. Returns the gradient at the
    /// DCNN outputs without touching DCNN parameters.
    pub fn backward_segmentation(&mut self, d_seg: &Tensor<T>) -> DcnnGrad<T> {
        let (d_enc, d_low) = self.decoder.backward(d_seg);
        let d_high = self.aspp.backward(&d_enc);
        DcnnGrad { high: d_high, low: d_low }
    }

    /// Pushes a supervisor-logit gradient through one head, accumulating its
    /// parameter gradients. Returns the gradient at the DCNN output.
    pub fn backward_supervisor(&mut self, head: Head, d_logits: &Tensor<T>) -> Tensor<T> {
        match head {
            Head::Weather => self.was.backward(d_logits),
            Head::Time => self.tas.backward(d_logits),
        }
    }

    /// Accumulates DCNN parameter gradients from gradients at its outputs.
    pub fn backward_dcnn(&mut self, grad: &DcnnGrad<T>) {
        self.backbone.backward(grad);
    }

    /// Zero tensors shaped like the DCNN outputs for a batch of `n`.
    pub fn zero_dcnn_grad(&self, n: usize) -> DcnnGrad<T> {
        let (h, w) = self.config.feature_size();
        let (lh, lw) = self.config.low_level_size();
        let c = self.config.backbone.last().unwrap().channels;
        let lc = self.config.backbone[self.config.low_level_stage].channels;
        DcnnGrad { high: Tensor::zeros([n, c, h, w]), low: Tensor::zeros([n, lc, lh, lw]) }
    }

    /// Visits the parameters of one partition.
    pub fn visit_partition(&self, partition: Partition, f: &mut dyn FnMut(&str, &Param<T>)) {
        let prefix = partition.prefix();
        match partition {
            Partition::Dcnn => self.backbone.visit_params(prefix, f),
            Partition::EncoderRest => self.aspp.visit_params(prefix, f),
            Partition::Decoder => self.decoder.visit_params(prefix, f),
            Partition::WasHead => self.was.visit_params(prefix, f),
            Partition::TasHead => self.tas.visit_params(prefix, f),
        }
    }

    pub fn visit_partition_mut(&mut self, partition: Partition, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        let prefix = partition.prefix();
        match partition {
            Partition::Dcnn => self.backbone.visit_params_mut(prefix, f),
            Partition::EncoderRest => self.aspp.visit_params_mut(prefix, f),
            Partition::Decoder => self.decoder.visit_params_mut(prefix, f),
            Partition::WasHead => self.was.visit_params_mut(prefix, f),
            Partition::TasHead => self.tas.visit_params_mut(prefix, f),
        }
    }

    /// `(path, values)` of every parameter in a partition.
    pub fn parameters_of(&self, partition: Partition) -> Vec<(String, Vec<T>)> {
        let mut out = Vec::new();
        self.visit_partition(partition, &mut |path, p| out.push((path.to_string(), p.value.clone())));
        out
    }

    /// Same as [`Model::parameters_of`] with a textual label.
    pub fn parameters_named(&self, label: &str) -> Result<Vec<(String, Vec<T>)>, ModelError> {
        Ok(self.parameters_of(label.parse()?))
    }

    pub fn partition_size(&self, partition: Partition) -> usize {
        let mut n = 0;
        self.visit_partition(partition, &mut |_, p| n += p.len());
        n
    }

    /// Stable hash of a partition's parameter bits.
    pub fn partition_hash(&self, partition: Partition) -> u64 {
        use std::hash::{DefaultHasher, Hash, Hasher};
        let mut h = DefaultHasher::new();
        self.visit_partition(partition, &mut |path, p| {
            path.hash(&mut h);
            for v in &p.value {
                v.to_f64().unwrap().to_bits().hash(&mut h);
            }
        });
        h.finish()
    }

    /// Batch-norm running statistics keyed by path.
    pub fn buffers(&self) -> BTreeMap<String, Vec<T>> {
        let mut out = BTreeMap::new();
        let mut f = |path: &str, b: &Vec<T>| {
            out.insert(path.to_string(), b.clone());
        };
        self.backbone.visit_buffers("dcnn", &mut f);
        self.aspp.visit_buffers("aspp", &mut f);
        self.decoder.visit_buffers("decoder", &mut f);
        self.was.visit_buffers("was", &mut f);
        self.tas.visit_buffers("tas", &mut f);
        out
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<T>)) {
        self.backbone.visit_buffers_mut("dcnn", f);
        self.aspp.visit_buffers_mut("aspp", f);
        self.decoder.visit_buffers_mut("decoder", f);
        self.was.visit_buffers_mut("was", f);
        self.tas.visit_buffers_mut("tas", f);
    }

    pub fn num_params(&self) -> usize {
        Partition::ALL.iter().map(|&p| self.partition_size(p)).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in Partition::ALL {
            self.visit_partition_mut(p, &mut |_, param| param.zero_grad());
        }
    }

    /// Per-pixel argmax masks (row-major `H×W` each) in inference mode.
    pub fn predict(&mut self, images: &Tensor<T>) -> Result<Vec<Vec<u8>>, ModelError> {
        let out = self.forward(images, Heads::NONE, Pass::Infer)?;
        Ok(argmax_masks(&out.seg_logits))
    }
}

/// Per-pixel argmax over the class axis; ties resolve to the lower index.
pub fn argmax_masks<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<u8>> {
    let [n, c, h, w] = logits.shape;
    let hw = h * w;
    (0..n)
        .map(|b| {
            let item = logits.item(b);
            (0..hw)
                .map(|i| {
                    let mut best = 0;
                    for k in 1..c {
                        if item[k * hw + i] > item[best * hw + i] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}

/// Stacks sample images into a `B×3×H×W` tensor.
pub fn images_to_tensor<T: Scalar>(samples: &[&LabeledSample]) -> Tensor<T> {
    let (h, w) = samples.first().map_or((0, 0), |s| (s.image.height, s.image.width));
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        assert_eq!((s.image.height, s.image.width), (h, w), "batch images differ in size");
        for ch in 0..3 {
            data.extend(s.image.data[ch..].iter().step_by(3).map(|&v| T::from_f64_lossy(v as f64)));
        }
    }
    Tensor::from_vec([samples.len(), 3, h, w], data)
}

const CHECKPOINT_FORMAT: &str = "advseg-checkpoint/1";

mod f32_base64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn encode(values: &[f32]) -> String {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        STANDARD.encode(bytes)
    }

    pub fn decode(text: &str) -> Result<Vec<f32>, String> {
        let bytes = STANDARD.decode(text).map_err(|e| e.to_string())?;
        if bytes.len() % 4 != 0 {
            return Err("tensor byte length not a multiple of 4".into());
        }
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    pub mod map {
        use super::*;
        use std::collections::BTreeMap;

        pub fn serialize<S: Serializer>(m: &BTreeMap<String, Vec<f32>>, s: S) -> Result<S::Ok, S::Error> {
            s.collect_map(m.iter().map(|(k, v)| (k, encode(v))))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, Vec<f32>>, D::Error> {
            let raw = BTreeMap::<String, String>::deserialize(d)?;
            raw.into_iter().map(|(k, v)| decode(&v).map(|t| (k, t)).map_err(serde::de::Error::custom)).collect()
        }
    }
}

/// One tensor map per partition.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PartitionTensors(#[serde(with = "f32_base64::map")] pub BTreeMap<String, Vec<f32>>);

/// Single-file training snapshot: model config, parameters keyed by
/// partition and layer path (little-endian f32, base64), batch-norm buffers,
/// optimizer momentum, iteration counter and opaque trainer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub iteration: u64,
    pub params: BTreeMap<Partition, PartitionTensors>,
    #[serde(with = "f32_base64::map")]
    pub buffers: BTreeMap<String, Vec<f32>>,
    #[serde(with = "f32_base64::map", default)]
    pub momentum: BTreeMap<String, Vec<f32>>,
    #[serde(default)]
    pub train_state: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let text = serde_json::to_string(self).map_err(|e| ModelError::CheckpointFormat(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, text)
            .and_then(|_| std::fs::rename(&tmp, path))
            .map_err(|source| ModelError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| ModelError::CheckpointFormat(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(ModelError::CheckpointFormat(format!("unsupported format tag {:?}", ckpt.format)));
        }
        Ok(ckpt)
    }
}

impl Model<f32> {
    pub fn to_checkpoint(&self, iteration: u64) -> Checkpoint {
        let params = Partition::ALL
            .into_iter()
            .map(|p| (p, PartitionTensors(self.parameters_of(p).into_iter().collect())))
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            iteration,
            params,
            buffers: self.buffers(),
            momentum: BTreeMap::new(),
            train_state: None,
        }
    }

    /// Rebuilds a model from a checkpoint's own config.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let mut model = build_model(&ckpt.config, 0)?;
        model.load_checkpoint(ckpt)?;
        Ok(model)
    }

    /// Overwrites parameters and buffers. The checkpoint config must equal
    /// this model's config and every tensor must be present with the right size.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<(), ModelError> {
        if ckpt.config != self.config {
            let detail = if ckpt.config.input_resolution != self.config.input_resolution {
                format!("input resolution {:?} vs {:?}", ckpt.config.input_resolution, self.config.input_resolution)
            } else {
                "model configs differ".to_string()
            };
            return Err(ModelError::CheckpointMismatch(detail));
        }
        let mut missing = None;
        for p in Partition::ALL {
            let empty = PartitionTensors::default();
            let stored = ckpt.params.get(&p).unwrap_or(&empty);
            self.visit_partition_mut(p, &mut |path, param| match stored.0.get(path) {
                Some(v) if v.len() == param.len() => param.value.copy_from_slice(v),
                _ => missing = missing.take().or(Some(path.to_string())),
            });
        }
        self.visit_buffers_mut(&mut |path, buf| match ckpt.buffers.get(path) {
            Some(v) if v.len() == buf.len() => buf.copy_from_slice(v),
            _ => missing = missing.take().or(Some(path.to_string())),
        });
        match missing {
            Some(path) => Err(ModelError::CheckpointMismatch(format!("tensor {path} missing or mis-sized"))),
            None => Ok(()),
        }
    }
}
