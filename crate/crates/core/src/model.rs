//! The two-branch pose network.
//!
//! ```text
//! image -> backbone -> global average pool (C) -+-> position head  (C -> 3)
//!                                               +-> orientation head (C -> 4 | n^3)
//! ```
//!
//! Each head is a single affine layer. The pooling bottleneck makes head
//! sizes independent of the input resolution.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    global_average_pool, global_average_pool_backward, ActivationKind, Block, Linear, Module,
    Slot, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Four stride-2 conv blocks (16, 32, 64, 128 channels) for desk-scale runs.
    Tiny,
    /// MobileNet-v2, width multiplier 1.0.
    MobilenetV2,
}

impl Backbone {
    pub fn feature_channels(self) -> usize {
        match self {
            Backbone::Tiny => 128,
            Backbone::MobilenetV2 => 1280,
        }
    }

    /// Required divisor of the input width and height. Half the total
    /// stride, so that 192x120 and 384x240 inputs are accepted.
    pub fn input_multiple(self) -> usize {
        match self {
            Backbone::Tiny => 8,
            Backbone::MobilenetV2 => 16,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Backbone::Tiny => "tiny",
            Backbone::MobilenetV2 => "mobilenet_v2",
        }
    }
}

impl std::str::FromStr for Backbone {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Backbone::Tiny),
            "mobilenet_v2" | "mobilenetv2" => Ok(Backbone::MobilenetV2),
            _ => Err(Error::InvalidConfig(format!(
                "unknown backbone {s:?} (expected tiny or mobilenet_v2)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum HeadMode {
    /// Direct quaternion regression (4 outputs).
    Regression,
    /// Logits over an `n^3` Euler grid.
    Softclass { bins: usize },
}

impl HeadMode {
    pub fn output_dim(self) -> usize {
        match self {
            HeadMode::Regression => 4,
            HeadMode::Softclass { bins } => bins * bins * bins,
        }
    }
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadMode::Regression => write!(f, "regression"),
            HeadMode::Softclass { bins } => write!(f, "softclass({bins})"),
        }
    }
}

/// Which output branch a parameter count refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Position,
    Orientation(HeadMode),
}

/// Parameters of one single-layer branch on `c` pooled features.
pub fn head_param_count(c: usize, head: Head) -> usize {
    let outputs = match head {
        Head::Position => 3,
        Head::Orientation(mode) => mode.output_dim(),
    };
    outputs * (c + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub head_mode: HeadMode,
    pub input_width: usize,
    pub input_height: usize,
    /// Image channels the backbone expects (1 grayscale or 3 replicated).
    pub input_channels: usize,
    /// Append normalized pixel-coordinate planes to the input.
    pub coord_channels: bool,
    pub pretrained_backbone: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Tiny backbone on 192x120 grayscale images.
    pub fn desk(head_mode: HeadMode) -> Self {
        Self {
            backbone: Backbone::Tiny,
            head_mode,
            input_width: 192,
            input_height: 120,
            input_channels: 1,
            coord_channels: true,
            pretrained_backbone: false,
            seed: 0,
        }
    }

    /// MobileNet-v2 on 384x240 three-channel images.
    pub fn mobilenet(head_mode: HeadMode) -> Self {
        Self {
            backbone: Backbone::MobilenetV2,
            head_mode,
            input_width: 384,
            input_height: 240,
            input_channels: 3,
            coord_channels: false,
            pretrained_backbone: false,
            seed: 0,
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone.feature_channels()
    }

    /// Channels entering the first convolution.
    pub fn stem_channels(&self) -> usize {
        self.input_channels + if self.coord_channels { 2 } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.backbone.input_multiple();
        if self.input_width == 0
            || self.input_height == 0
            || self.input_width % m != 0
            || self.input_height % m != 0
        {
            return Err(Error::InvalidConfig(format!(
                "input {}x{} must be a positive multiple of {m} for the {} backbone",
                self.input_width,
                self.input_height,
                self.backbone.name()
            )));
        }
        if !matches!(self.input_channels, 1 | 3) {
            return Err(Error::InvalidConfig(format!(
                "input_channels must be 1 or 3, got {}",
                self.input_channels
            )));
        }
        if let HeadMode::Softclass { bins } = self.head_mode {
            if !(2..=64).contains(&bins) {
                return Err(Error::InvalidConfig(format!(
                    "bins per dimension must be in [2, 64], got {bins}"
                )));
            }
        }
        Ok(())
    }
}

/// Raw network outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    pub batch: usize,
    /// `[batch, 3]`, meters.
    pub positions: Vec<f32>,
    /// `[batch, orientation_dim]`: an unnormalized quaternion or logits.
    pub orientation: Vec<f32>,
    pub orientation_dim: usize,
}

impl NetOutput {
    pub fn position(&self, i: usize) -> [f64; 3] {
        let p = &self.positions[i * 3..i * 3 + 3];
        [p[0] as f64, p[1] as f64, p[2] as f64]
    }

    pub fn orientation_row(&self, i: usize) -> &[f32] {
        &self.orientation[i * self.orientation_dim..(i + 1) * self.orientation_dim]
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    config: ModelConfig,
    blocks: Vec<Block>,
    position_head: Linear,
    orientation_head: Linear,
    feature_shape: Option<[usize; 4]>,
}

fn tiny_backbone(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Block>> {
    let mut blocks = Vec::with_capacity(4);
    let mut c_in = cfg.stem_channels();
    for c_out in [16, 32, 64, 128] {
        let layers = Block::conv_bn_act(c_in, c_out, 3, 2, 1, Some(ActivationKind::Relu), rng)?;
        blocks.push(Block::new(layers, false));
        c_in = c_out;
    }
    Ok(blocks)
}

fn mobilenet_v2_backbone(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Block>> {
    const RELU6: Option<ActivationKind> = Some(ActivationKind::Relu6);
    // (expansion, out channels, repeats, first stride)
    const SETTINGS: [(usize, usize, usize, usize); 7] = [
        (1, 16, 1, 1),
        (6, 24, 2, 2),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ];
    let mut blocks = vec![Block::new(
        Block::conv_bn_act(cfg.stem_channels(), 32, 3, 2, 1, RELU6, rng)?,
        false,
    )];
    let mut c_in = 32;
    for (t, c, n, s) in SETTINGS {
        for i in 0..n {
            let stride = if i == 0 { s } else { 1 };
            let hidden = c_in * t;
            let mut layers = Vec::new();
            if t != 1 {
                layers.extend(Block::conv_bn_act(c_in, hidden, 1, 1, 1, RELU6, rng)?);
            }
            layers.extend(Block::conv_bn_act(hidden, hidden, 3, stride, hidden, RELU6, rng)?);
            layers.extend(Block::conv_bn_act(hidden, c, 1, 1, 1, None, rng)?);
            blocks.push(Block::new(layers, stride == 1 && c_in == c));
            c_in = c;
        }
    }
    blocks.push(Block::new(Block::conv_bn_act(c_in, 1280, 1, 1, 1, RELU6, rng)?, false));
    Ok(blocks)
}

impl Network {
    /// Builds and seeds a network. Pretrained weights are loaded separately
    /// with [`Network::load_backbone_from`].
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let blocks = match config.backbone {
            Backbone::Tiny => tiny_backbone(&config, &mut rng)?,
            Backbone::MobilenetV2 => mobilenet_v2_backbone(&config, &mut rng)?,
        };
        let c = config.feature_channels();
        let position_head = Linear::new(c, 3, &mut rng);
        let orientation_head = Linear::new(c, config.head_mode.output_dim(), &mut rng);
        Ok(Self {
            config,
            blocks,
            position_head,
            orientation_head,
            feature_shape: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone_param_count(&self) -> usize {
        self.blocks.iter().map(Module::param_count).sum()
    }

    pub fn position_head_param_count(&self) -> usize {
        self.position_head.param_count()
    }

    pub fn orientation_head_param_count(&self) -> usize {
        self.orientation_head.param_count()
    }

    /// Exact number of trainable parameters.
    pub fn count_parameters(&self) -> usize {
        self.backbone_param_count()
            + self.position_head_param_count()
            + self.orientation_head_param_count()
    }

    /// Validates image shape and adds replicated / coordinate channels.
    fn prepare_input(&self, images: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = images.shape;
        let cfg = &self.config;
        if h != cfg.input_height || w != cfg.input_width || !(c == 1 || c == cfg.input_channels) {
            return Err(Error::shape(
                format!("[N, 1|{}, {}, {}]", cfg.input_channels, cfg.input_height, cfg.input_width),
                format!("{:?}", images.shape),
            ));
        }
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        if c == cfg.input_channels && !cfg.coord_channels {
            return Ok(images.clone());
        }
        let stem = cfg.stem_channels();
        let hw = h * w;
        let mut out = Tensor::zeros([n, stem, h, w]);
        for i in 0..n {
            let src = images.item(i);
            let dst = &mut out.data[i * stem * hw..(i + 1) * stem * hw];
            for ch in 0..cfg.input_channels {
                let from = if c == 1 { 0 } else { ch };
                dst[ch * hw..(ch + 1) * hw].copy_from_slice(&src[from * hw..(from + 1) * hw]);
            }
            if cfg.coord_channels {
                let base = cfg.input_channels * hw;
                for y in 0..h {
                    let yn = 2.0 * (y as f32 + 0.5) / h as f32 - 1.0;
                    for x in 0..w {
                        let xn = 2.0 * (x as f32 + 0.5) / w as f32 - 1.0;
                        dst[base + y * w + x] = xn;
                        dst[base + hw + y * w + x] = yn;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Pooled backbone features, `[batch, C]`.
    pub fn features(&mut self, images: &Tensor, train: bool) -> Result<Vec<f32>> {
        let mut x = self.prepare_input(images)?;
        for b in &mut self.blocks {
            x = b.forward(&x, train)?;
        }
        self.feature_shape = Some(x.shape);
        Ok(global_average_pool(&x))
    }

    pub fn forward(&mut self, images: &Tensor, train: bool) -> Result<NetOutput> {
        let batch = images.batch();
        let feats = self.features(images, train)?;
        let positions = self.position_head.forward(&feats, batch, train)?;
        let orientation = self.orientation_head.forward(&feats, batch, train)?;
        Ok(NetOutput {
            batch,
            positions,
            orientation,
            orientation_dim: self.orientation_head.out_features,
        })
    }

    /// Backpropagates output gradients from the last training forward pass.
    pub fn backward(&mut self, d_positions: &[f32], d_orientation: &[f32]) -> Result<()> {
        let shape = self
            .feature_shape
            .ok_or_else(|| Error::InvalidConfig("backward before forward".into()))?;
        let mut d_feat = self.position_head.backward(d_positions)?;
        let d2 = self.orientation_head.backward(d_orientation)?;
        d_feat.iter_mut().zip(d2).for_each(|(a, b)| *a += b);
        let mut g = global_average_pool_backward(&d_feat, shape);
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        Ok(())
    }

    /// Visits every parameter and buffer with a stable name.
    pub fn visit(&mut self, f: &mut dyn FnMut(&str, Slot<'_>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&format!("backbone.{i}"), f);
        }
        self.position_head.visit("position_head", f);
        self.orientation_head.visit("orientation_head", f);
    }

    pub fn zero_grad(&mut self) {
        self.visit(&mut |_, s| {
            if let Slot::Param(p) = s {
                p.zero_grad();
            }
        });
    }

    /// Named copies of all parameters and buffers.
    pub fn state(&mut self) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, s| {
            let v = match s {
                Slot::Param(p) => p.value.clone(),
                Slot::Buffer(b) => b.clone(),
            };
            out.push((name.to_string(), v));
        });
        out
    }

    /// Restores tensors by name; every tensor of the network must be present.
    pub fn load_state(&mut self, state: &[(String, Vec<f32>)]) -> Result<()> {
        self.load_matching(state, |_| true)
    }

    /// Copies backbone tensors from another network of the same backbone.
    pub fn load_backbone_from(&mut self, other: &mut Network) -> Result<()> {
        if other.config.backbone != self.config.backbone
            || other.config.stem_channels() != self.config.stem_channels()
        {
            return Err(Error::ConfigMismatch(
                "pretrained backbone has a different architecture".into(),
            ));
        }
        let state = other.state();
        self.load_matching(&state, |name| name.starts_with("backbone."))
    }

    fn load_matching(
        &mut self,
        state: &[(String, Vec<f32>)],
        select: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &Vec<f32>> =
            state.iter().map(|(k, v)| (k.as_str(), v)).collect();
        let mut problem = None;
        self.visit(&mut |name, slot| {
            if problem.is_some() || !select(name) {
                return;
            }
            let Some(src) = lookup.get(name) else {
                problem = Some(format!("tensor {name} missing from state"));
                return;
            };
            let dst = match slot {
                Slot::Param(p) => &mut p.value,
                Slot::Buffer(b) => b,
            };
            if dst.len() != src.len() {
                problem = Some(format!("tensor {name}: expected {} values, got {}", dst.len(), src.len()));
                return;
            }
            dst.copy_from_slice(src);
        });
        match problem {
            Some(msg) => Err(Error::ConfigMismatch(msg)),
            None => Ok(()),
        }
    }

    /// Zeroes both heads (weights and biases).
    pub fn zero_heads(&mut self) {
        for head in [&mut self.position_head, &mut self.orientation_head] {
            head.weight.value.iter_mut().for_each(|v| *v = 0.0);
            head.bias.value.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn position_head_mut(&mut self) -> &mut Linear {
        &mut self.position_head
    }
}

/// Builds the network described by `cfg`.
pub fn build_model(cfg: &ModelConfig) -> Result<Network> {
    Network::new(cfg.clone())
}

pub fn count_parameters(net: &Network) -> usize {
    net.count_parameters()
}
