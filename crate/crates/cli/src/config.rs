//! Flat key/value run configuration.
//!
//! A config file is a TOML document of top-level keys. The same keys are
//! command-line flags (`batch_size` <-> `--batch-size`); flags win over the
//! file, the file wins over `POSEKIT_SEED` and built-in defaults. Every run
//! writes the resolved keys to `resolved_config.toml` next to its outputs,
//! and that file can be passed back with `--config`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use clap::Args;
use posekit::codec::DEFAULT_DELTA;
use posekit::data::{Background, Domain, DomainParams, GenerateConfig, JitterParams};
use posekit::geometry::CameraIntrinsics;
use posekit::losses::LossWeights;
use posekit::model::{Backbone, HeadMode};
use posekit::training::{LrStage, Profile, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::CliError;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const SEED_ENV: &str = "POSEKIT_SEED";

/// Parsed from and written as a string: `"192x120"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Size {
    pub width: usize,
    pub height: usize,
}

impl FromStr for Size {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
        let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
        Ok(Self {
            width: p(w)?,
            height: p(h)?,
        })
    }
}

impl fmt::Display for Size {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// `"lo,hi"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range2(pub [f64; 2]);

impl FromStr for Range2 {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s.split_once(',').ok_or_else(|| format!("expected LO,HI, got {s:?}"))?;
        let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
        Ok(Self([p(a)?, p(b)?]))
    }
}

impl fmt::Display for Range2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.0[0], self.0[1])
    }
}

/// `"15:0.01,8:0.001"`: epochs and learning rate per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule(pub Vec<LrStage>);

impl FromStr for Schedule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|stage| {
                let (e, lr) = stage
                    .split_once(':')
                    .ok_or_else(|| format!("expected EPOCHS:LR stages, got {stage:?}"))?;
                Ok(LrStage {
                    epochs: e.trim().parse().map_err(|err| format!("{stage:?}: {err}"))?,
                    lr: lr.trim().parse().map_err(|err| format!("{stage:?}: {err}"))?,
                })
            })
            .collect::<Result<_, String>>()
            .map(Schedule)
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|s| format!("{}:{}", s.epochs, s.lr)).collect();
        f.write_str(&parts.join(","))
    }
}

macro_rules! string_serde {
    ($($t:ty),*) => {$(
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }
        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
            }
        }
    )*};
}
string_serde!(Size, Range2, Schedule);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Regression,
    Softclass,
}

/// Keys read by `generate`.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateKeys {
    /// Number of images [default: 100]
    #[arg(long)]
    pub n: Option<usize>,
    /// Global seed [default: $POSEKIT_SEED or 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Rendering domain: synthetic or pseudo_real [default: synthetic]
    #[arg(long)]
    pub domain: Option<String>,
    /// Target distance range in meters, LO,HI [default: 3,20]
    #[arg(long)]
    pub distance_range: Option<Range2>,
    /// Image size WIDTHxHEIGHT; focal length scales with width [default: 192x120]
    #[arg(long)]
    pub image_size: Option<Size>,
    /// black, gradient or blobs [default: per domain]
    #[arg(long)]
    pub background: Option<String>,
    /// Sensor noise standard deviation [default: per domain]
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Edge gain range LO,HI [default: per domain]
    #[arg(long)]
    pub brightness_range: Option<Range2>,
    /// Blur sigma range in pixels LO,HI [default: per domain]
    #[arg(long)]
    pub blur_sigma_range: Option<Range2>,
    /// Maximum light direction tilt in radians [default: per domain]
    #[arg(long)]
    pub light_jitter: Option<f64>,
    /// Line width in pixels [default: 1.5]
    #[arg(long)]
    pub line_width: Option<f64>,
}

/// Keys read by `train`.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainKeys {
    /// desk or paper [default: desk]
    #[arg(long)]
    pub profile: Option<String>,
    /// Global seed for init, shuffling, split and augmentation [default: $POSEKIT_SEED or 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// tiny or mobilenet_v2 [default: per profile]
    #[arg(long)]
    pub backbone: Option<String>,
    /// Orientation head [default: softclass]
    #[arg(long, value_enum)]
    pub head: Option<HeadKind>,
    /// Bins per Euler dimension of the softclass head [default: 12]
    #[arg(long)]
    pub bins: Option<usize>,
    /// Network input WIDTHxHEIGHT [default: per profile]
    #[arg(long)]
    pub input_size: Option<Size>,
    /// 1 (grayscale) or 3 [default: per profile]
    #[arg(long)]
    pub input_channels: Option<usize>,
    /// Append pixel-coordinate planes to the input [default: per profile]
    #[arg(long)]
    pub coord_channels: Option<bool>,
    /// Learning-rate stages EPOCHS:LR,... [default: per profile]
    #[arg(long)]
    pub schedule: Option<Schedule>,
    /// Truncate the schedule, or extend its last stage, to this many epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 0.9]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Orientation loss weight [default: 1]
    #[arg(long)]
    pub lambda_ori: Option<f64>,
    /// Dot-product clamp of the regression loss [default: 1e-7]
    #[arg(long)]
    pub epsilon_clamp: Option<f64>,
    /// Divide the regression orientation loss by the target distance [default: false]
    #[arg(long)]
    pub distance_weighted: Option<bool>,
    /// Gaussian width of the soft labels, in bins [default: 3]
    #[arg(long)]
    pub delta: Option<f64>,
    /// Enable training augmentation [default: true]
    #[arg(long)]
    pub augment: Option<bool>,
    /// [default: 0.5]
    #[arg(long)]
    pub roll_probability: Option<f64>,
    /// [default: 25]
    #[arg(long)]
    pub roll_max_deg: Option<f64>,
    /// Relative brightness jitter [default: 0.2]
    #[arg(long)]
    pub brightness: Option<f64>,
    /// [default: 0.2]
    #[arg(long)]
    pub contrast: Option<f64>,
    /// [default: 0.2]
    #[arg(long)]
    pub saturation: Option<f64>,
    /// [default: 0.05]
    #[arg(long)]
    pub hue: Option<f64>,
    /// [default: 1.5]
    #[arg(long)]
    pub blur_sigma_max: Option<f64>,
    /// Validation share when no --val-data is given [default: 0.15]
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Use only the first N training images
    #[arg(long)]
    pub max_train_images: Option<usize>,
}

fn key_names<T: Serialize + Default>() -> Vec<String> {
    match serde_json::to_value(T::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

/// Reads a config file, rejecting keys unknown to every command.
pub fn read_file(path: &Path) -> Result<toml::Table, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table = toml::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    let mut known = key_names::<GenerateKeys>();
    known.extend(key_names::<TrainKeys>());
    for k in table.keys() {
        if !known.contains(k) {
            return Err(CliError::Usage(format!("config {}: unknown key `{k}`", path.display())));
        }
    }
    Ok(table)
}

/// `flags` over the file keys that `T` understands.
pub fn merge<T>(flags: &T, file: Option<&toml::Table>) -> Result<T, CliError>
where
    T: Serialize + DeserializeOwned + Default,
{
    let names = key_names::<T>();
    let mut out = Map::new();
    if let Some(table) = file {
        for (k, v) in table {
            if names.contains(k) {
                let v = serde_json::to_value(v).map_err(|e| CliError::Usage(e.to_string()))?;
                out.insert(k.clone(), v);
            }
        }
    }
    if let Value::Object(m) = serde_json::to_value(flags).map_err(|e| CliError::Usage(e.to_string()))? {
        for (k, v) in m {
            if !v.is_null() {
                out.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(out)).map_err(|e| CliError::Usage(format!("config: {e}")))
}

pub fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|e| CliError::Usage(format!("{SEED_ENV}={v:?}: {e}"))),
        Err(_) => Ok(None),
    }
}

fn parse<T: FromStr<Err = posekit::Error>>(s: &str) -> Result<T, CliError> {
    s.parse().map_err(|e: posekit::Error| CliError::Usage(e.to_string()))
}

fn parse_background(s: &str) -> Result<Background, CliError> {
    match s {
        "black" => Ok(Background::Black),
        "gradient" => Ok(Background::Gradient),
        "blobs" => Ok(Background::Blobs),
        _ => Err(CliError::Usage(format!(
            "unknown background {s:?}; valid backgrounds: black, gradient, blobs"
        ))),
    }
}

fn background_name(b: Background) -> &'static str {
    match b {
        Background::Black => "black",
        Background::Gradient => "gradient",
        Background::Blobs => "blobs",
    }
}

impl GenerateKeys {
    /// Fills defaults; returns the config and the fully populated keys.
    pub fn resolve(&self, seed_fallback: Option<u64>) -> Result<(GenerateConfig, GenerateKeys), CliError> {
        let domain: Domain = parse(self.domain.as_deref().unwrap_or("synthetic"))?;
        let seed = self.seed.or(seed_fallback).unwrap_or(0);
        let mut cfg = GenerateConfig::new(self.n.unwrap_or(100), seed, domain);
        let mut params = DomainParams::for_domain(domain);
        if let Some(b) = &self.background {
            params.background = parse_background(b)?;
        }
        params.noise_sigma = self.noise_sigma.unwrap_or(params.noise_sigma);
        params.brightness_range = self.brightness_range.map_or(params.brightness_range, |r| r.0);
        params.blur_sigma_range = self.blur_sigma_range.map_or(params.blur_sigma_range, |r| r.0);
        params.light_jitter = self.light_jitter.unwrap_or(params.light_jitter);
        params.line_width = self.line_width.unwrap_or(params.line_width);
        cfg.domain = params;
        if let Some(r) = self.distance_range {
            cfg.distance_range = r.0;
        }
        if let Some(s) = self.image_size {
            if s.width == 0 || s.height == 0 {
                return Err(CliError::Usage(format!("image size {s} must be positive")));
            }
            cfg.intrinsics = CameraIntrinsics::with_size(s.width as u32, s.height as u32);
        }
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let p = &cfg.domain;
        let keys = GenerateKeys {
            n: Some(cfg.n_images),
            seed: Some(cfg.seed),
            domain: Some(p.domain.name().into()),
            distance_range: Some(Range2(cfg.distance_range)),
            image_size: Some(Size {
                width: cfg.intrinsics.width as usize,
                height: cfg.intrinsics.height as usize,
            }),
            background: Some(background_name(p.background).into()),
            noise_sigma: Some(p.noise_sigma),
            brightness_range: Some(Range2(p.brightness_range)),
            blur_sigma_range: Some(Range2(p.blur_sigma_range)),
            light_jitter: Some(p.light_jitter),
            line_width: Some(p.line_width),
        };
        Ok((cfg, keys))
    }
}

impl TrainKeys {
    pub fn resolve(&self, seed_fallback: Option<u64>) -> Result<(TrainConfig, TrainKeys), CliError> {
        let profile: Profile = parse(self.profile.as_deref().unwrap_or("desk"))?;
        let head_mode = match self.head.unwrap_or(HeadKind::Softclass) {
            HeadKind::Regression => HeadMode::Regression,
            HeadKind::Softclass => HeadMode::Softclass {
                bins: self.bins.unwrap_or(12),
            },
        };
        let mut cfg = TrainConfig::for_profile(profile, head_mode);
        cfg.seed = self.seed.or(seed_fallback).unwrap_or(0);
        if let Some(b) = &self.backbone {
            cfg.model.backbone = parse::<Backbone>(b)?;
        }
        if let Some(s) = self.input_size {
            cfg.model.input_width = s.width;
            cfg.model.input_height = s.height;
        }
        cfg.model.input_channels = self.input_channels.unwrap_or(cfg.model.input_channels);
        cfg.model.coord_channels = self.coord_channels.unwrap_or(cfg.model.coord_channels);
        if let Some(s) = &self.schedule {
            cfg.schedule = s.0.clone();
        }
        if let Some(e) = self.epochs {
            cfg = cfg.with_epochs(e);
        }
        cfg.batch_size = self.batch_size.unwrap_or(cfg.batch_size);
        cfg.momentum = self.momentum.unwrap_or(cfg.momentum);
        cfg.weight_decay = self.weight_decay.unwrap_or(cfg.weight_decay);
        let d = LossWeights::default();
        cfg.loss = LossWeights {
            lambda_ori: self.lambda_ori.unwrap_or(d.lambda_ori),
            epsilon_clamp: self.epsilon_clamp.unwrap_or(d.epsilon_clamp),
        };
        cfg.distance_weighted = self.distance_weighted.unwrap_or(false);
        cfg.delta = self.delta.unwrap_or(DEFAULT_DELTA);
        let a = &mut cfg.augment;
        a.enabled = self.augment.unwrap_or(a.enabled);
        a.roll_probability = self.roll_probability.unwrap_or(a.roll_probability);
        a.roll_max_deg = self.roll_max_deg.unwrap_or(a.roll_max_deg);
        let j = JitterParams::default();
        a.jitter = JitterParams {
            brightness: self.brightness.unwrap_or(j.brightness),
            contrast: self.contrast.unwrap_or(j.contrast),
            saturation: self.saturation.unwrap_or(j.saturation),
            hue: self.hue.unwrap_or(j.hue),
            blur_sigma_max: self.blur_sigma_max.unwrap_or(j.blur_sigma_max),
        };
        cfg.val_fraction = self.val_fraction.unwrap_or(cfg.val_fraction);
        cfg.max_train_images = self.max_train_images;
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok((cfg.clone(), TrainKeys::from_config(&cfg)))
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        let (head, bins) = match cfg.model.head_mode {
            HeadMode::Regression => (HeadKind::Regression, None),
            HeadMode::Softclass { bins } => (HeadKind::Softclass, Some(bins)),
        };
        let a = &cfg.augment;
        TrainKeys {
            profile: Some(
                match cfg.profile {
                    Profile::Desk => "desk",
                    Profile::Paper => "paper",
                }
                .into(),
            ),
            seed: Some(cfg.seed),
            backbone: Some(cfg.model.backbone.name().into()),
            head: Some(head),
            bins,
            input_size: Some(Size {
                width: cfg.model.input_width,
                height: cfg.model.input_height,
            }),
            input_channels: Some(cfg.model.input_channels),
            coord_channels: Some(cfg.model.coord_channels),
            schedule: Some(Schedule(cfg.schedule.clone())),
            epochs: Some(cfg.total_epochs()),
            batch_size: Some(cfg.batch_size),
            momentum: Some(cfg.momentum),
            weight_decay: Some(cfg.weight_decay),
            lambda_ori: Some(cfg.loss.lambda_ori),
            epsilon_clamp: Some(cfg.loss.epsilon_clamp),
            distance_weighted: Some(cfg.distance_weighted),
            delta: Some(cfg.delta),
            augment: Some(a.enabled),
            roll_probability: Some(a.roll_probability),
            roll_max_deg: Some(a.roll_max_deg),
            brightness: Some(a.jitter.brightness),
            contrast: Some(a.jitter.contrast),
            saturation: Some(a.jitter.saturation),
            hue: Some(a.jitter.hue),
            blur_sigma_max: Some(a.jitter.blur_sigma_max),
            val_fraction: Some(cfg.val_fraction),
            max_train_images: cfg.max_train_images,
        }
    }
}

/// Writes `keys` as TOML into `dir`.
pub fn write_resolved<T: Serialize>(dir: &Path, keys: &T) -> Result<(), CliError> {
    let text = toml::to_string(keys).map_err(|e| CliError::Runtime(e.to_string()))?;
    let path = dir.join(RESOLVED_CONFIG_FILE);
    std::fs::write(&path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}
