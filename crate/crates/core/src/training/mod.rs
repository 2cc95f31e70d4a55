//! Training loop, evaluation, checkpoints and submission files.

pub mod checkpoint;
pub mod submission;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use self::checkpoint::{sidecar_path, Checkpoint};
pub use self::submission::{
    format_sig9, parse_submission, score_submission, write_submission, GFactor, ScoreReport, SubmissionRow,
    SUBMISSION_HEADER,
};

use crate::codec::{decode, OrientationGrid, ProbabilityVector, DEFAULT_DELTA};
use crate::data::{apply_jitter, augment_roll, derive_seed, Image, JitterParams, SampleRecord};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose, Position3, UnitQuaternion};
use crate::losses::{combined_loss, LossWeights, OrientationLoss, QUAT_NORM_EPS};
use crate::metrics::{esa_score, MetricsReport, PoseEstimatePair};
use crate::model::{HeadMode, ModelConfig, Network};
use crate::nn::{Sgd, Slot, Tensor};

pub const TRAIN_LOG_COLUMNS: &str =
    "epoch,lr,train_loss,train_position,train_orientation,val_e_t,val_e_q,val_esa";
const EVAL_BATCH: usize = 64;
// stream tags mixed into the global seed
const SHUFFLE_STREAM: u64 = 0x5348_5546;
const AUGMENT_STREAM: u64 = 0x4155_474d;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrStage {
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::InvalidConfig(format!(
                "unknown profile {s:?}; valid profiles: desk, paper"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Fraction of samples rolled each epoch.
    pub roll_probability: f64,
    pub roll_max_deg: f64,
    pub jitter: JitterParams,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            roll_probability: 0.5,
            roll_max_deg: 25.0,
            jitter: JitterParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub profile: Profile,
    pub model: ModelConfig,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub schedule: Vec<LrStage>,
    pub loss: LossWeights,
    /// Divide the regression orientation loss by the target distance.
    pub distance_weighted: bool,
    pub delta: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub val_fraction: f64,
    pub max_train_images: Option<usize>,
}

fn stages(s: &[(usize, f64)]) -> Vec<LrStage> {
    s.iter().map(|&(epochs, lr)| LrStage { epochs, lr }).collect()
}

impl TrainConfig {
    /// Tiny backbone, 192x120 inputs, 27-epoch compressed schedule.
    pub fn desk(head_mode: HeadMode) -> Self {
        Self {
            profile: Profile::Desk,
            model: ModelConfig::desk(head_mode),
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 32,
            schedule: stages(&[(15, 0.01), (8, 0.001), (4, 0.0001)]),
            loss: LossWeights::default(),
            distance_weighted: false,
            delta: DEFAULT_DELTA,
            augment: AugmentConfig::default(),
            seed: 0,
            val_fraction: crate::data::DEFAULT_VAL_FRACTION,
            max_train_images: None,
        }
    }

    /// MobileNet-v2, 384x240 inputs, the full 50-epoch schedule.
    pub fn paper(head_mode: HeadMode) -> Self {
        Self {
            profile: Profile::Paper,
            model: ModelConfig::mobilenet(head_mode),
            schedule: stages(&[(30, 0.01), (15, 0.001), (5, 0.0001)]),
            ..Self::desk(head_mode)
        }
    }

    pub fn for_profile(profile: Profile, head_mode: HeadMode) -> Self {
        match profile {
            Profile::Desk => Self::desk(head_mode),
            Profile::Paper => Self::paper(head_mode),
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.schedule.iter().map(|s| s.epochs).sum()
    }

    /// Truncates the schedule to `epochs`, or extends its last stage.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        let mut left = epochs;
        let mut out = Vec::new();
        for s in &self.schedule {
            if left == 0 {
                break;
            }
            let n = s.epochs.min(left);
            out.push(LrStage { epochs: n, lr: s.lr });
            left -= n;
        }
        if left > 0 {
            if let Some(last) = out.last_mut() {
                last.epochs += left;
            }
        }
        self.schedule = out;
        self
    }

    /// Learning rate of a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> Option<f64> {
        let mut start = 0;
        for s in &self.schedule {
            if epoch < start + s.epochs {
                return Some(s.lr);
            }
            start += s.epochs;
        }
        None
    }

    pub fn orientation_loss(&self) -> OrientationLoss {
        match (self.model.head_mode, self.distance_weighted) {
            (HeadMode::Softclass { .. }, _) => OrientationLoss::SoftNll,
            (HeadMode::Regression, true) => OrientationLoss::RegressionDistanceWeighted,
            (HeadMode::Regression, false) => OrientationLoss::Regression,
        }
    }

    pub fn grid(&self) -> Result<Option<OrientationGrid>> {
        orientation_grid(&self.model, self.delta)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.augment.jitter.validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.schedule.is_empty() || self.total_epochs() == 0 {
            return bad("schedule must cover at least one epoch");
        }
        if self.schedule.iter().any(|s| !(s.lr > 0.0 && s.lr.is_finite())) {
            return bad("learning rates must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must be in [0, 1) and weight_decay >= 0");
        }
        if !(self.delta > 0.0) {
            return bad("delta must be > 0");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must be in (0, 1)");
        }
        let a = &self.augment;
        if !(0.0..=1.0).contains(&a.roll_probability) || !(0.0..=180.0).contains(&a.roll_max_deg) {
            return bad("roll probability must be in [0, 1] and roll_max_deg in [0, 180]");
        }
        Ok(())
    }
}

pub fn orientation_grid(model: &ModelConfig, delta: f64) -> Result<Option<OrientationGrid>> {
    match model.head_mode {
        HeadMode::Softclass { bins } => OrientationGrid::new(bins, delta).map(Some),
        HeadMode::Regression => Ok(None),
    }
}

/// An image already converted to the network's input size and channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_id: String,
    pub pose: Pose,
    pub image: Image,
}

pub fn prepare_image(img: &Image, model: &ModelConfig) -> Image {
    let img = if model.input_channels == 1 { img.to_gray() } else { img.clone() };
    let mut img = img.resize(model.input_width, model.input_height);
    if model.input_channels == 3 && img.channels == 1 {
        img = Image {
            width: img.width,
            height: img.height,
            channels: 3,
            data: img.data.iter().flat_map(|v| [*v; 3]).collect(),
        };
    }
    img
}

pub fn load_samples(records: &[SampleRecord], model: &ModelConfig) -> Result<Vec<Sample>> {
    records
        .par_iter()
        .map(|r| {
            Ok(Sample {
                image_id: r.image_id.clone(),
                pose: r.pose,
                image: prepare_image(&r.load_image()?, model),
            })
        })
        .collect()
}

/// Camera intrinsics after resizing images to the model input.
pub fn model_intrinsics(k: &CameraIntrinsics, model: &ModelConfig) -> CameraIntrinsics {
    let sx = model.input_width as f64 / k.width as f64;
    let sy = model.input_height as f64 / k.height as f64;
    CameraIntrinsics {
        fx: k.fx * sx,
        fy: k.fy * sy,
        cx: k.cx * sx,
        cy: k.cy * sy,
        width: model.input_width as u32,
        height: model.input_height as u32,
    }
}

/// Rejects datasets whose camera aspect ratio differs from the model input.
pub fn check_compatible(model: &ModelConfig, k: &CameraIntrinsics) -> Result<()> {
    let a = model.input_width as f64 / model.input_height as f64;
    let b = k.width as f64 / k.height as f64;
    if (a / b - 1.0).abs() > 0.01 {
        return Err(Error::ConfigMismatch(format!(
            "model input {}x{} does not match {}x{} images",
            model.input_width, model.input_height, k.width, k.height
        )));
    }
    Ok(())
}

/// Stacks HWC images into an NCHW tensor.
pub fn to_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::EmptyInput)?;
    let (w, h, c) = (first.width, first.height, first.channels);
    let hw = w * h;
    let mut data = vec![0.0f32; images.len() * c * hw];
    for (n, img) in images.iter().enumerate() {
        if (img.width, img.height, img.channels) != (w, h, c) {
            return Err(Error::shape(
                format!("{w}x{h}x{c}"),
                format!("{}x{}x{}", img.width, img.height, img.channels),
            ));
        }
        let dst = &mut data[n * c * hw..(n + 1) * c * hw];
        for (p, px) in img.data.chunks_exact(c).enumerate() {
            for (ch, v) in px.iter().enumerate() {
                dst[ch * hw + p] = *v;
            }
        }
    }
    Tensor::from_vec([images.len(), c, h, w], data)
}

/// Roll and photometric augmentation of one sample, fully determined by `seed`.
pub fn augment_sample(sample: &Sample, k: &CameraIntrinsics, aug: &AugmentConfig, seed: u64) -> (Image, Pose) {
    if !aug.enabled {
        return (sample.image.clone(), sample.pose);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut img, mut pose) = (None, sample.pose);
    if rng.random::<f64>() < aug.roll_probability {
        let max = aug.roll_max_deg.to_radians();
        let theta = if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 };
        let (i, p) = augment_roll(&sample.image, &sample.pose, theta, k);
        img = Some(i);
        pose = p;
    }
    let factors = aug.jitter.sample(&mut rng);
    let img = apply_jitter(img.as_ref().unwrap_or(&sample.image), &factors);
    (img, pose)
}

pub fn decode_orientation(row: &[f32], mode: HeadMode, grid: Option<&OrientationGrid>) -> Result<UnitQuaternion> {
    match mode {
        HeadMode::Regression => {
            let v: Vec<f64> = row.iter().map(|x| *x as f64).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < QUAT_NORM_EPS {
                return Ok(UnitQuaternion::identity());
            }
            Ok(UnitQuaternion::new(v[0], v[1], v[2], v[3]))
        }
        HeadMode::Softclass { .. } => {
            let grid = grid.ok_or_else(|| Error::InvalidConfig("soft-classification head needs a grid".into()))?;
            let logits: Vec<f64> = row.iter().map(|x| *x as f64).collect();
            let p = ProbabilityVector::from_logits(&logits)?;
            match decode(&p, grid) {
                Ok(q) => Ok(q),
                Err(Error::DegenerateDistribution(..)) => Ok(grid.bin_quats()[p.argmax()]),
                Err(e) => Err(e),
            }
        }
    }
}

/// Evaluation-mode predictions for a list of images.
pub fn predict_poses(net: &mut Network, images: &[&Image], grid: Option<&OrientationGrid>) -> Result<Vec<Pose>> {
    let mode = net.config().head_mode;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let o = net.forward(&to_tensor(chunk)?, false)?;
        for i in 0..o.batch {
            let q = decode_orientation(o.orientation_row(i), mode, grid)?;
            out.push(Pose::new(q, Position3::from_array(o.position(i))));
        }
    }
    Ok(out)
}

pub fn report_metadata(report: MetricsReport, net: &Network) -> MetricsReport {
    let cfg = net.config();
    report
        .with_metadata("backbone", cfg.backbone.name())
        .with_metadata("head", cfg.head_mode)
        .with_metadata("parameters", net.count_parameters())
        .with_metadata("orientation_head_parameters", net.orientation_head_param_count())
}

pub fn evaluate(net: &mut Network, samples: &[Sample], grid: Option<&OrientationGrid>) -> Result<MetricsReport> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let preds = predict_poses(net, &images, grid)?;
    let pairs: Vec<PoseEstimatePair> = samples
        .iter()
        .zip(preds)
        .map(|(s, p)| PoseEstimatePair::new(s.image_id.clone(), p, s.pose))
        .collect();
    Ok(report_metadata(esa_score(&pairs)?, net))
}

/// Loads a checkpoint's network and evaluates it on `records`.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    records: &[SampleRecord],
    intrinsics: Option<&CameraIntrinsics>,
) -> Result<MetricsReport> {
    let model = &ckpt.config.model;
    if let Some(k) = intrinsics {
        check_compatible(model, k)?;
    }
    let mut net = ckpt.to_network()?;
    let grid = orientation_grid(model, ckpt.config.delta)?;
    let samples = load_samples(records, model)?;
    evaluate(&mut net, &samples, grid.as_ref())
}

/// One row per image file in `dir` (png, jpg, jpeg, bmp), sorted by name.
pub fn predict_dir(ckpt: &Checkpoint, dir: &Path) -> Result<Vec<SubmissionRow>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
        })
        .collect();
    files.sort();
    let model = &ckpt.config.model;
    let images = files
        .par_iter()
        .map(|p| Image::load(p).map(|i| prepare_image(&i, model)))
        .collect::<Result<Vec<_>>>()?;
    let mut net = ckpt.to_network()?;
    let grid = orientation_grid(model, ckpt.config.delta)?;
    let refs: Vec<&Image> = images.iter().collect();
    let poses = if refs.is_empty() { Vec::new() } else { predict_poses(&mut net, &refs, grid.as_ref())? };
    Ok(files
        .iter()
        .zip(poses)
        .map(|(f, pose)| SubmissionRow {
            image_id: f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            pose,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_position: f64,
    pub train_orientation: f64,
    pub val_e_t: f64,
    pub val_e_q: f64,
    pub val_esa: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{TRAIN_LOG_COLUMNS}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.epoch, r.lr, r.train_loss, r.train_position, r.train_orientation, r.val_e_t, r.val_e_q, r.val_esa
            );
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() || line == TRAIN_LOG_COLUMNS {
                continue;
            }
            let bad = |msg: String| Error::Malformed {
                what: "train log",
                line: i + 1,
                msg,
            };
            let c: Vec<&str> = line.split(',').collect();
            if c.len() != 8 {
                return Err(bad(format!("expected 8 columns, got {}", c.len())));
            }
            let f = |j: usize| c[j].parse::<f64>().map_err(|e| bad(format!("column {}: {e}", j + 1)));
            rows.push(EpochRow {
                epoch: c[0].parse().map_err(|e| bad(format!("epoch: {e}")))?,
                lr: f(1)?,
                train_loss: f(2)?,
                train_position: f(3)?,
                train_orientation: f(4)?,
                val_e_t: f(5)?,
                val_e_q: f(6)?,
                val_esa: f(7)?,
            });
        }
        Ok(Self { rows })
    }
}

pub struct TrainOutcome {
    pub network: Network,
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub best_report: MetricsReport,
    pub log: TrainLog,
}

/// Order in which samples are visited during `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed ^ SHUFFLE_STREAM, epoch as u64)));
    idx
}

fn augment_seed(seed: u64, epoch: usize, sample: usize) -> u64 {
    derive_seed(derive_seed(seed ^ AUGMENT_STREAM, epoch as u64), sample as u64)
}

/// One SGD step on a batch; returns the loss before the update.
pub fn train_step(
    net: &mut Network,
    images: &[&Image],
    poses: &[Pose],
    cfg: &TrainConfig,
    grid: Option<&OrientationGrid>,
    lr: f64,
) -> Result<crate::losses::BatchLoss> {
    let x = to_tensor(images)?;
    net.zero_grad();
    let out = net.forward(&x, true)?;
    let loss = combined_loss(&out, poses, grid, &cfg.loss, cfg.orientation_loss())?;
    if !loss.total.is_finite() {
        return Ok(loss);
    }
    net.backward(&loss.d_positions, &loss.d_orientation)?;
    let sgd = Sgd {
        momentum: cfg.momentum as f32,
        weight_decay: cfg.weight_decay as f32,
    };
    net.visit(&mut |_, slot| {
        if let Slot::Param(p) = slot {
            sgd.step(p, lr as f32);
        }
    });
    Ok(loss)
}

/// Runs the full schedule. `intrinsics` must describe the sample images
/// (after [`prepare_image`]); it defines the roll-augmentation center.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    intrinsics: &CameraIntrinsics,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyInput);
    }
    let train_set = match cfg.max_train_images {
        Some(n) => &train_set[..n.min(train_set.len())],
        None => train_set,
    };
    let grid = cfg.grid()?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.seed = cfg.seed;
    let mut net = Network::new(model_cfg)?;
    // start position regression at the mean training position
    let n = train_set.len() as f64;
    let mean: [f64; 3] = std::array::from_fn(|d| train_set.iter().map(|s| s.pose.position.to_array()[d]).sum::<f64>() / n);
    for (b, m) in net.position_head_mut().bias.value.iter_mut().zip(mean) {
        *b = m as f32;
    }

    let mut log = TrainLog::default();
    let mut best: Option<(f64, Checkpoint, MetricsReport)> = None;
    let batch = cfg.batch_size.min(train_set.len());
    for epoch in 0..cfg.total_epochs() {
        let lr = cfg.lr_at(epoch).expect("epoch within schedule");
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let (mut sum_total, mut sum_pos, mut sum_ori, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 && seen > 0 {
                break;
            }
            let augmented: Vec<(Image, Pose)> = chunk
                .par_iter()
                .map(|&i| augment_sample(&train_set[i], intrinsics, &cfg.augment, augment_seed(cfg.seed, epoch, i)))
                .collect();
            let images: Vec<&Image> = augmented.iter().map(|(i, _)| i).collect();
            let poses: Vec<Pose> = augmented.iter().map(|(_, p)| *p).collect();
            let loss = train_step(&mut net, &images, &poses, cfg, grid.as_ref(), lr)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    ids: chunk.iter().map(|&i| train_set[i].image_id.clone()).collect(),
                });
            }
            let k = chunk.len() as f64;
            sum_total += loss.total * k;
            sum_pos += loss.position * k;
            sum_ori += loss.orientation * k;
            seen += chunk.len();
        }
        let report = evaluate(&mut net, val_set, grid.as_ref())?;
        let row = EpochRow {
            epoch,
            lr,
            train_loss: sum_total / seen as f64,
            train_position: sum_pos / seen as f64,
            train_orientation: sum_ori / seen as f64,
            val_e_t: report.e_t_mean,
            val_e_q: report.e_q_mean,
            val_esa: report.esa_score,
        };
        on_epoch(&row);
        log.rows.push(row);
        if best.as_ref().is_none_or(|(s, _, _)| report.esa_score < *s) {
            let ck = Checkpoint::from_network(&mut net, cfg, epoch, *intrinsics);
            best = Some((report.esa_score, ck, report));
        }
    }
    let last = Checkpoint::from_network(&mut net, cfg, cfg.total_epochs() - 1, *intrinsics);
    let (_, best, best_report) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        network: net,
        last,
        best,
        best_report,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        let c = TrainConfig::paper(HeadMode::Regression);
        assert_eq!(c.total_epochs(), 50);
        assert_eq!(c.lr_at(0), Some(0.01));
        assert_eq!(c.lr_at(29), Some(0.01));
        assert_eq!(c.lr_at(30), Some(0.001));
        assert_eq!(c.lr_at(45), Some(0.0001));
        assert_eq!(c.lr_at(50), None);
        let d = TrainConfig::desk(HeadMode::Regression);
        assert_eq!(d.total_epochs(), 27);
        let short = d.clone().with_epochs(17);
        assert_eq!(short.schedule, stages(&[(15, 0.01), (2, 0.001)]));
        let long = d.with_epochs(30);
        assert_eq!(long.schedule, stages(&[(15, 0.01), (8, 0.001), (7, 0.0001)]));
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut c = TrainConfig::desk(HeadMode::Softclass { bins: 12 });
        c.validate().unwrap();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk(HeadMode::Regression);
        c.schedule[1].lr = 0.0;
        assert!(c.validate().is_err());
        let c = TrainConfig::desk(HeadMode::Regression).with_epochs(0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn tensor_layout_is_nchw() {
        let img = Image::from_vec(2, 1, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = to_tensor(&[&img]).unwrap();
        assert_eq!(t.shape, [1, 3, 1, 2]);
        assert_eq!(t.data, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn log_round_trip() {
        let log = TrainLog {
            rows: vec![EpochRow {
                epoch: 0,
                lr: 0.01,
                train_loss: 1.25,
                train_position: 0.5,
                train_orientation: 0.75,
                val_e_t: 1.0 / 3.0,
                val_e_q: 100.0,
                val_esa: 2.0,
            }],
        };
        assert_eq!(TrainLog::parse_csv(&log.to_csv()).unwrap(), log);
    }
}
