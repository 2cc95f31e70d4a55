//! Procedural dataset generation, SPEED-style label IO and augmentation.

pub mod augment;
pub mod image;
pub mod render;
pub mod satellite;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use self::augment::{
    apply_jitter, augment_roll, photometric_jitter, roll_image, roll_pixel, roll_pose, JitterFactors,
    JitterParams,
};
pub use self::image::{gaussian_blur, Image};
pub use self::render::{project_vertices, render, Background, Domain, DomainParams};
pub use self::satellite::{Part, SatelliteModel3D};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose, Position3, UnitQuaternion};

pub const LABELS_FILE: &str = "labels.json";
pub const CAMERA_FILE: &str = "camera.json";
pub const DEFAULT_DISTANCE_RANGE: [f64; 2] = [3.0, 20.0];
pub const DEFAULT_VAL_FRACTION: f64 = 0.15;
pub const MAX_POSE_ATTEMPTS: usize = 1000;
/// Minimum distance of the projected target center from every border, as a
/// fraction of the image width.
pub const BORDER_MARGIN: f64 = 0.1;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of item `index` under a global seed, independent of generation order.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index)
}

pub fn uniform_quaternion(rng: &mut impl Rng) -> UnitQuaternion {
    loop {
        let v: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        if let Some(q) = UnitQuaternion::try_new(v[0], v[1], v[2], v[3]) {
            return q.canonical();
        }
    }
}

/// Random pose with uniform orientation, `|t|` uniform in `distance_range`
/// and the target center projecting inside the image margin.
pub fn sample_pose(seed: u64, distance_range: [f64; 2], k: &CameraIntrinsics) -> Result<Pose> {
    sample_pose_with(&mut ChaCha8Rng::seed_from_u64(seed), distance_range, k)
}

pub fn sample_pose_with(
    rng: &mut impl Rng,
    distance_range: [f64; 2],
    k: &CameraIntrinsics,
) -> Result<Pose> {
    let [d_min, d_max] = distance_range;
    if !(d_min > 0.0 && d_min < d_max && d_max.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "distance range must satisfy 0 < min < max, got {distance_range:?}"
        )));
    }
    let q = uniform_quaternion(rng);
    let d = rng.random_range(d_min..d_max);
    let (w, h) = (k.width as f64, k.height as f64);
    let margin = BORDER_MARGIN * w;
    for _ in 0..MAX_POSE_ATTEMPTS {
        let u = rng.random_range(0.0..w);
        let v = rng.random_range(0.0..h);
        if u < margin || u > w - margin || v < margin || v > h - margin {
            continue;
        }
        let ray = [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0];
        let n = (ray[0] * ray[0] + ray[1] * ray[1] + 1.0).sqrt();
        let t = Position3::new(d * ray[0] / n, d * ray[1] / n, d / n);
        return Ok(Pose::new(q, t));
    }
    Err(Error::FrustumSamplingExhausted(MAX_POSE_ATTEMPTS))
}

/// One entry of the labels manifest; field names follow SPEED.
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub filename: String,
    pub q_vbs2tango: [f64; 4],
    pub r_Vo2To_vbs_true: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<Domain>,
}

impl LabelEntry {
    pub fn from_pose(filename: impl Into<String>, pose: &Pose, domain: Option<Domain>) -> Self {
        Self {
            filename: filename.into(),
            q_vbs2tango: pose.orientation.to_array(),
            r_Vo2To_vbs_true: pose.position.to_array(),
            domain,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub image_id: String,
    pub pose: Pose,
    pub domain: Domain,
    pub path: PathBuf,
}

impl SampleRecord {
    pub fn load_image(&self) -> Result<Image> {
        Image::load(&self.path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub n_images: usize,
    pub seed: u64,
    pub domain: DomainParams,
    pub distance_range: [f64; 2],
    pub intrinsics: CameraIntrinsics,
}

impl GenerateConfig {
    pub fn new(n_images: usize, seed: u64, domain: Domain) -> Self {
        Self {
            n_images,
            seed,
            domain: DomainParams::for_domain(domain),
            distance_range: DEFAULT_DISTANCE_RANGE,
            intrinsics: CameraIntrinsics::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 {
            return Err(Error::InvalidConfig("n_images must be > 0".into()));
        }
        self.domain.validate()?;
        self.intrinsics.validate()?;
        let [a, b] = self.distance_range;
        if !(a > 0.0 && a < b && b.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "distance range must satisfy 0 < min < max, got {:?}",
                self.distance_range
            )));
        }
        Ok(())
    }
}

pub fn image_filename(index: usize) -> String {
    format!("img{index:06}.png")
}

/// Pose and image of item `index`, reproducible in isolation.
pub fn generate_sample(cfg: &GenerateConfig, model: &SatelliteModel3D, index: usize) -> Result<(LabelEntry, Image)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, index as u64));
    let pose = sample_pose_with(&mut rng, cfg.distance_range, &cfg.intrinsics)?;
    let img = render(model, &pose, &cfg.intrinsics, &cfg.domain, rng.next_u64())?;
    Ok((
        LabelEntry::from_pose(image_filename(index), &pose, Some(cfg.domain.domain)),
        img,
    ))
}

/// Renders `cfg.n_images` images into `out_dir` and writes the labels
/// manifest and a camera sidecar.
pub fn generate_dataset(cfg: &GenerateConfig, out_dir: &Path) -> Result<Vec<LabelEntry>> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let model = SatelliteModel3D::default();
    let labels = (0..cfg.n_images)
        .into_par_iter()
        .map(|i| {
            let (label, img) = generate_sample(cfg, &model, i)?;
            img.save_png(&out_dir.join(&label.filename))?;
            Ok(label)
        })
        .collect::<Result<Vec<_>>>()?;
    write_labels(&out_dir.join(LABELS_FILE), &labels)?;
    write_json(&out_dir.join(CAMERA_FILE), &cfg.intrinsics)?;
    Ok(labels)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn write_labels(path: &Path, labels: &[LabelEntry]) -> Result<()> {
    write_json(path, &labels)
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedManifest {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Validates a label quaternion: near-unit norms are renormalized, anything
/// further than 1e-3 from unit is rejected.
pub fn label_pose(entry: &LabelEntry) -> Result<Pose> {
    let [w, x, y, z] = entry.q_vbs2tango;
    let norm = (w * w + x * x + y * y + z * z).sqrt();
    if !((norm - 1.0).abs() < 1e-3) {
        return Err(Error::InvalidQuaternion {
            id: entry.filename.clone(),
            norm,
        });
    }
    let q = if norm == 1.0 {
        UnitQuaternion::from_array(entry.q_vbs2tango)
    } else {
        UnitQuaternion::new(w, x, y, z)
    };
    Ok(Pose::new(q, Position3::from_array(entry.r_Vo2To_vbs_true)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
    pub intrinsics: Option<CameraIntrinsics>,
}

/// Loads a dataset from a directory holding `labels.json`, or from a labels
/// file directly. Images are looked up next to the labels, then in `images/`.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (root, labels_path) = if path.is_dir() {
        (path.to_path_buf(), path.join(LABELS_FILE))
    } else {
        let parent = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (parent, path.to_path_buf())
    };
    if !labels_path.exists() {
        return Err(Error::MalformedManifest {
            path: labels_path,
            msg: "labels file not found".into(),
        });
    }
    let labels = read_labels(&labels_path)?;
    let mut records = Vec::with_capacity(labels.len());
    for entry in &labels {
        let pose = label_pose(entry)?;
        let direct = root.join(&entry.filename);
        let nested = root.join("images").join(&entry.filename);
        let path = if direct.exists() {
            direct
        } else if nested.exists() {
            nested
        } else {
            return Err(Error::MissingImage(direct));
        };
        records.push(SampleRecord {
            image_id: entry.filename.clone(),
            pose,
            domain: entry.domain.unwrap_or_default(),
            path,
        });
    }
    let cam_path = root.join(CAMERA_FILE);
    let intrinsics = if cam_path.exists() {
        let text = fs::read_to_string(&cam_path).map_err(|e| Error::io(&cam_path, e))?;
        let k: CameraIntrinsics = serde_json::from_str(&text).map_err(|e| Error::MalformedManifest {
            path: cam_path.clone(),
            msg: e.to_string(),
        })?;
        k.validate()?;
        Some(k)
    } else {
        None
    };
    Ok(Dataset {
        root,
        records,
        intrinsics,
    })
}

/// Deterministic shuffle-split; both halves keep their input order.
pub fn split_train_val<T: Clone>(records: &[T], val_fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    assert!(
        val_fraction > 0.0 && val_fraction < 1.0,
        "val_fraction must be in (0, 1)"
    );
    let n = records.len();
    let n_val = (n as f64 * val_fraction).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; n];
    for &i in &idx[..n_val] {
        is_val[i] = true;
    }
    let mut train = Vec::with_capacity(n - n_val);
    let mut val = Vec::with_capacity(n_val);
    for (r, v) in records.iter().zip(is_val) {
        if v {
            val.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ() {
        let s: std::collections::BTreeSet<u64> = (0..1000).map(|i| derive_seed(42, i)).collect();
        assert_eq!(s.len(), 1000);
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }

    #[test]
    fn sample_pose_contract() {
        let k = CameraIntrinsics::desk();
        let a = sample_pose(3, DEFAULT_DISTANCE_RANGE, &k).unwrap();
        assert_eq!(a, sample_pose(3, DEFAULT_DISTANCE_RANGE, &k).unwrap());
        for s in 0..200 {
            let p = sample_pose(s, DEFAULT_DISTANCE_RANGE, &k).unwrap();
            let d = p.position.norm();
            assert!((3.0..20.0).contains(&d));
            let (u, v) = k.project(p.position.to_array()).unwrap();
            let m = BORDER_MARGIN * 192.0 - 1e-9;
            assert!(u >= m && u <= 192.0 - m && v >= m && v <= 120.0 - m);
        }
        assert!(sample_pose(0, [5.0, 5.0], &k).is_err());
        let narrow = CameraIntrinsics::new(240.0, 240.0, 10.0, 2.0, 20, 4).unwrap();
        assert!(matches!(
            sample_pose(0, [3.0, 4.0], &narrow),
            Err(Error::FrustumSamplingExhausted(1000))
        ));
    }

    #[test]
    fn label_validation() {
        let e = |q: [f64; 4]| LabelEntry {
            filename: "a.png".into(),
            q_vbs2tango: q,
            r_Vo2To_vbs_true: [0.0, 0.0, 5.0],
            domain: None,
        };
        assert!(matches!(label_pose(&e([0.5, 0.0, 0.0, 0.0])), Err(Error::InvalidQuaternion { .. })));
        let p = label_pose(&e([1.0005, 0.0, 0.0, 0.0])).unwrap();
        assert!((p.orientation.norm() - 1.0).abs() < 1e-15);
        let json = r#"[{"filename":"img000001.jpg","q_vbs2tango":[0.1,0.2,0.3,0.927361849549570],"r_Vo2To_vbs_true":[0.1,-0.2,7.5]}]"#;
        let parsed: Vec<LabelEntry> = serde_json::from_str(json).unwrap();
        assert_eq!(parsed[0].domain, None);
        assert!(label_pose(&parsed[0]).is_ok());
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let items: Vec<usize> = (0..100).collect();
        let (tr, va) = split_train_val(&items, DEFAULT_VAL_FRACTION, 7);
        assert_eq!((tr.len(), va.len()), (85, 15));
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert_eq!(split_train_val(&items, 0.15, 7), (tr, va.clone()));
        assert_ne!(split_train_val(&items, 0.15, 8).1, va);
    }
}
