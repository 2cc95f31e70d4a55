use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::image::{gaussian_blur, Image};
use super::satellite::{Part, SatelliteModel3D};
use crate::error::{Error, Result};
use crate::geometry::{dot3, norm3, CameraIntrinsics, Pose, UnitQuaternion, Vec3};

/// Segments closer than this to the camera plane are clipped.
const NEAR_PLANE: f64 = 0.05;
/// Unit vector towards the light in camera coordinates, before jitter.
const LIGHT_DIR: Vec3 = [-0.267_261_241_912_424_4, -0.534_522_483_824_848_8, -0.801_783_725_737_273_2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    #[default]
    Synthetic,
    PseudoReal,
}

impl Domain {
    pub const NAMES: [&'static str; 2] = ["synthetic", "pseudo_real"];

    pub fn name(self) -> &'static str {
        match self {
            Domain::Synthetic => "synthetic",
            Domain::PseudoReal => "pseudo_real",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Domain::Synthetic),
            "pseudo_real" | "pseudo-real" => Ok(Domain::PseudoReal),
            _ => Err(Error::InvalidConfig(format!(
                "unknown domain {s:?}; valid domains: {}",
                Domain::NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Black,
    Gradient,
    /// Gradient plus soft bright blobs, a crude stand-in for Earth in view.
    Blobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainParams {
    pub domain: Domain,
    pub background: Background,
    pub noise_sigma: f64,
    /// Global edge gain, drawn uniformly per image.
    pub brightness_range: [f64; 2],
    pub blur_sigma_range: [f64; 2],
    /// Maximum tilt of the light direction, radians.
    pub light_jitter: f64,
    /// Line width in pixels.
    pub line_width: f64,
}

impl DomainParams {
    pub fn synthetic() -> Self {
        Self {
            domain: Domain::Synthetic,
            background: Background::Black,
            noise_sigma: 0.01,
            brightness_range: [0.8, 1.0],
            blur_sigma_range: [0.0, 0.4],
            light_jitter: 0.2,
            line_width: 1.5,
        }
    }

    pub fn pseudo_real() -> Self {
        Self {
            domain: Domain::PseudoReal,
            background: Background::Blobs,
            noise_sigma: 0.05,
            brightness_range: [0.45, 0.9],
            blur_sigma_range: [0.5, 1.5],
            light_jitter: 0.7,
            line_width: 1.5,
        }
    }

    pub fn for_domain(domain: Domain) -> Self {
        match domain {
            Domain::Synthetic => Self::synthetic(),
            Domain::PseudoReal => Self::pseudo_real(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range_ok = |r: [f64; 2]| r[0] >= 0.0 && r[0] <= r[1] && r[1].is_finite();
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("noise sigma must be >= 0".into()));
        }
        if !range_ok(self.brightness_range) || !range_ok(self.blur_sigma_range) {
            return Err(Error::InvalidConfig("ranges must satisfy 0 <= lo <= hi".into()));
        }
        if !(self.line_width > 0.0) || !(self.light_jitter >= 0.0) {
            return Err(Error::InvalidConfig("line width must be > 0 and light jitter >= 0".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn part_gain(p: Part) -> f64 {
    match p {
        Part::Body => 1.0,
        Part::Panel => 0.6,
        Part::Boom => 0.9,
    }
}

/// Brightness falloff with depth.
pub fn depth_attenuation(z: f64) -> f64 {
    (4.0 / z).clamp(0.25, 1.0)
}

fn jittered_light(rng: &mut ChaCha8Rng, max_tilt: f64) -> Vec3 {
    if max_tilt <= 0.0 {
        return LIGHT_DIR;
    }
    let axis: Vec3 = std::array::from_fn(|_| StandardNormal.sample(rng));
    let angle = rng.random_range(0.0..max_tilt);
    if norm3(axis) < 1e-12 {
        return LIGHT_DIR;
    }
    UnitQuaternion::from_axis_angle(axis, angle).rotate_vector(LIGHT_DIR)
}

fn background(img: &mut Image, kind: Background, rng: &mut ChaCha8Rng) {
    if kind == Background::Black {
        return;
    }
    let (w, h) = (img.width as f64, img.height as f64);
    let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let amp: f64 = rng.random_range(0.05..0.25);
    let (dx, dy) = (ang.cos(), ang.sin());
    let blobs: Vec<(f64, f64, f64, f64)> = if kind == Background::Blobs {
        (0..rng.random_range(2..6))
            .map(|_| {
                (
                    rng.random_range(-0.2..1.2) * w,
                    rng.random_range(-0.2..1.2) * h,
                    rng.random_range(0.08..0.4) * w,
                    rng.random_range(0.1..0.45),
                )
            })
            .collect()
    } else {
        Vec::new()
    };
    for y in 0..img.height {
        for x in 0..img.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = ((px / w - 0.5) * dx + (py / h - 0.5) * dy + 0.71) / 1.42;
            let mut v = amp * t;
            for &(bx, by, r, a) in &blobs {
                let d2 = (px - bx).powi(2) + (py - by).powi(2);
                v += a * (-d2 / (2.0 * r * r)).exp();
            }
            for c in 0..img.channels {
                img.set(x, y, c, v as f32);
            }
        }
    }
}

/// A projected, clipped edge with per-endpoint depth and brightness.
#[derive(Debug, Clone, Copy)]
struct ScreenSegment {
    a: (f64, f64),
    b: (f64, f64),
    inv_z: (f64, f64),
    gain: f64,
}

fn project_edges(
    model: &SatelliteModel3D,
    pose: &Pose,
    k: &CameraIntrinsics,
    light: Vec3,
    global_gain: f64,
) -> Vec<ScreenSegment> {
    let cam: Vec<Vec3> = model.vertices.iter().map(|v| pose.transform_point(*v)).collect();
    let mut out = Vec::with_capacity(model.edges.len());
    for (e, &(i, j)) in model.edges.iter().enumerate() {
        let (mut p, mut q) = (cam[i], cam[j]);
        if p[2] < NEAR_PLANE && q[2] < NEAR_PLANE {
            continue;
        }
        if p[2] < NEAR_PLANE || q[2] < NEAR_PLANE {
            let s = (NEAR_PLANE - p[2]) / (q[2] - p[2]);
            let c: Vec3 = std::array::from_fn(|d| p[d] + s * (q[d] - p[d]));
            if p[2] < NEAR_PLANE {
                p = c;
            } else {
                q = c;
            }
        }
        let shade = match model.normals[e] {
            Some(n) => {
                let nc = pose.orientation.rotate_vector(n);
                let l = dot3(nc, light);
                let l = if model.parts[e] == Part::Panel { l.abs() } else { l.max(0.0) };
                0.35 + 0.65 * l
            }
            None => 1.0,
        };
        let (Ok(a), Ok(b)) = (k.project(p), k.project(q)) else {
            continue;
        };
        out.push(ScreenSegment {
            a,
            b,
            inv_z: (1.0 / p[2], 1.0 / q[2]),
            gain: global_gain * shade * part_gain(model.parts[e]),
        });
    }
    out
}

fn rasterize(layer: &mut Image, seg: &ScreenSegment, width: f64) {
    let half = width / 2.0 + 0.5;
    let (ax, ay) = seg.a;
    let (bx, by) = seg.b;
    let x_lo = (ax.min(bx) - half - 1.0).floor().max(0.0);
    let x_hi = (ax.max(bx) + half + 1.0).ceil().min(layer.width as f64);
    let y_lo = (ay.min(by) - half - 1.0).floor().max(0.0);
    let y_hi = (ay.max(by) + half + 1.0).ceil().min(layer.height as f64);
    if x_lo >= x_hi || y_lo >= y_hi {
        return;
    }
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    for y in y_lo as usize..y_hi as usize {
        for x in x_lo as usize..x_hi as usize {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let s = if len2 > 0.0 {
                (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let d = ((px - ax - s * dx).powi(2) + (py - ay - s * dy).powi(2)).sqrt();
            let cov = (half - d).clamp(0.0, 1.0);
            if cov <= 0.0 {
                continue;
            }
            let inv_z = seg.inv_z.0 + s * (seg.inv_z.1 - seg.inv_z.0);
            let v = (cov * seg.gain * depth_attenuation(1.0 / inv_z)) as f32;
            if v > layer.get(x, y, 0) {
                layer.set(x, y, 0, v);
            }
        }
    }
}

/// Renders a grayscale wireframe view of `model` at `pose`.
pub fn render(
    model: &SatelliteModel3D,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    domain: &DomainParams,
    seed: u64,
) -> Result<Image> {
    if !(pose.position.z > 0.0) {
        return Err(Error::NonPositiveDepth(pose.position.z));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (intrinsics.width as usize, intrinsics.height as usize);
    let gain = uniform(&mut rng, domain.brightness_range);
    let blur = uniform(&mut rng, domain.blur_sigma_range);
    let light = jittered_light(&mut rng, domain.light_jitter);

    let mut img = Image::new(w, h, 1);
    background(&mut img, domain.background, &mut rng);
    let mut layer = Image::new(w, h, 1);
    for seg in project_edges(model, pose, intrinsics, light, gain) {
        rasterize(&mut layer, &seg, domain.line_width);
    }
    for (o, l) in img.data.iter_mut().zip(&layer.data) {
        *o += *l;
    }
    let mut img = gaussian_blur(&img, blur);
    if domain.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, domain.noise_sigma).expect("validated sigma");
        for v in &mut img.data {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    img.clamp01();
    Ok(img)
}

/// Pixel coordinates of every model vertex in front of the camera.
pub fn project_vertices(
    model: &SatelliteModel3D,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
) -> Vec<Option<(f64, f64)>> {
    model
        .vertices
        .iter()
        .map(|v| intrinsics.project(pose.transform_point(*v)).ok())
        .collect()
}
