use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{gaussian_blur, Image};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose, Position3, UnitQuaternion};

/// Rolls the camera by `theta` about its optical axis.
///
/// The image is rotated about the principal point with bilinear
/// interpolation (zero fill); the label becomes
/// `(rot_z(theta) * q, rot_z(theta) * t)`.
pub fn augment_roll(
    image: &Image,
    pose: &Pose,
    theta: f64,
    intrinsics: &CameraIntrinsics,
) -> (Image, Pose) {
    (roll_image(image, theta, intrinsics), roll_pose(pose, theta))
}

pub fn roll_pose(pose: &Pose, theta: f64) -> Pose {
    let r = UnitQuaternion::rot_z(theta);
    Pose::new(
        r * pose.orientation,
        Position3::from_array(r.rotate_vector(pose.position.to_array())),
    )
}

/// Where a pixel at `(u, v)` lands after rolling the camera by `theta`.
pub fn roll_pixel(u: f64, v: f64, theta: f64, k: &CameraIntrinsics) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    let x = (u - k.cx) / k.fx;
    let y = (v - k.cy) / k.fy;
    (k.fx * (c * x - s * y) + k.cx, k.fy * (s * x + c * y) + k.cy)
}

pub fn roll_image(image: &Image, theta: f64, k: &CameraIntrinsics) -> Image {
    if theta == 0.0 {
        return image.clone();
    }
    let mut out = Image::new(image.width, image.height, image.channels);
    for y in 0..image.height {
        for x in 0..image.width {
            // inverse map: rotate the output pixel center by -theta
            let (u, v) = roll_pixel(x as f64 + 0.5, y as f64 + 0.5, -theta, k);
            for c in 0..image.channels {
                out.set(x, y, c, image.sample_bilinear(u - 0.5, v - 0.5, c));
            }
        }
    }
    out
}

/// Ranges of the photometric augmentation. Brightness and contrast factors
/// are drawn from `[1 - b, 1 + b]`; saturation and hue only affect
/// 3-channel images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Maximum hue shift as a fraction of the color wheel, at most 0.5.
    pub hue: f64,
    pub blur_sigma_max: f64,
}

impl Default for JitterParams {
    fn default() -> Self {
        Self {
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
            blur_sigma_max: 1.5,
        }
    }
}

impl JitterParams {
    pub fn none() -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            blur_sigma_max: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.brightness)
            && (0.0..1.0).contains(&self.contrast)
            && (0.0..1.0).contains(&self.saturation)
            && (0.0..=0.5).contains(&self.hue)
            && self.blur_sigma_max >= 0.0
            && self.blur_sigma_max.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid jitter parameters {self:?}")))
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> JitterFactors {
        let mut factor = |r: f64| if r > 0.0 { rng.random_range(1.0 - r..=1.0 + r) } else { 1.0 };
        let brightness = factor(self.brightness);
        let contrast = factor(self.contrast);
        let saturation = factor(self.saturation);
        let hue = if self.hue > 0.0 { rng.random_range(-self.hue..=self.hue) } else { 0.0 };
        let blur_sigma = if self.blur_sigma_max > 0.0 {
            rng.random_range(0.0..=self.blur_sigma_max)
        } else {
            0.0
        };
        JitterFactors {
            brightness,
            contrast,
            saturation,
            hue,
            blur_sigma,
        }
    }
}

/// Concrete draw of [`JitterParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub blur_sigma: f64,
}

impl JitterFactors {
    pub fn identity() -> Self {
        Self {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
            blur_sigma: 0.0,
        }
    }
}

pub fn photometric_jitter(image: &Image, seed: u64, params: &JitterParams) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply_jitter(image, &params.sample(&mut rng))
}

/// Applies brightness, contrast, saturation, hue, then blur, clipping to `[0, 1]`.
pub fn apply_jitter(image: &Image, f: &JitterFactors) -> Image {
    let mut img = image.clone();
    if f.brightness != 1.0 {
        let b = f.brightness as f32;
        img.data.iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0));
    }
    if f.contrast != 1.0 {
        let m = img.to_gray().mean() as f32;
        let c = f.contrast as f32;
        img.data
            .iter_mut()
            .for_each(|v| *v = ((*v - m) * c + m).clamp(0.0, 1.0));
    }
    if img.channels == 3 {
        if f.saturation != 1.0 {
            let s = f.saturation as f32;
            for px in img.data.chunks_exact_mut(3) {
                let g = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
                for v in px.iter_mut() {
                    *v = ((*v - g) * s + g).clamp(0.0, 1.0);
                }
            }
        }
        if f.hue != 0.0 {
            for px in img.data.chunks_exact_mut(3) {
                let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
                let h = (h + f.hue as f32).rem_euclid(1.0);
                let (r, g, b) = hsv_to_rgb(h, s, v);
                px.copy_from_slice(&[r, g, b]);
            }
        }
    }
    let mut img = gaussian_blur(&img, f.blur_sigma);
    img.clamp01();
    img
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}
