use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved (HWC) image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::shape(width * height * channels, data.len()));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| *v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Rounds to 8 bits and back, as after a save/load cycle.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = to_u8(*v) as f32 / 255.0;
        }
        out
    }

    /// Bilinear sample with zero outside the image; `(x, y)` in pixel-center coordinates.
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let px = |xi: i64, yi: i64| -> f32 {
            if xi < 0 || yi < 0 || xi >= self.width as i64 || yi >= self.height as i64 {
                0.0
            } else {
                self.get(xi as usize, yi as usize, c)
            }
        };
        let top = px(x0, y0) * (1.0 - fx) + px(x0 + 1, y0) * fx;
        let bot = px(x0, y0 + 1) * (1.0 - fx) + px(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Bilinear resize with align-corners off (half-pixel centers), edges clamped.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Self::new(width, height, self.channels);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            for x in 0..width {
                let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                for c in 0..self.channels {
                    out.set(x, y, c, self.sample_bilinear(src_x, src_y, c));
                }
            }
        }
        out
    }

    pub fn to_gray(&self) -> Self {
        if self.channels == 1 {
            return self.clone();
        }
        let mut out = Self::new(self.width, self.height, 1);
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            out.data[i] = if self.channels >= 3 {
                0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
            } else {
                px[0]
            };
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| to_u8(*v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            1 => image::GrayImage::from_raw(w, h, bytes).map(|i| i.save(path)),
            3 => image::RgbImage::from_raw(w, h, bytes).map(|i| i.save(path)),
            c => {
                return Err(Error::Image {
                    path: path.to_path_buf(),
                    msg: format!("cannot save {c}-channel image"),
                })
            }
        };
        match res {
            Some(Ok(())) => Ok(()),
            Some(Err(e)) => Err(Error::Image {
                path: path.to_path_buf(),
                msg: e.to_string(),
            }),
            None => Err(Error::Image {
                path: path.to_path_buf(),
                msg: "buffer size mismatch".into(),
            }),
        }
    }

    /// Loads an 8-bit image; grayscale stays single-channel, anything else becomes RGB.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingImage(path.to_path_buf()));
        }
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (channels, raw) = match img {
            image::DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
            other if other.color().channel_count() <= 2 => (1, other.to_luma8().into_raw()),
            other => (3, other.to_rgb8().into_raw()),
        };
        let data = raw.into_iter().map(|b| b as f32 / 255.0).collect();
        Self::from_vec(w, h, channels, data)
    }
}

#[inline]
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Separable Gaussian blur, kernel radius `ceil(3 sigma)`, clamp-to-edge.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if !(sigma > 1e-6) {
        return img.clone();
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let (w, h, ch) = (img.width as i64, img.height as i64, img.channels);
    let mut tmp = Image::new(img.width, img.height, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let xs = (x + j as i64 - r).clamp(0, w - 1);
                    acc += kv * img.get(xs as usize, y as usize, c);
                }
                tmp.set(x as usize, y as usize, c, acc);
            }
        }
    }
    let mut out = Image::new(img.width, img.height, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let ys = (y + j as i64 - r).clamp(0, h - 1);
                    acc += kv * tmp.get(x as usize, ys as usize, c);
                }
                out.set(x as usize, y as usize, c, acc);
            }
        }
    }
    out
}
