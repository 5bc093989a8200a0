//! Multi-channel image patches.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, RgbImage};

use crate::error::{Error, Result};

/// `channels × height × width` image with values in `[0, 1]`, stored
/// channel-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Patch {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "patch dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "patch {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("patch value {bad}")));
        }
        Ok(Patch {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Patch {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    /// Builds a patch from `f(channel, u, v)`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for c in 0..channels {
            for v in 0..height {
                for u in 0..width {
                    data.push(f(c, u, v));
                }
            }
        }
        Patch {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn get(&self, c: usize, u: usize, v: usize) -> f64 {
        self.data[(c * self.height + v) * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, c: usize, u: usize, v: usize, value: f64) {
        self.data[(c * self.height + v) * self.width + u] = value;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Per-pixel mean over channels.
    pub fn luminance(&self, u: usize, v: usize) -> f64 {
        (0..self.channels).map(|c| self.get(c, u, v)).sum::<f64>() / self.channels as f64
    }

    /// Rounds every value to the nearest multiple of 1/255 after clamping to
    /// `[0, 1]`, so the patch survives an 8-bit PNG round trip unchanged.
    pub fn quantized(&self) -> Patch {
        Patch {
            data: self
                .data
                .iter()
                .map(|x| (x.clamp(0.0, 1.0) * 255.0).round() / 255.0)
                .collect(),
            ..self.clone()
        }
    }

    /// Resamples through `f(u, v) -> (src_u, src_v)`, with bilinear lookup
    /// and edge replication.
    pub fn remap(&self, width: usize, height: usize, f: impl Fn(f64, f64) -> (f64, f64)) -> Patch {
        let mut out = Patch::zeros(width, height, self.channels);
        for v in 0..height {
            for u in 0..width {
                let (su, sv) = f(u as f64, v as f64);
                for c in 0..self.channels {
                    out.set(c, u, v, self.sample(c, su, sv));
                }
            }
        }
        out
    }

    fn sample(&self, c: usize, u: f64, v: f64) -> f64 {
        let u = u.clamp(0.0, (self.width - 1) as f64);
        let v = v.clamp(0.0, (self.height - 1) as f64);
        let u0 = (u.floor() as usize).min(self.width.saturating_sub(2));
        let v0 = (v.floor() as usize).min(self.height.saturating_sub(2));
        let u1 = (u0 + 1).min(self.width - 1);
        let v1 = (v0 + 1).min(self.height - 1);
        let (tu, tv) = (u - u0 as f64, v - v0 as f64);
        let top = (1.0 - tu) * self.get(c, u0, v0) + tu * self.get(c, u1, v0);
        let bottom = (1.0 - tu) * self.get(c, u0, v1) + tu * self.get(c, u1, v1);
        (1.0 - tv) * top + tv * bottom
    }

    pub fn to_image(&self) -> Result<DynamicImage> {
        let byte = |c: usize, u: usize, v: usize| (self.get(c, u, v).clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => Ok(DynamicImage::ImageLuma8(GrayImage::from_fn(w, h, |u, v| {
                image::Luma([byte(0, u as usize, v as usize)])
            }))),
            3 => Ok(DynamicImage::ImageRgb8(RgbImage::from_fn(w, h, |u, v| {
                let (u, v) = (u as usize, v as usize);
                image::Rgb([byte(0, u, v), byte(1, u, v), byte(2, u, v)])
            }))),
            d => Err(Error::Shape(format!("cannot encode a {d}-channel patch as PNG"))),
        }
    }

    pub fn from_image(img: &DynamicImage, channels: usize) -> Result<Patch> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data: Vec<f64> = match channels {
            1 => {
                let g = img.to_luma8();
                g.pixels().map(|p| p.0[0] as f64 / 255.0).collect()
            }
            3 => {
                let rgb: RgbImage = img.to_rgb8();
                let mut data = vec![0.0; w * h * 3];
                for (i, p) in rgb.pixels().enumerate() {
                    for c in 0..3 {
                        data[c * w * h + i] = p.0[c] as f64 / 255.0;
                    }
                }
                data
            }
            d => return Err(Error::Shape(format!("unsupported channel count {d}"))),
        };
        Patch::new(w, h, channels, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_image()?.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path, channels: usize) -> Result<Patch> {
        let img = image::open(path)?;
        Patch::from_image(&img, channels)
    }
}

/// Grey preview of one grid, min/max normalised; used for map dumps.
pub fn grid_to_image(values: &[f64], width: usize, height: usize) -> GrayImage {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    ImageBuffer::from_fn(width as u32, height as u32, |u, v| {
        let x = values[v as usize * width + u as usize];
        image::Luma([((x - lo) / span * 255.0).round() as u8])
    })
}
