//! Pixel images in `[0, 1]` and conversions to and from network tensors.

use std::io::Cursor;
use std::path::Path;

use exemplar_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `height x width x channels` image stored row-major (HWC) with values
/// in `[0, 1]`. Channels are 1 (grayscale) or 3 (RGB).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Invalid("image must be nonempty".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Invalid(format!("unsupported channel count {channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, channels, pixels })
    }

    /// Builds an image, clamping every value into `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, channels: usize, mut pixels: Vec<f64>) -> Result<Self> {
        for v in &mut pixels {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, channels, pixels)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Root-mean-square pixel distance.
    pub fn rms_distance(&self, other: &Image) -> f64 {
        debug_assert_eq!(self.dims(), other.dims());
        let sq: f64 = self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a - b) * (a - b)).sum();
        (sq / self.pixels.len() as f64).sqrt()
    }

    /// Bilinear resize with half-pixel centers; an unchanged size is an exact copy.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let c = self.channels;
        let mut out = vec![0.0; height * width * c];
        for oy in 0..height {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for ox in 0..width {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                for ch in 0..c {
                    let top = self.get(y0, x0, ch) * (1.0 - tx) + self.get(y0, x1, ch) * tx;
                    let bottom = self.get(y1, x0, ch) * (1.0 - tx) + self.get(y1, x1, ch) * tx;
                    out[(oy * width + ox) * c + ch] = top * (1.0 - ty) + bottom * ty;
                }
            }
        }
        Image::from_clamped(height, width, c, out).expect("resize preserves validity")
    }

    /// Area-averaging downscale by an integer factor; other sizes fall back
    /// to bilinear.
    pub fn downscale(&self, height: usize, width: usize) -> Image {
        if height == 0 || width == 0 || !self.height.is_multiple_of(height) || !self.width.is_multiple_of(width) {
            return self.resize(height, width);
        }
        let (fy, fx) = (self.height / height, self.width / width);
        if fy == 1 && fx == 1 {
            return self.clone();
        }
        let c = self.channels;
        let norm = (fy * fx) as f64;
        let mut out = vec![0.0; height * width * c];
        for oy in 0..height {
            for ox in 0..width {
                for ch in 0..c {
                    let mut s = 0.0;
                    for dy in 0..fy {
                        for dx in 0..fx {
                            s += self.get(oy * fy + dy, ox * fx + dx, ch);
                        }
                    }
                    out[(oy * width + ox) * c + ch] = s / norm;
                }
            }
        }
        Image::from_clamped(height, width, c, out).expect("averaging preserves validity")
    }

    /// Crops a `height x width` window at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut out = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let start = (y * self.width + left) * c;
            out.extend_from_slice(&self.pixels[start..start + width * c]);
        }
        Image::new(height, width, c, out)
    }

    /// Channel-mean grayscale values, row-major.
    pub fn channel_mean(&self) -> Vec<f64> {
        self.pixels.chunks(self.channels).map(|px| px.iter().sum::<f64>() / self.channels as f64).collect()
    }

    /// CHW tensor of one image, without the batch axis.
    fn chw(&self) -> Vec<f64> {
        let (h, w, c) = self.dims();
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = self.pixels[(y * w + x) * c + ch];
                }
            }
        }
        out
    }

    /// Stacks images into an NCHW tensor. All images must share dimensions.
    pub fn batch_tensor(images: &[Image]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::Invalid("empty image batch".into()))?;
        let (h, w, c) = first.dims();
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if img.dims() != first.dims() {
                return Err(Error::Shape(format!("batch mixes {:?} and {:?}", first.dims(), img.dims())));
            }
            data.extend(img.chw());
        }
        Ok(Tensor::from_vec(&[images.len(), c, h, w], data)?)
    }

    /// Splits an NCHW tensor back into images, clamping into `[0, 1]`.
    pub fn from_batch_tensor(t: &Tensor) -> Result<Vec<Image>> {
        if t.shape().len() != 4 {
            return Err(Error::Shape(format!("expected NCHW tensor, got {:?}", t.shape())));
        }
        let (n, c, h, w) = (t.dim(0), t.dim(1), t.dim(2), t.dim(3));
        let plane = c * h * w;
        (0..n)
            .map(|i| {
                let src = &t.data()[i * plane..(i + 1) * plane];
                let mut px = vec![0.0; plane];
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            px[(y * w + x) * c + ch] = src[(ch * h + y) * w + x];
                        }
                    }
                }
                Image::from_clamped(h, w, c, px)
            })
            .collect()
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<u8> = self.pixels.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        let color = if self.channels == 3 { image::ExtendedColorType::Rgb8 } else { image::ExtendedColorType::L8 };
        let mut out = Vec::new();
        image::ImageEncoder::write_image(
            image::codecs::png::PngEncoder::new(&mut out),
            &bytes,
            self.width as u32,
            self.height as u32,
            color,
        )?;
        Ok(out)
    }

    /// Decodes PNG or JPEG bytes. Color images become RGB, grayscale stays
    /// single-channel; alpha is dropped.
    pub fn decode(bytes: &[u8]) -> Result<Image> {
        let dynamic = image::ImageReader::new(Cursor::new(bytes)).with_guessed_format()?.decode()?;
        Ok(Self::from_dynamic(&dynamic))
    }

    pub fn open(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes)
    }

    fn from_dynamic(img: &image::DynamicImage) -> Image {
        let (w, h) = (img.width() as usize, img.height() as usize);
        if img.color().has_color() {
            let rgb = img.to_rgb8();
            let px = rgb.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
            Image::new(h, w, 3, px).expect("decoded rgb is valid")
        } else {
            let luma = img.to_luma8();
            let px = luma.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
            Image::new(h, w, 1, px).expect("decoded luma is valid")
        }
    }

    /// Repeats a grayscale image into three channels; RGB is returned as is.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let px = self.pixels.iter().flat_map(|&v| [v, v, v]).collect();
        Image::new(self.height, self.width, 3, px).expect("expanding preserves validity")
    }
}
