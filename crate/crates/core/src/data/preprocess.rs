use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of every model input.
pub const IMAGE_SIZE: usize = 84;

/// Per-channel normalisation `x = (v / 255 - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    /// Channel statistics of the large natural-image corpus the residual
    /// backbone was pretrained on.
    pub const IMAGENET: Normalization = Normalization { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] };

    /// Maps `[0, 255]` onto `[-1, 1]`; used with generated datasets.
    pub const SYNTHETIC: Normalization = Normalization { mean: [0.5, 0.5, 0.5], std: [0.5, 0.5, 0.5] };

    pub fn apply(&self, channel: usize, value: f64) -> f64 {
        (value / 255.0 - self.mean[channel]) / self.std[channel]
    }

    /// Inverse of [`Normalization::apply`], clamped to a displayable byte.
    pub fn to_byte(&self, channel: usize, x: f32) -> u8 {
        let v = (x as f64 * self.std[channel] + self.mean[channel]) * 255.0;
        v.round().clamp(0.0, 255.0) as u8
    }
}

/// Normalised `3 × 84 × 84` channel-major image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Vec<f32>,
}

impl ImageTensor {
    pub const LEN: usize = 3 * IMAGE_SIZE * IMAGE_SIZE;

    pub fn new(data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::LEN {
            return Err(Error::Shape(format!("image tensor needs {} values, got {}", Self::LEN, data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("image tensor holds non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        [3, IMAGE_SIZE, IMAGE_SIZE]
    }

    /// Little-endian f32 bytes in channel-major order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Bilinear resize with half-pixel centres and edge clamping, no antialiasing.
///
/// Output pixel `x` samples source coordinate `(x + 0.5) * in / out - 0.5`,
/// clamped to `[0, in - 1]`. Returns channel-major `f64` samples in `[0, 255]`.
pub fn resize_bilinear(img: &RgbImage, out_w: usize, out_h: usize) -> Vec<f64> {
    let (in_w, in_h) = (img.width() as usize, img.height() as usize);
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let xs = taps(out_w, in_w);
    let ys = taps(out_h, in_h);
    let raw = img.as_raw();
    let px = |x: usize, y: usize, c: usize| raw[(y * in_w + x) * 3 + c] as f64;
    let mut out = vec![0.0; 3 * out_w * out_h];
    for c in 0..3 {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = (1.0 - fx) * px(x0, y0, c) + fx * px(x1, y0, c);
                let bottom = (1.0 - fx) * px(x0, y1, c) + fx * px(x1, y1, c);
                out[(c * out_h + oy) * out_w + ox] = (1.0 - fy) * top + fy * bottom;
            }
        }
    }
    out
}

/// Resizes to 84×84 and normalises.
pub fn preprocess(raw: &image::DynamicImage, norm: &Normalization) -> ImageTensor {
    let rgb = raw.to_rgb8();
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let data = resize_bilinear(&rgb, IMAGE_SIZE, IMAGE_SIZE)
        .into_iter()
        .enumerate()
        .map(|(i, v)| norm.apply(i / plane, v) as f32)
        .collect();
    ImageTensor { data }
}

/// Decodes and preprocesses one file; errors carry the file name.
pub fn preprocess_file(path: &Path, norm: &Normalization) -> Result<ImageTensor> {
    let fail = |reason: String| Error::Image { path: path.to_path_buf(), reason };
    let img = image::ImageReader::open(path)
        .map_err(|e| fail(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| fail(e.to_string()))?
        .decode()
        .map_err(|e| fail(e.to_string()))?;
    Ok(preprocess(&img, norm))
}
