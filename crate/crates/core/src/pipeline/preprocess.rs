use std::io::Cursor;

use image::imageops::FilterType;
use image::{DynamicImage, ImageDecoder, ImageReader};

use super::{ModelProfile, PipelineError};

/// A decoded, resized and normalized image ready for a detector.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedImage {
    pub width: u32,
    pub height: u32,
    /// 1 for single-channel (e.g. thermal) sources, 3 otherwise.
    pub channels: u8,
    /// Row-major, channel-interleaved intensities in `[0, 1]`.
    pub pixels: Vec<f32>,
    /// Resized long side over original long side, at most 1.
    pub scale: f64,
    pub original_width: u32,
    pub original_height: u32,
    pub source_sha256: String,
}

/// Output size for an image whose long side is limited to `long_side`.
/// Never upscales. Returns `(width, height, scale)`.
pub fn resized_dims(width: u32, height: u32, long_side: u32) -> (u32, u32, f64) {
    let long = width.max(height);
    if long <= long_side {
        return (width, height, 1.0);
    }
    let short_scaled = |s: u32| -> u32 {
        (((s as u64) * (long_side as u64) + (long as u64) / 2) / long as u64).max(1) as u32
    };
    let (w, h) = if width >= height {
        (long_side, short_scaled(height))
    } else {
        (short_scaled(width), long_side)
    };
    (w, h, long_side as f64 / long as f64)
}

/// Decodes `bytes`, applies EXIF orientation, limits the long side to the
/// profile's input size and divides intensities by the bit-depth maximum.
pub fn preprocess(
    bytes: &[u8],
    source_sha256: &str,
    profile: &ModelProfile,
) -> Result<PreprocessedImage, PipelineError> {
    let decode_err = |e: image::ImageError| PipelineError::Decode(e.to_string());
    let reader = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| PipelineError::Decode(e.to_string()))?;
    let mut decoder = reader.into_decoder().map_err(decode_err)?;
    let orientation = decoder.orientation().map_err(decode_err)?;
    let mut img = DynamicImage::from_decoder(decoder).map_err(decode_err)?;
    img.apply_orientation(orientation);

    let (ow, oh) = (img.width(), img.height());
    let (w, h, scale) = resized_dims(ow, oh, profile.input_long_side);
    let resize = |i: DynamicImage| {
        if (w, h) == (ow, oh) {
            i
        } else {
            i.resize_exact(w, h, FilterType::Triangle)
        }
    };

    let gray = !img.color().has_color();
    let pixels: Vec<f32> = match img.color().bytes_per_pixel() / img.color().channel_count() {
        1 => {
            if gray {
                resize(DynamicImage::ImageLuma8(img.to_luma8()))
                    .to_luma8()
                    .into_raw()
                    .into_iter()
                    .map(|v| v as f32 / u8::MAX as f32)
                    .collect()
            } else {
                resize(DynamicImage::ImageRgb8(img.to_rgb8()))
                    .to_rgb8()
                    .into_raw()
                    .into_iter()
                    .map(|v| v as f32 / u8::MAX as f32)
                    .collect()
            }
        }
        2 => {
            if gray {
                resize(DynamicImage::ImageLuma16(img.to_luma16()))
                    .to_luma16()
                    .into_raw()
                    .into_iter()
                    .map(|v| v as f32 / u16::MAX as f32)
                    .collect()
            } else {
                resize(DynamicImage::ImageRgb16(img.to_rgb16()))
                    .to_rgb16()
                    .into_raw()
                    .into_iter()
                    .map(|v| v as f32 / u16::MAX as f32)
                    .collect()
            }
        }
        // 32-bit float sources are already normalized.
        _ => resize(DynamicImage::ImageRgb32F(img.to_rgb32f()))
            .to_rgb32f()
            .into_raw()
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect(),
    };
    let channels = (pixels.len() / (w as usize * h as usize)) as u8;
    Ok(PreprocessedImage {
        width: w,
        height: h,
        channels,
        pixels,
        scale,
        original_width: ow,
        original_height: oh,
        source_sha256: source_sha256.to_string(),
    })
}

impl PreprocessedImage {
    /// Re-encodes the resized image as 8-bit PNG (for the remote wire protocol).
    pub fn to_png(&self) -> Vec<u8> {
        let raw: Vec<u8> = self
            .pixels
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let img = if self.channels == 1 {
            DynamicImage::ImageLuma8(
                image::GrayImage::from_raw(self.width, self.height, raw).expect("buffer size"),
            )
        } else {
            DynamicImage::ImageRgb8(
                image::RgbImage::from_raw(self.width, self.height, raw).expect("buffer size"),
            )
        };
        let mut out = Vec::new();
        img.write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)
            .expect("png encoding to memory");
        out
    }
}
