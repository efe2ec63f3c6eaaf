//! 8-bit image files to and from tensors.

use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(open(path)?.to_rgb8())
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    Ok(open(path)?.to_luma8())
}

/// `(1, 3, h, w)` with values `v / 255`.
pub fn rgb_to_tensor<T: Real>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let inv = T::from_f64(255.0);
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| T::from_f64(raw[(y * w + x) * 3 + c] as f64) / inv)
}

/// `(1, 1, h, w)` with values `v / 255`.
pub fn gray_to_tensor<T: Real>(img: &GrayImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let inv = T::from_f64(255.0);
    Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| T::from_f64(raw[y * w + x] as f64) / inv)
}

/// Batch item `n` of a 3-channel tensor, clamped to `[0, 1]` and rounded.
pub fn tensor_to_rgb<T: Real>(t: &Tensor<T>, n: usize) -> Result<RgbImage> {
    let s = t.shape();
    if s.c != 3 || n >= s.n {
        return Err(Error::ShapeMismatch(format!("cannot encode item {n} of {s} as RGB")));
    }
    let mut buf = Vec::with_capacity(s.h * s.w * 3);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                let v = t.at(n, c, y, x).as_f64().clamp(0.0, 1.0);
                buf.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(RgbImage::from_raw(s.w as u32, s.h as u32, buf).expect("buffer sized to image"))
}

/// Writes atomically via a sibling temporary file.
pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let tmp = path.with_extension("png.tmp");
    img.save_with_format(&tmp, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(&tmp, io),
        other => Error::Decode {
            path: tmp.clone(),
            reason: other.to_string(),
        },
    })?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}
