//! PNG/JPEG reading and writing for images and masks.

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Annotation pixels at or above this 8-bit level count as exudate.
pub const MASK_LEVEL: u8 = 128;

pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "tif", "tiff", "bmp"];

pub fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    let wrap = |source| Error::Image { path: path.to_path_buf(), source };
    ImageReader::open(path)?.with_guessed_format()?.decode().map_err(wrap)
}

/// RGB image as `(1, 3, h, w)` in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut data = vec![0.0f32; 3 * h * w];
    for (p, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + p] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(Shape::new(1, 3, h, w), data).expect("finite pixels"))
}

/// Grayscale image as `(1, 1, h, w)` in `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Ok(Tensor::from_vec(Shape::new(1, 1, h, w), data).expect("finite pixels"))
}

/// Binary mask from an annotation image: 1 where gray `>= MASK_LEVEL`.
pub fn read_mask(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&v| if v >= MASK_LEVEL { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(Shape::new(1, 1, h, w), data).expect("finite pixels"))
}

fn to_u8<T: Scalar>(v: T) -> u8 {
    (v.to_f64_lossless().clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save(result: image::ImageResult<()>, path: &Path) -> Result<()> {
    result.map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Writes image `b` of an `(n, 3, h, w)` tensor as 8-bit RGB.
pub fn write_rgb<T: Scalar>(path: &Path, image: &Tensor<T>, b: usize) -> Result<()> {
    let s = image.shape();
    if s.c() != 3 {
        return Err(Error::InvalidArgument(format!("write_rgb needs 3 channels, got {s}")));
    }
    let plane = s.plane_len();
    let img = image.image(b);
    let mut raw = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        raw.extend((0..3).map(|c| to_u8(img[c * plane + p])));
    }
    ensure_parent(path)?;
    let out = RgbImage::from_raw(s.w() as u32, s.h() as u32, raw).expect("buffer size");
    save(out.save(path), path)
}

/// Writes mask `b` of an `(n, 1, h, w)` tensor as 8-bit gray: 0 or 255.
pub fn write_mask<T: Scalar>(path: &Path, mask: &Tensor<T>, b: usize) -> Result<()> {
    let s = mask.shape();
    if s.c() != 1 {
        return Err(Error::InvalidArgument(format!("write_mask needs 1 channel, got {s}")));
    }
    let raw = mask.image(b).iter().map(|&v| if v > T::zero() { 255 } else { 0 }).collect();
    ensure_parent(path)?;
    let out = GrayImage::from_raw(s.w() as u32, s.h() as u32, raw).expect("buffer size");
    save(out.save(path), path)
}

/// Writes a grayscale map in `[0, 1]` as 8-bit gray.
pub fn write_gray<T: Scalar>(path: &Path, map: &Tensor<T>, b: usize) -> Result<()> {
    let s = map.shape();
    let raw = map.image(b).iter().map(|&v| to_u8(v)).collect();
    ensure_parent(path)?;
    let out = GrayImage::from_raw(s.w() as u32, s.h() as u32, raw).expect("buffer size");
    save(out.save(path), path)
}

/// Tints masked pixels of `image` green at 50% opacity.
pub fn render_overlay<T: Scalar>(image: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    crate::tensor::ensure_same_shape("render_overlay", image.shape().with_channels(1), mask.shape())?;
    let s = image.shape();
    let plane = s.plane_len();
    let half = T::from_f64_lossy(0.5);
    let mut out = image.clone();
    for b in 0..s.n() {
        let m = mask.image(b).to_vec();
        let base = b * s.image_len();
        let data = out.data_mut();
        for (p, &v) in m.iter().enumerate() {
            if v > T::zero() {
                for c in 0..3 {
                    let target = if c == 1 { T::one() } else { T::zero() };
                    let px = &mut data[base + c * plane + p];
                    *px = half * *px + half * target;
                }
            }
        }
    }
    Ok(out)
}
