use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::types::{ImageSample, LabelMask, SampleMeta};

/// Default model input side.
pub const DEFAULT_TARGET: usize = 512;

/// Grayscale intensities in [0, 1] (luma of color inputs).
pub fn to_gray(image: &DynamicImage) -> Array2<f32> {
    let luma = image.to_luma32f();
    let (w, h) = luma.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), luma.into_raw())
        .expect("buffer length matches dimensions")
        .mapv(|v| v.clamp(0.0, 1.0))
}

/// Bilinear resize of a grayscale field.
pub fn resize_gray(gray: &Array2<f32>, height: usize, width: usize) -> Array2<f32> {
    let (h, w) = gray.dim();
    if (h, w) == (height, width) {
        return gray.clone();
    }
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w as u32, h as u32, gray.iter().copied().collect())
            .expect("buffer length matches dimensions");
    let out = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
    Array2::from_shape_vec((height, width), out.into_raw())
        .expect("buffer length matches dimensions")
        .mapv(|v| v.clamp(0.0, 1.0))
}

/// Nearest-neighbor resize; never creates labels absent from the input.
pub fn resize_mask(mask: &LabelMask, height: usize, width: usize) -> LabelMask {
    let (h, w) = mask.dim();
    if (h, w) == (height, width) {
        return mask.clone();
    }
    let src = mask.as_array();
    LabelMask::new(Array2::from_shape_fn((height, width), |(row, col)| {
        let r = (((row as f64 + 0.5) * h as f64 / height as f64) as usize).min(h - 1);
        let c = (((col as f64 + 0.5) * w as f64 / width as f64) as usize).min(w - 1);
        src[[r, c]]
    }))
}

/// Replicates a grayscale field into three channels.
pub fn gray_to_rgb(gray: &Array2<f32>) -> Array3<f32> {
    let (h, w) = gray.dim();
    Array3::from_shape_fn((h, w, 3), |(row, col, _)| gray[[row, col]])
}

/// Converts to grayscale in [0, 1], replicates to 3 channels and resizes image
/// (bilinear) and mask (nearest) to `target`×`target`.
pub fn preprocess(
    image: &DynamicImage,
    mask: &LabelMask,
    target: usize,
    meta: SampleMeta,
) -> Result<ImageSample> {
    let gray = to_gray(image);
    preprocess_gray(&gray, mask, target, meta)
}

pub fn preprocess_gray(
    gray: &Array2<f32>,
    mask: &LabelMask,
    target: usize,
    mut meta: SampleMeta,
) -> Result<ImageSample> {
    if target == 0 {
        return Err(Error::Config("target size must be positive".into()));
    }
    if gray.dim() != mask.dim() {
        return Err(Error::Validation(format!(
            "image is {:?} but mask is {:?}",
            gray.dim(),
            mask.dim()
        )));
    }
    meta.original_size = gray.dim();
    let resized = resize_gray(gray, target, target);
    let mask = resize_mask(mask, target, target);
    ImageSample::new(gray_to_rgb(&resized), mask, meta)
}
