//! PNG renderings of predictions for human review.

use image::{Rgb, RgbImage};
use ndarray::Array2;
use strataseg_core::{Class, LabelMask, SoftLabelMap};

pub const OVERLAY_ALPHA: f32 = 0.5;
pub const CORRECT_COLOR: [u8; 3] = [68, 1, 84];
pub const INCORRECT_COLOR: [u8; 3] = [253, 231, 37];

const BLUE: [f32; 3] = [0.0, 0.0, 255.0];
const WHITE: [f32; 3] = [255.0, 255.0, 255.0];
const RED: [f32; 3] = [255.0, 0.0, 0.0];

fn lerp(a: [f32; 3], b: [f32; 3], t: f32) -> [u8; 3] {
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (a[c] + (b[c] - a[c]) * t).round() as u8;
    }
    out
}

/// Diverging colormap on a fixed [-1, 1] scale: -1 blue, 0 white, +1 red.
pub fn uncertainty_color(v: f32) -> [u8; 3] {
    let v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
    if v < 0.0 {
        lerp(WHITE, BLUE, -v)
    } else {
        lerp(WHITE, RED, v)
    }
}

/// Uncertainty heatmap: the negated soft label, so likely errors are red.
pub fn uncertainty_heatmap(soft: &SoftLabelMap) -> RgbImage {
    let a = soft.as_array();
    let (h, w) = a.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| Rgb(uncertainty_color(-a[[y as usize, x as usize]])))
}

/// Class colors blended over the grayscale image; background stays as is.
pub fn palette_overlay(gray: &Array2<f32>, mask: &LabelMask, alpha: f32) -> RgbImage {
    let labels = mask.as_array();
    let (h, w) = labels.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        let g = (gray[[r, c]].clamp(0.0, 1.0) * 255.0).round();
        let base = [g; 3];
        match Class::from_index(labels[[r, c]] as usize) {
            Some(Class::Background) | None => Rgb(base.map(|v| v as u8)),
            Some(class) => Rgb(lerp(base, class.color().map(f32::from), alpha)),
        }
    })
}

/// Correctly predicted pixels purple, misclassified ones yellow.
pub fn error_map(pred: &LabelMask, gt: &LabelMask) -> RgbImage {
    let (p, g) = (pred.as_array(), gt.as_array());
    let (h, w) = p.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let idx = [y as usize, x as usize];
        Rgb(if p[idx] == g[idx] { CORRECT_COLOR } else { INCORRECT_COLOR })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints_are_fixed() {
        assert_eq!(uncertainty_color(-1.0), [0, 0, 255]);
        assert_eq!(uncertainty_color(0.0), [255, 255, 255]);
        assert_eq!(uncertainty_color(1.0), [255, 0, 0]);
        assert_eq!(uncertainty_color(3.0), [255, 0, 0]);
    }

    #[test]
    fn confident_error_renders_near_red() {
        let soft = SoftLabelMap::new(Array2::from_elem((1, 2), -0.9)).unwrap();
        let img = uncertainty_heatmap(&soft);
        let Rgb([r, g, b]) = *img.get_pixel(0, 0);
        assert_eq!(r, 255);
        assert!(g < 40 && b < 40 && g == b);
    }

    #[test]
    fn overlay_keeps_background_and_tints_classes() {
        let gray = Array2::from_elem((1, 2), 0.5);
        let mask = LabelMask::new(Array2::from_shape_vec((1, 2), vec![0, 1]).unwrap());
        let img = palette_overlay(&gray, &mask, 0.5);
        assert_eq!(img.get_pixel(0, 0).0, [128, 128, 128]);
        assert_eq!(img.get_pixel(1, 0).0, [192, 64, 64]);
    }

    #[test]
    fn error_map_colors() {
        let p = LabelMask::new(Array2::from_shape_vec((1, 2), vec![1, 2]).unwrap());
        let g = LabelMask::new(Array2::from_shape_vec((1, 2), vec![1, 3]).unwrap());
        let img = error_map(&p, &g);
        assert_eq!(img.get_pixel(0, 0).0, CORRECT_COLOR);
        assert_eq!(img.get_pixel(1, 0).0, INCORRECT_COLOR);
    }
}
