//! Contrast-limited adaptive histogram equalization on [0, 1] grayscale data.

use ndarray::Array2;

const BINS: usize = 256;

/// Per-tile lookup tables from clipped, redistributed histograms.
fn tile_lut(values: impl Iterator<Item = u8>, clip_limit: f32) -> [f32; BINS] {
    let mut hist = [0u32; BINS];
    let mut area = 0u32;
    for v in values {
        hist[v as usize] += 1;
        area += 1;
    }
    let mut lut = [0.0f32; BINS];
    if area == 0 {
        return lut;
    }
    if clip_limit > 0.0 {
        let limit = ((clip_limit * area as f32 / BINS as f32) as u32).max(1);
        let mut excess = 0u32;
        for h in hist.iter_mut() {
            if *h > limit {
                excess += *h - limit;
                *h = limit;
            }
        }
        let batch = excess / BINS as u32;
        let residual = (excess % BINS as u32) as usize;
        for h in hist.iter_mut() {
            *h += batch;
        }
        if residual > 0 {
            let step = (BINS / residual).max(1);
            for i in (0..BINS).step_by(step).take(residual) {
                hist[i] += 1;
            }
        }
    }
    let scale = (BINS - 1) as f32 / area as f32;
    let mut cdf = 0u32;
    for (b, h) in hist.iter().enumerate() {
        cdf += h;
        lut[b] = (cdf as f32 * scale).round().min(255.0);
    }
    lut
}

/// Equalizes `gray` over a `tiles.0`×`tiles.1` grid with bilinear blending between tiles.
pub fn clahe(gray: &Array2<f32>, clip_limit: f32, tiles: (usize, usize)) -> Array2<f32> {
    let (h, w) = gray.dim();
    let (ty, tx) = (tiles.0.clamp(1, h.max(1)), tiles.1.clamp(1, w.max(1)));
    if h == 0 || w == 0 {
        return gray.clone();
    }
    let q = gray.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
    let bounds = |i: usize, n: usize, t: usize| (i * n / t, (i + 1) * n / t);

    let mut luts = Vec::with_capacity(ty * tx);
    for i in 0..ty {
        let (r0, r1) = bounds(i, h, ty);
        for j in 0..tx {
            let (c0, c1) = bounds(j, w, tx);
            let vals = (r0..r1).flat_map(|r| (c0..c1).map(move |c| (r, c)));
            luts.push(tile_lut(vals.map(|(r, c)| q[[r, c]]), clip_limit));
        }
    }

    // Position of a pixel center relative to tile centers along one axis.
    let locate = |p: usize, n: usize, t: usize| -> (usize, usize, f32) {
        let size = n as f32 / t as f32;
        let f = (p as f32 + 0.5) / size - 0.5;
        if f <= 0.0 {
            (0, 0, 0.0)
        } else if f >= (t - 1) as f32 {
            (t - 1, t - 1, 0.0)
        } else {
            let i0 = f.floor() as usize;
            (i0, i0 + 1, f - i0 as f32)
        }
    };

    Array2::from_shape_fn((h, w), |(r, c)| {
        let (i0, i1, fy) = locate(r, h, ty);
        let (j0, j1, fx) = locate(c, w, tx);
        let b = q[[r, c]] as usize;
        let top = luts[i0 * tx + j0][b] * (1.0 - fx) + luts[i0 * tx + j1][b] * fx;
        let bottom = luts[i1 * tx + j0][b] * (1.0 - fx) + luts[i1 * tx + j1][b] * fx;
        ((top * (1.0 - fy) + bottom * fy) / 255.0).clamp(0.0, 1.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_stays_in_unit_range_and_preserves_order_within_a_tile() {
        let g = Array2::from_shape_fn((16, 16), |(r, c)| (r * 16 + c) as f32 / 255.0 * 0.3 + 0.2);
        let out = clahe(&g, 4.0, (1, 1));
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        let flat: Vec<f32> = out.iter().copied().collect();
        assert!(flat.windows(2).all(|w| w[0] <= w[1]));
        // Low-contrast input is stretched.
        let span = flat.last().unwrap() - flat[0];
        assert!(span > 0.5, "span {span}");
    }

    #[test]
    fn constant_image_stays_constant() {
        let g = Array2::from_elem((32, 32), 0.4f32);
        let out = clahe(&g, 2.0, (4, 4));
        let first = out[[0, 0]];
        assert!(out.iter().all(|&v| (v - first).abs() < 1e-6));
    }

    #[test]
    fn unclipped_single_tile_is_plain_equalization() {
        // Two equally populated levels map to the cumulative fractions 0.5 and 1.
        let g = Array2::from_shape_fn((4, 4), |(r, _)| if r < 2 { 0.1 } else { 0.9 });
        let out = clahe(&g, 0.0, (1, 1));
        assert!((out[[0, 0]] - 128.0 / 255.0).abs() < 1e-6);
        assert!((out[[3, 3]] - 1.0).abs() < 1e-6);
    }
}
