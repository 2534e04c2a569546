//! Training-time augmentation.
//!
//! Order: flips, scaling, grid distortion, elastic (geometric, applied to image and
//! mask through one composed coordinate map), then brightness/contrast, shadow,
//! CLAHE and additive noise (image only).

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::clahe::clahe;
use super::preprocess::gray_to_rgb;
use crate::error::{Error, Result};
use crate::synthgen::gaussian_blur;
use crate::types::{ImageSample, LabelMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub p_hflip: f64,
    pub p_vflip: f64,
    pub p_scale: f64,
    pub scale_range: (f32, f32),
    pub p_grid_distortion: f64,
    pub grid_steps: usize,
    /// Maximum relative change of a grid cell's size.
    pub grid_limit: f32,
    pub p_elastic: f64,
    /// Peak displacement as a fraction of the image side.
    pub elastic_alpha: f32,
    /// Smoothing of the displacement field as a fraction of the image side.
    pub elastic_sigma: f32,
    pub p_brightness_contrast: f64,
    pub brightness_limit: f32,
    pub contrast_limit: f32,
    pub p_shadow: f64,
    /// Range of the multiplicative darkening inside a shadow.
    pub shadow_factor: (f32, f32),
    pub p_clahe: f64,
    pub clahe_clip: f32,
    pub clahe_tiles: (usize, usize),
    pub p_noise: f64,
    /// Range of the additive Gaussian noise standard deviation.
    pub noise_std: (f32, f32),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            p_hflip: 0.5,
            p_vflip: 0.5,
            p_scale: 0.5,
            scale_range: (0.8, 1.2),
            p_grid_distortion: 0.5,
            grid_steps: 5,
            grid_limit: 0.3,
            p_elastic: 0.5,
            elastic_alpha: 0.03,
            elastic_sigma: 0.08,
            p_brightness_contrast: 0.5,
            brightness_limit: 0.2,
            contrast_limit: 0.2,
            p_shadow: 0.5,
            shadow_factor: (0.5, 0.8),
            p_clahe: 0.5,
            clahe_clip: 4.0,
            clahe_tiles: (8, 8),
            p_noise: 0.5,
            noise_std: (0.01, 0.04),
        }
    }
}

impl AugmentPolicy {
    /// Every transform disabled.
    pub fn none() -> Self {
        AugmentPolicy {
            p_hflip: 0.0,
            p_vflip: 0.0,
            p_scale: 0.0,
            p_grid_distortion: 0.0,
            p_elastic: 0.0,
            p_brightness_contrast: 0.0,
            p_shadow: 0.0,
            p_clahe: 0.0,
            p_noise: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_hflip", self.p_hflip),
            ("p_vflip", self.p_vflip),
            ("p_scale", self.p_scale),
            ("p_grid_distortion", self.p_grid_distortion),
            ("p_elastic", self.p_elastic),
            ("p_brightness_contrast", self.p_brightness_contrast),
            ("p_shadow", self.p_shadow),
            ("p_clahe", self.p_clahe),
            ("p_noise", self.p_noise),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("scale range ({lo}, {hi}) is invalid")));
        }
        if self.grid_steps == 0 || !(0.0..1.0).contains(&self.grid_limit) {
            return Err(Error::Config("grid distortion needs steps > 0 and limit in [0, 1)".into()));
        }
        let (slo, shi) = self.shadow_factor;
        if !(0.0 <= slo && slo <= shi && shi <= 1.0) {
            return Err(Error::Config(format!("shadow factor ({slo}, {shi}) is invalid")));
        }
        let (nlo, nhi) = self.noise_std;
        if !(0.0 <= nlo && nlo <= nhi) {
            return Err(Error::Config(format!("noise range ({nlo}, {nhi}) is invalid")));
        }
        if self.clahe_tiles.0 == 0 || self.clahe_tiles.1 == 0 {
            return Err(Error::Config("CLAHE tile grid must be non-empty".into()));
        }
        Ok(())
    }
}

/// Random choices for one augmentation draw. Heavy random fields are stored as seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPlan {
    pub hflip: bool,
    pub vflip: bool,
    pub scale: Option<f32>,
    pub grid_distortion: Option<u64>,
    pub elastic: Option<u64>,
    /// (brightness shift, contrast change)
    pub brightness_contrast: Option<(f32, f32)>,
    pub shadow: Option<u64>,
    pub clahe: bool,
    /// (standard deviation, seed)
    pub noise: Option<(f32, u64)>,
}

impl AugmentPlan {
    pub fn identity() -> Self {
        AugmentPlan {
            hflip: false,
            vflip: false,
            scale: None,
            grid_distortion: None,
            elastic: None,
            brightness_contrast: None,
            shadow: None,
            clahe: false,
            noise: None,
        }
    }

    pub fn is_geometric(&self) -> bool {
        self.hflip || self.vflip || self.scale.is_some() || self.grid_distortion.is_some() || self.elastic.is_some()
    }
}

/// Draws every random decision in a fixed order.
pub fn plan_augment<R: Rng + ?Sized>(rng: &mut R, policy: &AugmentPolicy) -> AugmentPlan {
    let mut plan = AugmentPlan::identity();
    plan.hflip = rng.random_bool(policy.p_hflip);
    plan.vflip = rng.random_bool(policy.p_vflip);
    if rng.random_bool(policy.p_scale) {
        let (lo, hi) = policy.scale_range;
        plan.scale = Some(if lo == hi { lo } else { rng.random_range(lo..=hi) });
    }
    if rng.random_bool(policy.p_grid_distortion) {
        plan.grid_distortion = Some(rng.random());
    }
    if rng.random_bool(policy.p_elastic) {
        plan.elastic = Some(rng.random());
    }
    if rng.random_bool(policy.p_brightness_contrast) {
        let b = rng.random_range(-1.0f32..=1.0) * policy.brightness_limit;
        let c = rng.random_range(-1.0f32..=1.0) * policy.contrast_limit;
        plan.brightness_contrast = Some((b, c));
    }
    if rng.random_bool(policy.p_shadow) {
        plan.shadow = Some(rng.random());
    }
    plan.clahe = rng.random_bool(policy.p_clahe);
    if rng.random_bool(policy.p_noise) {
        let (lo, hi) = policy.noise_std;
        let std = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        plan.noise = Some((std, rng.random()));
    }
    plan
}

/// Output-to-source coordinate map in continuous pixel coordinates (centers at i + 0.5).
struct CoordMap {
    x: Array2<f32>,
    y: Array2<f32>,
}

impl CoordMap {
    fn identity(h: usize, w: usize) -> Self {
        CoordMap {
            x: Array2::from_shape_fn((h, w), |(_, c)| c as f32 + 0.5),
            y: Array2::from_shape_fn((h, w), |(r, _)| r as f32 + 0.5),
        }
    }

    /// Applies `f` to every source coordinate: the new source is `f(old)`.
    fn then(&mut self, f: impl Fn(f32, f32) -> (f32, f32)) {
        ndarray::Zip::from(&mut self.x).and(&mut self.y).for_each(|x, y| {
            let (nx, ny) = f(*x, *y);
            *x = nx;
            *y = ny;
        });
    }
}

/// Piecewise-linear monotone map of [0, n] onto itself with jittered cell sizes.
fn grid_axis<R: Rng>(rng: &mut R, n: f32, steps: usize, limit: f32) -> Vec<(f32, f32)> {
    let sizes: Vec<f32> = (0..steps)
        .map(|_| 1.0 + if limit > 0.0 { rng.random_range(-limit..limit) } else { 0.0 })
        .collect();
    let total: f32 = sizes.iter().sum();
    let mut nodes = vec![(0.0, 0.0)];
    let mut acc = 0.0;
    for (k, s) in sizes.iter().enumerate() {
        acc += s / total * n;
        nodes.push(((k + 1) as f32 / steps as f32 * n, acc));
    }
    nodes.last_mut().unwrap().1 = n;
    nodes
}

fn piecewise(nodes: &[(f32, f32)], v: f32) -> f32 {
    let k = nodes.partition_point(|&(o, _)| o <= v).clamp(1, nodes.len() - 1);
    let (o0, s0) = nodes[k - 1];
    let (o1, s1) = nodes[k];
    s0 + (v - o0) / (o1 - o0) * (s1 - s0)
}

fn build_coord_map(plan: &AugmentPlan, policy: &AugmentPolicy, h: usize, w: usize) -> CoordMap {
    let (hf, wf) = (h as f32, w as f32);
    let mut map = CoordMap::identity(h, w);
    // Transforms are applied in order flip, scale, grid, elastic; the output-to-source
    // map composes their inverses from the last transform back to the first.
    if let Some(seed) = plan.elastic {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = hf.max(wf);
        let mut field = || {
            let raw = Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0f32..1.0));
            let smooth = gaussian_blur(&raw, policy.elastic_sigma * side);
            let peak = smooth.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-12);
            smooth.mapv(|v| v / peak * policy.elastic_alpha * side)
        };
        let (dx, dy) = (field(), field());
        ndarray::Zip::indexed(&mut map.x)
            .and(&mut map.y)
            .for_each(|(r, c), x, y| {
                *x += dx[[r, c]];
                *y += dy[[r, c]];
            });
    }
    if let Some(seed) = plan.grid_distortion {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gx = grid_axis(&mut rng, wf, policy.grid_steps, policy.grid_limit);
        let gy = grid_axis(&mut rng, hf, policy.grid_steps, policy.grid_limit);
        map.then(|x, y| (piecewise(&gx, x), piecewise(&gy, y)));
    }
    if let Some(s) = plan.scale {
        let (cx, cy) = (wf / 2.0, hf / 2.0);
        map.then(|x, y| ((x - cx) / s + cx, (y - cy) / s + cy));
    }
    if plan.hflip {
        map.then(|x, y| (wf - x, y));
    }
    if plan.vflip {
        map.then(|x, y| (x, hf - y));
    }
    map
}

/// Bilinear sampling with edge replication.
fn sample_bilinear(img: &Array2<f32>, x: f32, y: f32) -> f32 {
    let (h, w) = img.dim();
    let fx = (x - 0.5).clamp(0.0, (w - 1) as f32);
    let fy = (y - 0.5).clamp(0.0, (h - 1) as f32);
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (ax, ay) = (fx - x0 as f32, fy - y0 as f32);
    let top = img[[y0, x0]] * (1.0 - ax) + img[[y0, x1]] * ax;
    let bottom = img[[y1, x0]] * (1.0 - ax) + img[[y1, x1]] * ax;
    top * (1.0 - ay) + bottom * ay
}

fn sample_nearest(mask: &Array2<u8>, x: f32, y: f32) -> u8 {
    let (h, w) = mask.dim();
    let c = (x.floor().max(0.0) as usize).min(w - 1);
    let r = (y.floor().max(0.0) as usize).min(h - 1);
    mask[[r, c]]
}

fn warp(gray: &Array2<f32>, mask: &LabelMask, map: &CoordMap) -> (Array2<f32>, LabelMask) {
    let img = Array2::from_shape_fn(gray.dim(), |(r, c)| sample_bilinear(gray, map.x[[r, c]], map.y[[r, c]]));
    let m = Array2::from_shape_fn(mask.dim(), |(r, c)| {
        sample_nearest(mask.as_array(), map.x[[r, c]], map.y[[r, c]])
    });
    (img, LabelMask::new(m))
}

fn point_in_triangle(p: (f32, f32), t: &[(f32, f32); 3]) -> bool {
    let sign = |a: (f32, f32), b: (f32, f32), c: (f32, f32)| (a.0 - c.0) * (b.1 - c.1) - (b.0 - c.0) * (a.1 - c.1);
    let d1 = sign(p, t[0], t[1]);
    let d2 = sign(p, t[1], t[2]);
    let d3 = sign(p, t[2], t[0]);
    let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(neg && pos)
}

/// Applies a previously drawn plan.
pub fn apply_plan(sample: &ImageSample, plan: &AugmentPlan, policy: &AugmentPolicy) -> Result<ImageSample> {
    let (h, w) = (sample.height(), sample.width());
    let mut gray = sample.image().index_axis(Axis(2), 0).to_owned();
    let mut mask = sample.mask().clone();

    if plan.is_geometric() && h > 0 && w > 0 {
        if plan.scale.is_none() && plan.grid_distortion.is_none() && plan.elastic.is_none() {
            // Exact index flips.
            if plan.hflip {
                gray.invert_axis(Axis(1));
                mask.as_array_mut().invert_axis(Axis(1));
            }
            if plan.vflip {
                gray.invert_axis(Axis(0));
                mask.as_array_mut().invert_axis(Axis(0));
            }
            gray = gray.as_standard_layout().to_owned();
            mask = LabelMask::new(mask.as_array().as_standard_layout().to_owned());
        } else {
            let map = build_coord_map(plan, policy, h, w);
            (gray, mask) = warp(&gray, &mask, &map);
        }
    }

    if let Some((b, c)) = plan.brightness_contrast {
        gray.mapv_inplace(|v| (v * (1.0 + c) + b).clamp(0.0, 1.0));
    }
    if let Some(seed) = plan.shadow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (wf, hf) = (w as f32, h as f32);
        let tri = [0; 3].map(|_| (rng.random_range(0.0..=wf), rng.random_range(0.0..=hf)));
        let (lo, hi) = policy.shadow_factor;
        let factor = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        for ((r, c), v) in gray.indexed_iter_mut() {
            if point_in_triangle((c as f32 + 0.5, r as f32 + 0.5), &tri) {
                *v *= factor;
            }
        }
    }
    if plan.clahe {
        gray = clahe(&gray, policy.clahe_clip, policy.clahe_tiles);
    }
    if let Some((std, seed)) = plan.noise {
        if std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0f32, std).map_err(|e| Error::Config(e.to_string()))?;
            gray.mapv_inplace(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0));
        }
    }
    gray.mapv_inplace(|v| v.clamp(0.0, 1.0));
    ImageSample::new(gray_to_rgb(&gray), mask, sample.meta.clone())
}

/// Draws a plan from `rng` and applies it.
pub fn augment<R: Rng + ?Sized>(sample: &ImageSample, rng: &mut R, policy: &AugmentPolicy) -> Result<ImageSample> {
    let plan = plan_augment(rng, policy);
    apply_plan(sample, &plan, policy)
}
