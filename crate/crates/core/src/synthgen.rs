//! Synthetic layered-particle micrographs with pixel-exact label masks.
//!
//! A particle is a set of concentric annuli (kernel, buffer, IPyC, SiC, OPyC). Defects
//! edit the geometry: a debonding gap between buffer and IPyC (optionally spanned by
//! bridges), radial cracks, kernel pullout and a removed OPyC layer. Every pixel's
//! label and rendered material come from the same geometric decision, so image and
//! mask always agree. Polishing noise is a surface artifact and leaves labels alone.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Class, ImageSample, LabelMask, SampleMeta};

pub const GENERATOR_VERSION: &str = "strataseg-synthgen/1";

/// Smallest accepted canvas side in pixels.
pub const MIN_CANVAS: usize = 64;

/// Default outer radii as fractions of the canvas half-width.
pub const DEFAULT_RADII: [f32; 5] = [0.42, 0.62, 0.72, 0.82, 0.92];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanvasSize {
    pub width: usize,
    pub height: usize,
}

impl CanvasSize {
    pub fn square(side: usize) -> Self {
        CanvasSize {
            width: side,
            height: side,
        }
    }

    pub fn half(&self) -> f32 {
        self.width.min(self.height) as f32 / 2.0
    }
}

/// Appearance and defect statistics of one imaging domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainProfile {
    pub name: String,
    pub p_missing_opyc: f64,
    /// Probability of a buffer–IPyC debonding gap.
    pub p_gap: f64,
    /// Probability that an existing gap is spanned by bridges.
    pub p_gap_bridge: f64,
    pub p_crack: f64,
    pub p_kernel_pullout: f64,
    pub p_polish_noise: f64,
    /// Range of the per-pixel Gaussian noise standard deviation.
    pub noise_amplitude: (f32, f32),
    /// Range of the relative brightness change across the particle.
    pub illumination: (f32, f32),
    /// Overlay a tiled brightness pattern (stitched montages).
    pub tiled_illumination: bool,
    /// Gray level and texture amplitude of the surrounding medium.
    pub background_gray: f32,
    pub background_texture: f32,
    /// Per-image gain and offset jitter.
    pub gain_jitter: f32,
    pub offset_jitter: f32,
}

impl DomainProfile {
    /// Loose particles in epoxy; the OPyC layer is usually removed.
    pub fn agr2like() -> Self {
        DomainProfile {
            name: "agr2like".into(),
            p_missing_opyc: 0.81,
            p_gap: 0.5,
            p_gap_bridge: 0.3,
            p_crack: 0.1,
            p_kernel_pullout: 0.05,
            p_polish_noise: 0.1,
            noise_amplitude: (0.01, 0.03),
            illumination: (0.0, 0.08),
            tiled_illumination: false,
            background_gray: 0.24,
            background_texture: 0.015,
            gain_jitter: 0.05,
            offset_jitter: 0.02,
        }
    }

    /// Particles in graphite matrix with all layers and heavier artifacts.
    pub fn agr567like() -> Self {
        DomainProfile {
            name: "agr567like".into(),
            p_missing_opyc: 0.0,
            p_gap: 0.5,
            p_gap_bridge: 0.4,
            p_crack: 0.2,
            p_kernel_pullout: 0.1,
            p_polish_noise: 0.4,
            noise_amplitude: (0.02, 0.05),
            illumination: (0.05, 0.2),
            tiled_illumination: true,
            background_gray: 0.42,
            background_texture: 0.05,
            gain_jitter: 0.12,
            offset_jitter: 0.05,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "agr2like" => Ok(Self::agr2like()),
            "agr567like" => Ok(Self::agr567like()),
            other => Err(Error::Config(format!(
                "unknown profile {other:?} (expected agr2like or agr567like)"
            ))),
        }
    }

    /// Same appearance with every defect rate (including missing OPyC) set to zero.
    pub fn without_defects(mut self) -> Self {
        self.p_missing_opyc = 0.0;
        self.p_gap_bridge = 0.0;
        self.p_crack = 0.0;
        self.p_kernel_pullout = 0.0;
        self.p_polish_noise = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_missing_opyc", self.p_missing_opyc),
            ("p_gap", self.p_gap),
            ("p_gap_bridge", self.p_gap_bridge),
            ("p_crack", self.p_crack),
            ("p_kernel_pullout", self.p_kernel_pullout),
            ("p_polish_noise", self.p_polish_noise),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        for (name, (lo, hi)) in [
            ("noise_amplitude", self.noise_amplitude),
            ("illumination", self.illumination),
        ] {
            if !(lo >= 0.0 && lo <= hi) {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) is invalid")));
            }
        }
        Ok(())
    }
}

/// A straight scratch across the polished surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scratch {
    pub from: (f32, f32),
    pub to: (f32, f32),
    pub width: f32,
    /// Signed brightness change inside the scratch.
    pub intensity: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Defect {
    /// Buffer material spanning the buffer–IPyC gap at `angle` (radians), `width` pixels wide.
    GapBridge { angle: f32, width: f32 },
    /// Radial void from `inner` to `outer` radius.
    Crack {
        angle: f32,
        inner: f32,
        outer: f32,
        width: f32,
    },
    /// Disc of missing kernel material, offset from the particle center.
    KernelPullout { offset: (f32, f32), radius: f32 },
    MissingOpyc,
    PolishNoise { scratches: Vec<Scratch> },
}

impl Defect {
    pub fn kind(&self) -> &'static str {
        match self {
            Defect::GapBridge { .. } => "gap-bridge",
            Defect::Crack { .. } => "crack",
            Defect::KernelPullout { .. } => "kernel-pullout",
            Defect::MissingOpyc => "missing-opyc",
            Defect::PolishNoise { .. } => "polish-noise",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Illumination {
    /// Direction of the brightness gradient (radians).
    pub angle: f32,
    /// Relative brightness change from center to canvas edge.
    pub strength: f32,
    /// Tile side in pixels and per-tile gain offsets (row-major), when tiled.
    pub tile: Option<(usize, Vec<f32>)>,
    pub gain: f32,
    pub offset: f32,
}

/// Parametric description of one synthetic particle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleSpec {
    pub center: (f32, f32),
    /// Outer radii of kernel, buffer, IPyC, SiC, OPyC (strictly increasing, pixels).
    pub radii: [f32; 5],
    pub gap_width: f32,
    pub defects: Vec<Defect>,
    /// Texture seeds: background, kernel, buffer, IPyC, SiC, OPyC, void.
    pub texture_seeds: [u64; 7],
    pub illumination: Illumination,
    pub noise_amplitude: f32,
    pub background_gray: f32,
    pub background_texture: f32,
}

impl ParticleSpec {
    pub fn has_defect(&self, kind: &str) -> bool {
        self.defects.iter().any(|d| d.kind() == kind)
    }

    pub fn opyc_missing(&self) -> bool {
        self.defects.iter().any(|d| matches!(d, Defect::MissingOpyc))
    }

    pub fn validate(&self, canvas: CanvasSize) -> Result<()> {
        if self.radii.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(Error::Validation("radii must be positive".into()));
        }
        if self.radii.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!(
                "radii {:?} are not strictly increasing",
                self.radii
            )));
        }
        let (cx, cy) = self.center;
        let r = self.radii[4];
        if cx - r < 0.0
            || cy - r < 0.0
            || cx + r > canvas.width as f32
            || cy + r > canvas.height as f32
        {
            return Err(Error::Validation(format!(
                "particle of radius {r} at ({cx}, {cy}) does not fit the canvas"
            )));
        }
        let buffer = self.radii[1] - self.radii[0];
        if self.gap_width < 0.0 || self.gap_width >= buffer {
            return Err(Error::Validation(format!(
                "gap width {} must be in [0, buffer thickness {buffer})",
                self.gap_width
            )));
        }
        Ok(())
    }
}

/// Draws a random particle for `profile`. All randomness comes from `rng`.
pub fn sample_particle_spec<R: Rng + ?Sized>(
    rng: &mut R,
    profile: &DomainProfile,
    canvas: CanvasSize,
) -> Result<ParticleSpec> {
    profile.validate()?;
    if canvas.width < MIN_CANVAS || canvas.height < MIN_CANVAS {
        return Err(Error::Config(format!(
            "canvas {}x{} is smaller than the {MIN_CANVAS}x{MIN_CANVAS} minimum",
            canvas.width, canvas.height
        )));
    }
    let half = canvas.half();

    // Jitter layer thicknesses so the ordering can never break.
    let mut radii = [0.0f32; 5];
    let mut prev = 0.0;
    let mut acc = 0.0;
    for (i, &frac) in DEFAULT_RADII.iter().enumerate() {
        acc += (frac - prev) * rng.random_range(0.9..1.1);
        prev = frac;
        radii[i] = acc * half;
    }
    let max_offset = 0.03 * half;
    let offset = (
        rng.random_range(-max_offset..=max_offset),
        rng.random_range(-max_offset..=max_offset),
    );
    let limit = 0.985 * half - offset.0.abs().max(offset.1.abs());
    if radii[4] > limit {
        let s = limit / radii[4];
        radii.iter_mut().for_each(|r| *r *= s);
    }
    let center = (
        canvas.width as f32 / 2.0 + offset.0,
        canvas.height as f32 / 2.0 + offset.1,
    );

    let outer = radii[4];
    let buffer_thickness = radii[1] - radii[0];
    let gap_width = if rng.random_bool(profile.p_gap) {
        (rng.random_range(0.01..=0.04) * outer).min(0.5 * buffer_thickness)
    } else {
        0.0
    };

    let mut defects = Vec::new();
    if gap_width > 0.0 && rng.random_bool(profile.p_gap_bridge) {
        for _ in 0..rng.random_range(1..=3) {
            defects.push(Defect::GapBridge {
                angle: rng.random_range(-PI..PI),
                width: (rng.random_range(0.03..0.06) * outer).max(1.5),
            });
        }
    }
    let missing_opyc = rng.random_bool(profile.p_missing_opyc);
    if rng.random_bool(profile.p_crack) {
        let outermost = if missing_opyc { radii[3] } else { radii[4] };
        defects.push(Defect::Crack {
            angle: rng.random_range(-PI..PI),
            inner: radii[1] + rng.random_range(0.0..0.5) * (radii[2] - radii[1]),
            outer: outermost,
            width: (rng.random_range(0.015..0.03) * half).max(0.75),
        });
    }
    if rng.random_bool(profile.p_kernel_pullout) {
        let r = rng.random_range(0.0..0.5) * radii[0];
        let a = rng.random_range(-PI..PI);
        defects.push(Defect::KernelPullout {
            offset: (r * a.cos(), r * a.sin()),
            radius: rng.random_range(0.25..0.5) * radii[0],
        });
    }
    if missing_opyc {
        defects.push(Defect::MissingOpyc);
    }
    if rng.random_bool(profile.p_polish_noise) {
        let n = rng.random_range(3..=8);
        let (w, h) = (canvas.width as f32, canvas.height as f32);
        let scratches = (0..n)
            .map(|_| Scratch {
                from: (rng.random_range(0.0..w), rng.random_range(0.0..h)),
                to: (rng.random_range(0.0..w), rng.random_range(0.0..h)),
                width: rng.random_range(0.5..1.5) * half / 32.0,
                intensity: rng.random_range(-0.15..0.15),
            })
            .collect();
        defects.push(Defect::PolishNoise { scratches });
    }

    let mut texture_seeds = [0u64; 7];
    texture_seeds.iter_mut().for_each(|s| *s = rng.random());
    let strength = rng.random_range(profile.illumination.0..=profile.illumination.1);
    let tile = profile.tiled_illumination.then(|| {
        let side = (canvas.width.max(canvas.height) / 4).max(1);
        let tiles_x = canvas.width.div_ceil(side);
        let tiles_y = canvas.height.div_ceil(side);
        let gains = (0..tiles_x * tiles_y)
            .map(|_| rng.random_range(-0.06..0.06))
            .collect();
        (side, gains)
    });
    let illumination = Illumination {
        angle: rng.random_range(-PI..PI),
        strength,
        tile,
        gain: 1.0 + rng.random_range(-1.0..=1.0) * profile.gain_jitter,
        offset: rng.random_range(-1.0..=1.0) * profile.offset_jitter,
    };
    let noise_amplitude = rng.random_range(profile.noise_amplitude.0..=profile.noise_amplitude.1);

    let spec = ParticleSpec {
        center,
        radii,
        gap_width,
        defects,
        texture_seeds,
        illumination,
        noise_amplitude,
        background_gray: profile.background_gray,
        background_texture: profile.background_texture,
    };
    spec.validate(canvas)?;
    Ok(spec)
}

/// Rendered material of a pixel. Voids are gaps, cracks and pullouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Material {
    Background,
    Layer(Class),
    Void,
}

impl Material {
    fn label(self) -> Class {
        match self {
            Material::Layer(c) => c,
            Material::Background | Material::Void => Class::Background,
        }
    }

    fn texture_index(self) -> usize {
        match self {
            Material::Background => 0,
            Material::Layer(c) => c.index(),
            Material::Void => 6,
        }
    }
}

/// Base gray level and texture amplitude per layer: kernel darkest, SiC brightest.
fn layer_appearance(class: Class) -> (f32, f32) {
    match class {
        Class::Background => (0.42, 0.05),
        Class::Kernel => (0.12, 0.03),
        Class::Buffer => (0.32, 0.04),
        Class::Ipyc => (0.55, 0.03),
        Class::Sic => (0.86, 0.02),
        Class::Opyc => (0.64, 0.03),
    }
}

const VOID_GRAY: f32 = 0.05;

fn angular_distance(a: f32, b: f32) -> f32 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

fn point_segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Material at pixel-center coordinates `(x, y)`.
fn material_at(spec: &ParticleSpec, x: f32, y: f32) -> Material {
    let (dx, dy) = (x - spec.center.0, y - spec.center.1);
    let r = (dx * dx + dy * dy).sqrt();
    let theta = dy.atan2(dx);
    let [rk, rb, ri, rs, ro] = spec.radii;

    let mut material = if r < rk {
        Material::Layer(Class::Kernel)
    } else if r < rb - spec.gap_width {
        Material::Layer(Class::Buffer)
    } else if r < rb {
        Material::Void
    } else if r < ri {
        Material::Layer(Class::Ipyc)
    } else if r < rs {
        Material::Layer(Class::Sic)
    } else if r < ro {
        Material::Layer(Class::Opyc)
    } else {
        Material::Background
    };

    for defect in &spec.defects {
        match *defect {
            Defect::GapBridge { angle, width } => {
                if material == Material::Void
                    && r >= rb - spec.gap_width
                    && angular_distance(theta, angle) * r <= width / 2.0
                {
                    material = Material::Layer(Class::Buffer);
                }
            }
            Defect::MissingOpyc => {
                if material == Material::Layer(Class::Opyc) {
                    material = Material::Background;
                }
            }
            _ => {}
        }
    }
    for defect in &spec.defects {
        match *defect {
            Defect::Crack {
                angle,
                inner,
                outer,
                width,
            } => {
                if r >= inner && r <= outer && material != Material::Background {
                    // Perpendicular distance to the crack ray.
                    let along = dx * angle.cos() + dy * angle.sin();
                    let across = (-dx * angle.sin() + dy * angle.cos()).abs();
                    if along > 0.0 && across <= width / 2.0 {
                        material = Material::Void;
                    }
                }
            }
            Defect::KernelPullout { offset, radius } => {
                if material == Material::Layer(Class::Kernel) {
                    let (px, py) = (dx - offset.0, dy - offset.1);
                    if (px * px + py * py).sqrt() < radius {
                        material = Material::Void;
                    }
                }
            }
            _ => {}
        }
    }
    material
}

/// Label mask of a particle, without rendering the image.
pub fn rasterize_mask(spec: &ParticleSpec, canvas: CanvasSize) -> LabelMask {
    let mask = Array2::from_shape_fn((canvas.height, canvas.width), |(row, col)| {
        material_at(spec, col as f32 + 0.5, row as f32 + 0.5).label() as u8
    });
    LabelMask::new(mask)
}

/// Smooth random field in roughly [-1, 1] from bilinear interpolation of a coarse grid.
fn value_noise(seed: u64, canvas: CanvasSize, cell: f32) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gw = (canvas.width as f32 / cell).ceil() as usize + 2;
    let gh = (canvas.height as f32 / cell).ceil() as usize + 2;
    let grid = Array2::from_shape_fn((gh, gw), |_| rng.random_range(-1.0f32..1.0));
    Array2::from_shape_fn((canvas.height, canvas.width), |(row, col)| {
        let gx = col as f32 / cell;
        let gy = row as f32 / cell;
        let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
        let (fx, fy) = (gx - x0 as f32, gy - y0 as f32);
        let top = grid[[y0, x0]] * (1.0 - fx) + grid[[y0, x0 + 1]] * fx;
        let bottom = grid[[y0 + 1, x0]] * (1.0 - fx) + grid[[y0 + 1, x0 + 1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Separable Gaussian blur with edge clamping.
pub(crate) fn gaussian_blur(img: &Array2<f32>, sigma: f32) -> Array2<f32> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = img.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let horiz: Array2<f32> = Array2::from_shape_fn((h, w), |(r, c)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wt)| wt * img[[r, clamp(c as isize + k as isize - radius, w)]])
            .sum()
    });
    Array2::from_shape_fn((h, w), |(r, c)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wt)| wt * horiz[[clamp(r as isize + k as isize - radius, h), c]])
            .sum()
    })
}

/// Renders the grayscale image (replicated to 3 channels) and the exact label mask.
pub fn render_particle<R: Rng + ?Sized>(
    spec: &ParticleSpec,
    canvas: CanvasSize,
    rng: &mut R,
) -> Result<ImageSample> {
    spec.validate(canvas)?;
    let (h, w) = (canvas.height, canvas.width);
    let half = canvas.half();
    let cell = (half / 6.0).max(2.0);

    let materials = Array2::from_shape_fn((h, w), |(row, col)| {
        material_at(spec, col as f32 + 0.5, row as f32 + 0.5)
    });
    let textures: Vec<Array2<f32>> = spec
        .texture_seeds
        .iter()
        .map(|&s| value_noise(s, canvas, cell))
        .collect();

    let mut gray = Array2::from_shape_fn((h, w), |(row, col)| {
        let m = materials[[row, col]];
        let (base, amp) = match m {
            Material::Background => (spec.background_gray, spec.background_texture),
            Material::Layer(c) => layer_appearance(c),
            Material::Void => (VOID_GRAY, 0.02),
        };
        base + amp * textures[m.texture_index()][[row, col]]
    });

    // Surface scratches change brightness only.
    for defect in &spec.defects {
        if let Defect::PolishNoise { scratches } = defect {
            for s in scratches {
                for ((row, col), v) in gray.indexed_iter_mut() {
                    let d = point_segment_distance(
                        (col as f32 + 0.5, row as f32 + 0.5),
                        s.from,
                        s.to,
                    );
                    if d <= s.width / 2.0 {
                        *v += s.intensity;
                    }
                }
            }
        }
    }

    // Optical blur softens layer boundaries.
    let mut gray = gaussian_blur(&gray, 0.6 * half / 32.0);

    let il = &spec.illumination;
    let (ca, sa) = (il.angle.cos(), il.angle.sin());
    let noise = Normal::new(0.0f32, spec.noise_amplitude.max(1e-6))
        .map_err(|e| Error::Config(e.to_string()))?;
    for ((row, col), v) in gray.indexed_iter_mut() {
        let (x, y) = (col as f32 + 0.5, row as f32 + 0.5);
        let proj = ((x - spec.center.0) * ca + (y - spec.center.1) * sa) / half;
        let mut gain = il.gain * (1.0 + il.strength * proj);
        if let Some((side, tiles)) = &il.tile {
            let tiles_x = w.div_ceil(*side);
            gain += tiles[(row / side) * tiles_x + col / side];
        }
        *v = *v * gain + il.offset + noise.sample(rng);
        *v = v.clamp(0.0, 1.0);
    }

    let mask = Array2::from_shape_fn((h, w), |(row, col)| materials[[row, col]].label() as u8);
    let mut image = Array3::zeros((h, w, 3));
    for ((row, col), &v) in gray.indexed_iter() {
        // Quantize as the PNG writer will, so in-memory and on-disk samples agree.
        let q = (v * 255.0).round() / 255.0;
        for ch in 0..3 {
            image[[row, col, ch]] = q;
        }
    }
    ImageSample::new(
        image,
        LabelMask::new(mask),
        SampleMeta {
            profile: String::new(),
            seed: 0,
            original_size: (h, w),
        },
    )
}

/// Derives an independent per-sample seed from the global seed and sample index.
pub fn sample_seed(global_seed: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(global_seed ^ splitmix(index))
}

/// Generates one sample from its seed alone.
pub fn generate_sample(profile: &DomainProfile, canvas: CanvasSize, seed: u64) -> Result<ImageSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = sample_particle_spec(&mut rng, profile, canvas)?;
    let sample = render_particle(&spec, canvas, &mut rng)?;
    let (image, mask, _) = sample.into_parts();
    ImageSample::new(
        image,
        mask,
        SampleMeta {
            profile: profile.name.clone(),
            seed,
            original_size: (canvas.height, canvas.width),
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Train/val/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let f = SplitFractions { train, val, test };
        f.validate()?;
        Ok(f)
    }

    /// 326/82/102 of 510.
    pub fn standard() -> Self {
        SplitFractions {
            train: 0.64,
            val: 0.16,
            test: 0.20,
        }
    }

    pub fn train_only() -> Self {
        SplitFractions {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {parts:?} must be in [0, 1] and sum to 1"
            )));
        }
        Ok(())
    }

    /// Rounded validation and test sizes; the remainder goes to training.
    pub fn sizes(&self, count: usize) -> (usize, usize, usize) {
        let val = ((self.val * count as f64).round() as usize).min(count);
        let test = ((self.test * count as f64).round() as usize).min(count - val);
        (count - val - test, val, test)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub seed: u64,
    pub profile: String,
    pub split: Split,
}

/// Index of a dataset on disk. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator_version: String,
    pub global_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canvas: Option<CanvasSize>,
    pub samples: Vec<ManifestEntry>,
    /// Directory the relative paths resolve against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.samples {
            for p in [&e.image, &e.mask] {
                if !seen.insert(p.clone()) {
                    return Err(Error::Validation(format!(
                        "manifest path {} is listed twice",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.samples.iter().filter(|e| e.split == split).collect()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.samples.iter().filter(|e| e.split == split).count()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

fn save_gray(path: &Path, data: &Array2<u8>) -> Result<()> {
    let (h, w) = data.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([data[[y as usize, x as usize]]]));
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Writes an image channel as 8-bit grayscale PNG.
pub fn save_image_png(path: &Path, image: &Array3<f32>) -> Result<()> {
    let gray = image
        .index_axis(ndarray::Axis(2), 0)
        .mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
    save_gray(path, &gray)
}

/// Writes raw label values as an 8-bit single-channel PNG.
pub fn save_mask_png(path: &Path, mask: &LabelMask) -> Result<()> {
    save_gray(path, mask.as_array())
}

/// Generates `count` samples under `out_dir` and writes `manifest.json`.
pub fn generate_dataset(
    profile: &DomainProfile,
    count: usize,
    fractions: SplitFractions,
    seed: u64,
    canvas: CanvasSize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    fractions.validate()?;
    profile.validate()?;
    let (n_train, n_val, _) = fractions.sizes(count);
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut samples = Vec::with_capacity(count);
    for index in 0..count {
        let s = sample_seed(seed, index as u64);
        let sample = generate_sample(profile, canvas, s)?;
        let image = PathBuf::from(format!("images/{index:06}.png"));
        let mask = PathBuf::from(format!("masks/{index:06}.png"));
        save_image_png(&out_dir.join(&image), sample.image())?;
        save_mask_png(&out_dir.join(&mask), sample.mask())?;
        let split = if index < n_train {
            Split::Train
        } else if index < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        samples.push(ManifestEntry {
            image,
            mask,
            seed: s,
            profile: profile.name.clone(),
            split,
        });
    }
    let manifest = DatasetManifest {
        generator_version: GENERATOR_VERSION.into(),
        global_seed: seed,
        canvas: Some(canvas),
        samples,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
