//! Class taxonomy and the per-pixel map types shared by every stage.
//!
//! Masks are stored index-encoded (`u8` per pixel). One-hot tensors are only
//! materialized where a loss needs them.

use ndarray::{Array2, Array3, ArrayView1, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of semantic classes in the standard taxonomy.
pub const NUM_CLASSES: usize = 6;

/// The six regions of a layered-particle cross section, in index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Class {
    Background = 0,
    Kernel = 1,
    Buffer = 2,
    Ipyc = 3,
    Sic = 4,
    Opyc = 5,
}

impl Class {
    pub const ALL: [Class; NUM_CLASSES] = [
        Class::Background,
        Class::Kernel,
        Class::Buffer,
        Class::Ipyc,
        Class::Sic,
        Class::Opyc,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Class> {
        Class::ALL.get(index).copied()
    }

    /// Column header used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Class::Background => "BG",
            Class::Kernel => "Kernel",
            Class::Buffer => "Buffer",
            Class::Ipyc => "IPyC",
            Class::Sic => "SiC",
            Class::Opyc => "OPyC",
        }
    }

    /// Display color for segmentation overlays.
    pub fn color(self) -> [u8; 3] {
        match self {
            Class::Background => [0, 0, 0],
            Class::Kernel => [255, 0, 0],
            Class::Buffer => [0, 255, 0],
            Class::Ipyc => [0, 0, 255],
            Class::Sic => [255, 255, 0],
            Class::Opyc => [255, 0, 255],
        }
    }
}

/// Ordered class list with fixed indices and display colors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTaxonomy {
    classes: Vec<Class>,
}

impl ClassTaxonomy {
    pub fn standard() -> Self {
        ClassTaxonomy {
            classes: Class::ALL.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[Class] {
        &self.classes
    }

    pub fn labels(&self) -> Vec<&'static str> {
        self.classes.iter().map(|c| c.label()).collect()
    }

    pub fn palette(&self) -> Vec<[u8; 3]> {
        self.classes.iter().map(|c| c.color()).collect()
    }
}

impl Default for ClassTaxonomy {
    fn default() -> Self {
        Self::standard()
    }
}

/// H×W index-encoded class map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask(Array2<u8>);

impl LabelMask {
    pub fn new(labels: Array2<u8>) -> Self {
        LabelMask(labels)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        LabelMask(Array2::zeros((height, width)))
    }

    pub fn height(&self) -> usize {
        self.0.nrows()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn as_array(&self) -> &Array2<u8> {
        &self.0
    }

    pub fn as_array_mut(&mut self) -> &mut Array2<u8> {
        &mut self.0
    }

    pub fn into_array(self) -> Array2<u8> {
        self.0
    }

    /// Checks every label is below `num_classes`, naming the first offender.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for ((row, col), &v) in self.0.indexed_iter() {
            if v as usize >= num_classes {
                return Err(Error::Validation(format!(
                    "label {v} at (row {row}, col {col}) is outside 0..{num_classes}"
                )));
            }
        }
        Ok(())
    }

    /// Sorted set of labels present in the mask.
    pub fn label_set(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in self.0.iter() {
            seen[v as usize] = true;
        }
        (0..=255u8).filter(|&v| seen[v as usize]).collect()
    }

    pub fn count(&self, label: u8) -> usize {
        self.0.iter().filter(|&&v| v == label).count()
    }
}

/// H×W×C per-pixel class distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap(Array3<f32>);

/// Tolerance on the per-pixel channel sum.
pub const PROBABILITY_SUM_TOLERANCE: f32 = 1e-5;

impl ProbabilityMap {
    pub fn new(probs: Array3<f32>) -> Result<Self> {
        if probs.dim().2 == 0 {
            return Err(Error::Validation("probability map has no channels".into()));
        }
        let (h, w, _) = probs.dim();
        for (row, col) in (0..h).flat_map(|r| (0..w).map(move |c| (r, c))) {
            let mut sum = 0.0f32;
            for &p in probs.slice(ndarray::s![row, col, ..]).iter() {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Validation(format!(
                        "probability {p} at (row {row}, col {col}) is outside [0, 1]"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
                return Err(Error::Validation(format!(
                    "probabilities at (row {row}, col {col}) sum to {sum}"
                )));
            }
        }
        Ok(ProbabilityMap(probs))
    }

    /// Builds a map from raw scores with a numerically stable softmax over the last axis.
    pub fn from_logits(logits: &Array3<f32>) -> Self {
        let mut out = logits.clone();
        for mut lane in out.lanes_mut(Axis(2)) {
            let max = lane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for v in lane.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            lane.mapv_inplace(|v| v / sum);
        }
        ProbabilityMap(out)
    }

    /// Wraps an array without validation. Callers guarantee the simplex invariant.
    pub fn new_unchecked(probs: Array3<f32>) -> Self {
        ProbabilityMap(probs)
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.0.dim().2
    }

    pub fn as_array(&self) -> &Array3<f32> {
        &self.0
    }

    pub fn into_array(self) -> Array3<f32> {
        self.0
    }

    pub fn pixel(&self, row: usize, col: usize) -> ArrayView1<'_, f32> {
        self.0.slice(ndarray::s![row, col, ..])
    }
}

/// H×W signed certainty map with values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelMap(Array2<f32>);

impl SoftLabelMap {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        for ((row, col), &v) in values.indexed_iter() {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!(
                    "soft label {v} at (row {row}, col {col}) is outside [-1, 1]"
                )));
            }
        }
        Ok(SoftLabelMap(values))
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn as_array(&self) -> &Array2<f32> {
        &self.0
    }

    pub fn into_array(self) -> Array2<f32> {
        self.0
    }
}

/// Provenance carried alongside a sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SampleMeta {
    pub profile: String,
    pub seed: u64,
    pub original_size: (usize, usize),
}

/// A preprocessed image (H×W×3 in [0, 1]) with its label mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    image: Array3<f32>,
    mask: LabelMask,
    pub meta: SampleMeta,
}

impl ImageSample {
    pub fn new(image: Array3<f32>, mask: LabelMask, meta: SampleMeta) -> Result<Self> {
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(Error::Shape(format!("image has {c} channels, expected 3")));
        }
        if (h, w) != mask.dim() {
            return Err(Error::Shape(format!(
                "image is {h}x{w} but mask is {}x{}",
                mask.height(),
                mask.width()
            )));
        }
        mask.validate(NUM_CLASSES)?;
        if let Some(v) = image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("image value {v} outside [0, 1]")));
        }
        Ok(ImageSample { image, mask, meta })
    }

    pub fn image(&self) -> &Array3<f32> {
        &self.image
    }

    pub fn mask(&self) -> &LabelMask {
        &self.mask
    }

    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    pub fn into_parts(self) -> (Array3<f32>, LabelMask, SampleMeta) {
        (self.image, self.mask, self.meta)
    }
}

/// Expands an index mask to an H×W×C binary array.
pub fn one_hot(mask: &LabelMask, num_classes: usize) -> Result<Array3<u8>> {
    mask.validate(num_classes)?;
    let (h, w) = mask.dim();
    let mut out = Array3::zeros((h, w, num_classes));
    for ((row, col), &v) in mask.as_array().indexed_iter() {
        out[[row, col, v as usize]] = 1;
    }
    Ok(out)
}

/// Per-pixel index of the largest probability; ties go to the lowest class index.
pub fn argmax_labels(probs: &ProbabilityMap) -> LabelMask {
    let (h, w, _) = probs.dim();
    let mut out = Array2::zeros((h, w));
    Zip::from(&mut out)
        .and(probs.as_array().lanes(Axis(2)))
        .for_each(|label, lane| *label = argmax_lowest(lane.iter().copied()) as u8);
    LabelMask(out)
}

pub(crate) fn argmax_lowest(values: impl Iterator<Item = f32>) -> usize {
    let mut best = 0;
    let mut best_value = f32::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}
