//! Data, geometry and evaluation for layered-particle segmentation.
//!
//! This crate holds everything that does not need a tensor backend:
//!
//! * [`types`]: class taxonomy and per-pixel map types,
//! * [`synthgen`]: synthetic layered-particle images with exact masks,
//! * [`dataio`]: preprocessing, augmentation and split loading,
//! * [`metrics`]: segmentation and misclassification-detection measures.

pub mod dataio;
pub mod error;
pub mod metrics;
pub mod synthgen;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    argmax_labels, one_hot, Class, ClassTaxonomy, ImageSample, LabelMask, ProbabilityMap,
    SampleMeta, SoftLabelMap, NUM_CLASSES,
};
