//! Dataset loading, preprocessing and training-time augmentation.

mod augment;
mod clahe;
mod loader;
mod preprocess;

pub use augment::{apply_plan, augment, plan_augment, AugmentPlan, AugmentPolicy};
pub use clahe::clahe;
pub use loader::{load_entry, load_mask, load_split, Batch, LoaderOptions, SplitLoader};
pub use preprocess::{
    gray_to_rgb, preprocess, preprocess_gray, resize_gray, resize_mask, to_gray, DEFAULT_TARGET,
};
