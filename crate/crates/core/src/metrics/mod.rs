//! Segmentation (IoU / precision family) and misclassification-detection measures.

mod report;
mod seg;
mod uq;

pub use report::{write_seg_csv, write_seg_table_csv, write_uq_csv, write_json};
pub use seg::{seg_confusion, seg_report, ConfusionCounts, SegMetricsReport};
pub use uq::{
    average_precision, msp_baseline, select_threshold, spec_sens_f1, threshold_grid, uq_mse,
    uq_report, Calibration, DetectionRates, MspBaseline, Positive, UqMetricsReport,
    THRESHOLD_COUNT,
};
