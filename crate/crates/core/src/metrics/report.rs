use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::seg::SegMetricsReport;
use super::uq::UqMetricsReport;
use crate::error::{Error, Result};

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// One row per class plus an `All` summary row.
pub fn write_seg_csv(path: &Path, report: &SegMetricsReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["class", "IoU", "Precision", "gt_pixels", "pred_pixels"])
        .map_err(|e| csv_err(path, e))?;
    for (k, name) in report.classes.iter().enumerate() {
        w.write_record([
            name.clone(),
            format!("{:.6}", report.iou[k]),
            format!("{:.6}", report.precision[k]),
            report.gt_pixels[k].to_string(),
            report.pred_pixels[k].to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.write_record([
        "All".to_string(),
        format!("{:.6}", report.miou),
        format!("{:.6}", report.mp),
        report.gt_pixels.iter().sum::<u64>().to_string(),
        report.pred_pixels.iter().sum::<u64>().to_string(),
    ])
    .map_err(|e| csv_err(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Classes as columns (`BG ... OPyC All`), one IoU and one Precision row per model.
pub fn write_seg_table_csv(path: &Path, rows: &[(String, &SegMetricsReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let Some((_, first)) = rows.first() else {
        return w.flush().map_err(|e| Error::io(path, e));
    };
    let mut header = vec!["metric".to_string(), "model".to_string()];
    header.extend(first.classes.iter().cloned());
    header.push("All".into());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (metric, pick) in [("IoU", 0usize), ("Precision", 1)] {
        for (model, r) in rows {
            let (values, mean) = if pick == 0 {
                (&r.iou, r.miou)
            } else {
                (&r.precision, r.mp)
            };
            let mut rec = vec![metric.to_string(), model.clone()];
            rec.extend(values.iter().map(|v| format!("{v:.6}")));
            rec.push(format!("{mean:.6}"));
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_uq_csv(path: &Path, report: &UqMetricsReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["AP", "AP-E", "MSE", "Spec", "Sens", "F1-SS", "tau"])
        .map_err(|e| csv_err(path, e))?;
    w.write_record(
        [
            report.ap,
            report.ap_e,
            report.mse,
            report.spec,
            report.sens,
            report.f1_ss,
            report.tau,
        ]
        .iter()
        .map(|v| format!("{v:.6}")),
    )
    .map_err(|e| csv_err(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}
