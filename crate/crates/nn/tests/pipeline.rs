use std::fs;
use std::path::Path;

use serde_json::json;
use strataseg_nn::pipeline::{run_pipeline, PipelineConfig, PipelineOptions, LABEL_NO_STAGE2, LABEL_WITHOUT_FT, LABEL_WITH_FT};
use strataseg_nn::trainer::{LogLine, Stage, TrainLog};
use strataseg_nn::Error;

fn config(skip_stage2: bool) -> PipelineConfig {
    serde_json::from_value(json!({
        "seed": 11,
        "skip_stage2": skip_stage2,
        "stage2": {"data": {"synth": {"profile": "agr2like", "count": 8, "seed": 1}}, "epochs": 2},
        "stage3": {"data": {"synth": {"profile": "agr567like", "count": 14, "seed": 2}}, "epochs": 2},
        "meta": {"epochs": 2, "batch_size": 4}
    }))
    .unwrap()
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap()
}

#[test]
fn full_run_writes_artifacts_and_resumes_identically() {
    let cfg = config(false);
    let a = tempfile::tempdir().unwrap();
    let result = run_pipeline(&cfg, a.path(), &PipelineOptions::default()).unwrap();

    let labels: Vec<&str> = result.segmentation.iter().map(|(l, _)| l.as_str()).collect();
    assert_eq!(labels, vec![LABEL_WITHOUT_FT, LABEL_WITH_FT]);
    for f in [
        "checkpoints/stage1.safetensors",
        "checkpoints/stage2.safetensors",
        "checkpoints/stage3.safetensors",
        "checkpoints/meta.safetensors",
        "reports/seg_without_ft.json",
        "reports/seg_with_ft.csv",
        "reports/seg_table.csv",
        "reports/uq.json",
        "reports/uq.csv",
        "reports/calibration.json",
        "reports/summary.json",
        "state.json",
    ] {
        assert!(a.path().join(f).exists(), "missing {f}");
    }
    let table = read(&a.path().join("reports/seg_table.csv"));
    assert!(table.starts_with("metric,model,BG,Kernel,Buffer,IPyC,SiC,OPyC,All"));

    // Logs: a start line, contiguous epochs, an end line.
    for stage in ["stage2", "stage3", "meta"] {
        let lines = TrainLog::read(&a.path().join(format!("logs/{stage}.jsonl"))).unwrap();
        assert!(matches!(lines.first(), Some(LogLine::Start { .. })));
        assert!(matches!(lines.last(), Some(LogLine::End { .. })));
        let epochs: Vec<usize> = lines
            .iter()
            .filter_map(|l| match l {
                LogLine::Epoch(r) => Some(r.epoch),
                _ => None,
            })
            .collect();
        assert_eq!(epochs, vec![1, 2]);
    }

    // Interrupted after stage 3, then resumed: same reports as the uninterrupted run.
    let b = tempfile::tempdir().unwrap();
    let stop = PipelineOptions {
        stop_after: Some(Stage::Stage3),
        verbose: false,
    };
    match run_pipeline(&cfg, b.path(), &stop) {
        Err(Error::Interrupted(s)) => assert_eq!(s, "stage3"),
        other => panic!("expected an interruption, got {other:?}"),
    }
    assert!(!b.path().join("reports/uq.json").exists());
    run_pipeline(&cfg, b.path(), &PipelineOptions::default()).unwrap();
    for f in ["reports/seg_table.csv", "reports/uq.json", "reports/calibration.json", "reports/summary.json"] {
        let (x, y) = (read(&a.path().join(f)), read(&b.path().join(f)));
        let y = y.replace(&b.path().display().to_string(), &a.path().display().to_string());
        assert_eq!(x, y, "{f} differs after resume");
    }

    // A different config must not reuse the directory.
    let mut other = cfg.clone();
    other.seed += 1;
    assert!(run_pipeline(&other, a.path(), &PipelineOptions::default()).is_err());
}

#[test]
fn skipping_stage2_labels_the_report() {
    let cfg = config(true);
    let dir = tempfile::tempdir().unwrap();
    let result = run_pipeline(&cfg, dir.path(), &PipelineOptions::default()).unwrap();
    assert_eq!(result.segmentation.len(), 1);
    assert_eq!(result.segmentation[0].0, LABEL_NO_STAGE2);
    assert!(dir.path().join("reports/seg_without_ft_stage2.json").exists());
    assert!(!dir.path().join("checkpoints/stage2.safetensors").exists());
    assert!(read(&dir.path().join("reports/seg_table.csv")).contains(LABEL_NO_STAGE2));
}
