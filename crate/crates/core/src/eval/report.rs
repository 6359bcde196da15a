//! Report serialization. JSON goes through `serde_json::Value`, whose maps
//! are ordered, so key order is canonical regardless of struct layout.

use serde::Serialize;

use super::ablation::EvalReport;
use super::bench::SynthReport;
use crate::error::{Result, VcrError};

/// Pretty JSON with sorted keys and a trailing newline.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let value = serde_json::to_value(value).map_err(|e| VcrError::invalid(format!("cannot serialize report: {e}")))?;
    let mut bytes =
        serde_json::to_vec_pretty(&value).map_err(|e| VcrError::invalid(format!("cannot serialize report: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

fn finish(writer: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    writer
        .into_inner()
        .map_err(|e| VcrError::invalid(format!("cannot write csv: {e}")))
}

fn csv_err(e: csv::Error) -> VcrError {
    VcrError::invalid(format!("cannot write csv: {e}"))
}

/// One row per report.
pub fn reports_csv(reports: &[EvalReport]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "mode",
        "dataset",
        "criterion",
        "weighting",
        "n",
        "m",
        "shots",
        "alpha",
        "beta",
        "seed",
        "repeats",
        "cache",
        "validation",
        "top1_accuracy",
        "correct",
        "total",
        "wall_time",
    ])
    .map_err(csv_err)?;
    for r in reports {
        w.write_record([
            r.mode.clone(),
            opt(&r.dataset),
            opt(&r.criterion.map(|c| c.name())),
            r.weighting.name().to_string(),
            r.n.to_string(),
            r.m.to_string(),
            r.shots.to_string(),
            r.alpha.to_string(),
            r.beta.to_string(),
            r.seed.to_string(),
            r.repeats.to_string(),
            r.cache.clone(),
            opt(&r.validation),
            r.results.top1_accuracy.to_string(),
            r.results.correct.to_string(),
            r.results.total.to_string(),
            opt(&r.wall_time),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

/// One row per mode of a benchmark aggregate.
pub fn synth_csv(report: &SynthReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["mode", "mean_top1", "std_top1", "seeds", "wall_time_per_image"])
        .map_err(csv_err)?;
    for m in &report.modes {
        w.write_record([
            m.mode.clone(),
            m.mean_top1.to_string(),
            m.std_top1.to_string(),
            m.per_seed_top1.len().to_string(),
            opt(&m.wall_time_per_image),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}
