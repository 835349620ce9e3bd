//! Evaluation metrics and beat decoding.

mod beat;
mod dbn;
mod key;
mod ranking;
mod report;

pub use beat::{beat_f_measure, BeatGrid, BEAT_TOLERANCE};
pub use dbn::{dbn_decode, DbnConfig};
pub use key::{refined_key_score, KeyLabel, Mode};
pub use ranking::{average_precision, average_precision_macro, roc_auc, roc_auc_macro, MacroScore};
pub use report::MetricReport;

use crate::error::{CoreError, Result};

/// Fraction of positions where `preds` equals `labels`.
pub fn accuracy<T: PartialEq>(preds: &[T], labels: &[T]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(CoreError::invalid(format!(
            "accuracy over {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r2(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(CoreError::invalid(format!(
            "r2 over {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;
    let ss_tot: f64 = labels.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot <= 0.0 {
        return Err(CoreError::invalid("r2 undefined: labels have zero variance"));
    }
    let ss_res: f64 = preds.iter().zip(labels).map(|(p, y)| (y - p) * (y - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}
