//! Server-side consumers of gathered codes: task classifiers, the raw-data
//! baseline, identity adversaries and the conditional-entropy metric.

mod adversary;
mod classifier;
mod entropy;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use adversary::{
    disentanglement_score, evaluate_features, evaluate_privacy, nearest_centroid_accuracy, per_class_split, view_features,
    Adversary, AdversaryConfig, Standardizer, DEFAULT_TEST_FRACTION,
};
pub use classifier::{
    argmax, gather_rows, latent_accuracy, latent_feature_len, latent_features, raw_accuracy, softmax_cross_entropy,
    store_features, train_classifier, train_latent_classifier, train_raw_baseline, Activation, Classifier,
    ClassifierConfig, LatentEncoding, LatentRecord, LatentStore,
};
pub use entropy::{
    mean_bits, probability_bits, report_from_logits, report_from_probabilities, surprisal_bits, uniform_report,
    AdversaryView, PrivacyReport, PROBABILITY_FLOOR,
};

use crate::error::Result;

/// Version of the metrics row layout below.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// One line of an accuracy/privacy table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub task: String,
    pub view: String,
    pub accuracy: f64,
    pub entropy_bits: Option<f64>,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "G")]
    pub g: usize,
    pub n_c: usize,
    pub seed: u64,
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    schema_version: u32,
    rows: &'a [MetricsRow],
}

pub fn write_metrics_json(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let body = serde_json::to_vec_pretty(&MetricsFile { schema_version: METRICS_SCHEMA_VERSION, rows })
        .map_err(|e| crate::Error::State(e.to_string()))?;
    std::fs::write(path, body)?;
    Ok(())
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_error(e: csv::Error) -> crate::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io.into(),
        other => crate::Error::State(format!("csv: {other:?}")),
    }
}

#[cfg(test)]
mod tests;
